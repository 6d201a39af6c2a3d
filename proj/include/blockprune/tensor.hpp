#pragma once

// Dense row-major matrices, block masks and block-compressed-sparse-row (BSR)
// weights, plus the GEMM kernels that execute them.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace blockprune {

template <std::floating_point T>
class BasicMatrix {
  public:
	using value_type = T;

	BasicMatrix() = default;
	BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
	    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
	BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
	    : rows_(rows), cols_(cols), data_(std::move(data)) {
		require(data_.size() == rows_ * cols_,
		        "matrix data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) + "x" +
		            std::to_string(cols_));
	}

	static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
		const std::size_t r = rows.size();
		const std::size_t c = r ? rows.begin()->size() : 0;
		BasicMatrix m(r, c);
		std::size_t i = 0;
		for (const auto& row : rows) {
			require(row.size() == c, "ragged initializer for matrix");
			std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
			++i;
		}
		return m;
	}

	static BasicMatrix identity(std::size_t n) {
		BasicMatrix m(n, n);
		for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
		return m;
	}

	std::size_t rows() const noexcept { return rows_; }
	std::size_t cols() const noexcept { return cols_; }
	std::size_t size() const noexcept { return data_.size(); }
	bool empty() const noexcept { return data_.empty(); }

	T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
	T operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

	std::span<T> data() noexcept { return data_; }
	std::span<const T> data() const noexcept { return data_; }
	std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
	std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

	std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

	bool operator==(const BasicMatrix&) const = default;

  private:
	std::size_t rows_ = 0;
	std::size_t cols_ = 0;
	std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

template <std::floating_point U, std::floating_point T>
BasicMatrix<U> matrix_cast(const BasicMatrix<T>& m) {
	std::vector<U> out(m.data().begin(), m.data().end());
	return BasicMatrix<U>(m.rows(), m.cols(), std::move(out));
}

template <std::floating_point T>
bool all_finite(const BasicMatrix<T>& m) {
	return std::all_of(m.data().begin(), m.data().end(), [](T v) { return std::isfinite(v); });
}

struct BlockShape {
	std::size_t rows = 1;
	std::size_t cols = 1;

	bool operator==(const BlockShape&) const = default;
	std::size_t area() const noexcept { return rows * cols; }
	std::string str() const { return std::to_string(rows) + "x" + std::to_string(cols); }

	void validate() const { require(rows >= 1 && cols >= 1, "block shape must be at least 1x1, got " + str()); }

	bool divides(std::size_t r, std::size_t c) const noexcept {
		return rows >= 1 && cols >= 1 && r % rows == 0 && c % cols == 0;
	}
};

/// Parses "BRxBC" (e.g. "4x4").
inline BlockShape parse_block_shape(const std::string& s) {
	const auto x = s.find_first_of("xX");
	require(x != std::string::npos && x > 0 && x + 1 < s.size(), "block shape must look like BRxBC, got '" + s + "'");
	BlockShape b;
	try {
		b.rows = std::stoul(s.substr(0, x));
		b.cols = std::stoul(s.substr(x + 1));
	} catch (const std::exception&) {
		throw precondition_error("block shape must look like BRxBC, got '" + s + "'");
	}
	b.validate();
	return b;
}

template <std::floating_point T>
void check_divisible(const BasicMatrix<T>& m, BlockShape shape, const std::string& what = "matrix") {
	shape.validate();
	require(shape.divides(m.rows(), m.cols()),
	        what + " of shape " + m.shape_str() + " is not divisible by block shape " + shape.str());
}

/// Keep (1) / prune (0) decision per block, flat index = block_row * block_cols + block_col.
class BlockMask {
  public:
	BlockMask() = default;
	BlockMask(std::size_t block_rows, std::size_t block_cols, bool keep = true)
	    : block_rows_(block_rows), block_cols_(block_cols), bits_(block_rows * block_cols, keep ? 1 : 0) {}

	static BlockMask ones(std::size_t br, std::size_t bc) { return {br, bc, true}; }
	static BlockMask zeros(std::size_t br, std::size_t bc) { return {br, bc, false}; }
	static BlockMask from_bits(std::size_t br, std::size_t bc, std::vector<std::uint8_t> bits) {
		require(bits.size() == br * bc, "mask bit count does not match block grid");
		BlockMask m(br, bc);
		for (auto& b : bits) b = b ? 1 : 0;
		m.bits_ = std::move(bits);
		return m;
	}

	std::size_t block_rows() const noexcept { return block_rows_; }
	std::size_t block_cols() const noexcept { return block_cols_; }
	std::size_t num_blocks() const noexcept { return bits_.size(); }

	bool kept(std::size_t flat) const noexcept { return bits_[flat] != 0; }
	bool kept(std::size_t br, std::size_t bc) const noexcept { return bits_[br * block_cols_ + bc] != 0; }
	void set(std::size_t flat, bool keep) noexcept { bits_[flat] = keep ? 1 : 0; }
	std::span<const std::uint8_t> bits() const noexcept { return bits_; }

	std::size_t kept_count() const noexcept {
		return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
	}
	double density() const noexcept {
		return bits_.empty() ? 1.0 : static_cast<double>(kept_count()) / static_cast<double>(bits_.size());
	}

	bool operator==(const BlockMask&) const = default;

  private:
	std::size_t block_rows_ = 0;
	std::size_t block_cols_ = 0;
	std::vector<std::uint8_t> bits_;
};

template <std::floating_point T>
void check_mask(const BasicMatrix<T>& w, const BlockMask& mask, BlockShape shape) {
	check_divisible(w, shape, "weight");
	require(mask.block_rows() == w.rows() / shape.rows && mask.block_cols() == w.cols() / shape.cols,
	        "mask grid " + std::to_string(mask.block_rows()) + "x" + std::to_string(mask.block_cols()) +
	            " does not match weight " + w.shape_str() + " at block shape " + shape.str());
}

/// Zeroes every entry that falls in a pruned block.
template <std::floating_point T>
BasicMatrix<T> apply_mask(const BasicMatrix<T>& w, const BlockMask& mask, BlockShape shape) {
	check_mask(w, mask, shape);
	BasicMatrix<T> out = w;
	for (std::size_t r = 0; r < w.rows(); ++r) {
		const std::size_t br = r / shape.rows;
		auto row = out.row(r);
		for (std::size_t bc = 0; bc < mask.block_cols(); ++bc) {
			if (mask.kept(br, bc)) continue;
			std::fill_n(row.begin() + static_cast<std::ptrdiff_t>(bc * shape.cols), shape.cols, T{0});
		}
	}
	return out;
}

/// Mask whose pruned blocks are exactly the all-zero blocks of `w`.
template <std::floating_point T>
BlockMask mask_from_zero_blocks(const BasicMatrix<T>& w, BlockShape shape) {
	check_divisible(w, shape, "weight");
	BlockMask mask(w.rows() / shape.rows, w.cols() / shape.cols);
	for (std::size_t br = 0; br < mask.block_rows(); ++br)
		for (std::size_t bc = 0; bc < mask.block_cols(); ++bc) {
			bool zero = true;
			for (std::size_t r = 0; r < shape.rows && zero; ++r)
				for (std::size_t c = 0; c < shape.cols; ++c)
					if (w(br * shape.rows + r, bc * shape.cols + c) != T{0}) {
						zero = false;
						break;
					}
			mask.set(br * mask.block_cols() + bc, !zero);
		}
	return mask;
}

template <std::floating_point T>
struct BasicBsrMatrix {
	BlockShape block_shape;
	std::size_t block_rows = 0;
	std::size_t block_cols = 0;
	std::vector<std::size_t> row_ptr;  // block_rows + 1 entries
	std::vector<std::size_t> col_idx;  // ascending within each block-row
	std::vector<T> blocks;             // kept tiles, each row-major b_r x b_c

	std::size_t rows() const noexcept { return block_rows * block_shape.rows; }
	std::size_t cols() const noexcept { return block_cols * block_shape.cols; }
	std::size_t kept_blocks() const noexcept { return col_idx.size(); }
	double density() const noexcept {
		const auto n = block_rows * block_cols;
		return n ? static_cast<double>(kept_blocks()) / static_cast<double>(n) : 1.0;
	}
};

using BsrMatrix = BasicBsrMatrix<float>;

template <std::floating_point T>
BasicBsrMatrix<T> bsr_from_masked(const BasicMatrix<T>& w, const BlockMask& mask, BlockShape shape) {
	check_mask(w, mask, shape);
	BasicBsrMatrix<T> b;
	b.block_shape = shape;
	b.block_rows = mask.block_rows();
	b.block_cols = mask.block_cols();
	b.row_ptr.reserve(b.block_rows + 1);
	b.row_ptr.push_back(0);
	const std::size_t kept = mask.kept_count();
	b.col_idx.reserve(kept);
	b.blocks.reserve(kept * shape.area());
	for (std::size_t br = 0; br < b.block_rows; ++br) {
		for (std::size_t bc = 0; bc < b.block_cols; ++bc) {
			if (!mask.kept(br, bc)) continue;
			b.col_idx.push_back(bc);
			for (std::size_t r = 0; r < shape.rows; ++r) {
				const auto src = w.row(br * shape.rows + r).subspan(bc * shape.cols, shape.cols);
				b.blocks.insert(b.blocks.end(), src.begin(), src.end());
			}
		}
		b.row_ptr.push_back(b.col_idx.size());
	}
	return b;
}

template <std::floating_point T>
BasicMatrix<T> to_dense(const BasicBsrMatrix<T>& b) {
	BasicMatrix<T> w(b.rows(), b.cols());
	const auto& s = b.block_shape;
	for (std::size_t br = 0; br < b.block_rows; ++br)
		for (std::size_t p = b.row_ptr[br]; p < b.row_ptr[br + 1]; ++p) {
			const T* tile = b.blocks.data() + p * s.area();
			for (std::size_t r = 0; r < s.rows; ++r)
				std::copy_n(tile + r * s.cols, s.cols, w.row(br * s.rows + r).begin() + static_cast<std::ptrdiff_t>(b.col_idx[p] * s.cols));
		}
	return w;
}

/// Multiply-accumulate counter threaded through the GEMM kernels.
struct MacCounter {
	std::uint64_t macs = 0;
};

inline std::string shape_pair(std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc) {
	return std::to_string(ar) + "x" + std::to_string(ac) + " * " + std::to_string(br) + "x" + std::to_string(bc);
}

/// C = A * B. The k loop runs in ascending order for every output element.
template <std::floating_point T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b, MacCounter* counter = nullptr) {
	require(a.cols() == b.rows(), "matmul dimension mismatch: " + shape_pair(a.rows(), a.cols(), b.rows(), b.cols()));
	const std::size_t m = a.rows(), n = a.cols(), k = b.cols();
	BasicMatrix<T> c(m, k);
	for (std::size_t i = 0; i < m; ++i) {
		T* out = c.row(i).data();
		const T* arow = a.row(i).data();
		for (std::size_t p = 0; p < n; ++p) {
			const T av = arow[p];
			const T* brow = b.row(p).data();
			for (std::size_t j = 0; j < k; ++j) out[j] += av * brow[j];
		}
	}
	if (counter) counter->macs += static_cast<std::uint64_t>(m) * n * k;
	return c;
}

/// C = A^T * B.
template <std::floating_point T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
	require(a.rows() == b.rows(), "matmul_tn dimension mismatch: " + shape_pair(a.cols(), a.rows(), b.rows(), b.cols()));
	BasicMatrix<T> c(a.cols(), b.cols());
	for (std::size_t p = 0; p < a.rows(); ++p) {
		const T* arow = a.row(p).data();
		const T* brow = b.row(p).data();
		for (std::size_t i = 0; i < a.cols(); ++i) {
			const T av = arow[i];
			T* out = c.row(i).data();
			for (std::size_t j = 0; j < b.cols(); ++j) out[j] += av * brow[j];
		}
	}
	return c;
}

/// C = A * B^T.
template <std::floating_point T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
	require(a.cols() == b.cols(), "matmul_nt dimension mismatch: " + shape_pair(a.rows(), a.cols(), b.cols(), b.rows()));
	BasicMatrix<T> c(a.rows(), b.rows());
	for (std::size_t i = 0; i < a.rows(); ++i) {
		const T* arow = a.row(i).data();
		for (std::size_t j = 0; j < b.rows(); ++j) {
			const T* brow = b.row(j).data();
			T acc{0};
			for (std::size_t p = 0; p < a.cols(); ++p) acc += arow[p] * brow[p];
			c(i, j) = acc;
		}
	}
	return c;
}

/// C = A * B for block-sparse B. Pruned tiles are never visited; for each
/// output element the contributions still arrive in ascending k order.
template <std::floating_point T>
BasicMatrix<T> bsr_matmul(const BasicMatrix<T>& a, const BasicBsrMatrix<T>& b, MacCounter* counter = nullptr) {
	require(a.cols() == b.rows(), "bsr_matmul dimension mismatch: " + shape_pair(a.rows(), a.cols(), b.rows(), b.cols()));
	const auto& s = b.block_shape;
	const std::size_t tile = s.area();
	BasicMatrix<T> c(a.rows(), b.cols());
	std::uint64_t macs = 0;
	for (std::size_t i = 0; i < a.rows(); ++i) {
		T* out = c.row(i).data();
		const T* arow = a.row(i).data();
		for (std::size_t br = 0; br < b.block_rows; ++br) {
			const T* aseg = arow + br * s.rows;
			for (std::size_t p = b.row_ptr[br]; p < b.row_ptr[br + 1]; ++p) {
				const T* t = b.blocks.data() + p * tile;
				T* o = out + b.col_idx[p] * s.cols;
				for (std::size_t r = 0; r < s.rows; ++r) {
					const T av = aseg[r];
					const T* trow = t + r * s.cols;
					for (std::size_t j = 0; j < s.cols; ++j) o[j] += av * trow[j];
				}
				macs += tile;
			}
		}
	}
	if (counter) counter->macs += macs;
	return c;
}

} // namespace blockprune
