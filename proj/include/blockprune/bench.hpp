#pragma once

// Wall-clock harness for the dense and block-sparse GEMM kernels.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace blockprune {

struct BenchRow {
	double density = 1.0;
	std::uint64_t wall_time_ns = 0;  // median
	std::uint64_t macs = 0;
};

struct BenchOptions {
	int repetitions = 20;
	int warmup = 3;
	std::uint64_t seed = 0;
};

template <class F>
std::uint64_t median_time_ns(F&& f, const BenchOptions& opt) {
	require(opt.repetitions >= 1 && opt.warmup >= 0, "bench needs at least one repetition");
	for (int i = 0; i < opt.warmup; ++i) f();
	std::vector<std::uint64_t> times;
	times.reserve(static_cast<std::size_t>(opt.repetitions));
	for (int i = 0; i < opt.repetitions; ++i) {
		const auto t0 = std::chrono::steady_clock::now();
		f();
		const auto t1 = std::chrono::steady_clock::now();
		times.push_back(static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
	}
	std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
	return times[times.size() / 2];
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, float scale = 1.0f) {
	std::normal_distribution<float> nd(0.0f, scale);
	Matrix m(rows, cols);
	for (auto& v : m.data()) v = nd(rng);
	return m;
}

/// Mask keeping round(density * blocks) blocks chosen uniformly at random.
inline BlockMask random_mask(std::size_t block_rows, std::size_t block_cols, double density, Rng& rng) {
	const std::size_t n = block_rows * block_cols;
	const auto keep = static_cast<std::size_t>(std::llround(density * static_cast<double>(n)));
	std::vector<std::size_t> idx(n);
	std::iota(idx.begin(), idx.end(), std::size_t{0});
	std::shuffle(idx.begin(), idx.end(), rng);
	BlockMask mask = BlockMask::zeros(block_rows, block_cols);
	for (std::size_t i = 0; i < keep && i < n; ++i) mask.set(idx[i], true);
	return mask;
}

/// Dense baseline for the sweep below, same operands shape.
inline BenchRow bench_dense(std::size_t m, std::size_t n, std::size_t k, const BenchOptions& opt = {}) {
	Rng rng = make_rng(opt.seed, "bench");
	const Matrix a = random_matrix(m, n, rng);
	const Matrix w = random_matrix(n, k, rng);
	BenchRow row;
	MacCounter counter;
	matmul(a, w, &counter);
	row.macs = counter.macs;
	row.wall_time_ns = median_time_ns([&] { return matmul(a, w); }, opt);
	return row;
}

/// Times bsr_matmul for an m x n activation against n x k weights at each
/// block density.
inline std::vector<BenchRow> bench_bsr(std::size_t m, std::size_t n, std::size_t k, BlockShape shape,
                                       const std::vector<double>& densities, const BenchOptions& opt = {}) {
	shape.validate();
	require(shape.divides(n, k), "bench weight " + std::to_string(n) + "x" + std::to_string(k) +
	                                 " is not divisible by block shape " + shape.str());
	Rng rng = make_rng(opt.seed, "bench");
	const Matrix a = random_matrix(m, n, rng);
	const Matrix w = random_matrix(n, k, rng);
	std::vector<BenchRow> rows;
	for (double d : densities) {
		require(d > 0.0 && d <= 1.0, "bench density must lie in (0,1]");
		const BlockMask mask = random_mask(n / shape.rows, k / shape.cols, d, rng);
		const BsrMatrix b = bsr_from_masked(w, mask, shape);
		BenchRow row;
		row.density = d;
		MacCounter counter;
		bsr_matmul(a, b, &counter);
		row.macs = counter.macs;
		row.wall_time_ns = median_time_ns([&] { return bsr_matmul(a, b); }, opt);
		rows.push_back(row);
	}
	return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
	os << "density,wall_time_ns,macs\n";
	for (const auto& r : rows) os << r.density << ',' << r.wall_time_ns << ',' << r.macs << '\n';
}

} // namespace blockprune
