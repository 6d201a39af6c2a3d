#pragma once

// First-order Taylor importance per weight, average-pooled to one score per
// block, and rank-based block masks.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tensor.hpp"

namespace blockprune {

struct BlockScore {
	std::size_t block_rows = 0;
	std::size_t block_cols = 0;
	std::vector<double> values;  // flat, row-major over the block grid

	std::size_t num_blocks() const noexcept { return values.size(); }
};

/// |w_ij * g_ij| elementwise.
inline Matrix taylor_score(const Matrix& w, const Matrix& g) {
	require(w.rows() == g.rows() && w.cols() == g.cols(),
	        "taylor_score shape mismatch: weight " + w.shape_str() + " vs gradient " + g.shape_str());
	Matrix s(w.rows(), w.cols());
	for (std::size_t i = 0; i < w.size(); ++i) s.data()[i] = std::fabs(w.data()[i] * g.data()[i]);
	return s;
}

/// Mean of each b_r x b_c tile.
inline BlockScore block_pool(const Matrix& s, BlockShape shape) {
	check_divisible(s, shape, "score matrix");
	BlockScore out{s.rows() / shape.rows, s.cols() / shape.cols, {}};
	out.values.assign(out.block_rows * out.block_cols, 0.0);
	for (std::size_t r = 0; r < s.rows(); ++r) {
		const auto row = s.row(r);
		const std::size_t br = r / shape.rows;
		for (std::size_t c = 0; c < s.cols(); ++c) out.values[br * out.block_cols + c / shape.cols] += row[c];
	}
	const double inv = 1.0 / static_cast<double>(shape.area());
	for (auto& v : out.values) v *= inv;
	return out;
}

/// Number of blocks pruned at ratio alpha: round-half-away-from-zero of alpha * blocks.
inline std::size_t pruned_count(std::size_t num_blocks, double alpha) {
	require(alpha >= 0.0 && alpha <= 1.0, "pruning ratio must lie in [0,1], got " + std::to_string(alpha));
	return std::min(num_blocks, static_cast<std::size_t>(std::llround(alpha * static_cast<double>(num_blocks))));
}

/// Block indices ordered by ascending (score, flat index): the removal order.
inline std::vector<std::size_t> prune_order(const BlockScore& scores) {
	std::vector<std::size_t> idx(scores.num_blocks());
	std::iota(idx.begin(), idx.end(), std::size_t{0});
	std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores.values[a] < scores.values[b]; });
	return idx;
}

/// Prunes the first `count` blocks of `order`.
inline BlockMask mask_from_order(std::size_t block_rows, std::size_t block_cols, const std::vector<std::size_t>& order,
                                 std::size_t count) {
	BlockMask mask = BlockMask::ones(block_rows, block_cols);
	for (std::size_t i = 0; i < count && i < order.size(); ++i) mask.set(order[i], false);
	return mask;
}

inline BlockMask mask_at_ratio(const BlockScore& scores, double alpha) {
	const std::size_t count = pruned_count(scores.num_blocks(), alpha);
	return mask_from_order(scores.block_rows, scores.block_cols, prune_order(scores), count);
}

} // namespace blockprune
