#pragma once

// Per-layer distortion curves delta(alpha) on a uniform ratio grid, where
//   delta = gbar^T dW + 1/2 dW^T F dW,   dW = W~(alpha) - W,
// gbar is the calibration-mean gradient and F the empirical Fisher.
// The incremental walk touches only the blocks pruned between neighbouring
// grid points; delta_naive recomputes from scratch and serves as its oracle.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "fisher.hpp"
#include "scoring.hpp"

namespace blockprune {

inline constexpr int kDefaultGrid = 20;

/// Everything needed to evaluate one layer's curve.
struct LayerProblem {
	std::string layer_id;
	Matrix weight;
	std::vector<double> mean_grad;  // flattened like weight
	FisherBlock fisher;
	BlockShape shape;
	std::vector<std::size_t> order;  // block removal order

	std::size_t block_rows() const { return weight.rows() / shape.rows; }
	std::size_t block_cols() const { return weight.cols() / shape.cols; }
	std::size_t num_blocks() const { return block_rows() * block_cols(); }

	/// Flat weight coordinates covered by block `flat`, row-major within the block.
	std::vector<std::size_t> block_coords(std::size_t flat) const {
		const std::size_t br = flat / block_cols(), bc = flat % block_cols();
		std::vector<std::size_t> out;
		out.reserve(shape.area());
		for (std::size_t r = 0; r < shape.rows; ++r)
			for (std::size_t c = 0; c < shape.cols; ++c)
				out.push_back((br * shape.rows + r) * weight.cols() + bc * shape.cols + c);
		return out;
	}

	BlockMask mask_at(double alpha) const {
		return mask_from_order(block_rows(), block_cols(), order, pruned_count(num_blocks(), alpha));
	}
};

/// Scores blocks with the mean gradient, fixes their removal order and builds
/// the Fisher block from per-sample gradients (one flattened gradient per row).
inline LayerProblem make_layer_problem(std::string layer_id, const Matrix& weight, const Matrix& mean_grad,
                                       const Matrix& per_sample_grads, BlockShape shape, double kappa = kDefaultKappa,
                                       std::size_t dense_cap = kDefaultDenseCap) {
	check_divisible(weight, shape, "layer " + layer_id);
	require(mean_grad.rows() == weight.rows() && mean_grad.cols() == weight.cols(), "layer " + layer_id + ": mean gradient shape mismatch");
	require(per_sample_grads.cols() == weight.size(), "layer " + layer_id + ": per-sample gradients have the wrong width");
	LayerProblem p;
	p.layer_id = std::move(layer_id);
	p.weight = weight;
	p.mean_grad.assign(mean_grad.data().begin(), mean_grad.data().end());
	p.fisher = build_fisher(per_sample_grads, kappa, dense_cap, p.layer_id);
	p.shape = shape;
	p.order = prune_order(block_pool(taylor_score(weight, mean_grad), shape));
	return p;
}

/// Recomputes delta at `alpha` from the full perturbation vector.
inline double delta_naive(const LayerProblem& layer, double alpha) {
	const BlockMask mask = layer.mask_at(alpha);
	const Matrix pruned = apply_mask(layer.weight, mask, layer.shape);
	std::vector<double> dw(layer.weight.size());
	for (std::size_t i = 0; i < dw.size(); ++i)
		dw[i] = static_cast<double>(pruned.data()[i]) - static_cast<double>(layer.weight.data()[i]);
	double first = 0.0;
	for (std::size_t i = 0; i < dw.size(); ++i) first += layer.mean_grad[i] * dw[i];
	return first + 0.5 * quad_form(layer.fisher, dw);
}

struct DistortionCurve {
	std::string layer_id;
	std::vector<double> grid;            // K + 1 ratios k / K
	std::vector<double> delta;           // delta at each grid point
	std::vector<double> slope;           // K forward differences of delta^2
	std::vector<double> monotone_slope;  // slope clamped to be nonnegative and nondecreasing

	int grid_size() const { return static_cast<int>(grid.size()) - 1; }

	/// Builds grid, slopes and their monotone envelope from tabulated deltas.
	static DistortionCurve from_deltas(std::string id, std::vector<double> deltas) {
		require(deltas.size() >= 2, "a distortion curve needs at least two grid points");
		DistortionCurve c;
		c.layer_id = std::move(id);
		const int K = static_cast<int>(deltas.size()) - 1;
		for (int k = 0; k <= K; ++k) c.grid.push_back(static_cast<double>(k) / K);
		c.delta = std::move(deltas);
		double running = 0.0;
		for (int k = 0; k < K; ++k) {
			const double a = c.delta[static_cast<std::size_t>(k)], b = c.delta[static_cast<std::size_t>(k) + 1];
			const double s = (b * b - a * a) * K;
			c.slope.push_back(s);
			running = std::max({running, s, 0.0});
			c.monotone_slope.push_back(running);
		}
		return c;
	}

	/// delta^2 at grid index k.
	double squared(std::size_t k) const { return delta[k] * delta[k]; }
};

/// Walks the grid once. Each step perturbs only the newly pruned coordinates
/// s and updates
///   delta_k = delta_{k-1} + gbar_s^T d + (d/2 + dW_{k-1})^T F d,
/// where d = -W restricted to s. If `steps` is given it receives each step's d.
inline DistortionCurve delta_curve_incremental(const LayerProblem& layer, int K, std::vector<SparseVector>* steps = nullptr) {
	require(K >= 1, "grid size K must be >= 1");
	const std::size_t D = layer.weight.size(), nb = layer.num_blocks();
	const auto& f = layer.fisher;
	const bool streaming = f.mode == FisherMode::streaming;
	std::vector<double> dw_prev(D, 0.0), u(D, 0.0);
	std::vector<double> proj_prev(streaming ? f.n : 0, 0.0), u_proj(streaming ? f.n : 0, 0.0);
	std::vector<double> deltas{0.0};
	std::size_t done = 0;
	double delta = 0.0;
	if (steps) steps->clear();

	for (int k = 1; k <= K; ++k) {
		const std::size_t target = pruned_count(nb, static_cast<double>(k) / K);
		SparseVector step;
		for (std::size_t b = done; b < target; ++b)
			for (std::size_t i : layer.block_coords(layer.order[b])) {
				step.index.push_back(i);
				step.value.push_back(-static_cast<double>(layer.weight.data()[i]));
			}
		done = target;

		double first = 0.0;
		for (std::size_t t = 0; t < step.index.size(); ++t) first += layer.mean_grad[step.index[t]] * step.value[t];

		std::vector<double> step_proj;
		if (streaming) {
			step_proj.assign(f.n, 0.0);
			for (std::size_t s = 0; s < f.n; ++s) {
				const auto g = f.grad(s);
				double acc = 0.0;
				for (std::size_t t = 0; t < step.index.size(); ++t) acc += g[step.index[t]] * step.value[t];
				step_proj[s] = acc;
				u_proj[s] = proj_prev[s] + 0.5 * acc;
			}
		}
		for (std::size_t t = 0; t < step.index.size(); ++t) u[step.index[t]] = dw_prev[step.index[t]] + 0.5 * step.value[t];
		const double second = step.index.empty() ? 0.0 : cross_form(f, u, step, u_proj);
		delta += first + second;
		deltas.push_back(delta);

		for (std::size_t t = 0; t < step.index.size(); ++t) {
			dw_prev[step.index[t]] += step.value[t];
			u[step.index[t]] = dw_prev[step.index[t]];
		}
		if (streaming)
			for (std::size_t s = 0; s < f.n; ++s) proj_prev[s] += step_proj[s];
		if (steps) steps->push_back(std::move(step));
	}
	return DistortionCurve::from_deltas(layer.layer_id, std::move(deltas));
}

/// CSV `alpha,delta,slope`; slope is the raw forward difference of delta^2
/// leaving each grid point (empty on the last row).
inline void write_curve_csv(std::ostream& os, const DistortionCurve& c) {
	os << "alpha,delta,slope\n";
	os.precision(10);
	for (std::size_t k = 0; k < c.grid.size(); ++k) {
		os << c.grid[k] << ',' << c.delta[k] << ',';
		if (k < c.slope.size()) os << c.slope[k];
		os << '\n';
	}
}

} // namespace blockprune
