#pragma once

// Layerwise pruning-ratio allocation.
//
// For a multiplier lambda every layer i picks the grid ratio where its
// delta^2 curve becomes steeper than the target slope
//   lambda_i = lambda + beta * M_i N_i K_i / (b_r b_c).
// Larger lambda never prunes less, so the FLOPs ratio is nonincreasing in
// lambda; bisection finds the smallest lambda meeting the budget R and the
// breakpoints above it are then scanned for the plan minimising sum_i delta_i^2.

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "curves.hpp"
#include "power.hpp"

namespace blockprune {

inline double target_slope(double lambda, double beta, const LayerCost& cost, BlockShape shape) {
	return lambda + beta * static_cast<double>(cost.m) * static_cast<double>(cost.n) * static_cast<double>(cost.k) /
	                    static_cast<double>(shape.area());
}

/// Grid index reached by walking while the (monotone) slope stays <= target.
inline std::size_t grid_index_for_slope(const DistortionCurve& curve, double target) {
	std::size_t k = 0;
	while (k < curve.monotone_slope.size() && curve.monotone_slope[k] <= target) ++k;
	return k;
}

inline double alpha_for_slope(const DistortionCurve& curve, double target) {
	return curve.grid[grid_index_for_slope(curve, target)];
}

struct AllocationPlan {
	std::vector<std::string> layer_ids;
	std::vector<double> alphas;
	std::vector<double> deltas;
	BlockShape block_shape;
	double lambda_star = 0.0;
	double beta = 0.0;
	double flops_target = 1.0;
	double achieved_flops_ratio = 1.0;
	double estimated_power = 0.0;
	double predicted_distortion = 0.0;  // sum of delta_i^2

	nlohmann::json to_json(const std::vector<LayerCost>& costs) const {
		nlohmann::json j;
		j["block_shape"] = block_shape.str();
		j["beta"] = beta;
		j["lambda_star"] = lambda_star;
		j["flops_target"] = flops_target;
		j["achieved_flops_ratio"] = achieved_flops_ratio;
		j["estimated_power"] = estimated_power;
		j["predicted_distortion"] = predicted_distortion;
		j["layers"] = nlohmann::json::array();
		for (std::size_t i = 0; i < alphas.size(); ++i)
			j["layers"].push_back({{"id", layer_ids[i]},
			                       {"alpha", alphas[i]},
			                       {"delta", deltas[i]},
			                       {"flops_kept", costs[i].flops_at(alphas[i], block_shape)},
			                       {"power", layer_power(costs[i], alphas[i], block_shape)}});
		return j;
	}

	void write_csv(std::ostream& os, const std::vector<LayerCost>& costs) const {
		os << "layer_id,alpha,flops_kept,power\n";
		for (std::size_t i = 0; i < alphas.size(); ++i)
			os << layer_ids[i] << ',' << alphas[i] << ',' << costs[i].flops_at(alphas[i], block_shape) << ','
			   << layer_power(costs[i], alphas[i], block_shape) << '\n';
	}
};

struct SolveOptions {
	double fixed_flops = 0.0;  // unprunable FLOPs on both sides of the ratio
	int bisection_iters = 64;
};

namespace detail {

struct PathPoint {
	std::vector<std::size_t> index;
	double flops = 1.0;
	double distortion = 0.0;
};

class AllocationPath {
  public:
	AllocationPath(const std::vector<DistortionCurve>& curves, const std::vector<LayerCost>& costs, BlockShape shape,
	               double beta, double fixed_flops)
	    : curves_(curves), costs_(costs), shape_(shape), beta_(beta), fixed_(fixed_flops) {}

	PathPoint at(double lambda) const {
		PathPoint p;
		p.index.resize(curves_.size());
		std::vector<double> alphas(curves_.size());
		for (std::size_t i = 0; i < curves_.size(); ++i) {
			p.index[i] = grid_index_for_slope(curves_[i], target_slope(lambda, beta_, costs_[i], shape_));
			alphas[i] = curves_[i].grid[p.index[i]];
			p.distortion += curves_[i].squared(p.index[i]);
		}
		p.flops = flops_ratio(costs_, alphas, shape_, fixed_);
		return p;
	}

  private:
	const std::vector<DistortionCurve>& curves_;
	const std::vector<LayerCost>& costs_;
	BlockShape shape_;
	double beta_;
	double fixed_;
};

} // namespace detail

inline AllocationPlan make_plan(const std::vector<DistortionCurve>& curves, const std::vector<LayerCost>& costs,
                                const std::vector<std::size_t>& index, BlockShape shape, double beta, double R,
                                double lambda, double fixed_flops) {
	AllocationPlan plan;
	plan.block_shape = shape;
	plan.beta = beta;
	plan.flops_target = R;
	plan.lambda_star = lambda;
	for (std::size_t i = 0; i < curves.size(); ++i) {
		plan.layer_ids.push_back(curves[i].layer_id);
		plan.alphas.push_back(curves[i].grid[index[i]]);
		plan.deltas.push_back(curves[i].delta[index[i]]);
		plan.predicted_distortion += curves[i].squared(index[i]);
	}
	plan.achieved_flops_ratio = flops_ratio(costs, plan.alphas, shape, fixed_flops);
	plan.estimated_power = network_power(costs, plan.alphas, shape, 1.0);
	return plan;
}

/// Smallest FLOPs ratio reachable: every prunable layer fully pruned.
inline double flops_floor(const std::vector<LayerCost>& costs, BlockShape shape, double fixed_flops = 0.0) {
	return flops_ratio(costs, std::vector<double>(costs.size(), 1.0), shape, fixed_flops);
}

inline AllocationPlan solve(const std::vector<DistortionCurve>& curves, const std::vector<LayerCost>& costs, double R,
                            double beta, BlockShape shape, const SolveOptions& opt = {}) {
	require(curves.size() == costs.size(), "solve: " + std::to_string(curves.size()) + " curves vs " +
	                                           std::to_string(costs.size()) + " cost entries");
	require(R > 0.0 && R <= 1.0, "FLOPs target R must lie in (0,1], got " + std::to_string(R));
	require(beta >= 0.0, "beta must be >= 0");
	for (const auto& c : curves) require(c.grid.size() >= 2 && c.monotone_slope.size() + 1 == c.grid.size(), "malformed curve " + c.layer_id);
	for (const auto& c : costs) c.num_blocks(shape);

	const double floor = flops_floor(costs, shape, opt.fixed_flops);
	if (floor > R + 1e-12)
		throw infeasible_error("FLOPs target " + std::to_string(R) + " is below the achievable floor " + std::to_string(floor), floor);

	const detail::AllocationPath path(curves, costs, shape, beta, opt.fixed_flops);
	double max_power_term = 0.0, max_slope = 0.0;
	for (std::size_t i = 0; i < curves.size(); ++i) {
		max_power_term = std::max(max_power_term, target_slope(0.0, beta, costs[i], shape));
		if (!curves[i].monotone_slope.empty()) max_slope = std::max(max_slope, curves[i].monotone_slope.back());
	}

	// At lo every target is negative, so nothing is pruned.
	double lo = -max_power_term - 1.0;
	double hi;
	if (path.at(lo).flops <= R) {
		hi = lo;
	} else {
		hi = std::max(1.0, max_slope);
		for (int guard = 0; path.at(hi).flops > R && guard < 2048; ++guard) hi *= 2.0;
		for (int it = 0; it < opt.bisection_iters; ++it) {
			const double mid = lo + (hi - lo) / 2.0;
			if (mid <= lo || mid >= hi) break;
			(path.at(mid).flops <= R ? hi : lo) = mid;
		}
	}

	// Every breakpoint at or above hi is feasible; keep the least distortion,
	// preferring the smaller multiplier (less pruning) on ties.
	std::vector<double> candidates{hi};
	for (std::size_t i = 0; i < curves.size(); ++i)
		for (double s : curves[i].monotone_slope) {
			const double lam = s - target_slope(0.0, beta, costs[i], shape);
			if (lam > hi) candidates.push_back(lam);
		}
	std::sort(candidates.begin(), candidates.end());
	candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

	double best_lambda = hi;
	detail::PathPoint best = path.at(hi);
	for (double lam : candidates) {
		const auto p = path.at(lam);
		if (p.flops <= R && p.distortion < best.distortion) {
			best = p;
			best_lambda = lam;
		}
	}
	return make_plan(curves, costs, best.index, shape, beta, R, best_lambda, opt.fixed_flops);
}

/// Plans with and without the power term at the same budget.
inline std::pair<AllocationPlan, AllocationPlan> ablate_power(const std::vector<DistortionCurve>& curves,
                                                              const std::vector<LayerCost>& costs, double R,
                                                              BlockShape shape, double beta = 1.0,
                                                              const SolveOptions& opt = {}) {
	require(beta > 0.0, "ablate_power: beta must be positive");
	return {solve(curves, costs, R, beta, shape, opt), solve(curves, costs, R, 0.0, shape, opt)};
}

} // namespace blockprune
