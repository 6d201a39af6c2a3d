#pragma once

// Empirical check of cross-layer independence.
//
// For random block masks drawn per trial, each layer i yields a first-order
// term a_i = gbar_i^T dW_i and a second-order term b_i = 1/2 dW_i^T F_i dW_i
// (delta_i = a_i + b_i). For a layer pair (i, j) the four cross statistics
// are a_i a_j, b_i a_j, a_i b_j and b_i b_j. The report gives their trial
// means ("raw") and their Pearson correlations across trials ("normalized");
// normalized values near zero mean the cross terms average out.

#include <algorithm>
#include <array>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "curves.hpp"
#include "model.hpp"

namespace blockprune {

enum class AuditMasking {
	independent,  // every layer draws its own ratio and block order
	coupled,      // all layers reuse one draw per trial (identical masks on equal grids)
};

struct AuditOptions {
	std::size_t trials = 100;
	std::size_t num_pairs = 0;  // 0 = every pair
	double max_alpha = 0.5;
	std::uint64_t seed = 0;
	AuditMasking masking = AuditMasking::independent;
	std::vector<std::size_t> unperturbed;  // layers whose perturbation is forced to zero
};

struct CrossTermPair {
	std::string layer_i, layer_j;
	std::array<double, 4> raw{};
	std::array<double, 4> normalized{};
	double total_normalized = 0.0;  // correlation of delta_i and delta_j
};

struct CrossTermReport {
	std::size_t trials = 0;
	std::vector<CrossTermPair> pairs;
	double median_abs_ratio = 0.0;
	double max_abs_ratio = 0.0;
	std::optional<double> additivity_ratio;  // predicted / measured squared distortion

	nlohmann::json to_json() const {
		nlohmann::json j;
		j["trials"] = trials;
		j["median_abs_ratio"] = median_abs_ratio;
		j["max_abs_ratio"] = max_abs_ratio;
		j["additivity_ratio"] = additivity_ratio ? nlohmann::json(*additivity_ratio) : nlohmann::json(nullptr);
		j["pairs"] = nlohmann::json::array();
		for (const auto& p : pairs)
			j["pairs"].push_back({{"layer_i", p.layer_i},
			                      {"layer_j", p.layer_j},
			                      {"raw", p.raw},
			                      {"normalized", p.normalized},
			                      {"total_normalized", p.total_normalized}});
		return j;
	}
};

namespace detail {

inline double pearson(std::span<const double> x, std::span<const double> y) {
	const double n = static_cast<double>(x.size());
	const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
	const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
	double sxy = 0.0, sxx = 0.0, syy = 0.0;
	for (std::size_t t = 0; t < x.size(); ++t) {
		sxy += (x[t] - mx) * (y[t] - my);
		sxx += (x[t] - mx) * (x[t] - mx);
		syy += (y[t] - my) * (y[t] - my);
	}
	const double denom = std::sqrt(sxx * syy);
	return denom > 0.0 ? sxy / denom : 0.0;
}

inline double mean_product(std::span<const double> x, std::span<const double> y) {
	double s = 0.0;
	for (std::size_t t = 0; t < x.size(); ++t) s += x[t] * y[t];
	return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

/// Random block mask: ratio uniform in [0, max_alpha], uniformly random order.
inline BlockMask draw_mask(const LayerProblem& layer, double max_alpha, Rng& rng) {
	std::uniform_real_distribution<double> ud(0.0, max_alpha);
	const double alpha = ud(rng);
	std::vector<std::size_t> order(layer.num_blocks());
	std::iota(order.begin(), order.end(), std::size_t{0});
	std::shuffle(order.begin(), order.end(), rng);
	return mask_from_order(layer.block_rows(), layer.block_cols(), order, pruned_count(layer.num_blocks(), alpha));
}

inline std::vector<double> perturbation(const LayerProblem& layer, const BlockMask& mask) {
	const Matrix pruned = apply_mask(layer.weight, mask, layer.shape);
	std::vector<double> dw(layer.weight.size());
	for (std::size_t i = 0; i < dw.size(); ++i)
		dw[i] = static_cast<double>(pruned.data()[i]) - static_cast<double>(layer.weight.data()[i]);
	return dw;
}

} // namespace detail

inline CrossTermReport crossterm_audit(const std::vector<LayerProblem>& layers, const AuditOptions& opt = {}) {
	require(layers.size() >= 2, "crossterm_audit needs at least two layers");
	require(opt.trials >= 2, "crossterm_audit needs at least two trials");
	const std::size_t L = layers.size(), Tn = opt.trials;
	std::vector<std::vector<double>> first(L, std::vector<double>(Tn)), second(L, std::vector<double>(Tn));
	const std::set<std::size_t> frozen(opt.unperturbed.begin(), opt.unperturbed.end());

	Rng rng = make_rng(opt.seed, "audit");
	for (std::size_t t = 0; t < Tn; ++t) {
		const std::uint64_t trial_seed = rng();
		for (std::size_t i = 0; i < L; ++i) {
			if (frozen.count(i)) {
				first[i][t] = second[i][t] = 0.0;
				continue;
			}
			Rng coupled(trial_seed);
			const BlockMask mask =
			    detail::draw_mask(layers[i], opt.max_alpha, opt.masking == AuditMasking::coupled ? coupled : rng);
			const auto dw = detail::perturbation(layers[i], mask);
			double a = 0.0;
			for (std::size_t k = 0; k < dw.size(); ++k) a += layers[i].mean_grad[k] * dw[k];
			first[i][t] = a;
			second[i][t] = 0.5 * quad_form(layers[i].fisher, dw);
		}
	}

	std::vector<std::pair<std::size_t, std::size_t>> all;
	for (std::size_t i = 0; i < L; ++i)
		for (std::size_t j = i + 1; j < L; ++j) all.emplace_back(i, j);
	if (opt.num_pairs > 0 && opt.num_pairs < all.size()) {
		std::shuffle(all.begin(), all.end(), rng);
		all.resize(opt.num_pairs);
		std::sort(all.begin(), all.end());
	}

	CrossTermReport report;
	report.trials = Tn;
	std::vector<double> mags;
	for (auto [i, j] : all) {
		CrossTermPair p;
		p.layer_i = layers[i].layer_id;
		p.layer_j = layers[j].layer_id;
		const std::array<std::pair<const std::vector<double>*, const std::vector<double>*>, 4> terms{
		    {{&first[i], &first[j]}, {&second[i], &first[j]}, {&first[i], &second[j]}, {&second[i], &second[j]}}};
		for (std::size_t k = 0; k < 4; ++k) {
			p.raw[k] = detail::mean_product(*terms[k].first, *terms[k].second);
			p.normalized[k] = detail::pearson(*terms[k].first, *terms[k].second);
			mags.push_back(std::fabs(p.normalized[k]));
		}
		std::vector<double> di(Tn), dj(Tn);
		for (std::size_t t = 0; t < Tn; ++t) {
			di[t] = first[i][t] + second[i][t];
			dj[t] = first[j][t] + second[j][t];
		}
		p.total_normalized = detail::pearson(di, dj);
		report.pairs.push_back(p);
	}
	if (!mags.empty()) {
		report.max_abs_ratio = *std::max_element(mags.begin(), mags.end());
		std::sort(mags.begin(), mags.end());
		const std::size_t h = mags.size() / 2;
		report.median_abs_ratio = mags.size() % 2 ? mags[h] : 0.5 * (mags[h - 1] + mags[h]);
	}
	return report;
}

/// Compares sum_i E[delta_i^2] against the measured E[(f(W~) - f(W))^2] of
/// the mean calibration loss, over random masks on every layer at once.
/// `layer_index[i]` maps layers[i] to its position in params.linears.
inline double additivity_ratio(const ParamSet& params, const Batch& calib, const std::vector<LayerProblem>& layers,
                               const std::vector<std::size_t>& layer_index, std::size_t trials, double max_alpha,
                               std::uint64_t seed, ProxyKind kind = ProxyKind::cross_entropy) {
	require(layers.size() == layer_index.size(), "additivity_ratio: layer index map is not aligned");
	const double base = scalar_proxy(forward(params, calib).logits, calib.labels, kind).mean;
	Rng rng = make_rng(seed, "additivity");
	double predicted = 0.0, measured = 0.0;
	for (std::size_t t = 0; t < trials; ++t) {
		ParamSet pruned = params;
		for (std::size_t i = 0; i < layers.size(); ++i) {
			const BlockMask mask = detail::draw_mask(layers[i], max_alpha, rng);
			const auto dw = detail::perturbation(layers[i], mask);
			double a = 0.0;
			for (std::size_t k = 0; k < dw.size(); ++k) a += layers[i].mean_grad[k] * dw[k];
			const double delta = a + 0.5 * quad_form(layers[i].fisher, dw);
			predicted += delta * delta;
			auto& w = pruned.linears[layer_index[i]].weight;
			w = apply_mask(w, mask, layers[i].shape);
		}
		const double f = scalar_proxy(forward(pruned, calib).logits, calib.labels, kind).mean;
		measured += (f - base) * (f - base);
	}
	return measured > 0.0 ? predicted / measured : 0.0;
}

} // namespace blockprune
