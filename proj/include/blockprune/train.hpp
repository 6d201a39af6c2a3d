#pragma once

// Mini-batch SGD with momentum; pruned blocks are re-zeroed after every step.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "model.hpp"

namespace blockprune {

struct LayerMask {
	BlockShape shape;
	BlockMask mask;
};

/// Indexed like ParamSet::linears; nullopt leaves a layer dense.
using MaskSet = std::vector<std::optional<LayerMask>>;

struct SgdConfig {
	int epochs = 1;
	double lr = 0.05;
	double momentum = 0.9;
	std::size_t batch_size = 32;
	std::uint64_t seed = 0;
	ProxyKind loss = ProxyKind::cross_entropy;
};

struct EpochStats {
	int epoch = 0;
	double mean_loss = 0.0;
};

inline void validate_masks(const ParamSet& params, const MaskSet& masks) {
	if (masks.empty()) return;
	require(masks.size() == params.linears.size(), "mask set has " + std::to_string(masks.size()) +
	                                                   " entries, model has " + std::to_string(params.linears.size()) +
	                                                   " linear layers");
	for (std::size_t i = 0; i < masks.size(); ++i)
		if (masks[i]) check_mask(params.linears[i].weight, masks[i]->mask, masks[i]->shape);
}

inline void apply_masks(ParamSet& params, const MaskSet& masks) {
	for (std::size_t i = 0; i < masks.size(); ++i)
		if (masks[i]) params.linears[i].weight = apply_mask(params.linears[i].weight, masks[i]->mask, masks[i]->shape);
}

/// Trains (or finetunes) `params` on `train`. With masks, every pruned block
/// stays exactly zero after each update. Throws if the loss goes non-finite.
inline ParamSet sgd_finetune(ParamSet params, const MaskSet& masks, const Batch& train, const SgdConfig& cfg,
                             const std::function<void(const EpochStats&)>& on_epoch = {}) {
	params.validate();
	validate_masks(params, masks);
	train.validate(params.config.num_classes);
	require(cfg.batch_size >= 1, "batch_size must be >= 1");
	apply_masks(params, masks);
	if (cfg.epochs <= 0 || cfg.lr == 0.0) return params;

	ParamSet velocity = params.zeros_like();
	Rng rng = make_rng(cfg.seed, "sgd");
	std::vector<std::size_t> order(train.size());
	std::iota(order.begin(), order.end(), std::size_t{0});
	const auto lr = static_cast<float>(cfg.lr), mu = static_cast<float>(cfg.momentum);

	for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
		std::shuffle(order.begin(), order.end(), rng);
		double loss_sum = 0.0;
		std::size_t steps = 0;
		for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
			const std::size_t cnt = std::min(cfg.batch_size, order.size() - b);
			const Batch batch = train.subset(std::span(order).subspan(b, cnt));
			const auto fwd = forward(params, batch);
			const auto loss = scalar_proxy(fwd.logits, batch.labels, cfg.loss);
			if (!std::isfinite(loss.mean))
				throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": loss is not finite");
			const ParamSet grad = backward(params, fwd.cache, loss.grad);

			std::vector<BasicMatrix<float>*> vel;
			velocity.for_each_tensor([&](const std::string&, Matrix& m) { vel.push_back(&m); });
			std::vector<const BasicMatrix<float>*> gr;
			grad.for_each_tensor([&](const std::string&, const Matrix& m) { gr.push_back(&m); });
			std::size_t t = 0;
			params.for_each_tensor([&](const std::string&, Matrix& w) {
				auto v = vel[t]->data();
				const auto g = gr[t]->data();
				auto wd = w.data();
				for (std::size_t i = 0; i < wd.size(); ++i) {
					v[i] = mu * v[i] + g[i];
					wd[i] -= lr * v[i];
				}
				++t;
			});
			apply_masks(params, masks);
			loss_sum += loss.mean;
			++steps;
		}
		if (on_epoch) on_epoch({epoch, steps ? loss_sum / static_cast<double>(steps) : 0.0});
	}
	return params;
}

} // namespace blockprune
