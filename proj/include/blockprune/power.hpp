#pragma once

// FLOPs and power cost of block-sparse GEMMs.
//
// A prunable linear layer is an M x N activation times an N x K weight split
// into (N / b_r) x (K / b_c) blocks. Its power estimate is
//   p_m * (M / b_m) * kept_blocks(alpha)
// and its FLOPs are 2 * M * b_r * b_c * kept_blocks(alpha).
//
// kept_blocks uses the same discretization as the block masks
// (blocks - round(alpha * blocks)), so cost models and executed kernels
// always agree; on block-aligned ratios this equals ceil((1 - alpha) * blocks).

#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "scoring.hpp"
#include "tensor.hpp"

namespace blockprune {

struct LayerCost {
	std::string layer_id;
	std::uint64_t m = 0;  // activation rows (batch x tokens)
	std::uint64_t n = 0;  // weight rows (input features)
	std::uint64_t k = 0;  // weight cols (output features)
	double b_m = 1.0;     // kernel grid size along M
	double p_m = 1.0;     // power per within-block matmul

	double flops_dense() const { return 2.0 * static_cast<double>(m) * static_cast<double>(n) * static_cast<double>(k); }

	std::size_t num_blocks(BlockShape shape) const {
		shape.validate();
		require(shape.divides(n, k), "layer " + layer_id + " (" + std::to_string(n) + "x" + std::to_string(k) +
		                                 ") is not divisible by block shape " + shape.str());
		return static_cast<std::size_t>((n / shape.rows) * (k / shape.cols));
	}

	std::size_t kept_blocks(double alpha, BlockShape shape) const {
		const std::size_t nb = num_blocks(shape);
		return nb - pruned_count(nb, alpha);
	}

	double flops_at(double alpha, BlockShape shape) const {
		return 2.0 * static_cast<double>(m) * static_cast<double>(shape.area()) * static_cast<double>(kept_blocks(alpha, shape));
	}
};

inline double layer_power(const LayerCost& cost, double alpha, BlockShape shape) {
	return cost.p_m * (static_cast<double>(cost.m) / cost.b_m) * static_cast<double>(cost.kept_blocks(alpha, shape));
}

/// beta * sum_i layer_power_i (p_m and b_m are folded into beta by callers
/// that leave them at 1).
inline double network_power(const std::vector<LayerCost>& costs, const std::vector<double>& alphas, BlockShape shape,
                            double beta) {
	require(costs.size() == alphas.size(), "network_power: " + std::to_string(costs.size()) + " costs vs " +
	                                           std::to_string(alphas.size()) + " ratios");
	double sum = 0.0;
	for (std::size_t i = 0; i < costs.size(); ++i) sum += layer_power(costs[i], alphas[i], shape);
	return beta * sum;
}

/// Kept FLOPs over dense FLOPs. `fixed_flops` counts unprunable work
/// (attention score/context products, layers held dense) on both sides.
inline double flops_ratio(const std::vector<LayerCost>& costs, const std::vector<double>& alphas, BlockShape shape,
                          double fixed_flops = 0.0) {
	require(costs.size() == alphas.size(), "flops_ratio: costs and ratios are not aligned");
	double kept = fixed_flops, dense = fixed_flops;
	for (std::size_t i = 0; i < costs.size(); ++i) {
		kept += costs[i].flops_at(alphas[i], shape);
		dense += costs[i].flops_dense();
	}
	return dense > 0.0 ? kept / dense : 1.0;
}

struct CostReport {
	struct Layer {
		std::string id;
		double alpha = 0.0;
		double flops = 0.0;
		double power = 0.0;
	};
	std::vector<Layer> layers;
	double fixed_flops = 0.0;
	double total_flops = 0.0;
	double dense_flops = 0.0;
	double flops_ratio = 1.0;
	double total_power = 0.0;

	nlohmann::json to_json() const {
		nlohmann::json j;
		j["layers"] = nlohmann::json::array();
		for (const auto& l : layers) j["layers"].push_back({{"id", l.id}, {"alpha", l.alpha}, {"flops", l.flops}, {"power", l.power}});
		j["total_flops"] = total_flops;
		j["flops_ratio"] = flops_ratio;
		j["total_power"] = total_power;
		j["fixed_flops"] = fixed_flops;
		return j;
	}
};

inline CostReport cost_report(const std::vector<LayerCost>& costs, const std::vector<double>& alphas, BlockShape shape,
                              double fixed_flops = 0.0) {
	require(costs.size() == alphas.size(), "cost_report: costs and ratios are not aligned");
	CostReport r;
	r.fixed_flops = fixed_flops;
	r.total_flops = fixed_flops;
	r.dense_flops = fixed_flops;
	for (std::size_t i = 0; i < costs.size(); ++i) {
		CostReport::Layer l{costs[i].layer_id, alphas[i], costs[i].flops_at(alphas[i], shape), layer_power(costs[i], alphas[i], shape)};
		r.total_flops += l.flops;
		r.dense_flops += costs[i].flops_dense();
		r.total_power += l.power;
		r.layers.push_back(std::move(l));
	}
	r.flops_ratio = r.dense_flops > 0.0 ? r.total_flops / r.dense_flops : 1.0;
	return r;
}

// ---------------------------------------------------------------------------
// Reference architectures.
//
// Reported counts follow the usual vision-transformer convention of one FLOP
// per multiply-accumulate (this is what makes DeiT-S come out at 4.6G). They
// include the patch embedding, all qkv/proj/fc1/fc2 linears, the classifier
// head and the two attention products per block; layer norms, softmax, GELU
// and residual adds are ignored.

struct ArchSpec {
	std::string name;
	std::uint64_t embed_dim = 0;
	std::uint64_t num_heads = 0;
	std::uint64_t depth = 0;
	std::uint64_t mlp_ratio = 4;
	std::uint64_t num_classes = 1000;
	std::uint64_t image_size = 224;
	std::uint64_t patch_size = 16;
	std::uint64_t in_channels = 3;
};

inline ArchSpec named_arch(const std::string& name, std::uint64_t image_size = 224, std::uint64_t patch = 16) {
	require(patch >= 1 && image_size % patch == 0, "image_size must be a multiple of the patch size");
	if (name == "deit-small") return {name, 384, 6, 12, 4, 1000, image_size, patch, 3};
	if (name == "deit-base") return {name, 768, 12, 12, 4, 1000, image_size, patch, 3};
	if (name == "deit-tiny") return {name, 192, 3, 12, 4, 1000, image_size, patch, 3};
	throw precondition_error("unknown architecture '" + name + "' (expected deit-tiny, deit-small or deit-base)");
}

struct ArchCosts {
	std::vector<LayerCost> linears;
	double attention_macs = 0.0;  // QK^T and AV over all blocks
};

inline ArchCosts arch_costs(const ArchSpec& a) {
	const std::uint64_t patches = (a.image_size / a.patch_size) * (a.image_size / a.patch_size);
	const std::uint64_t tokens = patches + 1;  // class token
	const std::uint64_t D = a.embed_dim, H = a.mlp_ratio * D;
	ArchCosts c;
	c.linears.push_back({"patch_embed", patches, a.in_channels * a.patch_size * a.patch_size, D});
	for (std::uint64_t d = 0; d < a.depth; ++d) {
		const std::string p = "block" + std::to_string(d) + ".";
		c.linears.push_back({p + "attn.qkv", tokens, D, 3 * D});
		c.linears.push_back({p + "attn.proj", tokens, D, D});
		c.linears.push_back({p + "mlp.fc1", tokens, D, H});
		c.linears.push_back({p + "mlp.fc2", tokens, H, D});
		c.attention_macs += 2.0 * static_cast<double>(tokens * tokens * D);
	}
	c.linears.push_back({"head", 1, D, a.num_classes});
	return c;
}

/// FLOPs (one per MAC) with every linear layer pruned uniformly by `linear_alpha`;
/// attention products stay dense. Continuous in alpha (no block rounding).
inline double named_arch_flops(const std::string& arch, double linear_alpha = 0.0, std::uint64_t image_size = 224,
                               std::uint64_t patch = 16) {
	require(linear_alpha >= 0.0 && linear_alpha <= 1.0, "linear_alpha must lie in [0,1]");
	const ArchCosts c = arch_costs(named_arch(arch, image_size, patch));
	double macs = c.attention_macs;
	for (const auto& l : c.linears) macs += (1.0 - linear_alpha) * l.flops_dense() / 2.0;
	return macs;
}

} // namespace blockprune
