#pragma once

// train -> calibrate -> curves -> allocate -> prune -> finetune -> eval -> bench.
// Every command reads a RunConfig, takes its inputs from files and writes its
// outputs under RunConfig::out.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "allocator.hpp"
#include "audit.hpp"
#include "bench.hpp"
#include "container.hpp"
#include "curves.hpp"
#include "dataset.hpp"
#include "fisher.hpp"
#include "model.hpp"
#include "power.hpp"
#include "scoring.hpp"
#include "train.hpp"

namespace blockprune {

namespace fs = std::filesystem;

struct TrainSettings {
	int epochs = 20;
	double lr = 0.05;
	double momentum = 0.9;
	std::size_t batch_size = 32;
};

struct AuditSettings {
	bool enabled = false;
	std::size_t trials = 100;
	double max_alpha = 0.5;
};

struct BenchSettings {
	int repetitions = 20;
	int warmup = 3;
	std::size_t batch = 64;
};

struct RunConfig {
	ToyViTConfig model;
	std::optional<fs::path> model_config;  // JSON file overriding `model`
	int samples_per_class = 200;
	BlockShape block{4, 4};
	int grid = kDefaultGrid;
	double flops_target = 0.5;
	double beta = 0.0;
	double kappa = kDefaultKappa;
	std::size_t calib = 256;
	std::size_t dense_cap = kDefaultDenseCap;
	TrainSettings train;
	TrainSettings finetune{20, 0.01, 0.9, 32};
	AuditSettings audit;
	BenchSettings bench;
	ProxyKind proxy = ProxyKind::cross_entropy;
	std::uint64_t seed = 0;
	fs::path out = "out";

	void validate() const {
		model.validate();
		if (model_config) require(fs::exists(*model_config), "model config '" + model_config->string() + "' does not exist");
		require(samples_per_class >= 1, "samples_per_class must be >= 1");
		block.validate();
		require(grid >= 1, "grid size K must be >= 1");
		require(flops_target > 0.0 && flops_target <= 1.0, "flops_target must lie in (0,1]");
		require(beta >= 0.0, "beta must be >= 0");
		require(kappa >= 0.0, "kappa must be >= 0");
		require(calib >= 1, "calibration size must be >= 1");
		for (const auto* t : {&train, &finetune}) {
			require(t->epochs >= 0, "epochs must be >= 0");
			require(t->lr >= 0.0 && t->batch_size >= 1, "lr must be >= 0 and batch_size >= 1");
		}
		require(audit.trials >= 2, "audit.trials must be >= 2");
		require(bench.repetitions >= 1 && bench.warmup >= 0 && bench.batch >= 1, "bench settings must be positive");
	}
};

namespace detail {

inline TrainSettings train_settings_from_json(const nlohmann::json& j, TrainSettings t) {
	t.epochs = j.value("epochs", t.epochs);
	t.lr = j.value("lr", t.lr);
	t.momentum = j.value("momentum", t.momentum);
	t.batch_size = j.value("batch_size", t.batch_size);
	return t;
}

inline nlohmann::json to_json(const TrainSettings& t) {
	return {{"epochs", t.epochs}, {"lr", t.lr}, {"momentum", t.momentum}, {"batch_size", t.batch_size}};
}

inline ProxyKind parse_proxy(const std::string& s) {
	if (s == "cross_entropy") return ProxyKind::cross_entropy;
	if (s == "logit_l2") return ProxyKind::logit_l2;
	throw precondition_error("unknown proxy '" + s + "' (expected cross_entropy or logit_l2)");
}

} // namespace detail

/// Relative paths inside the file resolve against `base_dir`.
inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
	require(j.is_object(), "run config must be a JSON object");
	RunConfig c;
	if (j.contains("model")) c.model = toy_config_from_json(j["model"]);
	if (j.contains("model_config")) {
		c.model_config = base_dir / j["model_config"].get<std::string>();
		require(fs::exists(*c.model_config), "model config '" + c.model_config->string() + "' does not exist");
		std::ifstream in(*c.model_config);
		c.model = toy_config_from_json(nlohmann::json::parse(in));
	}
	c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
	if (j.contains("block")) c.block = parse_block_shape(j["block"].get<std::string>());
	c.grid = j.value("grid", c.grid);
	c.flops_target = j.value("flops_target", c.flops_target);
	c.beta = j.value("beta", c.beta);
	c.kappa = j.value("kappa", c.kappa);
	c.calib = j.value("calib", c.calib);
	c.dense_cap = j.value("dense_cap", c.dense_cap);
	if (j.contains("train")) c.train = detail::train_settings_from_json(j["train"], c.train);
	if (j.contains("finetune")) c.finetune = detail::train_settings_from_json(j["finetune"], c.finetune);
	if (j.contains("audit")) {
		const auto& a = j["audit"];
		c.audit.enabled = a.value("enabled", c.audit.enabled);
		c.audit.trials = a.value("trials", c.audit.trials);
		c.audit.max_alpha = a.value("max_alpha", c.audit.max_alpha);
	}
	if (j.contains("bench")) {
		const auto& b = j["bench"];
		c.bench.repetitions = b.value("repetitions", c.bench.repetitions);
		c.bench.warmup = b.value("warmup", c.bench.warmup);
		c.bench.batch = b.value("batch", c.bench.batch);
	}
	if (j.contains("proxy")) c.proxy = detail::parse_proxy(j["proxy"].get<std::string>());
	c.seed = j.value("seed", c.seed);
	if (j.contains("out")) c.out = base_dir / j["out"].get<std::string>();
	c.validate();
	return c;
}

inline RunConfig load_run_config(const fs::path& path) {
	require(fs::exists(path), "config '" + path.string() + "' does not exist");
	std::ifstream in(path);
	nlohmann::json j;
	try {
		j = nlohmann::json::parse(in);
	} catch (const nlohmann::json::parse_error& e) {
		throw precondition_error("config '" + path.string() + "': " + e.what());
	}
	return run_config_from_json(j, path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& c) {
	return {{"model", to_json(c.model)},
	        {"samples_per_class", c.samples_per_class},
	        {"block", c.block.str()},
	        {"grid", c.grid},
	        {"flops_target", c.flops_target},
	        {"beta", c.beta},
	        {"kappa", c.kappa},
	        {"calib", c.calib},
	        {"dense_cap", c.dense_cap},
	        {"train", detail::to_json(c.train)},
	        {"finetune", detail::to_json(c.finetune)},
	        {"audit", {{"enabled", c.audit.enabled}, {"trials", c.audit.trials}, {"max_alpha", c.audit.max_alpha}}},
	        {"bench", {{"repetitions", c.bench.repetitions}, {"warmup", c.bench.warmup}, {"batch", c.bench.batch}}},
	        {"proxy", c.proxy == ProxyKind::cross_entropy ? "cross_entropy" : "logit_l2"},
	        {"seed", c.seed},
	        {"out", c.out.string()}};
}

inline DatasetSplit run_dataset(const RunConfig& c) {
	return synth_dataset(c.model.num_classes, c.samples_per_class, static_cast<std::size_t>(c.model.image_size),
	                     derive_seed(c.seed, "data"));
}

// ---------------------------------------------------------------------------
// Cost model of the toy network, per image.

struct ToyCosts {
	std::vector<std::size_t> prunable;  // indices into ParamSet::linears
	std::vector<LayerCost> costs;       // aligned with prunable
	double fixed_flops = 0.0;           // attention products plus layers held dense
};

/// Layers whose weight is not divisible by `shape` are held dense and their
/// FLOPs move to the fixed part.
inline ToyCosts toy_costs(const ParamSet& params, BlockShape shape) {
	shape.validate();
	const auto& cfg = params.config;
	const auto Tn = static_cast<std::uint64_t>(cfg.tokens()), D = static_cast<std::uint64_t>(cfg.embed_dim);
	ToyCosts out;
	out.fixed_flops = 2.0 * static_cast<double>(cfg.depth) * 2.0 * static_cast<double>(Tn * Tn * D);
	for (std::size_t i = 0; i < params.linears.size(); ++i) {
		const auto& w = params.linears[i].weight;
		const LayerCost cost{params.linears[i].id, i == params.head_index() ? 1 : Tn, w.rows(), w.cols()};
		if (shape.divides(w.rows(), w.cols())) {
			out.prunable.push_back(i);
			out.costs.push_back(cost);
		} else {
			out.fixed_flops += cost.flops_dense();
		}
	}
	return out;
}

/// Pruning ratio implied by the zero blocks of every prunable layer.
inline std::vector<double> observed_alphas(const ParamSet& params, const ToyCosts& tc, BlockShape shape) {
	std::vector<double> alphas;
	for (std::size_t i : tc.prunable) {
		const BlockMask m = mask_from_zero_blocks(params.linears[i].weight, shape);
		alphas.push_back(static_cast<double>(m.num_blocks() - m.kept_count()) / static_cast<double>(m.num_blocks()));
	}
	return alphas;
}

inline MaskSet masks_from_zero_blocks(const ParamSet& params, BlockShape shape) {
	MaskSet masks(params.linears.size());
	for (std::size_t i = 0; i < params.linears.size(); ++i) {
		const auto& w = params.linears[i].weight;
		if (shape.divides(w.rows(), w.cols())) masks[i] = LayerMask{shape, mask_from_zero_blocks(w, shape)};
	}
	return masks;
}

// ---------------------------------------------------------------------------
// Calibration gradients.

struct CalibrationGrads {
	std::vector<std::size_t> layers;  // indices into ParamSet::linears
	std::vector<Matrix> per_sample;   // N x D per layer, one flattened weight gradient per row
	std::vector<Matrix> mean;         // shaped like the weight
};

/// Per-sample weight gradients of the scalar proxy, one backward per sample.
inline CalibrationGrads collect_gradients(const ParamSet& params, const Batch& calib, const std::vector<std::size_t>& layers,
                                          ProxyKind kind) {
	require(calib.size() >= 1, "calibration set is empty");
	CalibrationGrads g;
	g.layers = layers;
	for (std::size_t i : layers) {
		const auto& w = params.linears[i].weight;
		g.per_sample.emplace_back(calib.size(), w.size());
		g.mean.emplace_back(w.rows(), w.cols());
	}
	for (std::size_t s = 0; s < calib.size(); ++s) {
		const Batch one = calib.slice(s, 1);
		const auto fwd = forward(params, one);
		const auto proxy = scalar_proxy(fwd.logits, one.labels, kind);
		const ParamSet grad = backward(params, fwd.cache, proxy.grad);
		for (std::size_t l = 0; l < layers.size(); ++l) {
			const auto src = grad.linears[layers[l]].weight.data();
			std::copy(src.begin(), src.end(), g.per_sample[l].row(s).begin());
		}
	}
	for (std::size_t l = 0; l < layers.size(); ++l) {
		std::vector<double> acc(g.mean[l].size(), 0.0);
		for (std::size_t s = 0; s < calib.size(); ++s) {
			const auto row = g.per_sample[l].row(s);
			for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += row[k];
		}
		for (std::size_t k = 0; k < acc.size(); ++k)
			g.mean[l].data()[k] = static_cast<float>(acc[k] / static_cast<double>(calib.size()));
	}
	return g;
}

/// First `n` samples of a seeded permutation of the training split.
inline Batch calibration_batch(const Batch& train, std::size_t n, std::uint64_t seed) {
	require(n <= train.size(), "calibration size " + std::to_string(n) + " exceeds the " + std::to_string(train.size()) +
	                               " training samples");
	std::vector<std::size_t> idx(train.size());
	std::iota(idx.begin(), idx.end(), std::size_t{0});
	Rng rng = make_rng(seed, "calib");
	std::shuffle(idx.begin(), idx.end(), rng);
	idx.resize(n);
	return train.subset(idx);
}

// ---------------------------------------------------------------------------
// Commands.

namespace detail {

inline void write_json(const fs::path& path, const nlohmann::json& j) {
	std::ofstream os(path, std::ios::binary);
	require(static_cast<bool>(os), "cannot write '" + path.string() + "'");
	os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
	require(fs::exists(path), "'" + path.string() + "' does not exist");
	std::ifstream in(path);
	try {
		return nlohmann::json::parse(in);
	} catch (const nlohmann::json::parse_error& e) {
		throw precondition_error("'" + path.string() + "': " + e.what());
	}
}

inline SgdConfig sgd_config(const TrainSettings& t, std::uint64_t seed, std::string_view stream, ProxyKind loss) {
	return {t.epochs, t.lr, t.momentum, t.batch_size, derive_seed(seed, stream), loss};
}

} // namespace detail

struct TrainResult {
	ParamSet params;
	std::vector<EpochStats> epochs;
	double train_accuracy = 0.0;
	double test_accuracy = 0.0;
};

/// Writes model.bpmodel and train_log.json.
inline TrainResult run_train(const RunConfig& c, std::ostream& log) {
	c.validate();
	fs::create_directories(c.out);
	const DatasetSplit data = run_dataset(c);
	ToyViTConfig mc = c.model;
	mc.seed = derive_seed(c.seed, "init");
	TrainResult r;
	r.params = sgd_finetune(init_params(mc), {}, data.train, detail::sgd_config(c.train, c.seed, "train", ProxyKind::cross_entropy),
	                        [&](const EpochStats& e) {
		                        r.epochs.push_back(e);
		                        log << "epoch " << e.epoch + 1 << "/" << c.train.epochs << "  loss " << e.mean_loss << '\n';
	                        });
	r.train_accuracy = evaluate_accuracy(r.params, data.train);
	r.test_accuracy = evaluate_accuracy(r.params, data.test);
	log << "train accuracy " << r.train_accuracy << "  test accuracy " << r.test_accuracy << '\n';

	save_model(c.out / "model.bpmodel", r.params, c.block);
	nlohmann::json j;
	j["epochs"] = nlohmann::json::array();
	for (const auto& e : r.epochs) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}});
	j["train_accuracy"] = r.train_accuracy;
	j["test_accuracy"] = r.test_accuracy;
	detail::write_json(c.out / "train_log.json", j);
	return r;
}

struct PruneOptions {
	std::optional<fs::path> plan;  // re-apply the ratios of an existing plan.json
	bool dump_grads = false;
	bool audit = false;
};

struct PruneResult {
	ParamSet pruned;
	AllocationPlan plan;
	ToyCosts costs;
	std::vector<DistortionCurve> curves;
	std::optional<CrossTermReport> audit;
};

/// Writes pruned.bpmodel, plan.json, plan.csv, cost_report.json and one
/// curves/<layer>.csv per prunable layer (plus crossterm_audit.json and
/// grads.bpmodel on request).
inline PruneResult run_prune(const RunConfig& c, const fs::path& model_path, const PruneOptions& opt, std::ostream& log) {
	c.validate();
	const ModelFile mf = load_model(model_path);
	const ParamSet& params = mf.params;
	const BlockShape shape = c.block;
	const DatasetSplit data = run_dataset(c);
	require(params.config.num_classes == c.model.num_classes && params.config.image_size == c.model.image_size,
	        "model '" + model_path.string() + "' does not match the configured dataset");

	PruneResult r;
	r.costs = toy_costs(params, shape);
	require(!r.costs.prunable.empty(), "no layer is divisible by block shape " + shape.str());
	for (std::size_t i = 0; i < params.linears.size(); ++i)
		if (std::find(r.costs.prunable.begin(), r.costs.prunable.end(), i) == r.costs.prunable.end())
			log << "layer " << params.linears[i].id << " (" << params.linears[i].weight.shape_str()
			    << ") is not divisible by " << shape.str() << "; kept dense\n";

	const Batch calib = calibration_batch(data.train, c.calib, c.seed);
	log << "collecting " << calib.size() << " per-sample gradients\n";
	const CalibrationGrads grads = collect_gradients(params, calib, r.costs.prunable, c.proxy);

	std::vector<std::vector<std::size_t>> orders;
	for (std::size_t l = 0; l < r.costs.prunable.size(); ++l) {
		const auto& lin = params.linears[r.costs.prunable[l]];
		if (opt.plan) {
			orders.push_back(prune_order(block_pool(taylor_score(lin.weight, grads.mean[l]), shape)));
			continue;
		}
		const LayerProblem problem =
		    make_layer_problem(lin.id, lin.weight, grads.mean[l], grads.per_sample[l], shape, c.kappa, c.dense_cap);
		r.curves.push_back(delta_curve_incremental(problem, c.grid));
		orders.push_back(problem.order);
		log << "curve " << lin.id << ": delta(1) = " << r.curves.back().delta.back() << '\n';
	}

	if (opt.plan) {
		const nlohmann::json pj = detail::read_json(*opt.plan);
		require(pj.contains("layers") && pj["layers"].is_array(), "plan '" + opt.plan->string() + "' has no layer list");
		std::vector<double> alphas(r.costs.prunable.size(), -1.0);
		for (const auto& e : pj["layers"]) {
			const auto id = e.at("id").get<std::string>();
			for (std::size_t l = 0; l < r.costs.costs.size(); ++l)
				if (r.costs.costs[l].layer_id == id) alphas[l] = e.at("alpha").get<double>();
		}
		for (std::size_t l = 0; l < alphas.size(); ++l)
			require(alphas[l] >= 0.0, "plan has no ratio for layer " + r.costs.costs[l].layer_id);
		r.plan.block_shape = shape;
		r.plan.beta = pj.value("beta", c.beta);
		r.plan.flops_target = pj.value("flops_target", c.flops_target);
		r.plan.lambda_star = pj.value("lambda_star", 0.0);
		for (std::size_t l = 0; l < alphas.size(); ++l) {
			r.plan.layer_ids.push_back(r.costs.costs[l].layer_id);
			r.plan.alphas.push_back(alphas[l]);
			r.plan.deltas.push_back(0.0);
		}
		r.plan.achieved_flops_ratio = flops_ratio(r.costs.costs, alphas, shape, r.costs.fixed_flops);
		r.plan.estimated_power = network_power(r.costs.costs, alphas, shape, 1.0);
	} else {
		r.plan = solve(r.curves, r.costs.costs, c.flops_target, c.beta, shape, {r.costs.fixed_flops});
	}
	log << "achieved FLOPs ratio " << r.plan.achieved_flops_ratio << " (target " << c.flops_target << ")\n";

	r.pruned = params;
	for (std::size_t l = 0; l < r.costs.prunable.size(); ++l) {
		auto& w = r.pruned.linears[r.costs.prunable[l]].weight;
		const BlockMask mask =
		    mask_from_order(w.rows() / shape.rows, w.cols() / shape.cols, orders[l], pruned_count(orders[l].size(), r.plan.alphas[l]));
		w = apply_mask(w, mask, shape);
	}

	fs::create_directories(c.out);
	save_model(c.out / "pruned.bpmodel", r.pruned, shape);
	if (!opt.plan) {
		detail::write_json(c.out / "plan.json", r.plan.to_json(r.costs.costs));
		std::ofstream csv(c.out / "plan.csv");
		r.plan.write_csv(csv, r.costs.costs);
		fs::create_directories(c.out / "curves");
		for (const auto& curve : r.curves) {
			std::ofstream os(c.out / "curves" / (curve.layer_id + ".csv"));
			write_curve_csv(os, curve);
		}
	}
	detail::write_json(c.out / "cost_report.json",
	                   cost_report(r.costs.costs, r.plan.alphas, shape, r.costs.fixed_flops).to_json());

	if (opt.dump_grads) {
		Container gc;
		gc.meta["calib"] = calib.size();
		gc.meta["layers"] = nlohmann::json::array();
		for (std::size_t l = 0; l < grads.layers.size(); ++l) {
			const auto& lin = params.linears[grads.layers[l]];
			gc.meta["layers"].push_back(lin.id);
			append_gradient_stash(gc, lin.id, grads.per_sample[l], lin.weight.rows(), lin.weight.cols());
		}
		write_container(c.out / "grads.bpmodel", gc);
	}

	if (opt.audit || c.audit.enabled) {
		std::vector<LayerProblem> problems;
		for (std::size_t l = 0; l < grads.layers.size(); ++l) {
			const auto& lin = params.linears[grads.layers[l]];
			problems.push_back(make_layer_problem(lin.id, lin.weight, grads.mean[l], grads.per_sample[l], shape, c.kappa, 0));
		}
		AuditOptions ao;
		ao.trials = c.audit.trials;
		ao.max_alpha = c.audit.max_alpha;
		ao.seed = derive_seed(c.seed, "audit");
		r.audit = crossterm_audit(problems, ao);
		r.audit->additivity_ratio = additivity_ratio(params, calib, problems, grads.layers, c.audit.trials, c.audit.max_alpha,
		                                             derive_seed(c.seed, "additivity"), c.proxy);
		detail::write_json(c.out / "crossterm_audit.json", r.audit->to_json());
		log << "cross-term audit: median |normalized| " << r.audit->median_abs_ratio << '\n';
	}
	return r;
}

struct FinetuneResult {
	ParamSet params;
	double accuracy_before = 0.0;
	double accuracy_after = 0.0;
	std::vector<EpochStats> epochs;
};

/// Masks come from the zero blocks at the model's stored block shape.
/// Writes finetuned.bpmodel and finetune_log.json.
inline FinetuneResult run_finetune(const RunConfig& c, const fs::path& model_path, std::ostream& log) {
	c.validate();
	const ModelFile mf = load_model(model_path);
	require(mf.block_shape.has_value(), "model '" + model_path.string() + "' has no stored block shape");
	const DatasetSplit data = run_dataset(c);
	const MaskSet masks = masks_from_zero_blocks(mf.params, *mf.block_shape);

	FinetuneResult r;
	r.accuracy_before = evaluate_accuracy(mf.params, data.test);
	log << "test accuracy before finetune " << r.accuracy_before << '\n';
	r.params = sgd_finetune(mf.params, masks, data.train, detail::sgd_config(c.finetune, c.seed, "finetune", ProxyKind::cross_entropy),
	                        [&](const EpochStats& e) {
		                        r.epochs.push_back(e);
		                        log << "epoch " << e.epoch + 1 << "/" << c.finetune.epochs << "  loss " << e.mean_loss << '\n';
	                        });
	r.accuracy_after = evaluate_accuracy(r.params, data.test);
	log << "test accuracy after finetune " << r.accuracy_after << '\n';

	fs::create_directories(c.out);
	save_model(c.out / "finetuned.bpmodel", r.params, mf.block_shape);
	nlohmann::json j;
	j["accuracy_before"] = r.accuracy_before;
	j["accuracy_after"] = r.accuracy_after;
	j["epochs"] = nlohmann::json::array();
	for (const auto& e : r.epochs) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}});
	detail::write_json(c.out / "finetune_log.json", j);
	return r;
}

struct EvalResult {
	double accuracy = 0.0;
	CostReport report;
};

/// Test accuracy plus the cost of the sparsity found in the weights.
/// Writes eval.json.
inline EvalResult run_eval(const RunConfig& c, const fs::path& model_path, std::ostream& log) {
	c.validate();
	const ModelFile mf = load_model(model_path);
	const DatasetSplit data = run_dataset(c);
	const BlockShape shape = mf.block_shape.value_or(c.block);
	const ToyCosts tc = toy_costs(mf.params, shape);
	EvalResult r;
	r.accuracy = evaluate_accuracy(mf.params, data.test);
	r.report = cost_report(tc.costs, observed_alphas(mf.params, tc, shape), shape, tc.fixed_flops);
	log << "test accuracy " << r.accuracy << "  FLOPs ratio " << r.report.flops_ratio << '\n';
	fs::create_directories(c.out);
	detail::write_json(c.out / "eval.json", {{"accuracy", r.accuracy}, {"block_shape", shape.str()}, {"cost", r.report.to_json()}});
	return r;
}

struct BenchVariant {
	std::string variant;
	BenchRow row;
};

/// End-to-end forward over a batch of test images: dense weights, BSR with
/// every block kept, and BSR of the model's own sparsity. Writes bench.csv.
inline std::vector<BenchVariant> run_bench(const RunConfig& c, const fs::path& model_path, std::ostream& log) {
	c.validate();
	const ModelFile mf = load_model(model_path);
	const BlockShape shape = mf.block_shape.value_or(c.block);
	const DatasetSplit data = run_dataset(c);
	const Batch x = data.test.slice(0, std::min(c.bench.batch, data.test.size()));
	const BenchOptions bo{c.bench.repetitions, c.bench.warmup, c.seed};

	SparseWeights<float> full(mf.params.linears.size()), own(mf.params.linears.size());
	double kept = 0.0, total = 0.0;
	for (std::size_t i = 0; i < mf.params.linears.size(); ++i) {
		const auto& w = mf.params.linears[i].weight;
		if (!shape.divides(w.rows(), w.cols())) continue;
		const BlockMask m = mask_from_zero_blocks(w, shape);
		full[i] = bsr_from_masked(w, BlockMask::ones(m.block_rows(), m.block_cols()), shape);
		own[i] = bsr_from_masked(w, m, shape);
		kept += static_cast<double>(m.kept_count());
		total += static_cast<double>(m.num_blocks());
	}

	std::vector<BenchVariant> rows;
	auto run = [&](const std::string& name, const SparseWeights<float>* sparse, double density) {
		MacCounter counter;
		forward(mf.params, x, ForwardOptions<float>{sparse, &counter});
		BenchRow row{density, 0, counter.macs};
		row.wall_time_ns = median_time_ns([&] { return forward(mf.params, x, ForwardOptions<float>{sparse, nullptr}); }, bo);
		rows.push_back({name, row});
		log << name << ": " << row.wall_time_ns << " ns, " << row.macs << " MACs\n";
	};
	run("dense", nullptr, 1.0);
	run("bsr_full", &full, 1.0);
	run("bsr_pruned", &own, total > 0.0 ? kept / total : 1.0);

	fs::create_directories(c.out);
	std::ofstream os(c.out / "bench.csv");
	os << "variant,density,wall_time_ns,macs\n";
	for (const auto& r : rows) os << r.variant << ',' << r.row.density << ',' << r.row.wall_time_ns << ',' << r.row.macs << '\n';
	return rows;
}

/// Kernel-level sweep of bsr_matmul on n^3 operands. Writes kernel_bench.csv.
inline std::vector<BenchRow> run_kernel_bench(const RunConfig& c, std::size_t n, const std::vector<double>& densities,
                                              std::ostream& log) {
	c.validate();
	const BenchOptions bo{c.bench.repetitions, c.bench.warmup, c.seed};
	const auto rows = bench_bsr(n, n, n, c.block, densities, bo);
	for (const auto& r : rows) log << "density " << r.density << ": " << r.wall_time_ns << " ns, " << r.macs << " MACs\n";
	fs::create_directories(c.out);
	std::ofstream os(c.out / "kernel_bench.csv");
	write_bench_csv(os, rows);
	return rows;
}

} // namespace blockprune
