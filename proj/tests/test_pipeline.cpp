#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "support.hpp"

using namespace blockprune;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
	const fs::path dir = fs::temp_directory_path() / "blockprune_pipeline_test" / name;
	fs::remove_all(dir);
	fs::create_directories(dir);
	return dir;
}

std::string slurp(const fs::path& p) {
	std::ifstream is(p, std::ios::binary);
	REQUIRE(is);
	return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

RunConfig small_config(const fs::path& out) {
	RunConfig c;
	c.model.image_size = 8;
	c.model.patch_size = 4;
	c.model.embed_dim = 16;
	c.model.num_heads = 2;
	c.model.depth = 1;
	c.model.mlp_ratio = 2;
	c.model.num_classes = 4;
	c.samples_per_class = 40;
	c.grid = 10;
	c.calib = 32;
	c.train = {8, 0.05, 0.9, 16};
	c.finetune = {4, 0.01, 0.9, 16};
	c.audit.trials = 10;
	c.bench = {2, 0, 16};
	c.out = out;
	return c;
}

// Shared trained model for the stages downstream of training.
const fs::path& trained_model() {
	static const fs::path path = [] {
		const auto dir = scratch("trained");
		std::ostringstream log;
		run_train(small_config(dir), log);
		return dir / "model.bpmodel";
	}();
	return path;
}

double max_abs_in_zero_blocks(const ParamSet& before, const ParamSet& after, BlockShape shape) {
	double worst = 0.0;
	for (std::size_t i = 0; i < before.linears.size(); ++i) {
		const auto& w0 = before.linears[i].weight;
		if (!shape.divides(w0.rows(), w0.cols())) continue;
		const BlockMask m = mask_from_zero_blocks(w0, shape);
		const auto& w1 = after.linears[i].weight;
		for (std::size_t r = 0; r < w0.rows(); ++r)
			for (std::size_t c = 0; c < w0.cols(); ++c)
				if (!m.kept(r / shape.rows, c / shape.cols)) worst = std::max(worst, std::fabs(static_cast<double>(w1(r, c))));
	}
	return worst;
}

} // namespace

TEST_CASE("run config JSON round trip and validation") {
	const RunConfig c = small_config("some/out");
	const RunConfig back = run_config_from_json(to_json(c));
	CHECK(to_json(back) == to_json(c));
	CHECK(back.block == c.block);
	CHECK(back.finetune.epochs == 4);

	const auto dir = scratch("config");
	std::ofstream(dir / "model.json") << R"({"embed_dim": 8, "num_heads": 2})";
	std::ofstream(dir / "run.json") << R"({"model_config": "model.json", "out": "results", "flops_target": 0.25, "block": "2x4"})";
	const RunConfig loaded = load_run_config(dir / "run.json");
	CHECK(loaded.model.embed_dim == 8);
	CHECK(loaded.out == dir / "results");
	CHECK(loaded.flops_target == 0.25);
	CHECK(loaded.block == BlockShape{2, 4});

	std::ofstream(dir / "bad.json") << "{\"flops_target\": ";
	CHECK_THROWS_AS(load_run_config(dir / "bad.json"), precondition_error);
	CHECK_THROWS_AS(load_run_config(dir / "missing.json"), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"flops_target", 0.0}}), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"flops_target", 1.5}}), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"model_config", "nope.json"}}, dir), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"proxy", "hinge"}}), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"block", "4"}}), precondition_error);
	CHECK_THROWS_AS(run_config_from_json(nlohmann::json::array()), precondition_error);
}

TEST_CASE("calibration batch and gradient collection") {
	const RunConfig c = small_config(scratch("calib"));
	const DatasetSplit data = run_dataset(c);
	const Batch a = calibration_batch(data.train, 20, 3), b = calibration_batch(data.train, 20, 3);
	CHECK(a.size() == 20);
	CHECK(a.labels == b.labels);
	CHECK(a.images == b.images);
	CHECK(calibration_batch(data.train, data.train.size(), 3).size() == data.train.size());
	CHECK_THROWS_AS(calibration_batch(data.train, data.train.size() + 1, 3), precondition_error);

	const ParamSet p = load_model(trained_model()).params;
	const std::vector<std::size_t> layers{0, 2};
	const CalibrationGrads g = collect_gradients(p, a.slice(0, 5), layers, ProxyKind::cross_entropy);
	REQUIRE(g.per_sample.size() == 2);
	for (std::size_t l = 0; l < 2; ++l) {
		const auto& w = p.linears[layers[l]].weight;
		CHECK(g.per_sample[l].rows() == 5);
		CHECK(g.per_sample[l].cols() == w.size());
		CHECK(g.mean[l].rows() == w.rows());
		for (std::size_t i = 0; i < w.size(); ++i) {
			double acc = 0.0;
			for (std::size_t s = 0; s < 5; ++s) acc += g.per_sample[l](s, i);
			CHECK(g.mean[l].data()[i] == Catch::Approx(acc / 5.0).margin(1e-7));
		}
	}
	// One sample's row is that sample's own gradient.
	const CalibrationGrads one = collect_gradients(p, a.slice(2, 3), layers, ProxyKind::cross_entropy);
	for (std::size_t i = 0; i < one.per_sample[1].cols(); ++i) CHECK(one.per_sample[1](0, i) == g.per_sample[1](2, i));
}

TEST_CASE("train: zero epochs saves the initial model") {
	RunConfig c = small_config(scratch("train0"));
	c.train.epochs = 0;
	std::ostringstream log;
	const TrainResult r = run_train(c, log);
	ToyViTConfig mc = c.model;
	mc.seed = derive_seed(c.seed, "init");
	std::vector<Matrix> got, want;
	load_model(c.out / "model.bpmodel").params.for_each_tensor([&](const std::string&, const Matrix& m) { got.push_back(m); });
	init_params(mc).for_each_tensor([&](const std::string&, const Matrix& m) { want.push_back(m); });
	CHECK(got == want);
	CHECK(r.epochs.empty());
	CHECK(fs::exists(c.out / "train_log.json"));
}

TEST_CASE("train is deterministic per seed") {
	const auto dir = scratch("train_det");
	RunConfig c = small_config(dir / "a");
	c.train.epochs = 2;
	std::ostringstream log;
	run_train(c, log);
	c.out = dir / "b";
	run_train(c, log);
	CHECK(slurp(dir / "a" / "model.bpmodel") == slurp(dir / "b" / "model.bpmodel"));
	CHECK(slurp(dir / "a" / "train_log.json") == slurp(dir / "b" / "train_log.json"));
	c.out = dir / "c";
	c.seed = 1;
	run_train(c, log);
	CHECK(slurp(dir / "a" / "model.bpmodel") != slurp(dir / "c" / "model.bpmodel"));
}

TEST_CASE("train aborts on divergence") {
	RunConfig c = small_config(scratch("diverge"));
	c.train = {3, 1e6, 0.9, 16};
	std::ostringstream log;
	try {
		run_train(c, log);
		FAIL("expected divergence");
	} catch (const std::runtime_error& e) {
		CHECK(std::string(e.what()).find("diverged") != std::string::npos);
	}
}

TEST_CASE("eval reproduces the training accuracy and chance level") {
	const auto dir = scratch("eval");
	const nlohmann::json log_json = nlohmann::json::parse(slurp(trained_model().parent_path() / "train_log.json"));
	RunConfig c = small_config(dir);
	std::ostringstream log;
	const EvalResult r = run_eval(c, trained_model(), log);
	CHECK(r.accuracy == log_json["test_accuracy"].get<double>());
	CHECK(r.report.flops_ratio == 1.0);
	const auto ej = nlohmann::json::parse(slurp(dir / "eval.json"));
	CHECK(ej["accuracy"] == r.accuracy);
	CHECK(ej["block_shape"] == "4x4");

	// Untrained weights on a balanced 10-class test set.
	RunConfig chance;
	chance.train.epochs = 0;
	chance.out = dir / "chance";
	run_train(chance, log);
	const double acc = run_eval(chance, chance.out / "model.bpmodel", log).accuracy;
	CHECK(acc >= 0.05);
	CHECK(acc <= 0.15);
}

TEST_CASE("prune at R=1 leaves the model untouched") {
	RunConfig c = small_config(scratch("prune1"));
	c.flops_target = 1.0;
	std::ostringstream log;
	const PruneResult r = run_prune(c, trained_model(), {}, log);
	for (double a : r.plan.alphas) CHECK(a == 0.0);
	CHECK(slurp(c.out / "pruned.bpmodel") == slurp(trained_model()));
}

TEST_CASE("prune at R=0.5 meets the budget and re-applies idempotently") {
	const auto dir = scratch("prune05");
	RunConfig c = small_config(dir / "a");
	std::ostringstream log;
	const PruneResult r = run_prune(c, trained_model(), {}, log);
	const double step = 1.0 / c.grid;
	CHECK(r.plan.achieved_flops_ratio <= 0.5);
	CHECK(r.plan.achieved_flops_ratio >= 0.5 - step);

	const auto pj = nlohmann::json::parse(slurp(c.out / "plan.json"));
	CHECK(pj["layers"].size() == r.costs.prunable.size());
	CHECK(fs::exists(c.out / "plan.csv"));
	CHECK(fs::exists(c.out / "cost_report.json"));
	for (const auto& l : r.plan.layer_ids) {
		const std::string csv = slurp(c.out / "curves" / (l + ".csv"));
		CHECK(std::count(csv.begin(), csv.end(), '\n') == c.grid + 2);
	}

	// The stored model re-validates and carries exactly the planned sparsity.
	const ModelFile mf = load_model(c.out / "pruned.bpmodel");
	REQUIRE(mf.block_shape.has_value());
	const auto seen = observed_alphas(mf.params, r.costs, *mf.block_shape);
	for (std::size_t l = 0; l < seen.size(); ++l)
		CHECK(r.costs.costs[l].kept_blocks(seen[l], c.block) == r.costs.costs[l].kept_blocks(r.plan.alphas[l], c.block));

	PruneOptions again;
	again.plan = c.out / "plan.json";
	RunConfig c2 = small_config(dir / "b");
	const PruneResult r2 = run_prune(c2, trained_model(), again, log);
	CHECK(r2.plan.alphas == r.plan.alphas);
	CHECK(slurp(c2.out / "pruned.bpmodel") == slurp(c.out / "pruned.bpmodel"));

	// Eval on the pruned model reports the planned FLOPs ratio.
	const EvalResult e = run_eval(c, c.out / "pruned.bpmodel", log);
	CHECK(std::fabs(e.report.flops_ratio - r.plan.achieved_flops_ratio) <= step);
	CHECK(e.report.flops_ratio == Catch::Approx(r.plan.achieved_flops_ratio).epsilon(1e-12));
}

TEST_CASE("prune is deterministic byte for byte") {
	const auto dir = scratch("prune_det");
	std::ostringstream log;
	RunConfig c = small_config(dir / "a");
	run_prune(c, trained_model(), {}, log);
	c.out = dir / "b";
	run_prune(c, trained_model(), {}, log);
	CHECK(slurp(dir / "a" / "plan.json") == slurp(dir / "b" / "plan.json"));
	CHECK(slurp(dir / "a" / "pruned.bpmodel") == slurp(dir / "b" / "pruned.bpmodel"));
}

TEST_CASE("prune rejects infeasible budgets and odd block shapes") {
	RunConfig c = small_config(scratch("prune_bad"));
	const ParamSet p = load_model(trained_model()).params;
	const ToyCosts tc = toy_costs(p, c.block);
	const double floor = flops_floor(tc.costs, c.block, tc.fixed_flops);
	REQUIRE(floor > 0.0);
	c.flops_target = floor / 2.0;
	std::ostringstream log;
	try {
		run_prune(c, trained_model(), {}, log);
		FAIL("expected infeasible_error");
	} catch (const infeasible_error& e) {
		CHECK(e.achievable_floor() == Catch::Approx(floor));
	}

	c.flops_target = 0.5;
	c.block = {3, 3};
	CHECK_THROWS_AS(run_prune(c, trained_model(), {}, log), precondition_error);

	c.block = {4, 4};
	c.model.num_classes = 5;
	CHECK_THROWS_AS(run_prune(c, trained_model(), {}, log), precondition_error);
}

TEST_CASE("prune writes gradient stash and audit on request") {
	RunConfig c = small_config(scratch("prune_extras"));
	PruneOptions opt;
	opt.dump_grads = true;
	opt.audit = true;
	std::ostringstream log;
	const PruneResult r = run_prune(c, trained_model(), opt, log);
	const Container g = read_container(c.out / "grads.bpmodel");
	CHECK(g.meta["calib"] == c.calib);
	CHECK(g.meta["layers"].size() == r.costs.prunable.size());
	REQUIRE(r.audit.has_value());
	const auto aj = nlohmann::json::parse(slurp(c.out / "crossterm_audit.json"));
	const std::size_t l = r.costs.prunable.size();
	CHECK(aj["pairs"].size() == l * (l - 1) / 2);
	CHECK(aj.contains("additivity_ratio"));
}

TEST_CASE("finetune keeps pruned blocks at zero") {
	const auto dir = scratch("finetune");
	RunConfig c = small_config(dir);
	std::ostringstream log;
	run_prune(c, trained_model(), {}, log);
	const ParamSet pruned = load_model(dir / "pruned.bpmodel").params;

	const FinetuneResult r = run_finetune(c, dir / "pruned.bpmodel", log);
	CHECK(max_abs_in_zero_blocks(pruned, r.params, c.block) == 0.0);
	CHECK(max_abs_in_zero_blocks(pruned, load_model(dir / "finetuned.bpmodel").params, c.block) == 0.0);
	CHECK(r.accuracy_after >= r.accuracy_before);
	CHECK(r.epochs.size() == 4);

	RunConfig zero = c;
	zero.finetune.epochs = 0;
	zero.out = dir / "zero";
	run_finetune(zero, dir / "pruned.bpmodel", log);
	CHECK(slurp(zero.out / "finetuned.bpmodel") == slurp(dir / "pruned.bpmodel"));

	const auto plain = dir / "plain.bpmodel";
	save_model(plain, pruned);
	CHECK_THROWS_AS(run_finetune(c, plain, log), precondition_error);
}

TEST_CASE("bench MAC counts") {
	const auto dir = scratch("bench");
	RunConfig c = small_config(dir);
	std::ostringstream log;
	const PruneResult pr = run_prune(c, trained_model(), {}, log);
	const auto rows = run_bench(c, dir / "pruned.bpmodel", log);
	REQUIRE(rows.size() == 3);
	CHECK(rows[0].variant == "dense");
	CHECK(rows[1].row.macs == rows[0].row.macs);

	// Pruned MACs drop by exactly the removed blocks' share.
	const std::size_t batch = std::min(c.bench.batch, run_dataset(c).test.size());
	std::uint64_t removed = 0;
	for (std::size_t l = 0; l < pr.costs.costs.size(); ++l) {
		const auto& lc = pr.costs.costs[l];
		const std::size_t nb = lc.num_blocks(c.block);
		removed += lc.m * batch * c.block.area() * (nb - lc.kept_blocks(pr.plan.alphas[l], c.block));
	}
	CHECK(rows[2].row.macs == rows[0].row.macs - removed);
	for (const auto& r : rows) CHECK(r.row.wall_time_ns > 0);

	const std::string csv = slurp(dir / "bench.csv");
	CHECK(csv.rfind("variant,density,wall_time_ns,macs\n", 0) == 0);
	CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

	const auto kr = run_kernel_bench(c, 64, {1.0, 0.5}, log);
	CHECK(2 * kr[1].macs == kr[0].macs);
	CHECK(fs::exists(dir / "kernel_bench.csv"));
}

#ifdef BLOCKPRUNE_CLI_PATH
TEST_CASE("command line exit codes") {
	const auto dir = scratch("cli");
	RunConfig c = small_config(dir / "out");
	c.train.epochs = 1;
	{
		std::ofstream os(dir / "run.json");
		nlohmann::json j = to_json(c);
		j["out"] = "out";
		os << j.dump(2);
	}
	const std::string cli = BLOCKPRUNE_CLI_PATH;
	const std::string cfg = (dir / "run.json").string();
	auto run = [&](const std::string& args) {
		const int status = std::system((cli + " " + args + " > " + (dir / "log.txt").string() + " 2>&1").c_str());
		return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
	};
	CHECK(run("--help") == 0);
	CHECK(run("") == 2);
	CHECK(run("train") == 2);
	CHECK(run("train --config " + cfg + " --block 4") == 2);
	CHECK(run("train --config " + (dir / "nope.json").string()) == 2);
	CHECK(run("train --config " + cfg) == 0);
	CHECK(fs::exists(dir / "out" / "model.bpmodel"));
	CHECK(run("prune --config " + cfg + " --flops-target 0.01") == 3);
	CHECK(run("prune --config " + cfg + " --flops-target 0.6 --grid 5") == 0);
	CHECK(run("finetune --config " + cfg) == 0);
	CHECK(run("eval --config " + cfg) == 0);
	CHECK(run("bench --config " + cfg) == 0);
	CHECK(run("eval --config " + cfg + " --model " + (dir / "missing.bpmodel").string()) == 2);
}
#endif
