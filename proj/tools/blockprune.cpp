#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "blockprune.hpp"

namespace bp = blockprune;

namespace {

struct Overrides {
	std::string config;
	std::string model;
	std::optional<double> flops_target, beta, kappa;
	std::optional<std::string> block, out;
	std::optional<int> grid;
	std::optional<std::size_t> calib;
	std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Overrides& o, bool with_model) {
	cmd->add_option("--config", o.config, "run config (JSON)")->required();
	if (with_model) cmd->add_option("--model", o.model, "input .bpmodel");
	cmd->add_option("--flops-target", o.flops_target, "FLOPs ratio to keep, in (0,1]");
	cmd->add_option("--beta", o.beta, "power weight");
	cmd->add_option("--block", o.block, "block shape BRxBC");
	cmd->add_option("--grid", o.grid, "grid size K");
	cmd->add_option("--kappa", o.kappa, "Fisher damping");
	cmd->add_option("--calib", o.calib, "calibration samples");
	cmd->add_option("--seed", o.seed, "seed");
	cmd->add_option("--out", o.out, "output directory");
}

bp::RunConfig resolve(const Overrides& o) {
	bp::RunConfig c = bp::load_run_config(o.config);
	if (o.flops_target) c.flops_target = *o.flops_target;
	if (o.beta) c.beta = *o.beta;
	if (o.block) c.block = bp::parse_block_shape(*o.block);
	if (o.grid) c.grid = *o.grid;
	if (o.kappa) c.kappa = *o.kappa;
	if (o.calib) c.calib = *o.calib;
	if (o.seed) c.seed = *o.seed;
	if (o.out) c.out = *o.out;
	c.validate();
	return c;
}

// Each stage reads the previous stage's output by default.
std::filesystem::path model_path(const Overrides& o, const bp::RunConfig& c, const char* fallback) {
	return o.model.empty() ? c.out / fallback : std::filesystem::path(o.model);
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Block-structured pruning for small vision transformers"};
	app.require_subcommand(1);
	Overrides o;

	auto* train = app.add_subcommand("train", "train the toy model");
	add_common(train, o, false);

	auto* prune = app.add_subcommand("prune", "allocate ratios and prune");
	add_common(prune, o, true);
	std::string plan;
	bool dump_grads = false, audit = false;
	prune->add_option("--plan", plan, "re-apply the ratios of an existing plan.json");
	prune->add_flag("--dump-grads", dump_grads, "write per-sample gradients to grads.bpmodel");
	prune->add_flag("--audit", audit, "write crossterm_audit.json");

	auto* finetune = app.add_subcommand("finetune", "finetune with pruned blocks held at zero");
	add_common(finetune, o, true);

	auto* eval = app.add_subcommand("eval", "accuracy and cost report");
	add_common(eval, o, true);

	auto* bench = app.add_subcommand("bench", "dense vs block-sparse timing");
	add_common(bench, o, true);
	std::size_t kernel = 0;
	bench->add_option("--kernel", kernel, "also sweep bsr_matmul on N^3 operands at densities 1, 0.5, 0.25");

	try {
		app.parse(argc, argv);
	} catch (const CLI::CallForHelp& e) {
		return app.exit(e);
	} catch (const CLI::ParseError& e) {
		app.exit(e);
		return 2;
	}

	try {
		const bp::RunConfig c = resolve(o);
		if (train->parsed()) {
			bp::run_train(c, std::cout);
		} else if (prune->parsed()) {
			bp::PruneOptions po;
			if (!plan.empty()) po.plan = plan;
			po.dump_grads = dump_grads;
			po.audit = audit;
			bp::run_prune(c, model_path(o, c, "model.bpmodel"), po, std::cout);
		} else if (finetune->parsed()) {
			bp::run_finetune(c, model_path(o, c, "pruned.bpmodel"), std::cout);
		} else if (eval->parsed()) {
			bp::run_eval(c, model_path(o, c, "finetuned.bpmodel"), std::cout);
		} else if (bench->parsed()) {
			bp::run_bench(c, model_path(o, c, "pruned.bpmodel"), std::cout);
			if (kernel > 0) bp::run_kernel_bench(c, kernel, {1.0, 0.5, 0.25}, std::cout);
		}
	} catch (const bp::infeasible_error& e) {
		std::cerr << "infeasible: " << e.what() << '\n';
		return 3;
	} catch (const bp::precondition_error& e) {
		std::cerr << "error: " << e.what() << '\n';
		return 2;
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << '\n';
		return 1;
	}
	return EXIT_SUCCESS;
}
