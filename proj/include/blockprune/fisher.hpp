#pragma once

// Empirical Fisher surrogate for a layer Hessian:
//   F = kappa * I + (1/N) * sum_n g_n g_n^T
// held either as an explicit D x D matrix or implicitly as the N x D stash of
// per-sample gradients.

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "container.hpp"
#include "tensor.hpp"

namespace blockprune {

enum class FisherMode { dense, streaming };

inline constexpr double kDefaultKappa = 1e-4;
inline constexpr std::size_t kDefaultDenseCap = 4096;

struct FisherBlock {
	std::string layer_id;
	std::size_t d = 0;
	std::size_t n = 0;
	double kappa = 0.0;
	FisherMode mode = FisherMode::streaming;
	std::vector<double> dense;  // d x d, dense mode only
	std::vector<double> grads;  // n x d, streaming mode only

	std::span<const double> grad(std::size_t i) const { return {grads.data() + i * d, d}; }
};

/// Sparse vector given by its support; indices need not be sorted.
struct SparseVector {
	std::vector<std::size_t> index;
	std::vector<double> value;
};

/// `per_sample_grads` holds one flattened gradient per row. Dense mode is
/// chosen when d <= dense_cap.
inline FisherBlock build_fisher(const Matrix& per_sample_grads, double kappa, std::size_t dense_cap = kDefaultDenseCap,
                                std::string layer_id = {}) {
	require(per_sample_grads.rows() >= 1, "build_fisher: empty gradient set" + (layer_id.empty() ? "" : " for " + layer_id));
	require(kappa >= 0.0, "build_fisher: kappa must be >= 0");
	FisherBlock f;
	f.layer_id = std::move(layer_id);
	f.n = per_sample_grads.rows();
	f.d = per_sample_grads.cols();
	f.kappa = kappa;
	f.mode = f.d <= dense_cap ? FisherMode::dense : FisherMode::streaming;
	const std::size_t d = f.d;
	if (f.mode == FisherMode::streaming) {
		f.grads.assign(per_sample_grads.data().begin(), per_sample_grads.data().end());
		return f;
	}
	f.dense.assign(d * d, 0.0);
	const double inv_n = 1.0 / static_cast<double>(f.n);
	std::vector<double> g(d);
	for (std::size_t s = 0; s < f.n; ++s) {
		const auto row = per_sample_grads.row(s);
		for (std::size_t i = 0; i < d; ++i) g[i] = row[i];
		for (std::size_t i = 0; i < d; ++i) {
			const double gi = g[i] * inv_n;
			if (gi == 0.0) continue;
			double* h = f.dense.data() + i * d;
			for (std::size_t j = i; j < d; ++j) h[j] += gi * g[j];
		}
	}
	for (std::size_t i = 0; i < d; ++i) {
		f.dense[i * d + i] += kappa;
		for (std::size_t j = i + 1; j < d; ++j) f.dense[j * d + i] = f.dense[i * d + j];
	}
	return f;
}

/// g_n^T u for every stored sample (streaming mode).
inline std::vector<double> project(const FisherBlock& f, std::span<const double> u) {
	require(f.mode == FisherMode::streaming, "project: only streaming Fisher blocks keep per-sample gradients");
	require(u.size() == f.d, "project: vector length mismatch");
	std::vector<double> p(f.n, 0.0);
	for (std::size_t s = 0; s < f.n; ++s) {
		const auto g = f.grad(s);
		double acc = 0.0;
		for (std::size_t i = 0; i < f.d; ++i) acc += g[i] * u[i];
		p[s] = acc;
	}
	return p;
}

/// v^T F v; never negative.
inline double quad_form(const FisherBlock& f, std::span<const double> v) {
	require(v.size() == f.d, "quad_form: vector length " + std::to_string(v.size()) + " != " + std::to_string(f.d));
	double out = 0.0;
	if (f.mode == FisherMode::dense) {
		for (std::size_t i = 0; i < f.d; ++i) {
			if (v[i] == 0.0) continue;
			const double* h = f.dense.data() + i * f.d;
			double acc = 0.0;
			for (std::size_t j = 0; j < f.d; ++j) acc += h[j] * v[j];
			out += v[i] * acc;
		}
		return std::max(out, 0.0);
	}
	double sq = 0.0;
	for (double x : v) sq += x * x;
	double acc = 0.0;
	for (double p : project(f, v)) acc += p * p;
	return f.kappa * sq + acc / static_cast<double>(f.n);
}

namespace detail {

inline void check_sparse(const FisherBlock& f, const SparseVector& v) {
	require(v.index.size() == v.value.size(), "sparse vector index/value length mismatch");
	for (auto i : v.index) require(i < f.d, "sparse vector index out of range");
}

} // namespace detail

/// u^T F v, touching only the support of v. Streaming callers that already
/// hold g_n^T u can pass it as `u_proj` to skip the O(N d) projection.
inline double cross_form(const FisherBlock& f, std::span<const double> u, const SparseVector& v,
                         std::span<const double> u_proj = {}) {
	require(u.size() == f.d, "cross_form: vector length " + std::to_string(u.size()) + " != " + std::to_string(f.d));
	detail::check_sparse(f, v);
	if (f.mode == FisherMode::dense) {
		double out = 0.0;
		for (std::size_t k = 0; k < v.index.size(); ++k) {
			const double* h = f.dense.data() + v.index[k] * f.d;
			double acc = 0.0;
			for (std::size_t i = 0; i < f.d; ++i) acc += h[i] * u[i];
			out += v.value[k] * acc;
		}
		return out;
	}
	std::vector<double> owned;
	if (u_proj.empty()) {
		owned = project(f, u);
		u_proj = owned;
	}
	require(u_proj.size() == f.n, "cross_form: projection length mismatch");
	double uv = 0.0;
	for (std::size_t k = 0; k < v.index.size(); ++k) uv += u[v.index[k]] * v.value[k];
	double acc = 0.0;
	for (std::size_t s = 0; s < f.n; ++s) {
		const auto g = f.grad(s);
		double gv = 0.0;
		for (std::size_t k = 0; k < v.index.size(); ++k) gv += g[v.index[k]] * v.value[k];
		acc += u_proj[s] * gv;
	}
	return f.kappa * uv + acc / static_cast<double>(f.n);
}

inline double cross_form(const FisherBlock& f, std::span<const double> u, std::span<const double> v) {
	require(v.size() == f.d, "cross_form: vector length mismatch");
	SparseVector sv;
	for (std::size_t i = 0; i < v.size(); ++i)
		if (v[i] != 0.0) {
			sv.index.push_back(i);
			sv.value.push_back(v[i]);
		}
	return cross_form(f, u, sv);
}

/// Writes per-sample gradients of one layer as tensors `grad.{layer_id}.{i}`,
/// each shaped like the layer weight.
inline void append_gradient_stash(Container& c, const std::string& layer_id, const Matrix& per_sample_grads,
                                  std::size_t rows, std::size_t cols) {
	require(rows * cols == per_sample_grads.cols(), "gradient stash shape does not match layer " + layer_id);
	for (std::size_t s = 0; s < per_sample_grads.rows(); ++s) {
		const auto g = per_sample_grads.row(s);
		c.tensors.push_back({"grad." + layer_id + "." + std::to_string(s), Matrix(rows, cols, std::vector<float>(g.begin(), g.end()))});
	}
}

} // namespace blockprune
