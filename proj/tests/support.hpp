#pragma once

// Reference implementations the library is checked against.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "blockprune.hpp"

namespace support {

using blockprune::Matrix;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float scale = 1.0f) {
	std::normal_distribution<float> nd(0.0f, scale);
	Matrix m(rows, cols);
	for (auto& v : m.data()) v = nd(rng);
	return m;
}

/// Textbook i-j-k product; ascending k per output element like the kernels.
template <class T>
blockprune::BasicMatrix<T> naive_matmul(const blockprune::BasicMatrix<T>& a, const blockprune::BasicMatrix<T>& b) {
	blockprune::BasicMatrix<T> c(a.rows(), b.cols());
	for (std::size_t i = 0; i < a.rows(); ++i)
		for (std::size_t j = 0; j < b.cols(); ++j) {
			T acc{0};
			for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
			c(i, j) = acc;
		}
	return c;
}

/// Elementwise mask expansion without going through BlockMask helpers.
inline Matrix expand_and_multiply(const Matrix& w, const std::vector<int>& bits, std::size_t bcols, std::size_t br,
                                  std::size_t bc) {
	Matrix out = w;
	for (std::size_t r = 0; r < w.rows(); ++r)
		for (std::size_t c = 0; c < w.cols(); ++c)
			if (!bits[(r / br) * bcols + c / bc]) out(r, c) = 0.0f;
	return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
	double m = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]));
	return m;
}

/// delta at a given mask computed with an explicit dense Fisher built here.
inline double delta_oracle(const Matrix& w, const std::vector<double>& gbar, const Matrix& per_sample, double kappa,
                           const Matrix& pruned) {
	const std::size_t d = w.size(), n = per_sample.rows();
	std::vector<double> dw(d);
	for (std::size_t i = 0; i < d; ++i) dw[i] = static_cast<double>(pruned.data()[i]) - w.data()[i];
	double first = 0.0, sq = 0.0;
	for (std::size_t i = 0; i < d; ++i) {
		first += gbar[i] * dw[i];
		sq += dw[i] * dw[i];
	}
	double quad = kappa * sq;
	for (std::size_t s = 0; s < n; ++s) {
		double p = 0.0;
		for (std::size_t i = 0; i < d; ++i) p += per_sample(s, i) * dw[i];
		quad += p * p / static_cast<double>(n);
	}
	return first + 0.5 * quad;
}

struct RandomLayer {
	blockprune::LayerProblem problem;
	Matrix per_sample;
};

/// Random weight and per-sample gradients wrapped as a pruning problem.
inline RandomLayer random_layer(std::size_t rows, std::size_t cols, blockprune::BlockShape shape, std::size_t n, double kappa,
                                std::size_t dense_cap, std::mt19937_64& rng) {
	const Matrix w = random_matrix(rows, cols, rng, 0.5f);
	const Matrix g = random_matrix(n, rows * cols, rng, 0.2f);
	Matrix mean(rows, cols);
	for (std::size_t i = 0; i < rows * cols; ++i) {
		double acc = 0.0;
		for (std::size_t s = 0; s < n; ++s) acc += g(s, i);
		mean.data()[i] = static_cast<float>(acc / static_cast<double>(n));
	}
	return {blockprune::make_layer_problem("layer", w, mean, g, shape, kappa, dense_cap), g};
}

inline bool rel_close(double a, double b, double tol) {
	return std::fabs(a - b) <= tol * std::max({std::fabs(a), std::fabs(b), 1e-12});
}

} // namespace support

namespace support {

struct GradCheck {
	std::string name;
	double cosine = 0.0;
	double max_rel = 0.0;
};

/// Analytic gradients of the mean proxy against central differences, in
/// double precision, for every tensor of the model. Relative error of an
/// entry is |a - n| / max(|a|, |n|, 1e-3 * max_j |n_j|).
inline std::vector<GradCheck> gradient_check(const blockprune::BasicParamSet<double>& params, const blockprune::Batch& x,
                                             blockprune::ProxyKind kind = blockprune::ProxyKind::cross_entropy,
                                             double eps = 1e-3) {
	using namespace blockprune;
	auto loss = [&](const BasicParamSet<double>& p) { return scalar_proxy(forward(p, x).logits, x.labels, kind).mean; };
	const auto fwd = forward(params, x);
	const auto grad = backward(params, fwd.cache, scalar_proxy(fwd.logits, x.labels, kind).grad);

	std::vector<const BasicMatrix<double>*> analytic;
	grad.for_each_tensor([&](const std::string&, const BasicMatrix<double>& m) { analytic.push_back(&m); });

	std::vector<GradCheck> out;
	BasicParamSet<double> probe = params;
	std::size_t t = 0;
	probe.for_each_tensor([&](const std::string& name, BasicMatrix<double>& m) {
		const auto a = analytic[t++]->data();
		std::vector<double> numeric(m.size());
		for (std::size_t i = 0; i < m.size(); ++i) {
			const double keep = m.data()[i];
			m.data()[i] = keep + eps;
			const double up = loss(probe);
			m.data()[i] = keep - eps;
			const double down = loss(probe);
			m.data()[i] = keep;
			numeric[i] = (up - down) / (2.0 * eps);
		}
		double dot = 0.0, na = 0.0, nn = 0.0, scale = 0.0;
		for (std::size_t i = 0; i < m.size(); ++i) {
			dot += a[i] * numeric[i];
			na += a[i] * a[i];
			nn += numeric[i] * numeric[i];
			scale = std::max(scale, std::fabs(numeric[i]));
		}
		GradCheck g{name, (na > 0.0 && nn > 0.0) ? dot / std::sqrt(na * nn) : (na == nn ? 1.0 : 0.0), 0.0};
		for (std::size_t i = 0; i < m.size(); ++i) {
			const double denom = std::max({std::fabs(a[i]), std::fabs(numeric[i]), 1e-3 * scale, 1e-12});
			g.max_rel = std::max(g.max_rel, std::fabs(a[i] - numeric[i]) / denom);
		}
		out.push_back(g);
	});
	return out;
}

/// Default-shaped model with every parameter (biases, norms included)
/// randomized so no gradient path is trivially zero.
inline blockprune::BasicParamSet<double> random_double_model(blockprune::ToyViTConfig cfg, std::uint64_t seed) {
	using namespace blockprune;
	cfg.seed = seed;
	BasicParamSet<double> p = params_cast<double>(init_params(cfg));
	std::mt19937_64 rng(seed);
	std::normal_distribution<double> nd(0.0, 0.1);
	for (auto& l : p.linears)
		for (auto& v : l.bias.data()) v = nd(rng);
	for (auto& n : p.norms) {
		for (auto& v : n.gamma.data()) v = 1.0 + nd(rng);
		for (auto& v : n.beta.data()) v = nd(rng);
	}
	return p;
}

// Three-layer allocation problem with closed-form curves delta(a) = u a + v a^2.
// Input widths are multiples of 20 so every grid ratio prunes a whole number of 2x2 blocks.
struct AllocInstance {
	std::vector<blockprune::DistortionCurve> curves;
	std::vector<blockprune::LayerCost> costs;
	double R = 1.0;
};

inline AllocInstance random_alloc_instance(std::mt19937_64& rng, int K, bool equal_shapes) {
	std::uniform_real_distribution<double> coef(0.1, 2.0), budget(0.3, 0.9);
	AllocInstance inst;
	for (int i = 0; i < 3; ++i) {
		const double u = coef(rng), v = coef(rng);
		std::vector<double> d;
		for (int k = 0; k <= K; ++k) {
			const double a = static_cast<double>(k) / K;
			d.push_back(u * a + v * a * a);
		}
		const std::string id = "l" + std::to_string(i);
		inst.curves.push_back(blockprune::DistortionCurve::from_deltas(id, d));
		if (equal_shapes)
			inst.costs.push_back({id, 8, 40, 40});
		else
			inst.costs.push_back({id, 2 * (1 + rng() % 8), 20 * (1 + rng() % 3), 20 * (1 + rng() % 3)});
	}
	inst.R = budget(rng);
	return inst;
}

// Brute force over the full grid product. Returns +inf if nothing fits.
inline double exhaustive_min_distortion(const AllocInstance& inst, int K) {
	double dense = 0.0;
	for (const auto& c : inst.costs) dense += 2.0 * static_cast<double>(c.m * c.n * c.k);
	double best = std::numeric_limits<double>::infinity();
	for (int i = 0; i <= K; ++i)
		for (int j = 0; j <= K; ++j)
			for (int k = 0; k <= K; ++k) {
				const int idx[3] = {i, j, k};
				double flops = 0.0, dist = 0.0;
				for (int l = 0; l < 3; ++l) {
					const auto& c = inst.costs[static_cast<std::size_t>(l)];
					flops += 2.0 * static_cast<double>(c.m * c.n * c.k) * (K - idx[l]) / K;
					const double d = inst.curves[static_cast<std::size_t>(l)].delta[static_cast<std::size_t>(idx[l])];
					dist += d * d;
				}
				if (flops / dense <= inst.R + 1e-12) best = std::min(best, dist);
			}
	return best;
}

} // namespace support
