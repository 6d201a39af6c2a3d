#pragma once

// Minimal pre-norm vision transformer with hand-written forward and backward
// passes. Linear weights are stored in x out so a layer computes X * W + b,
// which lets block-sparse weights run through bsr_matmul unchanged.
//
// Prunable linears, in order:
//   patch_embed, block{d}.attn.qkv, block{d}.attn.proj, block{d}.mlp.fc1,
//   block{d}.mlp.fc2 (d = 0..depth-1), head.
// Token features are mean-pooled before the head (no class token, no final norm).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace blockprune {

struct ToyViTConfig {
	int image_size = 16;
	int patch_size = 4;
	int embed_dim = 32;
	int num_heads = 2;
	int depth = 2;
	double mlp_ratio = 2.0;
	int num_classes = 10;
	std::uint64_t seed = 0;

	std::size_t tokens() const { return static_cast<std::size_t>((image_size / patch_size) * (image_size / patch_size)); }
	std::size_t patch_dim() const { return static_cast<std::size_t>(patch_size * patch_size); }
	std::size_t head_dim() const { return static_cast<std::size_t>(embed_dim / num_heads); }
	std::size_t hidden_dim() const { return static_cast<std::size_t>(std::llround(mlp_ratio * embed_dim)); }
	std::size_t num_linears() const { return static_cast<std::size_t>(4 * depth + 2); }

	void validate() const {
		require(image_size >= 1 && patch_size >= 1 && image_size % patch_size == 0,
		        "image_size must be a positive multiple of patch_size");
		require(embed_dim >= 1 && num_heads >= 1 && embed_dim % num_heads == 0,
		        "embed_dim must be a positive multiple of num_heads");
		require(depth >= 0, "depth must be >= 0");
		require(mlp_ratio > 0.0 && hidden_dim() >= 1, "mlp_ratio must be positive");
		require(num_classes >= 1, "num_classes must be >= 1");
	}

	bool operator==(const ToyViTConfig&) const = default;
};

template <std::floating_point T>
struct Linear {
	std::string id;
	BasicMatrix<T> weight;  // in x out
	BasicMatrix<T> bias;    // 1 x out
};

template <std::floating_point T>
struct LayerNormParams {
	std::string id;
	BasicMatrix<T> gamma;  // 1 x D
	BasicMatrix<T> beta;   // 1 x D
};

inline std::size_t qkv_index(int d) { return 1 + 4 * static_cast<std::size_t>(d); }
inline std::size_t proj_index(int d) { return 2 + 4 * static_cast<std::size_t>(d); }
inline std::size_t fc1_index(int d) { return 3 + 4 * static_cast<std::size_t>(d); }
inline std::size_t fc2_index(int d) { return 4 + 4 * static_cast<std::size_t>(d); }

inline std::vector<std::string> linear_ids(const ToyViTConfig& cfg) {
	std::vector<std::string> ids{"patch_embed"};
	for (int d = 0; d < cfg.depth; ++d) {
		const std::string p = "block" + std::to_string(d) + ".";
		ids.push_back(p + "attn.qkv");
		ids.push_back(p + "attn.proj");
		ids.push_back(p + "mlp.fc1");
		ids.push_back(p + "mlp.fc2");
	}
	ids.push_back("head");
	return ids;
}

template <std::floating_point T>
struct BasicParamSet {
	ToyViTConfig config;
	std::vector<Linear<T>> linears;
	BasicMatrix<T> pos;  // tokens x embed_dim, learned, never pruned
	std::vector<LayerNormParams<T>> norms;  // block{d}.norm1, block{d}.norm2

	std::size_t head_index() const { return linears.size() - 1; }

	std::size_t index_of(std::string_view id) const {
		for (std::size_t i = 0; i < linears.size(); ++i)
			if (linears[i].id == id) return i;
		throw precondition_error("unknown layer id '" + std::string(id) + "'");
	}

	/// Visits every tensor as (name, matrix) in a fixed order.
	template <class F>
	void for_each_tensor(F&& f) {
		for (auto& l : linears) {
			f(l.id + ".weight", l.weight);
			f(l.id + ".bias", l.bias);
		}
		f(std::string("pos_embed"), pos);
		for (auto& n : norms) {
			f(n.id + ".gamma", n.gamma);
			f(n.id + ".beta", n.beta);
		}
	}
	template <class F>
	void for_each_tensor(F&& f) const {
		const_cast<BasicParamSet*>(this)->for_each_tensor(
		    [&](const std::string& name, BasicMatrix<T>& m) { f(name, static_cast<const BasicMatrix<T>&>(m)); });
	}

	/// Same layout, all zeros.
	BasicParamSet zeros_like() const {
		BasicParamSet z = *this;
		z.for_each_tensor([](const std::string&, BasicMatrix<T>& m) { std::fill(m.data().begin(), m.data().end(), T{0}); });
		return z;
	}

	/// Checks every tensor against the shapes implied by the config.
	void validate() const {
		config.validate();
		const auto ids = linear_ids(config);
		require(linears.size() == ids.size(), "parameter set has " + std::to_string(linears.size()) +
		                                          " linear layers, config implies " + std::to_string(ids.size()));
		const std::size_t D = static_cast<std::size_t>(config.embed_dim), H = config.hidden_dim();
		auto expect = [&](std::size_t i, std::size_t in, std::size_t out) {
			const auto& l = linears[i];
			require(l.id == ids[i], "layer " + std::to_string(i) + " is '" + l.id + "', expected '" + ids[i] + "'");
			require(l.weight.rows() == in && l.weight.cols() == out,
			        "layer " + l.id + " weight is " + l.weight.shape_str() + ", expected " + std::to_string(in) + "x" +
			            std::to_string(out));
			require(l.bias.rows() == 1 && l.bias.cols() == out, "layer " + l.id + " bias has wrong shape");
		};
		expect(0, config.patch_dim(), D);
		for (int d = 0; d < config.depth; ++d) {
			expect(qkv_index(d), D, 3 * D);
			expect(proj_index(d), D, D);
			expect(fc1_index(d), D, H);
			expect(fc2_index(d), H, D);
		}
		expect(head_index(), D, static_cast<std::size_t>(config.num_classes));
		require(pos.rows() == config.tokens() && pos.cols() == D, "pos_embed has wrong shape");
		require(norms.size() == static_cast<std::size_t>(2 * config.depth), "wrong number of layer norms");
		for (const auto& n : norms)
			require(n.gamma.rows() == 1 && n.gamma.cols() == D && n.beta.rows() == 1 && n.beta.cols() == D,
			        "layer norm " + n.id + " has wrong shape");
	}
};

using ParamSet = BasicParamSet<float>;

template <std::floating_point U, std::floating_point T>
BasicParamSet<U> params_cast(const BasicParamSet<T>& p) {
	BasicParamSet<U> out;
	out.config = p.config;
	for (const auto& l : p.linears) out.linears.push_back({l.id, matrix_cast<U>(l.weight), matrix_cast<U>(l.bias)});
	out.pos = matrix_cast<U>(p.pos);
	for (const auto& n : p.norms) out.norms.push_back({n.id, matrix_cast<U>(n.gamma), matrix_cast<U>(n.beta)});
	return out;
}

/// Xavier-normal linear weights, zero biases, unit norm gains, small positional embedding.
inline ParamSet init_params(const ToyViTConfig& cfg) {
	cfg.validate();
	Rng rng = make_rng(cfg.seed, "init");
	ParamSet p;
	p.config = cfg;
	const std::size_t D = static_cast<std::size_t>(cfg.embed_dim), H = cfg.hidden_dim();
	auto make = [&](const std::string& id, std::size_t in, std::size_t out) {
		std::normal_distribution<float> nd(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(in + out))));
		Matrix w(in, out);
		for (auto& v : w.data()) v = nd(rng);
		p.linears.push_back({id, std::move(w), Matrix(1, out)});
	};
	const auto ids = linear_ids(cfg);
	make(ids[0], cfg.patch_dim(), D);
	for (int d = 0; d < cfg.depth; ++d) {
		make(ids[qkv_index(d)], D, 3 * D);
		make(ids[proj_index(d)], D, D);
		make(ids[fc1_index(d)], D, H);
		make(ids[fc2_index(d)], H, D);
	}
	make(ids.back(), D, static_cast<std::size_t>(cfg.num_classes));
	p.pos = Matrix(cfg.tokens(), D);
	std::normal_distribution<float> pd(0.0f, 0.02f);
	for (auto& v : p.pos.data()) v = pd(rng);
	for (int d = 0; d < cfg.depth; ++d)
		for (int k = 1; k <= 2; ++k)
			p.norms.push_back({"block" + std::to_string(d) + ".norm" + std::to_string(k), Matrix(1, D, 1.0f), Matrix(1, D)});
	return p;
}

/// FNV-1a over the raw bytes of every tensor; ties a forward cache to the
/// exact parameters it was computed with.
template <std::floating_point T>
std::uint64_t fingerprint(const BasicParamSet<T>& p) {
	std::uint64_t h = 0xcbf29ce484222325ULL;
	p.for_each_tensor([&](const std::string&, const BasicMatrix<T>& m) {
		const auto* bytes = reinterpret_cast<const unsigned char*>(m.data().data());
		for (std::size_t i = 0; i < m.size() * sizeof(T); ++i) {
			h ^= bytes[i];
			h *= 0x100000001b3ULL;
		}
	});
	return h;
}

template <std::floating_point T>
struct LayerNormCache {
	BasicMatrix<T> xhat;
	std::vector<T> rstd;
};

template <std::floating_point T>
struct BlockCache {
	LayerNormCache<T> ln1, ln2;
	BasicMatrix<T> u1, qkv, probs, ctx, u2, z, g;
};

template <std::floating_point T>
struct ForwardCache {
	std::size_t n = 0;
	std::uint64_t params_fingerprint = 0;
	BasicMatrix<T> patches;
	std::vector<BlockCache<T>> blocks;
	BasicMatrix<T> pooled;
};

template <std::floating_point T>
struct ForwardResult {
	BasicMatrix<T> logits;
	ForwardCache<T> cache;
};

/// Optional block-sparse replacements for linear weights, indexed like linears.
template <std::floating_point T>
using SparseWeights = std::vector<std::optional<BasicBsrMatrix<T>>>;

template <std::floating_point T>
struct ForwardOptions {
	const SparseWeights<T>* sparse = nullptr;
	MacCounter* counter = nullptr;
};

namespace detail {

constexpr double kLayerNormEps = 1e-5;

template <std::floating_point T>
BasicMatrix<T> patchify(const Batch& x, const ToyViTConfig& cfg) {
	const std::size_t s = static_cast<std::size_t>(cfg.image_size), p = static_cast<std::size_t>(cfg.patch_size);
	const std::size_t per_side = s / p, T_ = cfg.tokens(), P = cfg.patch_dim();
	BasicMatrix<T> out(x.size() * T_, P);
	for (std::size_t n = 0; n < x.size(); ++n) {
		const auto img = x.images.row(n);
		for (std::size_t t = 0; t < T_; ++t) {
			const std::size_t py = t / per_side, px = t % per_side;
			auto dst = out.row(n * T_ + t);
			for (std::size_t r = 0; r < p; ++r)
				for (std::size_t c = 0; c < p; ++c) dst[r * p + c] = static_cast<T>(img[(py * p + r) * s + px * p + c]);
		}
	}
	return out;
}

template <std::floating_point T>
BasicMatrix<T> linear_forward(const BasicParamSet<T>& params, std::size_t idx, const BasicMatrix<T>& x,
                              const ForwardOptions<T>& opt) {
	const auto& l = params.linears[idx];
	require(x.cols() == l.weight.rows(),
	        "layer " + l.id + ": input width " + std::to_string(x.cols()) + " != weight rows " + std::to_string(l.weight.rows()));
	BasicMatrix<T> y;
	if (opt.sparse && idx < opt.sparse->size() && (*opt.sparse)[idx]) {
		const auto& b = *(*opt.sparse)[idx];
		require(b.rows() == l.weight.rows() && b.cols() == l.weight.cols(), "layer " + l.id + ": sparse weight shape mismatch");
		y = bsr_matmul(x, b, opt.counter);
	} else {
		y = matmul(x, l.weight, opt.counter);
	}
	for (std::size_t r = 0; r < y.rows(); ++r) {
		auto row = y.row(r);
		for (std::size_t c = 0; c < y.cols(); ++c) row[c] += l.bias(0, c);
	}
	return y;
}

template <std::floating_point T>
BasicMatrix<T> layer_norm_forward(const BasicMatrix<T>& x, const LayerNormParams<T>& p, LayerNormCache<T>& cache) {
	const std::size_t D = x.cols();
	BasicMatrix<T> y(x.rows(), D);
	cache.xhat = BasicMatrix<T>(x.rows(), D);
	cache.rstd.assign(x.rows(), T{0});
	for (std::size_t r = 0; r < x.rows(); ++r) {
		const auto in = x.row(r);
		double mean = 0.0;
		for (T v : in) mean += v;
		mean /= static_cast<double>(D);
		double var = 0.0;
		for (T v : in) var += (v - mean) * (v - mean);
		var /= static_cast<double>(D);
		const T rstd = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
		cache.rstd[r] = rstd;
		auto xh = cache.xhat.row(r);
		auto out = y.row(r);
		for (std::size_t c = 0; c < D; ++c) {
			xh[c] = static_cast<T>(in[c] - mean) * rstd;
			out[c] = p.gamma(0, c) * xh[c] + p.beta(0, c);
		}
	}
	return y;
}

template <std::floating_point T>
BasicMatrix<T> layer_norm_backward(const BasicMatrix<T>& dy, const LayerNormParams<T>& p, const LayerNormCache<T>& cache,
                                   LayerNormParams<T>& grad) {
	const std::size_t D = dy.cols();
	BasicMatrix<T> dx(dy.rows(), D);
	std::vector<T> dxhat(D);
	for (std::size_t r = 0; r < dy.rows(); ++r) {
		const auto g = dy.row(r);
		const auto xh = cache.xhat.row(r);
		T mean_d{0}, mean_dx{0};
		for (std::size_t c = 0; c < D; ++c) {
			grad.gamma(0, c) += g[c] * xh[c];
			grad.beta(0, c) += g[c];
			dxhat[c] = g[c] * p.gamma(0, c);
			mean_d += dxhat[c];
			mean_dx += dxhat[c] * xh[c];
		}
		mean_d /= static_cast<T>(D);
		mean_dx /= static_cast<T>(D);
		auto out = dx.row(r);
		for (std::size_t c = 0; c < D; ++c) out[c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
	}
	return dx;
}

template <std::floating_point T>
T gelu(T x) {
	return static_cast<T>(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <std::floating_point T>
T gelu_grad(T x) {
	const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
	const T pdf = std::exp(static_cast<T>(-0.5) * x * x) / std::sqrt(2 * std::numbers::pi_v<T>);
	return cdf + x * pdf;
}

template <std::floating_point T>
void add_inplace(BasicMatrix<T>& a, const BasicMatrix<T>& b) {
	auto ad = a.data();
	const auto bd = b.data();
	for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

template <std::floating_point T>
void accumulate_linear_grad(Linear<T>& g, const BasicMatrix<T>& x, const BasicMatrix<T>& dy) {
	add_inplace(g.weight, matmul_tn(x, dy));
	for (std::size_t r = 0; r < dy.rows(); ++r)
		for (std::size_t c = 0; c < dy.cols(); ++c) g.bias(0, c) += dy(r, c);
}

/// Multi-head softmax attention over each sample's tokens; probs rows are
/// laid out as ((sample * heads + head) * tokens + query).
template <std::floating_point T>
BasicMatrix<T> attention_forward(const BasicMatrix<T>& qkv, const ToyViTConfig& cfg, std::size_t n, BasicMatrix<T>& probs,
                                 MacCounter* counter) {
	const std::size_t Tn = cfg.tokens(), D = static_cast<std::size_t>(cfg.embed_dim), dh = cfg.head_dim();
	const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);
	const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
	BasicMatrix<T> ctx(n * Tn, D);
	probs = BasicMatrix<T>(n * heads * Tn, Tn);
	for (std::size_t s = 0; s < n; ++s)
		for (std::size_t h = 0; h < heads; ++h) {
			const std::size_t qo = h * dh, ko = D + h * dh, vo = 2 * D + h * dh;
			for (std::size_t i = 0; i < Tn; ++i) {
				const auto qi = qkv.row(s * Tn + i);
				auto pr = probs.row((s * heads + h) * Tn + i);
				T mx = -std::numeric_limits<T>::infinity();
				for (std::size_t j = 0; j < Tn; ++j) {
					const auto kj = qkv.row(s * Tn + j);
					T acc{0};
					for (std::size_t e = 0; e < dh; ++e) acc += qi[qo + e] * kj[ko + e];
					pr[j] = acc * scale;
					mx = std::max(mx, pr[j]);
				}
				T sum{0};
				for (std::size_t j = 0; j < Tn; ++j) {
					pr[j] = std::exp(pr[j] - mx);
					sum += pr[j];
				}
				auto out = ctx.row(s * Tn + i);
				for (std::size_t j = 0; j < Tn; ++j) {
					pr[j] /= sum;
					const auto vj = qkv.row(s * Tn + j);
					for (std::size_t e = 0; e < dh; ++e) out[h * dh + e] += pr[j] * vj[vo + e];
				}
			}
		}
	if (counter) counter->macs += 2ULL * n * heads * Tn * Tn * dh;
	return ctx;
}

template <std::floating_point T>
BasicMatrix<T> attention_backward(const BasicMatrix<T>& dctx, const BasicMatrix<T>& qkv, const BasicMatrix<T>& probs,
                                  const ToyViTConfig& cfg, std::size_t n) {
	const std::size_t Tn = cfg.tokens(), D = static_cast<std::size_t>(cfg.embed_dim), dh = cfg.head_dim();
	const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);
	const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
	BasicMatrix<T> dqkv(n * Tn, 3 * D);
	std::vector<T> dp(Tn);
	for (std::size_t s = 0; s < n; ++s)
		for (std::size_t h = 0; h < heads; ++h) {
			const std::size_t qo = h * dh, ko = D + h * dh, vo = 2 * D + h * dh;
			for (std::size_t i = 0; i < Tn; ++i) {
				const auto pr = probs.row((s * heads + h) * Tn + i);
				const auto dout = dctx.row(s * Tn + i);
				T dot{0};
				for (std::size_t j = 0; j < Tn; ++j) {
					const auto vj = qkv.row(s * Tn + j);
					auto dvj = dqkv.row(s * Tn + j);
					T acc{0};
					for (std::size_t e = 0; e < dh; ++e) {
						acc += dout[h * dh + e] * vj[vo + e];
						dvj[vo + e] += pr[j] * dout[h * dh + e];
					}
					dp[j] = acc;
					dot += acc * pr[j];
				}
				const auto qi = qkv.row(s * Tn + i);
				auto dqi = dqkv.row(s * Tn + i);
				for (std::size_t j = 0; j < Tn; ++j) {
					const T ds = pr[j] * (dp[j] - dot) * scale;
					const auto kj = qkv.row(s * Tn + j);
					auto dkj = dqkv.row(s * Tn + j);
					for (std::size_t e = 0; e < dh; ++e) {
						dqi[qo + e] += ds * kj[ko + e];
						dkj[ko + e] += ds * qi[qo + e];
					}
				}
			}
		}
	return dqkv;
}

} // namespace detail

/// Logits for every image in the batch plus the activations backward needs.
template <std::floating_point T>
ForwardResult<T> forward(const BasicParamSet<T>& params, const Batch& x, const ForwardOptions<T>& opt = {}) {
	const auto& cfg = params.config;
	require(x.image_size == static_cast<std::size_t>(cfg.image_size) &&
	            x.images.cols() == x.image_size * x.image_size && x.images.rows() == x.size(),
	        "layer patch_embed: input batch does not match image_size " + std::to_string(cfg.image_size));
	require(params.linears.size() == cfg.num_linears(), "parameter set does not match config depth");
	const std::size_t n = x.size(), Tn = cfg.tokens(), D = static_cast<std::size_t>(cfg.embed_dim);
	require(params.pos.rows() == Tn && params.pos.cols() == D, "pos_embed shape does not match config");

	ForwardResult<T> res;
	auto& cache = res.cache;
	cache.n = n;
	cache.params_fingerprint = fingerprint(params);
	cache.patches = detail::patchify<T>(x, cfg);

	BasicMatrix<T> h = detail::linear_forward(params, 0, cache.patches, opt);
	require(h.cols() == D, "layer patch_embed: output width does not match embed_dim");
	for (std::size_t r = 0; r < h.rows(); ++r) {
		const auto p = params.pos.row(r % Tn);
		auto row = h.row(r);
		for (std::size_t c = 0; c < D; ++c) row[c] += p[c];
	}

	cache.blocks.resize(static_cast<std::size_t>(cfg.depth));
	for (int d = 0; d < cfg.depth; ++d) {
		auto& bc = cache.blocks[static_cast<std::size_t>(d)];
		bc.u1 = detail::layer_norm_forward(h, params.norms[2 * static_cast<std::size_t>(d)], bc.ln1);
		bc.qkv = detail::linear_forward(params, qkv_index(d), bc.u1, opt);
		bc.ctx = detail::attention_forward(bc.qkv, cfg, n, bc.probs, opt.counter);
		detail::add_inplace(h, detail::linear_forward(params, proj_index(d), bc.ctx, opt));
		bc.u2 = detail::layer_norm_forward(h, params.norms[2 * static_cast<std::size_t>(d) + 1], bc.ln2);
		bc.z = detail::linear_forward(params, fc1_index(d), bc.u2, opt);
		bc.g = bc.z;
		for (auto& v : bc.g.data()) v = detail::gelu(v);
		detail::add_inplace(h, detail::linear_forward(params, fc2_index(d), bc.g, opt));
	}

	cache.pooled = BasicMatrix<T>(n, D);
	for (std::size_t s = 0; s < n; ++s) {
		auto out = cache.pooled.row(s);
		for (std::size_t t = 0; t < Tn; ++t) {
			const auto row = h.row(s * Tn + t);
			for (std::size_t c = 0; c < D; ++c) out[c] += row[c];
		}
		for (auto& v : out) v /= static_cast<T>(Tn);
	}
	res.logits = detail::linear_forward(params, params.head_index(), cache.pooled, opt);
	return res;
}

/// Gradient of a scalar loss given dloss/dlogits, for every weight and bias.
template <std::floating_point T>
BasicParamSet<T> backward(const BasicParamSet<T>& params, const ForwardCache<T>& cache, const BasicMatrix<T>& dlogits) {
	require(cache.params_fingerprint == fingerprint(params), "stale forward cache: parameters changed since forward");
	const auto& cfg = params.config;
	const std::size_t n = cache.n, Tn = cfg.tokens(), D = static_cast<std::size_t>(cfg.embed_dim);
	require(dlogits.rows() == n && dlogits.cols() == static_cast<std::size_t>(cfg.num_classes),
	        "loss gradient shape " + dlogits.shape_str() + " does not match logits");
	BasicParamSet<T> grad = params.zeros_like();

	const auto& head = params.linears[params.head_index()];
	detail::accumulate_linear_grad(grad.linears[params.head_index()], cache.pooled, dlogits);
	const BasicMatrix<T> dpooled = matmul_nt(dlogits, head.weight);
	BasicMatrix<T> dh(n * Tn, D);
	for (std::size_t r = 0; r < dh.rows(); ++r)
		for (std::size_t c = 0; c < D; ++c) dh(r, c) = dpooled(r / Tn, c) / static_cast<T>(Tn);

	for (int d = cfg.depth - 1; d >= 0; --d) {
		const auto& bc = cache.blocks[static_cast<std::size_t>(d)];
		const std::size_t n1 = 2 * static_cast<std::size_t>(d), n2 = n1 + 1;

		detail::accumulate_linear_grad(grad.linears[fc2_index(d)], bc.g, dh);
		BasicMatrix<T> dz = matmul_nt(dh, params.linears[fc2_index(d)].weight);
		for (std::size_t i = 0; i < dz.size(); ++i) dz.data()[i] *= detail::gelu_grad(bc.z.data()[i]);
		detail::accumulate_linear_grad(grad.linears[fc1_index(d)], bc.u2, dz);
		const BasicMatrix<T> du2 = matmul_nt(dz, params.linears[fc1_index(d)].weight);
		detail::add_inplace(dh, detail::layer_norm_backward(du2, params.norms[n2], bc.ln2, grad.norms[n2]));

		detail::accumulate_linear_grad(grad.linears[proj_index(d)], bc.ctx, dh);
		const BasicMatrix<T> dctx = matmul_nt(dh, params.linears[proj_index(d)].weight);
		const BasicMatrix<T> dqkv = detail::attention_backward(dctx, bc.qkv, bc.probs, cfg, n);
		detail::accumulate_linear_grad(grad.linears[qkv_index(d)], bc.u1, dqkv);
		const BasicMatrix<T> du1 = matmul_nt(dqkv, params.linears[qkv_index(d)].weight);
		detail::add_inplace(dh, detail::layer_norm_backward(du1, params.norms[n1], bc.ln1, grad.norms[n1]));
	}

	for (std::size_t r = 0; r < dh.rows(); ++r)
		for (std::size_t c = 0; c < D; ++c) grad.pos(r % Tn, c) += dh(r, c);
	detail::accumulate_linear_grad(grad.linears[0], cache.patches, dh);
	return grad;
}

enum class ProxyKind { cross_entropy, logit_l2 };

template <std::floating_point T>
struct ProxyValue {
	std::vector<double> per_sample;
	double mean = 0.0;
	BasicMatrix<T> grad;  // d(mean) / d(logits)
};

/// Scalar stand-in for the network output: per-sample cross-entropy against
/// the labels, or the L2 norm of the logit vector.
template <std::floating_point T>
ProxyValue<T> scalar_proxy(const BasicMatrix<T>& logits, std::span<const int> labels, ProxyKind kind) {
	const std::size_t n = logits.rows(), C = logits.cols();
	require(n >= 1, "scalar_proxy needs at least one row");
	ProxyValue<T> out;
	out.per_sample.resize(n);
	out.grad = BasicMatrix<T>(n, C);
	const double inv_n = 1.0 / static_cast<double>(n);
	if (kind == ProxyKind::cross_entropy) {
		require(labels.size() == n, "scalar_proxy: label count does not match logits");
		for (std::size_t r = 0; r < n; ++r) {
			const auto z = logits.row(r);
			require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < C, "label out of range");
			double mx = -std::numeric_limits<double>::infinity();
			for (T v : z) mx = std::max(mx, static_cast<double>(v));
			double sum = 0.0;
			for (T v : z) sum += std::exp(static_cast<double>(v) - mx);
			const double lse = mx + std::log(sum);
			out.per_sample[r] = lse - static_cast<double>(z[static_cast<std::size_t>(labels[r])]);
			for (std::size_t c = 0; c < C; ++c) {
				const double p = std::exp(static_cast<double>(z[c]) - lse);
				out.grad(r, c) = static_cast<T>((p - (static_cast<int>(c) == labels[r] ? 1.0 : 0.0)) * inv_n);
			}
		}
	} else {
		for (std::size_t r = 0; r < n; ++r) {
			const auto z = logits.row(r);
			double sq = 0.0;
			for (T v : z) sq += static_cast<double>(v) * v;
			const double norm = std::sqrt(sq);
			out.per_sample[r] = norm;
			if (norm > 0.0)
				for (std::size_t c = 0; c < C; ++c) out.grad(r, c) = static_cast<T>(z[c] / norm * inv_n);
		}
	}
	for (double v : out.per_sample) out.mean += v;
	out.mean *= inv_n;
	return out;
}

template <std::floating_point T>
double accuracy(const BasicMatrix<T>& logits, std::span<const int> labels) {
	require(labels.size() == logits.rows(), "accuracy: label count does not match logits");
	std::size_t hit = 0;
	for (std::size_t r = 0; r < logits.rows(); ++r) {
		const auto z = logits.row(r);
		const auto arg = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
		hit += arg == labels[r];
	}
	return logits.rows() ? static_cast<double>(hit) / static_cast<double>(logits.rows()) : 0.0;
}

/// Top-1 accuracy evaluated in chunks to bound activation memory.
inline double evaluate_accuracy(const ParamSet& params, const Batch& data, std::size_t chunk = 256) {
	std::size_t hit = 0;
	for (std::size_t b = 0; b < data.size(); b += chunk) {
		const std::size_t cnt = std::min(chunk, data.size() - b);
		const Batch part = data.slice(b, cnt);
		const auto res = forward(params, part);
		hit += static_cast<std::size_t>(std::llround(accuracy(res.logits, part.labels) * static_cast<double>(cnt)));
	}
	return data.size() ? static_cast<double>(hit) / static_cast<double>(data.size()) : 0.0;
}

} // namespace blockprune
