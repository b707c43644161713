#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/bundle.hpp"
#include "ladabert/error.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/prune.hpp"
#include "ladabert/random.hpp"

namespace ladabert {

/// Shape of the toy post-norm transformer encoder classifier.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t max_seq_len = 16;
  std::size_t num_classes = 3;

  std::size_t head_dim() const noexcept { return embed_dim / num_heads; }

  void validate() const {
    if (vocab_size == 0 || embed_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0 ||
        max_seq_len == 0 || num_classes == 0) {
      throw RangeError("ModelConfig: all sizes must be positive");
    }
    if (embed_dim % num_heads != 0) {
      throw RangeError("ModelConfig: embed_dim must be divisible by num_heads");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-5;

/// Entry-name -> keep-mask for pruned factor matrices. Masked entries are held
/// at exactly zero and receive zero gradient.
using MaskSet = std::map<std::string, PruneMask, std::less<>>;

using TokenSeq = std::vector<std::uint32_t>;

// ---------------------------------------------------------------------------
// Parameter naming
// ---------------------------------------------------------------------------

namespace names {

inline std::string layer(std::size_t l) { return "layer" + std::to_string(l); }
inline std::string attn(std::size_t l, std::string_view proj) {
  return layer(l) + ".attn." + std::string(proj);
}
inline constexpr std::string_view kProjections[] = {"query", "key", "value", "output"};

}  // namespace names

/// Linear weight slots (dense name "<base>.weight") in forward order. Embedding
/// tables are slots too, with the table itself as the weight.
inline std::vector<std::string> weight_slots(const ModelConfig& cfg) {
  std::vector<std::string> out = {"embed.token", "embed.position"};
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (auto p : names::kProjections) out.push_back(names::attn(l, p) + ".weight");
    out.push_back(names::layer(l) + ".ffn.in.weight");
    out.push_back(names::layer(l) + ".ffn.out.weight");
  }
  out.push_back("classifier.weight");
  return out;
}

/// Freshly initialized dense parameters: matrices ~ N(0, init_std^2), biases 0,
/// norm gains 1.
inline ParamBundle init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.1) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.embed_dim;
  ParamBundle p;
  auto mat = [&](const std::string& name, Group g, std::size_t r, std::size_t c) {
    p.add(name, g, random_normal(r, c, rng, init_std));
  };
  auto vec = [&](const std::string& name, Group g, std::size_t n, double v) {
    p.add(name, g, Matrix(1, n, v));
  };
  mat("embed.token", Group::embedding, cfg.vocab_size, d);
  mat("embed.position", Group::embedding, cfg.max_seq_len, d);
  vec("embed.norm.gamma", Group::embedding, d, 1.0);
  vec("embed.norm.beta", Group::embedding, d, 0.0);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (auto proj : names::kProjections) {
      mat(names::attn(l, proj) + ".weight", Group::encoder, d, d);
      vec(names::attn(l, proj) + ".bias", Group::encoder, d, 0.0);
    }
    vec(names::layer(l) + ".attn.norm.gamma", Group::encoder, d, 1.0);
    vec(names::layer(l) + ".attn.norm.beta", Group::encoder, d, 0.0);
    mat(names::layer(l) + ".ffn.in.weight", Group::encoder, d, cfg.ffn_dim);
    vec(names::layer(l) + ".ffn.in.bias", Group::encoder, cfg.ffn_dim, 0.0);
    mat(names::layer(l) + ".ffn.out.weight", Group::encoder, cfg.ffn_dim, d);
    vec(names::layer(l) + ".ffn.out.bias", Group::encoder, d, 0.0);
    vec(names::layer(l) + ".ffn.norm.gamma", Group::encoder, d, 1.0);
    vec(names::layer(l) + ".ffn.norm.beta", Group::encoder, d, 0.0);
  }
  mat("classifier.weight", Group::classifier, d, cfg.num_classes);
  vec("classifier.bias", Group::classifier, cfg.num_classes, 0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Forward trace
// ---------------------------------------------------------------------------

namespace detail {

struct NormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

struct LinearCache {
  Matrix input;
  Matrix projected;  // input * A for factored weights
};

struct LayerCache {
  LinearCache q, k, v, o, ffn_in, ffn_out;
  Matrix query, key, value;
  NormCache norm1, norm2;
  Matrix hidden1;  // post attention norm
  Matrix ffn_pre;  // pre-activation
};

struct TraceCache {
  Matrix token_projected;     // gathered A rows when the token table is factored
  Matrix position_projected;  // likewise for positions
  NormCache embed_norm;
  std::vector<LayerCache> layers;
  bool valid = false;
};

}  // namespace detail

/// Outputs at the four distillation levels plus the activations backward needs.
struct ForwardTrace {
  Matrix embedding_out;                       // n x d
  std::vector<std::vector<Matrix>> attention;  // [layer][head], n x n row-stochastic
  std::vector<Matrix> hidden;                  // [layer], n x d
  std::vector<double> logits;                  // num_classes
  TokenSeq tokens;
  detail::TraceCache cache;

  std::size_t num_layers() const noexcept { return hidden.size(); }

  /// Drops backward caches, keeping only the distillation signals.
  void strip() { cache = {}; }
};

/// Gradient of a loss w.r.t. the trace outputs; empty members count as zero.
struct TraceGradient {
  Matrix embedding_out;
  std::vector<std::vector<Matrix>> attention;
  std::vector<Matrix> hidden;
  std::vector<double> logits;
};

namespace detail {

struct LinearRef {
  std::string weight_name;  // dense name, or base of .A/.B
  const Matrix* dense = nullptr;
  const Matrix* a = nullptr;
  const Matrix* b = nullptr;
  const Matrix* bias = nullptr;
  std::string bias_name;

  bool factored() const noexcept { return dense == nullptr; }
};

inline LinearRef resolve(const ParamBundle& p, const std::string& weight, const std::string& bias) {
  LinearRef ref;
  ref.weight_name = weight;
  if (const auto* e = p.find(weight)) {
    ref.dense = &e->value;
  } else {
    const auto* a = p.find(weight + ".A");
    const auto* b = p.find(weight + ".B");
    if (a == nullptr || b == nullptr) {
      throw RangeError("model: missing parameter '" + weight + "' (dense or factored)");
    }
    if (a->value.cols() != b->value.cols()) {
      throw ShapeError("model: factor ranks disagree for '" + weight + "'");
    }
    ref.a = &a->value;
    ref.b = &b->value;
  }
  if (!bias.empty()) {
    ref.bias = &p.at(bias);
    ref.bias_name = bias;
  }
  return ref;
}

inline void add_row_bias(Matrix& y, const Matrix* bias) {
  if (bias == nullptr) return;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    for (std::size_t j = 0; j < y.cols(); ++j) row[j] += (*bias)(0, j);
  }
}

inline Matrix linear_forward(const LinearRef& lin, const Matrix& x, LinearCache& cache) {
  cache.input = x;
  Matrix y;
  if (!lin.factored()) {
    y = matmul(x, *lin.dense);
  } else {
    cache.projected = matmul(x, *lin.a);
    y = matmul_bt(cache.projected, *lin.b);
  }
  add_row_bias(y, lin.bias);
  return y;
}

inline void add_colsum(Matrix& g, const Matrix& dy) {
  for (std::size_t i = 0; i < dy.rows(); ++i)
    for (std::size_t j = 0; j < dy.cols(); ++j) g(0, j) += dy(i, j);
}

/// Accumulates parameter gradients and returns d(input).
inline Matrix linear_backward(const LinearRef& lin, const LinearCache& cache, const Matrix& dy,
                              ParamBundle& grads) {
  if (lin.bias != nullptr) add_colsum(grads.at(lin.bias_name), dy);
  if (!lin.factored()) {
    add_in_place(grads.at(lin.weight_name), matmul_at(cache.input, dy));
    return matmul_bt(dy, *lin.dense);
  }
  const Matrix dt = matmul(dy, *lin.b);
  add_in_place(grads.at(lin.weight_name + ".B"), matmul_at(dy, cache.projected));
  add_in_place(grads.at(lin.weight_name + ".A"), matmul_at(cache.input, dt));
  return matmul_bt(dt, *lin.a);
}

inline Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                                 NormCache& cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  cache.xhat = Matrix(n, d);
  cache.inv_std.assign(n, 0.0);
  Matrix y(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(i, j) - mean) * inv;
      cache.xhat(i, j) = xh;
      y(i, j) = gamma(0, j) * xh + beta(0, j);
    }
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gamma, const NormCache& cache,
                                  Matrix& dgamma, Matrix& dbeta) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgamma(0, j) += dy(i, j) * cache.xhat(i, j);
      dbeta(0, j) += dy(i, j);
      dxhat[j] = dy(i, j) * gamma(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * cache.xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_dxhat - cache.xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Row-wise softmax in place with max subtraction.
inline void softmax_rows(Matrix& s) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

// Table lookup through a dense table or factored A B^T; `rows` picks rows of the table.
inline Matrix embed_forward(const LinearRef& table, std::span<const std::size_t> rows,
                            Matrix& projected) {
  if (!table.factored()) {
    Matrix out(rows.size(), table.dense->cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = table.dense->row(rows[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
  projected = Matrix(rows.size(), table.a->cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = table.a->row(rows[i]);
    std::copy(src.begin(), src.end(), projected.row(i).begin());
  }
  return matmul_bt(projected, *table.b);
}

inline void embed_backward(const LinearRef& table, std::span<const std::size_t> rows,
                           const Matrix& projected, const Matrix& dy, ParamBundle& grads) {
  if (!table.factored()) {
    Matrix& g = grads.at(table.weight_name);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto dst = g.row(rows[i]);
      auto src = dy.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    return;
  }
  add_in_place(grads.at(table.weight_name + ".B"), matmul_at(dy, projected));
  const Matrix dt = matmul(dy, *table.b);
  Matrix& ga = grads.at(table.weight_name + ".A");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto dst = ga.row(rows[i]);
    auto src = dt.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

struct LayerRefs {
  LinearRef q, k, v, o, ffn_in, ffn_out;
  const Matrix *g1, *b1, *g2, *b2;
  std::string g1n, b1n, g2n, b2n;
};

inline LayerRefs resolve_layer(const ParamBundle& p, std::size_t l) {
  LayerRefs r;
  r.q = resolve(p, names::attn(l, "query") + ".weight", names::attn(l, "query") + ".bias");
  r.k = resolve(p, names::attn(l, "key") + ".weight", names::attn(l, "key") + ".bias");
  r.v = resolve(p, names::attn(l, "value") + ".weight", names::attn(l, "value") + ".bias");
  r.o = resolve(p, names::attn(l, "output") + ".weight", names::attn(l, "output") + ".bias");
  const std::string base = names::layer(l);
  r.ffn_in = resolve(p, base + ".ffn.in.weight", base + ".ffn.in.bias");
  r.ffn_out = resolve(p, base + ".ffn.out.weight", base + ".ffn.out.bias");
  r.g1n = base + ".attn.norm.gamma";
  r.b1n = base + ".attn.norm.beta";
  r.g2n = base + ".ffn.norm.gamma";
  r.b2n = base + ".ffn.norm.beta";
  r.g1 = &p.at(r.g1n);
  r.b1 = &p.at(r.b1n);
  r.g2 = &p.at(r.g2n);
  r.b2 = &p.at(r.b2n);
  return r;
}

}  // namespace detail

/// Runs the encoder on one token sequence.
inline ForwardTrace forward(const ModelConfig& cfg, const ParamBundle& params,
                            std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (auto t : tokens) {
    if (t >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
  const std::size_t n = tokens.size();
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  auto& cache = tr.cache;
  cache.layers.resize(cfg.num_layers);

  std::vector<std::size_t> token_rows(tokens.begin(), tokens.end());
  std::vector<std::size_t> position_rows(n);
  for (std::size_t i = 0; i < n; ++i) position_rows[i] = i;
  const auto tok = detail::resolve(params, "embed.token", "");
  const auto pos = detail::resolve(params, "embed.position", "");
  Matrix summed = detail::embed_forward(tok, token_rows, cache.token_projected);
  add_in_place(summed, detail::embed_forward(pos, position_rows, cache.position_projected));
  tr.embedding_out = detail::layer_norm_forward(summed, params.at("embed.norm.gamma"),
                                                params.at("embed.norm.beta"), cache.embed_norm);

  Matrix x = tr.embedding_out;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto& lc = cache.layers[l];
    const auto r = detail::resolve_layer(params, l);
    lc.query = detail::linear_forward(r.q, x, lc.q);
    lc.key = detail::linear_forward(r.k, x, lc.k);
    lc.value = detail::linear_forward(r.v, x, lc.v);

    Matrix context(n, cfg.embed_dim);
    std::vector<Matrix> probs(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix s(n, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += lc.query(i, c) * lc.key(j, c);
          s(i, j) = acc * scale;
        }
      detail::softmax_rows(s);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double pij = s(i, j);
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) context(i, c) += pij * lc.value(j, c);
        }
      probs[h] = std::move(s);
    }
    tr.attention.push_back(std::move(probs));

    Matrix attn_out = detail::linear_forward(r.o, context, lc.o);
    add_in_place(attn_out, x);
    lc.hidden1 = detail::layer_norm_forward(attn_out, *r.g1, *r.b1, lc.norm1);

    lc.ffn_pre = detail::linear_forward(r.ffn_in, lc.hidden1, lc.ffn_in);
    Matrix act = lc.ffn_pre;
    for (double& v : act.data()) v = detail::gelu(v);
    Matrix ffn_out = detail::linear_forward(r.ffn_out, act, lc.ffn_out);
    add_in_place(ffn_out, lc.hidden1);
    x = detail::layer_norm_forward(ffn_out, *r.g2, *r.b2, lc.norm2);
    tr.hidden.push_back(x);
  }

  const Matrix& wc = params.at("classifier.weight");
  const Matrix& bc = params.at("classifier.bias");
  tr.logits.assign(cfg.num_classes, 0.0);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) acc += x(i, j) * wc(j, c);
    tr.logits[c] = acc / static_cast<double>(n) + bc(0, c);
  }
  for (double v : tr.logits) {
    if (!std::isfinite(v)) throw NumericError("forward: non-finite logits");
  }
  cache.valid = true;
  return tr;
}

inline ForwardTrace forward(const ModelConfig& cfg, const ParamBundle& params,
                            const TokenSeq& tokens) {
  return forward(cfg, params, std::span<const std::uint32_t>(tokens));
}

/// One trace per sequence, in input order.
inline std::vector<ForwardTrace> forward_batch(const ModelConfig& cfg, const ParamBundle& params,
                                               std::span<const TokenSeq> batch) {
  std::vector<ForwardTrace> out;
  out.reserve(batch.size());
  for (const auto& seq : batch) out.push_back(forward(cfg, params, seq));
  return out;
}

/// Zero-valued gradient bundle with the same entries as `params`.
inline ParamBundle zeros_like(const ParamBundle& params) {
  ParamBundle g;
  for (const auto& e : params) g.add(e.name, e.group, Matrix(e.value.rows(), e.value.cols()));
  return g;
}

/// Zeroes gradient entries that are masked out.
inline void apply_masks_to_gradients(ParamBundle& grads, const MaskSet& masks) {
  for (const auto& [name, mask] : masks) {
    if (!grads.contains(name)) continue;
    Matrix& g = grads.at(name);
    auto d = g.data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      if (!mask.at_flat(k)) d[k] = 0.0;
    }
  }
}

/// Adds the parameter gradient of a loss with trace-gradient `up` into `grads`.
inline void accumulate_gradients(const ModelConfig& cfg, const ParamBundle& params,
                                 const ForwardTrace& tr, const TraceGradient& up,
                                 ParamBundle& grads) {
  if (!tr.cache.valid) throw Error("backward: trace has no activation cache");
  const std::size_t n = tr.tokens.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t layers = cfg.num_layers;

  // Classifier over the mean-pooled last hidden state.
  Matrix dx(n, d);
  {
    const Matrix& last = tr.hidden.back();
    const Matrix& wc = params.at("classifier.weight");
    Matrix& gw = grads.at("classifier.weight");
    Matrix& gb = grads.at("classifier.bias");
    if (!up.logits.empty()) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        const double g = up.logits[c];
        if (g == 0.0) continue;
        gb(0, c) += g;
        for (std::size_t j = 0; j < d; ++j) {
          double pooled = 0.0;
          for (std::size_t i = 0; i < n; ++i) pooled += last(i, j);
          gw(j, c) += g * pooled * inv_n;
          for (std::size_t i = 0; i < n; ++i) dx(i, j) += g * wc(j, c) * inv_n;
        }
      }
    }
  }

  for (std::size_t li = layers; li-- > 0;) {
    if (!up.hidden.empty() && !up.hidden[li].empty()) add_in_place(dx, up.hidden[li]);
    const auto& lc = tr.cache.layers[li];
    const auto r = detail::resolve_layer(params, li);

    // Feed-forward block.
    Matrix d_res2 =
        detail::layer_norm_backward(dx, *r.g2, lc.norm2, grads.at(r.g2n), grads.at(r.b2n));
    Matrix d_act = detail::linear_backward(r.ffn_out, lc.ffn_out, d_res2, grads);
    {
      auto da = d_act.data();
      auto pre = lc.ffn_pre.data();
      for (std::size_t k = 0; k < da.size(); ++k) da[k] *= detail::gelu_grad(pre[k]);
    }
    Matrix d_hidden1 = detail::linear_backward(r.ffn_in, lc.ffn_in, d_act, grads);
    add_in_place(d_hidden1, d_res2);

    // Attention block.
    Matrix d_res1 =
        detail::layer_norm_backward(d_hidden1, *r.g1, lc.norm1, grads.at(r.g1n), grads.at(r.b1n));
    Matrix d_context = detail::linear_backward(r.o, lc.o, d_res1, grads);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix& p = tr.attention[li][h];
      Matrix dp(n, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += d_context(i, c) * lc.value(j, c);
          dp(i, j) = acc;
        }
      if (!up.attention.empty() && !up.attention[li].empty() && !up.attention[li][h].empty()) {
        add_in_place(dp, up.attention[li][h]);
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double pij = p(i, j);
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dv(j, c) += pij * d_context(i, c);
        }
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = p(i, j) * (dp(i, j) - dot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
            dq(i, c) += ds * lc.key(j, c);
            dk(j, c) += ds * lc.query(i, c);
          }
        }
      }
    }
    dx = d_res1;
    add_in_place(dx, detail::linear_backward(r.q, lc.q, dq, grads));
    add_in_place(dx, detail::linear_backward(r.k, lc.k, dk, grads));
    add_in_place(dx, detail::linear_backward(r.v, lc.v, dv, grads));
  }

  if (!up.embedding_out.empty()) add_in_place(dx, up.embedding_out);
  Matrix d_sum = detail::layer_norm_backward(dx, params.at("embed.norm.gamma"), tr.cache.embed_norm,
                                             grads.at("embed.norm.gamma"),
                                             grads.at("embed.norm.beta"));
  std::vector<std::size_t> token_rows(tr.tokens.begin(), tr.tokens.end());
  std::vector<std::size_t> position_rows(n);
  for (std::size_t i = 0; i < n; ++i) position_rows[i] = i;
  detail::embed_backward(detail::resolve(params, "embed.token", ""), token_rows,
                         tr.cache.token_projected, d_sum, grads);
  detail::embed_backward(detail::resolve(params, "embed.position", ""), position_rows,
                         tr.cache.position_projected, d_sum, grads);
}

/// Parameter gradients for one trace; masked entries are zero.
inline ParamBundle backward(const ModelConfig& cfg, const ParamBundle& params,
                            const ForwardTrace& tr, const TraceGradient& up,
                            const MaskSet& masks = {}) {
  ParamBundle grads = zeros_like(params);
  accumulate_gradients(cfg, params, tr, up, grads);
  apply_masks_to_gradients(grads, masks);
  return grads;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Config files ("key = value").
// ---------------------------------------------------------------------------

inline std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "# ladabert model config\n"
     << "vocab_size = " << c.vocab_size << '\n'
     << "embed_dim = " << c.embed_dim << '\n'
     << "num_layers = " << c.num_layers << '\n'
     << "num_heads = " << c.num_heads << '\n'
     << "ffn_dim = " << c.ffn_dim << '\n'
     << "max_seq_len = " << c.max_seq_len << '\n'
     << "num_classes = " << c.num_classes << '\n';
  return os.str();
}

inline ModelConfig parse_config(std::istream& is) {
  ModelConfig c;
  std::map<std::string, std::size_t*> fields = {
      {"vocab_size", &c.vocab_size}, {"embed_dim", &c.embed_dim},     {"num_layers", &c.num_layers},
      {"num_heads", &c.num_heads},   {"ffn_dim", &c.ffn_dim},         {"max_seq_len", &c.max_seq_len},
      {"num_classes", &c.num_classes}};
  std::string line;
  while (std::getline(is, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string key, eq;
    std::size_t value = 0;
    if (!(ls >> key)) continue;
    if (!(ls >> eq >> value) || eq != "=") throw FormatError("config: bad line '" + line + "'");
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("config: unknown key '" + key + "'");
    *it->second = value;
  }
  try {
    c.validate();
  } catch (const RangeError& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return c;
}

inline void save_config(const ModelConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("config: cannot write '" + path.string() + "'");
  os << format_config(c);
}

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("config: cannot open '" + path.string() + "'");
  return parse_config(is);
}

}  // namespace ladabert
