#pragma once

// The scoring network: a local embedding layer, a stack of EdgeConv layers,
// jumping-knowledge concatenation and two sigmoid branches (S and E) whose
// scale and offset are conditioned on the bag's mean feature vector.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mesograph/autodiff.hpp"
#include "mesograph/errors.hpp"
#include "mesograph/matrix.hpp"
#include "mesograph/spatial_graph.hpp"

namespace mesograph {

/// One-hidden-layer perceptron: out = W2·relu(W1·x + b1) + b2.
struct MLPParams {
  Matrix W1;  // hidden×in
  Matrix b1;  // 1×hidden
  Matrix W2;  // out×hidden
  Matrix b2;  // 1×out

  std::size_t in() const { return W1.cols(); }
  std::size_t hidden() const { return W1.rows(); }
  std::size_t out() const { return W2.rows(); }
  bool operator==(const MLPParams&) const = default;
};

struct Architecture {
  std::size_t d0 = 0;
  std::size_t width = 10;       // d_k for every layer
  std::size_t num_layers = 5;   // K, including the local embedding layer
  std::size_t hidden = 10;      // hidden width of every MLP
  bool operator==(const Architecture&) const = default;
};

struct MesoGraphParams {
  Architecture arch;
  std::vector<MLPParams> layers;  // layers[0] is local (in = d0); the rest take 2·width
  MLPParams branch_s, branch_e;   // in = num_layers·width, out = 1
  MLPParams alpha_s, beta_s, alpha_e, beta_e;  // in = d0, out = 1

  bool operator==(const MesoGraphParams&) const = default;
};

inline MLPParams zero_mlp(std::size_t in, std::size_t hidden, std::size_t out) {
  return {Matrix(hidden, in), Matrix(1, hidden), Matrix(out, hidden), Matrix(1, out)};
}

inline MesoGraphParams zero_params(const Architecture& a) {
  if (a.num_layers < 2) throw UsageError("architecture needs at least 2 layers");
  if (a.d0 == 0 || a.width == 0 || a.hidden == 0) throw UsageError("architecture dimensions must be positive");
  MesoGraphParams p;
  p.arch = a;
  p.layers.push_back(zero_mlp(a.d0, a.hidden, a.width));
  for (std::size_t k = 1; k < a.num_layers; ++k) p.layers.push_back(zero_mlp(2 * a.width, a.hidden, a.width));
  const std::size_t jk = a.num_layers * a.width;
  p.branch_s = zero_mlp(jk, a.hidden, 1);
  p.branch_e = zero_mlp(jk, a.hidden, 1);
  p.alpha_s = zero_mlp(a.d0, a.hidden, 1);
  p.beta_s = zero_mlp(a.d0, a.hidden, 1);
  p.alpha_e = zero_mlp(a.d0, a.hidden, 1);
  p.beta_e = zero_mlp(a.d0, a.hidden, 1);
  return p;
}

/// Visits every parameter array in a fixed order with a stable name.
template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, MesoGraphParams>
void for_each_array(P& p, F&& f) {
  auto mlp = [&](const std::string& prefix, auto& m) {
    f(prefix + ".W1", m.W1);
    f(prefix + ".b1", m.b1);
    f(prefix + ".W2", m.W2);
    f(prefix + ".b2", m.b2);
  };
  for (std::size_t k = 0; k < p.layers.size(); ++k) mlp("layer" + std::to_string(k + 1), p.layers[k]);
  mlp("branch_s", p.branch_s);
  mlp("branch_e", p.branch_e);
  mlp("alpha_s", p.alpha_s);
  mlp("beta_s", p.beta_s);
  mlp("alpha_e", p.alpha_e);
  mlp("beta_e", p.beta_e);
}

inline std::size_t parameter_count(const MesoGraphParams& p) {
  std::size_t n = 0;
  for_each_array(p, [&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual Linear
/// default. Zero biases would leave alpha near 0 at the start (x_bar is ~0
/// after z-scoring) and the per-cell term never gets going.
inline MesoGraphParams init_params(const Architecture& a, std::uint64_t seed) {
  MesoGraphParams p = zero_params(a);
  std::mt19937_64 rng(seed);
  double limit = 0.0;  // set by each weight matrix, reused by the bias after it
  for_each_array(p, [&](const std::string& name, Matrix& m) {
    if (name.ends_with(".W1") || name.ends_with(".W2")) limit = 1.0 / std::sqrt(static_cast<double>(m.cols()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& v : m.values()) v = u(rng);
  });
  return p;
}

// ---------------------------------------------------------------------------
// Message index

/// Directed messages for EdgeConv: message e flows from source[e] into
/// target[e]. Each undirected edge contributes both directions; isolated
/// nodes get a single self message so they aggregate mlp(h_v || 0).
struct MessageIndex {
  std::size_t n = 0;
  std::vector<std::size_t> target;
  std::vector<std::size_t> source;
  std::vector<std::size_t> offsets;  // messages into v are [offsets[v], offsets[v+1])
};

inline MessageIndex message_index(std::size_t n, std::span<const Edge> edges) {
  std::vector<std::vector<std::size_t>> nbrs(n);
  for (const auto& [i, j] : edges) {
    if (i >= n || j >= n || i == j) throw UsageError("message_index: invalid edge");
    nbrs[i].push_back(j);
    nbrs[j].push_back(i);
  }
  MessageIndex mi;
  mi.n = n;
  mi.offsets.push_back(0);
  for (std::size_t v = 0; v < n; ++v) {
    auto& nb = nbrs[v];
    std::sort(nb.begin(), nb.end());
    if (nb.empty()) nb.push_back(v);
    for (std::size_t u : nb) {
      mi.target.push_back(v);
      mi.source.push_back(u);
    }
    mi.offsets.push_back(mi.source.size());
  }
  return mi;
}

inline MessageIndex message_index(const CellGraph& g) { return message_index(g.n, g.edges); }

// ---------------------------------------------------------------------------
// Forward pass on a tape

struct MLPVars {
  ad::Var W1, b1, W2, b2;
  ad::Var W1t, W2t;  // transposed views used in row-major products
};

struct ParamVars {
  std::vector<MLPVars> layers;
  MLPVars branch_s, branch_e, alpha_s, beta_s, alpha_e, beta_e;
};

inline MLPVars bind_mlp(ad::Tape& t, const MLPParams& m, bool requires_grad) {
  MLPVars v;
  v.W1 = t.leaf(m.W1, requires_grad);
  v.b1 = t.leaf(m.b1, requires_grad);
  v.W2 = t.leaf(m.W2, requires_grad);
  v.b2 = t.leaf(m.b2, requires_grad);
  v.W1t = ad::transpose(v.W1);
  v.W2t = ad::transpose(v.W2);
  return v;
}

/// Places every parameter on the tape as a leaf.
inline ParamVars bind(ad::Tape& t, const MesoGraphParams& p, bool requires_grad) {
  ParamVars v;
  for (const auto& l : p.layers) v.layers.push_back(bind_mlp(t, l, requires_grad));
  v.branch_s = bind_mlp(t, p.branch_s, requires_grad);
  v.branch_e = bind_mlp(t, p.branch_e, requires_grad);
  v.alpha_s = bind_mlp(t, p.alpha_s, requires_grad);
  v.beta_s = bind_mlp(t, p.beta_s, requires_grad);
  v.alpha_e = bind_mlp(t, p.alpha_e, requires_grad);
  v.beta_e = bind_mlp(t, p.beta_e, requires_grad);
  return v;
}

/// Gradients of the bound leaves, in the same layout as the parameters.
inline MesoGraphParams gradients(const ParamVars& v, const MesoGraphParams& like) {
  MesoGraphParams g = zero_params(like.arch);
  auto take = [](const MLPVars& src, MLPParams& dst) {
    auto copy = [](const ad::Var& var, Matrix& out) {
      if (!var.grad().empty()) out = var.grad();
    };
    copy(src.W1, dst.W1);
    copy(src.b1, dst.b1);
    copy(src.W2, dst.W2);
    copy(src.b2, dst.b2);
  };
  for (std::size_t k = 0; k < v.layers.size(); ++k) take(v.layers[k], g.layers[k]);
  take(v.branch_s, g.branch_s);
  take(v.branch_e, g.branch_e);
  take(v.alpha_s, g.alpha_s);
  take(v.beta_s, g.beta_s);
  take(v.alpha_e, g.alpha_e);
  take(v.beta_e, g.beta_e);
  return g;
}

inline ad::Var apply_mlp(const MLPVars& m, ad::Var x) {
  if (x.cols() != m.W1.cols()) {
    throw UsageError("mlp: input " + x.value().shape() + " does not match weights " + m.W1.value().shape());
  }
  const ad::Var hidden = ad::relu(ad::add_bias(ad::matmul(x, m.W1t), m.b1));
  return ad::add_bias(ad::matmul(hidden, m.W2t), m.b2);
}

/// h^(1) = mlp(X), row by row.
inline ad::Var local_embed(const MLPVars& m, ad::Var x) { return apply_mlp(m, x); }

/// One EdgeConv layer with mean aggregation:
///   h_v = 1/|N_v| Σ_{u∈N_v} mlp(h_v || h_v − h_u),   isolated v: mlp(h_v || 0).
/// Evaluated without materialising per-message inputs: the first linear map
/// splits as (A+B)·h_v − B·h_u, and the output map commutes with the mean.
inline ad::Var edgeconv_layer(const MLPVars& m, ad::Var h, const MessageIndex& mi) {
  const std::size_t d = h.cols();
  if (m.W1.cols() != 2 * d) {
    throw UsageError("edgeconv_layer: mlp expects input " + std::to_string(m.W1.cols()) + ", features give " +
                     std::to_string(2 * d));
  }
  if (h.rows() != mi.n) throw UsageError("edgeconv_layer: feature rows do not match graph size");
  // W1 = [A | B], so rows 0..d-1 of W1ᵀ are Aᵀ and rows d..2d-1 are Bᵀ.
  const ad::Var at = ad::slice_rows(m.W1t, 0, d);
  const ad::Var bt = ad::slice_rows(m.W1t, d, d);
  const ad::Var self_part = ad::add_bias(ad::matmul(h, ad::add(at, bt)), m.b1);  // n×hidden
  const ad::Var nbr_part = ad::matmul(h, bt);                                     // n×hidden
  const ad::Var agg = ad::relu_message_mean(self_part, nbr_part, mi.offsets, mi.source);
  return ad::add_bias(ad::matmul(agg, m.W2t), m.b2);
}

inline ad::Var jumping_knowledge(std::span<const ad::Var> layers) { return ad::concat_cols(layers); }

/// z_v = σ(α·branch(H_v) + β) with α = alpha_mlp(x̄), β = beta_mlp(x̄) shared by the bag.
inline ad::Var branch_score(ad::Var H, ad::Var x_bar, const MLPVars& branch, const MLPVars& alpha_mlp,
                            const MLPVars& beta_mlp) {
  const ad::Var t = apply_mlp(branch, H);
  const ad::Var alpha = apply_mlp(alpha_mlp, x_bar);
  const ad::Var beta = apply_mlp(beta_mlp, x_bar);
  return ad::sigmoid(ad::shift_by(ad::scale_by(t, alpha), beta));
}

struct ForwardVars {
  std::vector<ad::Var> layers;  // h^(1)..h^(K)
  ad::Var H;                    // n×(K·width)
  ad::Var x_bar;                // 1×d0
  ad::Var z_s, z_e;             // n×1
  ad::Var Z_s, Z_e, Z;          // 1×1
};

/// Full forward pass for node features X (n×d0) already on the tape.
inline ForwardVars forward(const ParamVars& p, ad::Var X, const MessageIndex& mi) {
  if (X.rows() == 0) throw UsageError("forward: empty bag");
  ForwardVars f;
  f.layers.push_back(local_embed(p.layers[0], X));
  for (std::size_t k = 1; k < p.layers.size(); ++k) f.layers.push_back(edgeconv_layer(p.layers[k], f.layers.back(), mi));
  f.H = jumping_knowledge(f.layers);
  f.x_bar = ad::mean_rows(X);
  f.z_s = branch_score(f.H, f.x_bar, p.branch_s, p.alpha_s, p.beta_s);
  f.z_e = branch_score(f.H, f.x_bar, p.branch_e, p.alpha_e, p.beta_e);
  f.Z_s = ad::mean_all(f.z_s);
  f.Z_e = ad::mean_all(f.z_e);
  f.Z = ad::sub(f.Z_s, f.Z_e);
  return f;
}

// ---------------------------------------------------------------------------
// Plain scoring

struct ScoreSet {
  std::vector<double> z_s;
  std::vector<double> z_e;
  double Z_s = 0.0;
  double Z_e = 0.0;
  double Z = 0.0;
};

inline ScoreSet bag_score(std::span<const double> z_s, std::span<const double> z_e) {
  if (z_s.size() != z_e.size()) throw UsageError("bag_score: branch lengths differ");
  if (z_s.empty()) throw UsageError("bag_score: empty bag");
  ScoreSet s;
  s.z_s.assign(z_s.begin(), z_s.end());
  s.z_e.assign(z_e.begin(), z_e.end());
  for (double v : z_s) s.Z_s += v;
  for (double v : z_e) s.Z_e += v;
  s.Z_s /= static_cast<double>(z_s.size());
  s.Z_e /= static_cast<double>(z_e.size());
  s.Z = s.Z_s - s.Z_e;
  return s;
}

inline ScoreSet to_score_set(const ForwardVars& f) {
  ScoreSet s;
  s.z_s = f.z_s.value().values();
  s.z_e = f.z_e.value().values();
  s.Z_s = f.Z_s.value()[0];
  s.Z_e = f.Z_e.value()[0];
  s.Z = f.Z.value()[0];
  return s;
}

/// Inference: scores for one graph, no gradients recorded.
inline ScoreSet score(const CellGraph& g, const MesoGraphParams& params, const MessageIndex& mi) {
  if (g.node_features.cols() != params.arch.d0) {
    throw UsageError("score: graph has " + std::to_string(g.node_features.cols()) + " features, model expects " +
                     std::to_string(params.arch.d0));
  }
  ad::Tape t;
  const ParamVars pv = bind(t, params, false);
  const ad::Var X = t.constant(g.node_features);
  return to_score_set(forward(pv, X, mi));
}

inline ScoreSet score(const CellGraph& g, const MesoGraphParams& params) {
  return score(g, params, message_index(g));
}

}  // namespace mesograph
