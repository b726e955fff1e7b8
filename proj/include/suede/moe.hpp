#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "suede/tensor.hpp"

namespace suede {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Two-layer FFN with GELU, the building block for both the base transformer
// MLP and every expert.
struct ExpertFfn {
  Tensor w1, b1, w2, b2;  // [D,H], [H], [H,D], [D]

  static ExpertFfn init(Index d_model, Index hidden, Rng& rng) {
    ExpertFfn f;
    f.w1 = Tensor::randn_trunc({d_model, hidden}, 0.02, rng);
    f.b1 = Tensor::zeros({hidden}, true);
    f.w2 = Tensor::randn_trunc({hidden, d_model}, 0.02, rng);
    f.b2 = Tensor::zeros({d_model}, true);
    return f;
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = gelu(add(matmul(x, w1), b1));
    return add(matmul(h, w2), b2);
  }

  Index d_model() const { return w1.shape()[0]; }
  Index hidden() const { return w1.shape()[1]; }

  // Deep copy: bit-identical values, independent gradient state.
  ExpertFfn clone() const {
    ExpertFfn f;
    f.w1 = w1.detach(true);
    f.b1 = b1.detach(true);
    f.w2 = w2.detach(true);
    f.b2 = b2.detach(true);
    return f;
  }

  // Forces the expert to the zero map (output layer zeroed).
  void zero_output() {
    std::fill(w2.mutable_data().begin(), w2.mutable_data().end(), 0.0);
    std::fill(b2.mutable_data().begin(), b2.mutable_data().end(), 0.0);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

// The shared expert inherits the base block's FFN: a deep copy that keeps
// training afterwards, independent of the original.
inline ExpertFfn init_shared_expert(const ExpertFfn& base_ffn) {
  return base_ffn.clone();
}

// Linear layer + softmax producing per-token expert weights.
struct GateNetwork {
  Tensor weight, bias;  // [D, n_experts], [n_experts]

  static GateNetwork init(Index d_model, Index n_experts, Rng& rng) {
    GateNetwork g;
    g.weight = Tensor::randn_trunc({d_model, n_experts}, 0.02, rng);
    g.bias = Tensor::zeros({n_experts}, true);
    return g;
  }

  Index n_experts() const { return weight.shape()[1]; }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Router decision for a batch of tokens. `weights` holds the full softmax
// restricted to the selected experts and renormalized to sum to 1 per token;
// entries outside the selection are exactly zero.
struct RouterOutput {
  Tensor logits;   // [B, L, n]
  Tensor probs;    // [B, L, n]
  Tensor weights;  // [B, L, n], k nonzero per token
  std::vector<Index> selected;  // [token][slot], flattened, ascending per token
  Index tokens = 0;
  Index n_experts = 0;
  Index k = 0;

  Index selected_at(Index token, Index slot) const {
    return selected[static_cast<std::size_t>(token * k + slot)];
  }
};

// Runs the gate: softmax over all n logits, keep the top-k (ties broken by
// lowest expert index), renormalize the kept weights to sum to 1.
inline RouterOutput gate_forward(const Tensor& x, const GateNetwork& gate,
                                 Index k) {
  Index n = gate.n_experts();
  require(k >= 1 && k <= n, ErrorCode::kConfig,
          "top-k " + std::to_string(k) + " out of range for " +
              std::to_string(n) + " experts");
  RouterOutput r;
  r.logits = add(matmul(x, gate.weight), gate.bias);
  r.probs = softmax(r.logits, -1);
  r.n_experts = n;
  r.k = k;
  r.tokens = r.probs.numel() / n;

  r.selected.resize(static_cast<std::size_t>(r.tokens * k));
  std::vector<double> mask(r.probs.data().size(), 0.0);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index t = 0; t < r.tokens; ++t) {
    const double* p = r.probs.data().data() + t * n;
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      if (p[a] != p[b]) return p[a] > p[b];
      return a < b;
    });
    std::sort(order.begin(), order.begin() + k);
    for (Index s = 0; s < k; ++s) {
      Index e = order[static_cast<std::size_t>(s)];
      r.selected[static_cast<std::size_t>(t * k + s)] = e;
      mask[static_cast<std::size_t>(t * n + e)] = 1.0;
    }
  }
  Tensor mask_t = Tensor::from_data(r.probs.shape(), std::move(mask));
  Tensor kept = mul(r.probs, mask_t);
  Tensor denom = sum(kept, -1, /*keepdims=*/true);
  r.weights = div(kept, denom);
  return r;
}

// One Shared Unified Expert layer: always-active shared expert plus top-k
// routed experts combined by the gate, y = SE(x) + sum_i w_i * E_i(x).
// The shared expert is optional so the plain-MoE ablation can drop it.
struct SueLayer {
  bool has_shared = false;
  ExpertFfn shared;
  std::vector<ExpertFfn> routed;
  GateNetwork gate;
  Index k = 2;

  static SueLayer init(Index d_model, Index hidden, Index n_experts, Index k,
                       bool with_shared, Rng& rng) {
    require(k >= 1 && k <= n_experts, ErrorCode::kConfig,
            "chosen-expert count must satisfy 1 <= k <= n");
    SueLayer l;
    l.has_shared = with_shared;
    if (with_shared) l.shared = ExpertFfn::init(d_model, hidden, rng);
    l.routed.reserve(static_cast<std::size_t>(n_experts));
    for (Index i = 0; i < n_experts; ++i)
      l.routed.push_back(ExpertFfn::init(d_model, hidden, rng));
    l.gate = GateNetwork::init(d_model, n_experts, rng);
    l.k = k;
    return l;
  }

  // Converts a base FFN into a SUE layer: the shared expert inherits the
  // base parameters, routed experts and gate start fresh.
  static SueLayer from_base_ffn(const ExpertFfn& base, Index n_experts,
                                Index k, bool with_shared, Rng& rng) {
    SueLayer l = init(base.d_model(), base.hidden(), n_experts, k, with_shared,
                      rng);
    if (with_shared) l.shared = init_shared_expert(base);
    return l;
  }

  Index n_experts() const { return static_cast<Index>(routed.size()); }

  void collect(const std::string& prefix, NamedParams& out) const {
    if (has_shared) shared.collect(prefix + ".shared", out);
    for (std::size_t i = 0; i < routed.size(); ++i)
      routed[i].collect(prefix + ".routed" + std::to_string(i), out);
    gate.collect(prefix + ".gate", out);
  }
};

// Forward through a SUE layer. Routed experts run only on the tokens that
// selected them; experts selected by no token are skipped entirely. The
// result equals the dense weighted sum because unselected weights are zero.
inline std::pair<Tensor, RouterOutput> sue_forward(const SueLayer& layer,
                                                   const Tensor& x) {
  RouterOutput r = gate_forward(x, layer.gate, layer.k);
  Index n = layer.n_experts();
  Index d = x.dim(-1);
  Index tokens = r.tokens;

  Tensor flat = reshape(x, {tokens, d});
  Tensor w_flat = reshape(r.weights, {tokens, n});

  std::vector<std::vector<Index>> per_expert(static_cast<std::size_t>(n));
  for (Index t = 0; t < tokens; ++t)
    for (Index s = 0; s < layer.k; ++s)
      per_expert[static_cast<std::size_t>(r.selected_at(t, s))].push_back(t);

  Tensor combined;
  bool first = true;
  for (Index e = 0; e < n; ++e) {
    const std::vector<Index>& idx = per_expert[static_cast<std::size_t>(e)];
    if (idx.empty()) continue;
    Tensor xe = index_select(flat, idx);
    Tensor ye = layer.routed[static_cast<std::size_t>(e)].forward(xe);
    Tensor we = index_select(slice(w_flat, 1, e, e + 1), idx);  // [T_e, 1]
    Tensor scattered = scatter_add_rows(mul(ye, we), idx, tokens);
    combined = first ? scattered : add(combined, scattered);
    first = false;
  }

  Tensor routed_sum = reshape(combined, x.shape());
  Tensor y = layer.has_shared ? add(layer.shared.forward(x), routed_sum)
                              : routed_sum;
  return {y, r};
}

// Router z-loss: mean over tokens of the squared log-normalizer of the gate
// logits, computed with a stable log-sum-exp.
inline Tensor router_z_loss(const Tensor& logits) {
  Index n = logits.dim(-1);
  Index tokens = logits.numel() / n;
  Tensor lse = logsumexp(logits, -1);
  return scale(sum_all(square(lse)), 1.0 / static_cast<double>(tokens));
}

// Load-balance loss n * sum_i f_i * P_i with f_i the fraction of dispatch
// slots assigned to expert i (a constant w.r.t. the graph) and P_i the mean
// router probability of expert i. Equals 1 at uniform dispatch/probabilities
// and n at full concentration on one expert.
inline Tensor load_balance_loss(const Tensor& probs,
                                const std::vector<Index>& selected,
                                Index n_experts) {
  Index tokens = probs.numel() / n_experts;
  require(tokens >= 1, ErrorCode::kContract,
          "load_balance_loss needs at least one token");
  std::vector<double> f(static_cast<std::size_t>(n_experts), 0.0);
  for (Index e : selected) f[static_cast<std::size_t>(e)] += 1.0;
  double total = static_cast<double>(selected.size());
  for (double& v : f) v /= total;

  Tensor flat = reshape(probs, {tokens, n_experts});
  Tensor mean_p = scale(sum(flat, 0), 1.0 / static_cast<double>(tokens));
  Tensor f_t = Tensor::from_data({n_experts}, std::move(f));
  return scale(sum_all(mul(mean_p, f_t)), static_cast<double>(n_experts));
}

struct UtilizationReport {
  std::vector<double> fractions;  // per-expert share of dispatch slots
  double entropy = 0.0;           // in [0, ln n]
};

// Aggregates dispatch statistics over any number of router outputs.
inline UtilizationReport expert_utilization(
    const std::vector<RouterOutput>& outputs) {
  require(!outputs.empty(), ErrorCode::kContract,
          "expert_utilization needs at least one router output");
  Index n = outputs.front().n_experts;
  std::vector<double> counts(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (const RouterOutput& r : outputs) {
    require(r.n_experts == n, ErrorCode::kContract,
            "router outputs disagree on expert count");
    require(r.tokens >= 1, ErrorCode::kContract,
            "router output with no tokens");
    for (Index e : r.selected) counts[static_cast<std::size_t>(e)] += 1.0;
    total += static_cast<double>(r.selected.size());
  }
  UtilizationReport rep;
  rep.fractions.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    double p = counts[static_cast<std::size_t>(i)] / total;
    rep.fractions[static_cast<std::size_t>(i)] = p;
    if (p > 0.0) rep.entropy -= p * std::log(p);
  }
  return rep;
}

}  // namespace suede
