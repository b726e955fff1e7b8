#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "suede/gradcheck.hpp"
#include "suede/moe.hpp"

using namespace suede;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Dense evaluation of the combination rule: every expert on every token,
// weighted by the (mostly zero) router weights. No dispatch machinery.
std::vector<double> dense_combine(const SueLayer& layer, const Tensor& x,
                                  const RouterOutput& r) {
  Index d = x.dim(-1);
  Index tokens = r.tokens;
  std::vector<double> out(x.data().size(), 0.0);
  for (Index e = 0; e < layer.n_experts(); ++e) {
    Tensor ye = layer.routed[static_cast<std::size_t>(e)].forward(x);
    for (Index t = 0; t < tokens; ++t) {
      double w = r.weights.data()[static_cast<std::size_t>(
          t * layer.n_experts() + e)];
      for (Index i = 0; i < d; ++i)
        out[static_cast<std::size_t>(t * d + i)] +=
            w * ye.data()[static_cast<std::size_t>(t * d + i)];
    }
  }
  if (layer.has_shared) {
    Tensor se = layer.shared.forward(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += se.data()[i];
  }
  return out;
}

std::uint64_t hash_selection(const std::vector<Index>& sel) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index e : sel) {
    h ^= static_cast<std::uint64_t>(e) + 0x9e3779b97f4a7c15ULL;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

TEST_CASE("gate with all-zero parameters: uniform probs, tie-break to {0,1}") {
  Rng rng(1);
  GateNetwork gate;
  gate.weight = Tensor::zeros({8, 4}, true);
  gate.bias = Tensor::zeros({4}, true);
  Tensor x = rand_tensor({1, 3, 8}, rng);
  RouterOutput r = gate_forward(x, gate, 2);
  for (double p : r.probs.data()) CHECK(p == Catch::Approx(0.25).margin(1e-12));
  for (Index t = 0; t < r.tokens; ++t) {
    CHECK(r.selected_at(t, 0) == 0);
    CHECK(r.selected_at(t, 1) == 1);
  }
  const auto& w = r.weights.data();
  for (Index t = 0; t < r.tokens; ++t) {
    CHECK(w[t * 4 + 0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(w[t * 4 + 1] == Catch::Approx(0.5).margin(1e-12));
    CHECK(w[t * 4 + 2] == 0.0);
    CHECK(w[t * 4 + 3] == 0.0);
  }
}

TEST_CASE("gate on fixed logits [10,0,-10,0]: index 1 beats 3 on the tie") {
  // Identity-ish setup: x is one token whose gate output equals the logits.
  GateNetwork gate;
  gate.weight = Tensor::from_data({1, 4}, {10.0, 0.0, -10.0, 0.0});
  gate.bias = Tensor::zeros({4});
  Tensor x = Tensor::from_data({1, 1, 1}, {1.0});
  RouterOutput r = gate_forward(x, gate, 2);
  CHECK(r.selected_at(0, 0) == 0);
  CHECK(r.selected_at(0, 1) == 1);

  auto probs = oracles::softmax_row({10.0, 0.0, -10.0, 0.0});
  double denom = probs[0] + probs[1];
  CHECK(r.weights.data()[0] == Catch::Approx(probs[0] / denom).margin(1e-12));
  CHECK(r.weights.data()[1] == Catch::Approx(probs[1] / denom).margin(1e-12));
  CHECK(r.weights.data()[0] + r.weights.data()[1] ==
        Catch::Approx(1.0).margin(1e-12));
  CHECK(r.weights.data()[2] == 0.0);
  CHECK(r.weights.data()[3] == 0.0);
}

TEST_CASE("k = n keeps the full softmax as weights") {
  Rng rng(2);
  GateNetwork gate = GateNetwork::init(6, 4, rng);
  Tensor x = rand_tensor({2, 5, 6}, rng);
  RouterOutput r = gate_forward(x, gate, 4);
  for (std::size_t i = 0; i < r.probs.data().size(); ++i)
    CHECK(r.weights.data()[i] == Catch::Approx(r.probs.data()[i]).margin(1e-12));
}

TEST_CASE("k > n is a config error") {
  Rng rng(3);
  GateNetwork gate = GateNetwork::init(4, 2, rng);
  Tensor x = rand_tensor({1, 1, 4}, rng);
  CHECK_THROWS_AS(gate_forward(x, gate, 3), Error);
}

TEST_CASE("router weights: exactly k nonzero in (0,1], summing to 1") {
  Rng rng(4);
  GateNetwork gate = GateNetwork::init(8, 4, rng);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = rand_tensor({2, 8, 8}, rng);
    RouterOutput r = gate_forward(x, gate, 2);
    for (Index t = 0; t < r.tokens; ++t) {
      int nonzero = 0;
      double total = 0.0;
      for (Index e = 0; e < 4; ++e) {
        double w = r.weights.data()[static_cast<std::size_t>(t * 4 + e)];
        if (w != 0.0) {
          ++nonzero;
          CHECK(w > 0.0);
          CHECK(w <= 1.0);
          total += w;
        }
      }
      CHECK(nonzero == 2);
      CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
    double rowsum = 0.0;
    for (Index e = 0; e < 4; ++e) rowsum += r.probs.data()[e];
    CHECK(rowsum == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("shared expert inherits the base FFN and stays independent") {
  Rng rng(5);
  ExpertFfn base = ExpertFfn::init(6, 12, rng);
  ExpertFfn se = init_shared_expert(base);
  CHECK(se.w1.data() == base.w1.data());
  CHECK(se.w2.data() == base.w2.data());

  Tensor x = rand_tensor({2, 3, 6}, rng);
  Tensor ya = base.forward(x);
  Tensor yb = se.forward(x);
  for (std::size_t i = 0; i < ya.data().size(); ++i)
    CHECK(ya.data()[i] == yb.data()[i]);

  se.w1.mutable_data()[0] += 1.0;
  CHECK(base.w1.data()[0] != se.w1.data()[0]);
}

TEST_CASE("sue_forward collapses to the shared expert when routed are zero") {
  Rng rng(6);
  SueLayer layer = SueLayer::init(6, 12, 4, 2, /*with_shared=*/true, rng);
  for (auto& e : layer.routed) e.zero_output();
  Tensor x = rand_tensor({2, 4, 6}, rng);
  auto [y, r] = sue_forward(layer, x);
  Tensor se = layer.shared.forward(x);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y.data()[i] == Catch::Approx(se.data()[i]).margin(1e-15));
}

TEST_CASE("identical routed experts with zero shared: convexity gives E0(x)") {
  Rng rng(7);
  SueLayer layer = SueLayer::init(6, 12, 3, 3, /*with_shared=*/true, rng);
  layer.shared.zero_output();
  layer.routed[1] = layer.routed[0].clone();
  layer.routed[2] = layer.routed[0].clone();
  Tensor x = rand_tensor({1, 5, 6}, rng);
  auto [y, r] = sue_forward(layer, x);
  Tensor y0 = layer.routed[0].forward(x);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y.data()[i] == Catch::Approx(y0.data()[i]).margin(1e-12));
}

TEST_CASE("sparse dispatch equals the dense combination oracle") {
  Rng rng(8);
  for (int rep = 0; rep < 5; ++rep) {
    SueLayer layer = SueLayer::init(6, 10, 4, 2, rep % 2 == 0, rng);
    Tensor x = rand_tensor({2, 6, 6}, rng);
    auto [y, r] = sue_forward(layer, x);
    auto ref = dense_combine(layer, x, r);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(y.data()[i] == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("permuting experts together with gate columns leaves y unchanged") {
  Rng rng(9);
  SueLayer layer = SueLayer::init(5, 8, 4, 2, true, rng);
  Tensor x = rand_tensor({1, 7, 5}, rng);
  auto [y, r] = sue_forward(layer, x);

  std::vector<Index> perm{2, 0, 3, 1};  // new position of each old expert
  SueLayer permuted = layer;
  permuted.routed.resize(4);
  std::vector<double> w(5 * 4), b(4);
  for (Index old = 0; old < 4; ++old) {
    permuted.routed[static_cast<std::size_t>(perm[old])] =
        layer.routed[static_cast<std::size_t>(old)].clone();
    for (Index row = 0; row < 5; ++row)
      w[static_cast<std::size_t>(row * 4 + perm[old])] =
          layer.gate.weight.data()[static_cast<std::size_t>(row * 4 + old)];
    b[static_cast<std::size_t>(perm[old])] =
        layer.gate.bias.data()[static_cast<std::size_t>(old)];
  }
  permuted.gate.weight = Tensor::from_data({5, 4}, w, true);
  permuted.gate.bias = Tensor::from_data({4}, b, true);

  auto [y2, r2] = sue_forward(permuted, x);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y2.data()[i] == Catch::Approx(y.data()[i]).margin(1e-12));
}

TEST_CASE("router z-loss analytic values") {
  Tensor zeros = Tensor::zeros({1, 1, 4});
  double l = router_z_loss(zeros).item();
  double ln4 = std::log(4.0);
  CHECK(l == Catch::Approx(ln4 * ln4).margin(1e-9));

  // single expert, zero logit -> log-sum-exp is 0
  CHECK(router_z_loss(Tensor::zeros({1, 1, 1})).item() ==
        Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("router z-loss: constant logits give (c + ln n)^2 per token") {
  for (double c : {-3.0, 0.0, 1.7}) {
    Tensor logits = Tensor::full({2, 3, 4}, c);
    double expect = (c + std::log(4.0)) * (c + std::log(4.0));
    CHECK(router_z_loss(logits).item() == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("router z-loss matches extended-precision evaluation") {
  Rng rng(10);
  Shape shape{2, 3, 4};
  std::vector<double> v(24);
  for (double& x : v) x = rng.uniform(-5.0, 5.0);
  Tensor logits = Tensor::from_data(shape, v);
  long double acc = 0.0L;
  for (int t = 0; t < 6; ++t) {
    std::vector<double> row(v.begin() + t * 4, v.begin() + (t + 1) * 4);
    long double lse = oracles::logsumexp_row(row);
    acc += lse * lse;
  }
  double expect = static_cast<double>(acc / 6.0L);
  CHECK(router_z_loss(logits).item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("load balance loss at the uniform and concentrated extremes") {
  Index n = 4;
  // uniform probabilities, uniform dispatch (k=2 over 4 tokens covers all)
  Tensor probs = Tensor::full({1, 4, 4}, 0.25);
  std::vector<Index> sel{0, 1, 2, 3, 0, 1, 2, 3};
  CHECK(load_balance_loss(probs, sel, n).item() ==
        Catch::Approx(1.0).margin(1e-9));

  // all mass and dispatch on expert 0
  std::vector<double> onehot(16, 0.0);
  for (int t = 0; t < 4; ++t) onehot[t * 4] = 1.0;
  Tensor p1 = Tensor::from_data({1, 4, 4}, onehot);
  std::vector<Index> sel1{0, 0, 0, 0};
  CHECK(load_balance_loss(p1, sel1, n).item() ==
        Catch::Approx(4.0).margin(1e-9));
}

TEST_CASE("load balance loss matches a hand-counted mixed case") {
  // 8 tokens, n=4, k=1 dispatch: counts 4,2,1,1 -> f = .5,.25,.125,.125
  std::vector<Index> sel{0, 0, 0, 0, 1, 1, 2, 3};
  Rng rng(11);
  std::vector<double> pv(8 * 4);
  for (int t = 0; t < 8; ++t) {
    auto row = oracles::softmax_row({rng.uniform(-1, 1), rng.uniform(-1, 1),
                                     rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (int e = 0; e < 4; ++e) pv[t * 4 + e] = row[e];
  }
  Tensor probs = Tensor::from_data({2, 4, 4}, pv);

  double expect = 0.0;
  const double f[4] = {0.5, 0.25, 0.125, 0.125};
  for (int e = 0; e < 4; ++e) {
    double mean_p = 0.0;
    for (int t = 0; t < 8; ++t) mean_p += pv[t * 4 + e];
    mean_p /= 8.0;
    expect += f[e] * mean_p;
  }
  expect *= 4.0;
  CHECK(load_balance_loss(probs, sel, 4).item() ==
        Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("expert utilization: entropy extremes and analytic midpoint") {
  RouterOutput uniform;
  uniform.n_experts = 4;
  uniform.k = 1;
  uniform.tokens = 4;
  uniform.selected = {0, 1, 2, 3};
  auto rep = expert_utilization({uniform});
  CHECK(rep.entropy == Catch::Approx(std::log(4.0)).margin(1e-9));
  double fsum = 0;
  for (double f : rep.fractions) fsum += f;
  CHECK(fsum == Catch::Approx(1.0).margin(1e-9));

  RouterOutput single = uniform;
  single.selected = {2, 2, 2, 2};
  CHECK(expert_utilization({single}).entropy == Catch::Approx(0.0).margin(1e-12));

  RouterOutput skew;
  skew.n_experts = 2;
  skew.k = 1;
  skew.tokens = 4;
  skew.selected = {0, 0, 0, 1};
  double expect = -0.75 * std::log(0.75) - 0.25 * std::log(0.25);
  CHECK(expert_utilization({skew}).entropy ==
        Catch::Approx(expect).margin(1e-9));

  CHECK_THROWS_AS(expert_utilization({}), Error);
}

TEST_CASE("end-to-end gradient through gate, losses, and combination") {
  Rng rng(12);
  SueLayer layer = SueLayer::init(5, 8, 4, 2, true, rng);
  Tensor x = rand_tensor({1, 6, 5}, rng);

  std::vector<Index> last_selection;
  auto f = [&] {
    auto [y, r] = sue_forward(layer, x);
    last_selection = r.selected;
    Tensor lz = router_z_loss(r.logits);
    Tensor lb = load_balance_loss(r.probs, r.selected, layer.n_experts());
    Tensor fit = sum_all(square(y));
    return add(add(fit, scale(lz, 1e-3)), scale(lb, 1e-2));
  };
  auto fingerprint = [&] { return hash_selection(last_selection); };

  std::vector<Tensor> params{layer.gate.weight, layer.gate.bias,
                             layer.shared.w1,   layer.shared.b1,
                             layer.shared.w2,   layer.shared.b2,
                             layer.routed[0].w1, layer.routed[0].w2,
                             layer.routed[1].b1, layer.routed[1].b2};
  auto r = grad_check(f, params, 1e-5, fingerprint);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-4);
}
