#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "suede/gradcheck.hpp"
#include "suede/rng.hpp"
#include "suede/tensor.hpp"

using namespace suede;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("elementwise add/exp/log identities") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor s = add(a, b);
  CHECK(s.data()[0] == 4.0);
  CHECK(s.data()[1] == 6.0);

  Tensor e = exp(Tensor::zeros({3}));
  for (double v : e.data()) CHECK(v == 1.0);

  Tensor x = Tensor::from_data({1}, {2.0});
  Tensor y = square(log(exp(x)));
  CHECK(y.item() == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("log rejects non-positive input") {
  Tensor x = Tensor::from_data({2}, {1.0, -1.0});
  CHECK_THROWS_AS(log(x), Error);
}

TEST_CASE("binary op shape mismatch is a dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4});
  CHECK_THROWS_AS(add(a, b), Error);
}

TEST_CASE("trailing-dimension broadcasting") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  Tensor c = add(a, b);
  std::vector<double> expect{11, 22, 33, 14, 25, 36};
  CHECK(c.data() == expect);

  Tensor col = Tensor::from_data({2, 1}, {100, 200});
  Tensor d = add(a, col);
  std::vector<double> expect2{101, 102, 103, 204, 205, 206};
  CHECK(d.data() == expect2);
}

TEST_CASE("matmul identity and orthogonal pick") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).data() == m.data());

  Tensor r = Tensor::from_data({1, 2}, {1, 0});
  Tensor c = Tensor::from_data({2, 1}, {0, 5});
  CHECK(matmul(r, c).item() == 0.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(17);
  Tensor a = rand_tensor({3, 4}, rng, false);
  Tensor b = rand_tensor({4, 2}, rng, false);
  Tensor c = matmul(a, b);
  auto ref = oracles::matmul_2d(a.data(), b.data(), 3, 4, 2);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(c.data()[i] == Catch::Approx(ref[i]).margin(1e-12));
}

TEST_CASE("matmul matches the oracle on random batched shapes") {
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    Index B = 1 + static_cast<Index>(rng.below(8));
    Index M = 1 + static_cast<Index>(rng.below(8));
    Index K = 1 + static_cast<Index>(rng.below(8));
    Index N = 1 + static_cast<Index>(rng.below(8));
    Tensor a = rand_tensor({B, M, K}, rng, false);
    Tensor b = rand_tensor({B, K, N}, rng, false);
    Tensor c = matmul(a, b);
    for (Index bb = 0; bb < B; ++bb) {
      std::vector<double> asub(a.data().begin() + bb * M * K,
                               a.data().begin() + (bb + 1) * M * K);
      std::vector<double> bsub(b.data().begin() + bb * K * N,
                               b.data().begin() + (bb + 1) * K * N);
      auto ref = oracles::matmul_2d(asub, bsub, M, K, N);
      for (Index i = 0; i < M * N; ++i)
        CHECK(c.data()[static_cast<std::size_t>(bb * M * N + i)] ==
              Catch::Approx(ref[static_cast<std::size_t>(i)]).margin(1e-12));
    }
  }
}

TEST_CASE("matmul broadcasts batch dims") {
  Rng rng(5);
  Tensor a = rand_tensor({2, 3, 4}, rng, false);
  Tensor w = rand_tensor({4, 5}, rng, false);
  Tensor c = matmul(a, w);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (Index bb = 0; bb < 2; ++bb) {
    std::vector<double> asub(a.data().begin() + bb * 12,
                             a.data().begin() + (bb + 1) * 12);
    auto ref = oracles::matmul_2d(asub, w.data(), 3, 4, 5);
    for (Index i = 0; i < 15; ++i)
      CHECK(c.data()[static_cast<std::size_t>(bb * 15 + i)] ==
            Catch::Approx(ref[static_cast<std::size_t>(i)]).margin(1e-12));
  }
}

TEST_CASE("softmax symmetry, stability, and reference values") {
  Tensor u = softmax(Tensor::zeros({4}), 0);
  for (double v : u.data()) CHECK(v == Catch::Approx(0.25).margin(1e-12));

  Tensor big = softmax(Tensor::from_data({2}, {1000.0, 0.0}), 0);
  CHECK(big.data()[0] == Catch::Approx(1.0).margin(1e-9));
  CHECK(std::isfinite(big.data()[1]));

  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor p = softmax(x, 0);
  auto ref = oracles::softmax_row({1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(p.data()[i] == Catch::Approx(ref[i]).margin(1e-14));
}

TEST_CASE("softmax rows sum to one for arbitrary magnitudes") {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> v(6);
    for (double& x : v) x = rng.uniform(-1e3, 1e3);
    Tensor p = softmax(Tensor::from_data({2, 3}, v), -1);
    for (int r = 0; r < 2; ++r) {
      double s = p.data()[r * 3] + p.data()[r * 3 + 1] + p.data()[r * 3 + 2];
      CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("layer_norm normalizes the last axis") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});

  Tensor c = layer_norm(Tensor::full({4}, 3.0), gain, bias);
  for (double v : c.data()) CHECK(v == Catch::Approx(0.0).margin(1e-9));

  Tensor pm = layer_norm(Tensor::from_data({2}, {1.0, -1.0}),
                         Tensor::full({2}, 1.0), Tensor::zeros({2}));
  CHECK(pm.data()[0] == Catch::Approx(1.0).margin(1e-2));
  CHECK(pm.data()[1] == Catch::Approx(-1.0).margin(1e-2));

  Rng rng(7);
  Tensor x = rand_tensor({3, 8}, rng, false);
  Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-10);
  for (int r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (int i = 0; i < 8; ++i) m += y.data()[r * 8 + i];
    m /= 8;
    for (int i = 0; i < 8; ++i) {
      double d = y.data()[r * 8 + i] - m;
      v += d * d;
    }
    v /= 8;
    CHECK(m == Catch::Approx(0.0).margin(1e-6));
    CHECK(v == Catch::Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("backward of sum gives ones; d(x*x) = 2x") {
  Rng rng(11);
  Tensor x = rand_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  sum_all(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor::from_data({1}, {3.0}, true);
  sum_all(mul(y, y)).backward();
  CHECK(y.grad()[0] == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::zeros({2}, true);
  CHECK_THROWS_AS(add(x, x).backward(), Error);
}

TEST_CASE("backward accumulates until zero_grad") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  Tensor l1 = sum_all(square(x));
  l1.backward();
  CHECK(x.grad()[0] == Catch::Approx(4.0));
  Tensor l2 = sum_all(square(x));
  l2.backward();
  CHECK(x.grad()[0] == Catch::Approx(8.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("backward is linear over independent subgraphs") {
  Rng rng(23);
  Tensor a = rand_tensor({4}, rng);
  Tensor b = rand_tensor({4}, rng);

  Tensor joint = add(sum_all(square(a)), sum_all(gelu(b)));
  joint.backward();
  std::vector<double> ga = a.grad(), gb = b.grad();

  a.zero_grad();
  b.zero_grad();
  sum_all(square(a)).backward();
  sum_all(gelu(b)).backward();
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.grad()[i] == Catch::Approx(ga[i]).margin(1e-12));
    CHECK(b.grad()[i] == Catch::Approx(gb[i]).margin(1e-12));
  }
}

TEST_CASE("grad_check: quadratic is exact up to rounding") {
  Rng rng(31);
  Tensor x = rand_tensor({5}, rng);
  auto f = [&] { return sum_all(square(x)); };
  auto r = grad_check(f, {x});
  CHECK(r.max_rel_error < 1e-9);
}

TEST_CASE("grad_check: softmax cross-entropy toy") {
  Rng rng(37);
  Tensor logits = rand_tensor({3, 4}, rng);
  auto f = [&] {
    Tensor p = softmax(logits, -1);
    // pick class j = row index via a fixed mask; NLL of that class
    std::vector<double> mask(12, 0.0);
    mask[0 * 4 + 1] = 1.0;
    mask[1 * 4 + 0] = 1.0;
    mask[2 * 4 + 3] = 1.0;
    Tensor m = Tensor::from_data({3, 4}, mask);
    return neg(sum_all(mul(m, log(p))));
  };
  auto r = grad_check(f, {logits});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("grad_check across the op set at random points") {
  Rng rng(41);
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({3}, rng);
  Tensor w = rand_tensor({3, 3}, rng);
  auto f = [&] {
    Tensor h = add(a, b);              // broadcast add
    h = matmul(h, w);                  // [2,3]x[3,3]
    h = gelu(h);
    h = div(h, add_scalar(square(b), 1.0));
    Tensor lse = logsumexp(h, -1);
    Tensor sm = softmax(h, 0);
    return add(sum_all(square(lse)), sum_all(mul(sm, h)));
  };
  auto r = grad_check(f, {a, b, w});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("grad_check through layer_norm, transpose, concat, slice") {
  Rng rng(43);
  Tensor x = rand_tensor({2, 2, 4}, rng);
  Tensor g = rand_tensor({4}, rng);
  Tensor c = rand_tensor({2, 1, 4}, rng);
  auto f = [&] {
    Tensor h = layer_norm(x, g, Tensor::zeros({4}));
    h = concat(c, h, 1);               // [2,3,4]
    h = transpose(h, 1, 2);            // [2,4,3]
    h = slice(h, 2, 0, 2);             // [2,4,2]
    return sum_all(square(h));
  };
  auto r = grad_check(f, {x, g, c});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("grad_check through gather/scatter") {
  Rng rng(47);
  Tensor x = rand_tensor({5, 3}, rng);
  std::vector<Index> idx{4, 0, 0, 2};
  auto f = [&] {
    Tensor rows = index_select(x, idx);
    Tensor back = scatter_add_rows(gelu(rows), idx, 5);
    return sum_all(square(back));
  };
  auto r = grad_check(f, {x});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("grad_check through batched matmul with broadcast") {
  Rng rng(53);
  Tensor a = rand_tensor({2, 2, 3}, rng);
  Tensor w = rand_tensor({3, 2}, rng);
  auto f = [&] { return sum_all(square(matmul(a, w))); };
  auto r = grad_check(f, {a, w});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("reshape and broadcast_to round-trip gradients") {
  Rng rng(59);
  Tensor x = rand_tensor({1, 1, 3}, rng);
  auto f = [&] {
    Tensor b = broadcast_to(x, {4, 2, 3});
    return sum_all(mul(b, b));
  };
  auto r = grad_check(f, {x});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("logsumexp matches extended-precision reference") {
  Rng rng(61);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> v(5);
    for (double& x : v) x = rng.uniform(-30, 30);
    Tensor t = logsumexp(Tensor::from_data({5}, v), 0);
    CHECK(t.item() == Catch::Approx(oracles::logsumexp_row(v)).margin(1e-10));
  }
}

TEST_CASE("no-grad mode skips graph recording") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  Tensor y = square(x);
  CHECK_FALSE(y.requires_grad());
}
