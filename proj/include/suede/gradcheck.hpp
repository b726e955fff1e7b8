#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "suede/tensor.hpp"

namespace suede {

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index checked = 0;
  Index skipped = 0;  // coordinates where the discrete fingerprint moved
};

// Compares analytic gradients of a scalar function against central finite
// differences. `f` must be a deterministic function of `params`.
//
// `fingerprint`, when given, hashes the discrete decisions made inside `f`
// (e.g. top-k expert selection); coordinates whose +-h probes change the
// fingerprint sit on a selection boundary and are skipped rather than
// reported as gradient errors.
inline GradCheckResult grad_check(
    const std::function<Tensor()>& f, std::vector<Tensor> params,
    double h = 1e-5,
    const std::function<std::uint64_t()>& fingerprint = nullptr) {
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = f();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  std::uint64_t base_fp = fingerprint ? fingerprint() : 0;

  GradCheckResult result;
  NoGradGuard guard;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<double>& x = params[pi].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      double saved = x[i];
      x[i] = saved + h;
      double f_plus = f().item();
      std::uint64_t fp_plus = fingerprint ? fingerprint() : 0;
      x[i] = saved - h;
      double f_minus = f().item();
      std::uint64_t fp_minus = fingerprint ? fingerprint() : 0;
      x[i] = saved;
      if (fingerprint && (fp_plus != base_fp || fp_minus != base_fp)) {
        ++result.skipped;
        continue;
      }
      double numeric = (f_plus - f_minus) / (2.0 * h);
      double a = analytic[pi][i];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace suede
