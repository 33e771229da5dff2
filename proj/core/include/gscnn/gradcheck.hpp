#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gscnn/rng.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

// A coordinate only counts when the two one-sided slopes agree this closely
// (relative); otherwise the difference quotient is not trusted there. See
// gradcheck() below.
constexpr double kOracleAgreementTol = 5e-5;

// Slopes below this magnitude sit at the roundoff floor of an f64 central
// difference over a graph with thousands of flops (observed noise ~1e-11 at
// step 1e-5), so relative comparison is meaningless there. Both the relative
// error and the smoothness test use it as denominator floor, which turns the
// check into an absolute one of tol * kSlopeFloor for near-zero gradients. A
// scaled-but-wrong backward rule still trips it: a 10% error on a 1e-7
// gradient reads as 1e-8 / 1e-6 = 1e-2.
constexpr double kSlopeFloor = 1e-6;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  index_t worst_coord = -1;
  double worst_analytic = 0.0;  // slopes at worst_coord, for diagnosing
  double worst_numeric = 0.0;   // conditioning vs. genuine mismatches
  index_t n_checked = 0;
  index_t n_skipped = 0;  // coordinates rejected by the smoothness test
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool all_finite = true;

  // Every tensor must be finite, within tolerance, and actually scored on at
  // least one coordinate (a fully-skipped tensor is unverified, not passing).
  bool passed(double tol) const {
    if (!all_finite || max_rel_err >= tol) return false;
    for (const GradCheckEntry& e : entries)
      if (e.n_checked == 0) return false;
    return true;
  }
};

// Central-difference check of the recorded backward rules. `f` rebuilds the
// computation and returns the scalar loss; it must be deterministic and use
// the tensors in `params` as leaves. For each tensor up to n_coords
// coordinates are sampled; the analytic gradient is compared against
// (f(t+e) - f(t-e)) / 2e with the relative error
// |analytic - numeric| / max(|analytic| + |numeric|, kSlopeFloor).
//
// The difference quotient is itself an estimator, and it breaks in two ways
// that say nothing about the backward rules: a PReLU-style kink inside
// [x-e, x+e] (the quotient straddles two linear pieces), and float rounding
// of a long graph drowning a tiny true derivative. Both are caught by the
// same precondition: the forward slopes (f(x+e)-f(x))/e and (f(x)-f(x-e))/e
// must agree to kOracleAgreementTol, or the coordinate is skipped and
// another sampled in its place. The test uses forward values only, so it is
// blind to the analytic side and cannot hide a wrong backward rule; skipped
// counts are reported per tensor.
template <typename T>
GradCheckReport gradcheck(const std::function<Tensor<T>()>& f,
                          const std::vector<std::pair<std::string, Tensor<T>>>& params,
                          index_t n_coords, T step, std::uint64_t seed = 0x5eedULL,
                          double agreement_tol = kOracleAgreementTol) {
  GradCheckReport report;
  Rng rng(seed);

  for (auto& [name, t] : params) const_cast<Tensor<T>&>(t).zero_grad();
  Tensor<T> loss = f();
  if (!all_finite(loss)) {
    report.all_finite = false;
    GradCheckEntry bad;
    bad.name = "<loss>";
    bad.finite = false;
    report.entries.push_back(std::move(bad));
    return report;
  }
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, t] : params) {
    if (!t.has_grad())
      analytic.emplace_back(static_cast<std::size_t>(t.size()), T(0));
    else
      analytic.push_back(t.grad());
  }

  auto eval = [&]() -> double {
    NoGradGuard ng;
    Tensor<T> l = f();
    return static_cast<double>(l.data()[0]);
  };
  const double l0 = eval();

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor<T>& t = const_cast<Tensor<T>&>(params[pi].second);
    GradCheckEntry entry;
    entry.name = name;

    // Full Fisher-Yates shuffle of the index range; the first n_coords slots
    // are the sample, the rest serve as replacements for skipped ones.
    std::vector<index_t> order(static_cast<std::size_t>(t.size()));
    for (index_t i = 0; i < t.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    for (index_t ci : order) {
      if (entry.n_checked >= n_coords) break;
      T* slot = t.data() + ci;
      const T saved = *slot;
      *slot = saved + step;
      const double lp = eval();
      *slot = saved - step;
      const double lm = eval();
      *slot = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        entry.finite = false;
        entry.worst_coord = ci;
        report.all_finite = false;
        break;
      }
      const double d_plus = (lp - l0) / static_cast<double>(step);
      const double d_minus = (l0 - lm) / static_cast<double>(step);
      if (std::abs(d_plus - d_minus) >
          agreement_tol * std::max(std::abs(d_plus) + std::abs(d_minus), kSlopeFloor)) {
        ++entry.n_skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[pi][static_cast<std::size_t>(ci)]);
      const double rel =
          std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), kSlopeFloor);
      ++entry.n_checked;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_coord = ci;
        entry.worst_analytic = a;
        entry.worst_numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace gscnn
