#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "mhlat/autodiff.hpp"
#include "mhlat/param_store.hpp"

namespace mhlat {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::map<std::string, double> per_param;  // max relative error per tensor
};

// Scalar objective built on the supplied tape from the current ParamStore values.
using Objective = std::function<Tensor(Tape&)>;

// Compares autodiff gradients of `f` against central differences
// (f(θ+eps) − f(θ−eps)) / 2eps for every coordinate of every tensor in `names`.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
// Leaves exactly `names` trainable. `after_backward`, if set, may tamper with
// the analytic gradients before comparison (fault-injection hook for tests).
inline FiniteDiffReport finite_diff_check(ParamStore& params, const std::set<std::string>& names,
                                          const Objective& f, double eps,
                                          const std::function<void(ParamStore&)>& after_backward = {}) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw ConfigError(detail::concat("finite-difference eps ", eps, " outside [1e-7, 1e-3]"));
  params.set_trainable(names);
  params.zero_grad();
  {
    Tape tape;
    Tensor loss = f(tape);
    if (!std::isfinite(loss.item())) throw NumericError("objective is non-finite at the base point");
    if (loss.requires_grad()) tape.backward(loss);
  }
  if (after_backward) after_backward(params);

  auto probe = [&]() {
    Tape tape = Tape::inference();
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("objective is non-finite at a probe point");
    return v;
  };

  FiniteDiffReport report;
  for (const auto& entry : params.entries()) {
    if (!names.contains(entry.name)) continue;
    Tensor t = entry.tensor;
    const RealMatrix analytic = t.grad();
    double worst = 0.0;
    for (std::size_t i = 0; i < t.value().size(); ++i) {
      const double original = t.value()[i];
      t.mutable_value()[i] = original + eps;
      const double up = probe();
      t.mutable_value()[i] = original - eps;
      const double down = probe();
      t.mutable_value()[i] = original;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      worst = std::max(worst, rel);
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = entry.name;
        report.worst_index = i;
      }
    }
    report.per_param[entry.name] = worst;
  }
  return report;
}

}  // namespace mhlat
