#include "m1lab/grad_check.hpp"

#include <cmath>

#include "m1lab/error.hpp"

namespace m1lab {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) fail(ErrorKind::kNumeric, "grad_check: function evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
  for (auto& x : inputs) {
    if (!x.is_leaf() || !x.requires_grad()) fail(ErrorKind::kState, "grad_check: inputs must be leaves that require grad");
    x.zero_grad();
  }
  Tensor out = f();
  if (!std::isfinite(out.item())) fail(ErrorKind::kNumeric, "grad_check: function evaluated to a non-finite value");
  out.backward();

  GradCheckResult result;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto& x = inputs[which];
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double plus = evaluate(f);
      data[i] = saved - h;
      const double minus = evaluate(f);
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (err > result.max_rel_error || (which == 0 && i == 0)) {
        result = {err, which, i, analytic[i], numeric};
      }
    }
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  return grad_check([&] { return f(x); }, {x}, h).max_rel_error;
}

}  // namespace m1lab
