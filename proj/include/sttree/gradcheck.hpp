#pragma once

// Central finite-difference validation of reverse-mode gradients. The loss
// builder is re-run without an active tape for every probe, so recorded
// closures never leak into the measurement.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sttree/model.hpp"

namespace sttree {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Relative error with a small-denominator floor: tiny true gradients are
// compared absolutely at the floor's scale instead of amplifying finite-
// difference noise.
inline double gradcheck_rel_err(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

inline GradCheckResult finite_difference_check(const std::vector<NamedParam>& params,
                                               const std::function<Tensor()>& make_loss,
                                               double h = 1e-5) {
  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = make_loss();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic[i] = params[i].tensor.grad_vec();

  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    double* val = t.data();
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double keep = val[j];
      val[j] = keep + h;
      const double up = make_loss().item();
      val[j] = keep - h;
      const double down = make_loss().item();
      val[j] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = gradcheck_rel_err(analytic[i][j], numeric);
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[i].name;
        res.worst_index = j;
      }
    }
  }
  return res;
}

}  // namespace sttree
