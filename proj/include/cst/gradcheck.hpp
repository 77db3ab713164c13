// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cst/tensor.hpp"

namespace cst {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), one element at a time.
template <typename Scalar, typename Fn>
Tensor<Scalar> finite_diff_grad(Fn&& f, const Tensor<Scalar>& at, Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor<Scalar> grad(at.shape());
  Tensor<Scalar> probe = at;
  for (std::int64_t i = 0; i < at.size(); ++i) {
    const Scalar x = at[i];
    probe[i] = x + eps;
    const Scalar up = static_cast<Scalar>(f(probe));
    probe[i] = x - eps;
    const Scalar down = static_cast<Scalar>(f(probe));
    probe[i] = x;
    grad[i] = (up - down) / (Scalar(2) * eps);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheckOptions {
  int trials = 100;
  double eps = 1e-3;
  double tol32 = 1e-2;
  double tol64 = 1e-4;
  std::uint64_t seed = 20240601;
};

struct OpCheckResult {
  std::string op;
  int instances = 0;          ///< instances whose gradients were compared
  int skipped_instances = 0;  ///< composite instances rejected for kink proximity
  std::int64_t points = 0;
  std::int64_t skipped_points = 0;  ///< elements within eps of an emax tie or relu kink
  double max_err32 = 0.0;
  double max_err64 = 0.0;
  bool passed = true;
};

/// Names accepted by `run_gradcheck`.
const std::vector<std::string>& gradcheck_op_names();

/// Compares analytic gradients from the 32-bit engine and the 64-bit
/// verification engine against 64-bit central differences for each op.
/// Throws std::invalid_argument on an unknown op name.
std::vector<OpCheckResult> run_gradcheck(const std::vector<std::string>& ops, const GradCheckOptions& options);

}  // namespace cst
