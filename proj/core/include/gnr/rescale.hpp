#pragma once

#include <optional>
#include <string>

#include "gnr/tensor.hpp"

namespace gnr {

enum class RescalePolicy { off, fixed, in_range };

RescalePolicy parse_rescale_policy(const std::string& s);
std::string to_string(RescalePolicy p);

struct RescaleConfig {
  RescalePolicy policy = RescalePolicy::in_range;
  double r_fixed = 1.5;
  double r_lower = 0.33;
  double r_upper = 3.0;
  double epsilon_norm = 1e-12;  // squared gradient norm below which guidance is skipped
  /// Ratio of squared norms (default) or of plain norms.
  bool squared = true;

  void validate() const;
};

/// ||delta||^2 / ||grad||^2 (or the unsquared ratio). Empty when the gradient
/// is degenerate, in which case the caller skips guidance for the step.
std::optional<double> current_ratio(const Tensor& cfg_delta, const Tensor& grad_sum, const RescaleConfig& cfg = {});

/// Scaling factor for the guider gradient.
///   off:      1
///   fixed:    r_fixed * r_cur
///   in_range: r_lower * r_cur  if 1/r_cur <= r_lower
///             1                if r_lower < 1/r_cur < r_upper
///             r_upper * r_cur  if 1/r_cur >= r_upper
double gamma(double r_cur, const RescaleConfig& cfg);

}  // namespace gnr
