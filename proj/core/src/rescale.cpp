#include "gnr/rescale.hpp"

#include <cmath>

#include "gnr/error.hpp"

namespace gnr {

RescalePolicy parse_rescale_policy(const std::string& s) {
  if (s == "off") return RescalePolicy::off;
  if (s == "fixed") return RescalePolicy::fixed;
  if (s == "in_range") return RescalePolicy::in_range;
  throw ConfigError("unknown rescale policy '" + s + "' (expected off, fixed or in_range)");
}

std::string to_string(RescalePolicy p) {
  switch (p) {
    case RescalePolicy::off: return "off";
    case RescalePolicy::fixed: return "fixed";
    case RescalePolicy::in_range: return "in_range";
  }
  return "?";
}

void RescaleConfig::validate() const {
  if (policy == RescalePolicy::fixed && !(r_fixed > 0.0)) throw ConfigError("rescale.r_fixed must be positive");
  if (policy == RescalePolicy::in_range && !(r_lower > 0.0 && r_lower <= r_upper)) {
    throw ConfigError("rescale bounds must satisfy 0 < r_lower <= r_upper");
  }
  if (!(epsilon_norm > 0.0)) throw ConfigError("rescale.epsilon_norm must be positive");
}

std::optional<double> current_ratio(const Tensor& cfg_delta, const Tensor& grad_sum, const RescaleConfig& cfg) {
  require_same_shape(cfg_delta, grad_sum, "current_ratio");
  const double g = squared_norm(grad_sum);
  if (!(g >= cfg.epsilon_norm)) return std::nullopt;
  const double r = squared_norm(cfg_delta) / g;
  return cfg.squared ? r : std::sqrt(r);
}

double gamma(double r_cur, const RescaleConfig& cfg) {
  if (!(r_cur > 0.0) || !std::isfinite(r_cur)) {
    throw ArgumentError("gamma needs a positive finite ratio, got " + std::to_string(r_cur));
  }
  switch (cfg.policy) {
    case RescalePolicy::off:
      return 1.0;
    case RescalePolicy::fixed:
      return cfg.r_fixed * r_cur;
    case RescalePolicy::in_range: {
      const double inv = 1.0 / r_cur;
      if (inv <= cfg.r_lower) return cfg.r_lower * r_cur;
      if (inv >= cfg.r_upper) return cfg.r_upper * r_cur;
      return 1.0;
    }
  }
  return 1.0;
}

}  // namespace gnr
