#include "gnr/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gnr/error.hpp"

namespace gnr {

Spacing parse_spacing(const std::string& name) {
  if (name == "leading") return Spacing::leading;
  if (name == "trailing") return Spacing::trailing;
  if (name == "linspace") return Spacing::linspace;
  throw ConfigError("unknown timestep spacing '" + name + "' (expected leading, trailing or linspace)");
}

std::string to_string(Spacing s) {
  switch (s) {
    case Spacing::leading: return "leading";
    case Spacing::trailing: return "trailing";
    case Spacing::linspace: return "linspace";
  }
  return "leading";
}

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar, std::vector<double> train_steps)
    : alpha_bar_(std::move(alpha_bar)), train_steps_(std::move(train_steps)) {
  if (alpha_bar_.size() < 3) {
    throw ArgumentError("noise schedule needs T >= 2 (got " + std::to_string(alpha_bar_.size()) + " levels)");
  }
  if (train_steps_.size() != alpha_bar_.size()) {
    throw ArgumentError("noise schedule: train step count does not match level count");
  }
  for (std::size_t t = 0; t < alpha_bar_.size(); ++t) {
    const double a = alpha_bar_[t];
    if (!(a > 0.0 && a <= 1.0)) {
      throw ArgumentError("noise schedule: alpha_bar[" + std::to_string(t) + "] = " + std::to_string(a) +
                          " outside (0, 1]");
    }
    if (t > 0 && !(a < alpha_bar_[t - 1])) {
      throw ArgumentError("noise schedule: alpha_bar must be strictly decreasing (violated at t=" +
                          std::to_string(t) + ")");
    }
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) {
    throw ArgumentError("step index " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
  }
  return alpha_bar_[static_cast<std::size_t>(t)];
}

Timestep NoiseSchedule::timestep(int t) const {
  const double a = alpha_bar(t);
  return Timestep{t, train_steps_[static_cast<std::size_t>(t)], a};
}

std::uint64_t NoiseSchedule::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : alpha_bar_) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::vector<double> training_alpha_bars(const ScheduleProfile& profile) {
  const int n = profile.train_steps;
  if (n < 2) throw ConfigError("schedule profile needs at least 2 training steps");
  std::vector<double> betas(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double f = static_cast<double>(i) / (n - 1);
    if (profile.name == "scaled_linear") {
      const double s = std::sqrt(profile.beta_start) + f * (std::sqrt(profile.beta_end) - std::sqrt(profile.beta_start));
      betas[static_cast<std::size_t>(i)] = s * s;
    } else if (profile.name == "linear") {
      betas[static_cast<std::size_t>(i)] = profile.beta_start + f * (profile.beta_end - profile.beta_start);
    } else {
      throw ConfigError("unknown schedule profile '" + profile.name +
                        "' (expected scaled_linear, linear or explicit)");
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  long double acc = 1.0L;
  for (int i = 0; i < n; ++i) {
    acc *= 1.0L - static_cast<long double>(betas[static_cast<std::size_t>(i)]);
    out[static_cast<std::size_t>(i)] = static_cast<double>(acc);
  }
  return out;
}

namespace {

std::vector<int> inference_train_steps(int steps, const ScheduleProfile& p) {
  const int n = p.train_steps;
  if (steps > n) {
    throw ArgumentError("T = " + std::to_string(steps) + " exceeds the " + std::to_string(n) + " training steps");
  }
  std::vector<int> grid(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    int v = 0;
    switch (p.spacing) {
      case Spacing::leading: v = (t - 1) * (n / steps) + p.steps_offset; break;
      case Spacing::trailing:
        v = static_cast<int>(std::lround(n - (steps - t) * (static_cast<double>(n) / steps))) - 1;
        break;
      case Spacing::linspace:
        v = static_cast<int>(std::lround((t - 1) * static_cast<double>(n - 1) / (steps - 1)));
        break;
    }
    grid[static_cast<std::size_t>(t - 1)] = std::clamp(v, 0, n - 1);
  }
  return grid;
}

// Fractional training position whose cumulative level equals `a`, by linear
// interpolation on the training curve. Used to attach a timestep to
// explicit-level profiles.
double locate_train_step(const std::vector<double>& curve, double a) {
  if (a >= curve.front()) return 0.0;
  if (a <= curve.back()) return static_cast<double>(curve.size() - 1);
  const auto it = std::lower_bound(curve.begin(), curve.end(), a, [](double lhs, double rhs) { return lhs > rhs; });
  const std::size_t hi = static_cast<std::size_t>(it - curve.begin());
  const std::size_t lo = hi - 1;
  const double f = (curve[lo] - a) / (curve[lo] - curve[hi]);
  return static_cast<double>(lo) + f;
}

}  // namespace

NoiseSchedule make_schedule(int steps, const ScheduleProfile& profile) {
  if (steps < 2) throw ArgumentError("T must be >= 2 (got " + std::to_string(steps) + ")");
  if (profile.name == "explicit") {
    if (profile.alphas.size() != static_cast<std::size_t>(steps) + 1) {
      throw ConfigError("explicit schedule profile needs T+1 = " + std::to_string(steps + 1) + " values, got " +
                        std::to_string(profile.alphas.size()));
    }
    ScheduleProfile base;
    const std::vector<double> curve = training_alpha_bars(base);
    std::vector<double> train(profile.alphas.size());
    for (std::size_t t = 0; t < train.size(); ++t) train[t] = t == 0 ? 0.0 : locate_train_step(curve, profile.alphas[t]);
    return NoiseSchedule(profile.alphas, std::move(train));
  }
  const std::vector<double> curve = training_alpha_bars(profile);
  const std::vector<int> grid = inference_train_steps(steps, profile);
  std::vector<double> alpha(static_cast<std::size_t>(steps) + 1);
  std::vector<double> train(static_cast<std::size_t>(steps) + 1);
  alpha[0] = 1.0;
  train[0] = 0.0;
  for (int t = 1; t <= steps; ++t) {
    alpha[static_cast<std::size_t>(t)] = curve[static_cast<std::size_t>(grid[static_cast<std::size_t>(t - 1)])];
    train[static_cast<std::size_t>(t)] = grid[static_cast<std::size_t>(t - 1)];
  }
  return NoiseSchedule(std::move(alpha), std::move(train));
}

namespace {

// Coefficients for moving from level `from` to level `to`:
//   z_to = sqrt(a_to / a_from) z_from + sqrt(a_to) (sqrt(1/a_to - 1) - sqrt(1/a_from - 1)) eps
StepCoefficients transfer(double from, double to, Direction dir) {
  const long double af = from;
  const long double at = to;
  const long double a = std::sqrt(at / af);
  const long double b = std::sqrt(at) * (std::sqrt(1.0L / at - 1.0L) - std::sqrt(1.0L / af - 1.0L));
  return StepCoefficients{static_cast<double>(a), static_cast<double>(b), dir};
}

}  // namespace

StepCoefficients sample_coeffs(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps()) {
    throw ArgumentError("sampling step " + std::to_string(t) + " outside [1, " + std::to_string(s.steps()) + "]");
  }
  return transfer(s.alpha_bar(t), s.alpha_bar(t - 1), Direction::sampling);
}

StepCoefficients invert_coeffs(const NoiseSchedule& s, int t) {
  if (t < 0 || t > s.steps() - 1) {
    throw ArgumentError("inversion step " + std::to_string(t) + " outside [0, " + std::to_string(s.steps() - 1) +
                        "]");
  }
  return transfer(s.alpha_bar(t), s.alpha_bar(t + 1), Direction::inversion);
}

namespace {

Tensor affine(const Tensor& z, const Tensor& eps, const StepCoefficients& c) {
  require_same_shape(z, eps, "ddim step");
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = c.a * z[i] + c.b * eps[i];
  return out;
}

}  // namespace

Tensor ddim_sample_step(const Tensor& z, const Tensor& eps, int t, const NoiseSchedule& s) {
  return affine(z, eps, sample_coeffs(s, t));
}

Tensor ddim_invert_step(const Tensor& z, const Tensor& eps, int t, const NoiseSchedule& s) {
  return affine(z, eps, invert_coeffs(s, t));
}

}  // namespace gnr
