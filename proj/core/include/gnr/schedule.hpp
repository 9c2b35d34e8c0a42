#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gnr/tensor.hpp"

namespace gnr {

/// How inference steps 1..T are placed on the training timestep grid.
enum class Spacing { leading, trailing, linspace };

Spacing parse_spacing(const std::string& name);
std::string to_string(Spacing s);

/// Describes the beta law a schedule is derived from.
///
/// Profiles:
///  - "scaled_linear": betas = linspace(sqrt(beta_start), sqrt(beta_end), train_steps)^2,
///    the latent-diffusion training law (default).
///  - "linear": betas = linspace(beta_start, beta_end, train_steps).
///  - "explicit": `alphas` holds all T+1 cumulative values directly.
struct ScheduleProfile {
  std::string name = "scaled_linear";
  int train_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  Spacing spacing = Spacing::leading;
  int steps_offset = 1;
  std::vector<double> alphas;
};

/// Conditioning information a denoiser needs about the current noise level.
struct Timestep {
  int index = 0;          // inference step t in [0, T]
  double train_step = 0;  // position on the training grid (0 at t = 0)
  double alpha_bar = 1;   // cumulative signal level at this step
};

/// Cumulative noise levels alpha_bar_0..alpha_bar_T; alpha_bar_0 == 1.
/// Immutable after construction.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> alpha_bar, std::vector<double> train_steps);

  int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  std::span<const double> alpha_bars() const { return alpha_bar_; }
  Timestep timestep(int t) const;

  /// Hash of the exact alpha_bar bit patterns; detects cache/schedule mismatch.
  std::uint64_t fingerprint() const;

 private:
  std::vector<double> alpha_bar_;
  std::vector<double> train_steps_;
};

/// Cumulative products of (1 - beta) over the full training grid.
std::vector<double> training_alpha_bars(const ScheduleProfile& profile);

NoiseSchedule make_schedule(int steps, const ScheduleProfile& profile = {});

enum class Direction { sampling, inversion };

struct StepCoefficients {
  double a = 1.0;
  double b = 0.0;
  Direction direction = Direction::sampling;
};

/// z_{t-1} = a_t z_t + b_t eps, valid for 1 <= t <= T.
StepCoefficients sample_coeffs(const NoiseSchedule& s, int t);
/// z_{t+1} = a*_t z_t + b*_t eps, valid for 0 <= t <= T-1.
StepCoefficients invert_coeffs(const NoiseSchedule& s, int t);

Tensor ddim_sample_step(const Tensor& z, const Tensor& eps, int t, const NoiseSchedule& s);
Tensor ddim_invert_step(const Tensor& z, const Tensor& eps, int t, const NoiseSchedule& s);

}  // namespace gnr
