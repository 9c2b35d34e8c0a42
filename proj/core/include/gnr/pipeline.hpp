#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gnr/backbone.hpp"
#include "gnr/guidance.hpp"
#include "gnr/rescale.hpp"
#include "gnr/schedule.hpp"

namespace gnr {

struct EditRequest {
  Tensor image;
  std::string y_src;
  std::string y_trg;
  double w = 7.5;
  int steps = 50;
  GuiderStack guiders = default_guiders();
  RescaleConfig rescale;
  ScheduleProfile schedule;
  std::uint64_t seed = 0;
  /// Keep the source-branch reference records from inversion instead of
  /// recomputing them during editing.
  bool cache_reference = false;
  /// Replaces the rescale controller with a constant (testing hook).
  std::optional<double> force_gamma;

  void validate() const;
};

/// Inversion trajectory z*_0..z*_T for one source image.
struct TrajectoryCache {
  std::vector<Tensor> latents;
  Conditioning y_src;
  std::uint64_t schedule_fingerprint = 0;
  /// Optional records of predict(z*_t, t, y_src) with internals, index t.
  std::vector<PredictionRecord> reference;

  int steps() const { return static_cast<int>(latents.size()) - 1; }
  std::uint64_t fingerprint() const;
};

struct StepDiagnostics {
  int t = 0;
  double cfg_norm_sq = 0.0;
  double guider_grad_norm_sq = 0.0;
  std::optional<double> r_cur;  // empty on unguided or degenerate steps
  double gamma = 0.0;
  std::vector<std::pair<std::string, double>> energies;
  bool guided = false;      // T - t < tau
  bool degenerate = false;  // guided step whose gradient vanished; ran unguided
};

struct EditResult {
  Tensor image;
  Tensor latent;
  std::vector<StepDiagnostics> diagnostics;
  std::uint64_t trajectory_fingerprint = 0;
};

/// DDIM inversion with the source-conditioned prediction (w = 1).
TrajectoryCache invert(const Backbone& h, const Tensor& image, const std::string& y_src, const NoiseSchedule& s,
                       bool keep_reference = false);

/// Trajectory files keep the latents, the schedule fingerprint and the source
/// prompt text; loading re-embeds the prompt with `h`. Reference records are
/// not stored.
void save_trajectory(const std::filesystem::path& path, const TrajectoryCache& cache, const std::string& y_src);
TrajectoryCache load_trajectory(const std::filesystem::path& path, const Backbone& h, std::string* y_src = nullptr);

/// Samples back from z*_T with the source-conditioned prediction and decodes.
Tensor reconstruct(const Backbone& h, const TrajectoryCache& cache, const NoiseSchedule& s);

struct NaiveTrace {
  /// Guider energies measured at each step's z_t against the cache, for the
  /// steps the stack would guide (T - t < tau).
  std::vector<StepDiagnostics> diagnostics;
};

/// CFG-only sampling from z*_T toward y_trg. When `measure` is given, guider
/// energies are recorded into `trace` without affecting the trajectory.
Tensor naive_edit(const Backbone& h, const TrajectoryCache& cache, const NoiseSchedule& s, const std::string& y_trg,
                  double w, const GuiderStack* measure = nullptr, NaiveTrace* trace = nullptr);

/// The guided editing loop. Zero-scale guiders are measured on guided steps
/// but do not move the trajectory.
EditResult edit(const Backbone& h, const EditRequest& request);
EditResult edit(const Backbone& h, const EditRequest& request, const TrajectoryCache& cache,
                const NoiseSchedule& s);

/// Mean of one energy over the guided steps; NaN when nothing was guided.
double mean_guided_energy(const std::vector<StepDiagnostics>& diagnostics, const std::string& label);

/// One JSON object per step.
void write_diagnostics_jsonl(std::ostream& out, const std::vector<StepDiagnostics>& diagnostics);

}  // namespace gnr
