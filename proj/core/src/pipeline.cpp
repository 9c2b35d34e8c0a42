#include "gnr/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "binary_io.hpp"
#include "gnr/error.hpp"
#include "json.hpp"

namespace gnr {

namespace {

constexpr char kTrajectoryMagic[8] = {'G', 'N', 'R', 'T', 'R', 'A', 'J', '\0'};
constexpr std::uint32_t kTrajectoryVersion = 1;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void check_cache(const TrajectoryCache& cache, const NoiseSchedule& s) {
  if (cache.latents.empty()) throw ConsistencyError("trajectory cache is empty");
  if (cache.schedule_fingerprint != s.fingerprint() || cache.steps() != s.steps()) {
    throw ConsistencyError("trajectory cache was built with a different noise schedule");
  }
  if (!cache.reference.empty() && static_cast<int>(cache.reference.size()) != s.steps() + 1) {
    throw ConsistencyError("trajectory cache holds a partial set of reference records");
  }
}

PredictionRecord reference_at(const Backbone& h, const TrajectoryCache& cache, const NoiseSchedule& s, int t) {
  if (!cache.reference.empty()) return cache.reference[static_cast<std::size_t>(t)];
  return predict(h, cache.latents[static_cast<std::size_t>(t)], s.timestep(t), cache.y_src, true);
}

std::vector<std::pair<std::string, double>> label_energies(const GuiderStack& stack,
                                                           const std::vector<double>& values) {
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < values.size(); ++i) out.emplace_back(stack.guiders[i].label(), values[i]);
  return out;
}

// gamma() requires r_cur > 0; a vanishing CFG delta takes the limit r_cur -> 0.
double gamma_or_limit(double r_cur, const RescaleConfig& cfg) {
  if (r_cur > 0.0) return gamma(r_cur, cfg);
  return cfg.policy == RescalePolicy::off ? 1.0 : 0.0;
}

}  // namespace

void EditRequest::validate() const {
  if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("guidance scale w must be finite and >= 0");
  if (steps < 2) throw ArgumentError("step count T must be at least 2");
  guiders.validate(steps);
  rescale.validate();
}

std::uint64_t TrajectoryCache::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  h = fnv1a(h, &schedule_fingerprint, sizeof schedule_fingerprint);
  for (const Tensor& z : latents) h = fnv1a(h, z.data().data(), z.size() * sizeof(double));
  return h;
}

TrajectoryCache invert(const Backbone& h, const Tensor& image, const std::string& y_src, const NoiseSchedule& s,
                       bool keep_reference) {
  TrajectoryCache cache;
  cache.y_src = h.embed_prompt(y_src);
  cache.schedule_fingerprint = s.fingerprint();
  const int steps = s.steps();
  cache.latents.reserve(static_cast<std::size_t>(steps) + 1);
  cache.latents.push_back(h.codec().encode(image));
  check_latent(h, cache.latents.front());
  for (int t = 0; t < steps; ++t) {
    const Tensor& z = cache.latents.back();
    PredictionRecord rec = predict(h, z, s.timestep(t), cache.y_src, keep_reference);
    Tensor next = ddim_invert_step(z, rec.eps, t, s);
    if (!all_finite(next)) throw NumericError("inversion produced non-finite latents at t=" + std::to_string(t));
    if (keep_reference) cache.reference.push_back(std::move(rec));
    cache.latents.push_back(std::move(next));
  }
  if (keep_reference) cache.reference.push_back(predict(h, cache.latents.back(), s.timestep(steps), cache.y_src, true));
  return cache;
}

void save_trajectory(const std::filesystem::path& path, const TrajectoryCache& cache, const std::string& y_src) {
  detail::ByteWriter w;
  for (char ch : kTrajectoryMagic) w.put<char>(ch);
  w.put<std::uint32_t>(kTrajectoryVersion);
  w.put<std::uint64_t>(cache.schedule_fingerprint);
  w.put_string(y_src);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cache.latents.size()));
  for (const Tensor& z : cache.latents) w.put_tensor(z);
  detail::write_file(path, w.take());
}

TrajectoryCache load_trajectory(const std::filesystem::path& path, const Backbone& h, std::string* y_src) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  r.expect_magic(kTrajectoryMagic, "trajectory");
  const auto version = r.get<std::uint32_t>();
  if (version != kTrajectoryVersion) {
    throw ConsistencyError("trajectory format version " + std::to_string(version) + " is not supported");
  }
  TrajectoryCache cache;
  cache.schedule_fingerprint = r.get<std::uint64_t>();
  const std::string prompt = r.get_string();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    cache.latents.push_back(r.get_tensor());
    check_latent(h, cache.latents.back());
  }
  if (!r.at_end()) throw ConsistencyError("trailing bytes in trajectory file");
  cache.y_src = h.embed_prompt(prompt);
  if (y_src) *y_src = prompt;
  return cache;
}

Tensor reconstruct(const Backbone& h, const TrajectoryCache& cache, const NoiseSchedule& s) {
  check_cache(cache, s);
  Tensor z = cache.latents.back();
  for (int t = s.steps(); t >= 1; --t) {
    const Tensor eps = predict(h, z, s.timestep(t), cache.y_src, false).eps;
    z = ddim_sample_step(z, eps, t, s);
  }
  return h.codec().decode(z);
}

Tensor naive_edit(const Backbone& h, const TrajectoryCache& cache, const NoiseSchedule& s, const std::string& y_trg,
                  double w, const GuiderStack* measure, NaiveTrace* trace) {
  check_cache(cache, s);
  const Conditioning trg = h.embed_prompt(y_trg);
  const Conditioning null_c = h.embed_prompt("");
  const int steps = s.steps();
  if (trace) trace->diagnostics.clear();
  Tensor z = cache.latents.back();
  for (int t = steps; t >= 1; --t) {
    const Timestep ts = s.timestep(t);
    const Tensor eps_u = predict(h, z, ts, null_c, false).eps;
    const Tensor eps_c = predict(h, z, ts, trg, false).eps;
    const CfgOutput cfg = cfg_delta(eps_c, eps_u, w);
    if (measure && trace) {
      StepDiagnostics d;
      d.t = t;
      d.cfg_norm_sq = squared_norm(cfg.delta);
      d.guided = steps - t < measure->tau;
      if (d.guided && !measure->guiders.empty()) {
        const PredictionRecord ref = reference_at(h, cache, s, t);
        d.energies = label_energies(
            *measure, guider_energies(*measure, h, z, cache.latents[static_cast<std::size_t>(t)], ts, cache.y_src,
                                      trg, ref));
      }
      trace->diagnostics.push_back(std::move(d));
    }
    z = ddim_sample_step(z, cfg.eps_cfg, t, s);
  }
  return h.codec().decode(z);
}

EditResult edit(const Backbone& h, const EditRequest& request) {
  request.validate();
  const NoiseSchedule s = make_schedule(request.steps, request.schedule);
  const TrajectoryCache cache = invert(h, request.image, request.y_src, s, request.cache_reference);
  return edit(h, request, cache, s);
}

EditResult edit(const Backbone& h, const EditRequest& request, const TrajectoryCache& cache,
                const NoiseSchedule& s) {
  request.validate();
  check_cache(cache, s);
  if (s.steps() != request.steps) throw ConsistencyError("request step count does not match the schedule");
  const GuiderStack& stack = request.guiders;
  stack.validate(s.steps(), h.num_attn_layers());
  const bool guiding = stack.any_active();
  const bool measuring = !guiding && !stack.guiders.empty() && h.differentiable();
  if (guiding && !h.differentiable()) {
    throw CapabilityError("backbone '" + h.name() + "' does not support differentiation; guiders need gradients");
  }

  const Conditioning trg = h.embed_prompt(request.y_trg);
  const Conditioning null_c = h.embed_prompt("");
  const int steps = s.steps();

  EditResult result;
  result.trajectory_fingerprint = cache.fingerprint();
  result.diagnostics.reserve(static_cast<std::size_t>(steps));
  Tensor z = cache.latents.back();
  for (int t = steps; t >= 1; --t) {
    const Timestep ts = s.timestep(t);
    StepDiagnostics d;
    d.t = t;
    d.guided = steps - t < stack.tau;

    const Tensor eps_u = predict(h, z, ts, null_c, false).eps;
    std::optional<GuiderOutput> g;
    if (d.guided && guiding) {
      const PredictionRecord ref = reference_at(h, cache, s, t);
      g = guider_gradient(stack, h, z, cache.latents[static_cast<std::size_t>(t)], ts, cache.y_src, trg, ref);
      d.energies = label_energies(stack, g->energies);
      d.guider_grad_norm_sq = squared_norm(g->grad_sum);
    } else if (d.guided && measuring) {
      // Every scale is zero: record the energies, leave the trajectory alone.
      const PredictionRecord ref = reference_at(h, cache, s, t);
      d.energies = label_energies(
          stack, guider_energies(stack, h, z, cache.latents[static_cast<std::size_t>(t)], ts, cache.y_src, trg, ref));
    }
    const Tensor eps_c = g && g->eps_target ? *g->eps_target : predict(h, z, ts, trg, false).eps;
    const CfgOutput cfg = cfg_delta(eps_c, eps_u, request.w);
    d.cfg_norm_sq = squared_norm(cfg.delta);

    Tensor eps = cfg.eps_cfg;
    if (g) {
      const std::optional<double> r = current_ratio(cfg.delta, g->grad_sum, request.rescale);
      if (!r) {
        d.degenerate = true;
      } else {
        d.r_cur = *r;
        d.gamma = request.force_gamma ? *request.force_gamma : gamma_or_limit(*r, request.rescale);
        if (d.gamma != 0.0) eps = axpy(eps, d.gamma, g->grad_sum);
      }
    }
    z = ddim_sample_step(z, eps, t, s);
    if (!all_finite(z)) throw NumericError("editing produced non-finite latents at t=" + std::to_string(t));
    result.diagnostics.push_back(std::move(d));
  }
  result.latent = z;
  result.image = h.codec().decode(z);
  return result;
}

double mean_guided_energy(const std::vector<StepDiagnostics>& diagnostics, const std::string& label) {
  double sum = 0.0;
  int n = 0;
  for (const StepDiagnostics& d : diagnostics) {
    if (!d.guided) continue;
    for (const auto& [name, v] : d.energies) {
      if (name == label) {
        sum += v;
        ++n;
      }
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

void write_diagnostics_jsonl(std::ostream& out, const std::vector<StepDiagnostics>& diagnostics) {
  for (const StepDiagnostics& d : diagnostics) {
    nlohmann::ordered_json j;
    j["t"] = d.t;
    j["cfg_norm_sq"] = d.cfg_norm_sq;
    j["guider_grad_norm_sq"] = d.guider_grad_norm_sq;
    j["r_cur"] = d.r_cur ? nlohmann::ordered_json(*d.r_cur) : nlohmann::ordered_json(nullptr);
    j["gamma"] = d.gamma;
    nlohmann::ordered_json e = nlohmann::ordered_json::object();
    for (const auto& [name, v] : d.energies) e[name] = v;
    j["energies"] = e;
    j["guided"] = d.guided;
    j["degenerate"] = d.degenerate;
    out << j.dump() << '\n';
  }
}

}  // namespace gnr
