#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "gnr/config.hpp"
#include "gnr/error.hpp"
#include "gnr/evalkit.hpp"
#include "gnr/image_io.hpp"
#include "gnr/latent_adapter.hpp"
#include "gnr/pipeline.hpp"
#include "gnr/toy_train.hpp"
#include "gnr/toy_unet.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kBackboneEnv = "GNR_BACKBONE_PATH";

// Flags shared by every command that runs the pipeline. Unset flags leave the
// preset / config-file value in place.
struct RunFlags {
  std::string backbone;
  std::string weights;
  std::string config_file;
  std::string preset;
  std::string mode;
  std::optional<double> w;
  std::optional<int> steps;
  std::optional<int> tau;
  std::optional<double> v_self;
  std::optional<double> v_feat;
  std::string rescale;
  std::optional<double> r_fixed;
  std::optional<double> r_lower;
  std::optional<double> r_upper;
  bool unsquared = false;
  bool cache_reference = false;
  std::optional<std::uint64_t> seed;
  std::string out = ".";

  void add_to(CLI::App& app, bool with_guidance = true) {
    app.add_option("--backbone", backbone, "toy or adapter:<name>");
    app.add_option("--weights", weights, std::string("Weights directory (default: $") + kBackboneEnv + " or .)");
    app.add_option("--config", config_file, "JSON config, or a diagnostics log whose first line echoes one");
    app.add_option("--steps,-T", steps, "Number of DDIM steps");
    app.add_option("--seed", seed, "Seed for all randomness");
    app.add_option("--out,-o", out, "Output directory")->capture_default_str();
    if (!with_guidance) return;
    app.add_option("--preset", preset, "default_edit or stylisation_edit");
    app.add_option("--mode", mode, "default or stylisation");
    app.add_option("--w", w, "CFG scale");
    app.add_option("--tau", tau, "Number of guided steps");
    app.add_option("--v-self", v_self, "Self-attention guider scale");
    app.add_option("--v-feat", v_feat, "Feature guider scale");
    app.add_option("--rescale", rescale, "off, fixed or in_range");
    app.add_option("--r-fixed", r_fixed);
    app.add_option("--r-lower", r_lower);
    app.add_option("--r-upper", r_upper);
    app.add_flag("--unsquared", unsquared, "Clamp the plain norm ratio instead of the squared one");
    app.add_flag("--cache-reference", cache_reference, "Keep reference internals from inversion");
  }

  fs::path weights_dir() const {
    if (!weights.empty()) return weights;
    if (const char* env = std::getenv(kBackboneEnv); env && *env) return env;
    return ".";
  }

  // preset < config file < flags
  gnr::RunConfig resolve() const {
    std::string config_text;
    if (!config_file.empty()) config_text = read_config(config_file);
    std::string name = preset;
    if (name.empty() && !config_text.empty()) name = gnr::config_preset(config_text);
    if (name.empty() && !mode.empty()) name = gnr::preset_for(gnr::parse_mode(mode));
    if (name.empty()) name = "default_edit";
    gnr::RunConfig cfg = gnr::preset_config(name);
    if (!config_text.empty()) {
      gnr::apply_config_json(cfg, config_text);
      cfg.preset = name;
    }
    if (!backbone.empty()) cfg.backbone = backbone;
    if (!mode.empty()) gnr::set_mode(cfg, gnr::parse_mode(mode));
    if (w) cfg.w = *w;
    if (steps) cfg.steps = *steps;
    if (tau) cfg.guiders.tau = *tau;
    if (v_self) gnr::set_v_self(cfg, *v_self);
    if (v_feat) gnr::set_v_feat(cfg, *v_feat);
    if (!rescale.empty()) cfg.rescale.policy = gnr::parse_rescale_policy(rescale);
    if (r_fixed) cfg.rescale.r_fixed = *r_fixed;
    if (r_lower) cfg.rescale.r_lower = *r_lower;
    if (r_upper) cfg.rescale.r_upper = *r_upper;
    if (unsquared) cfg.rescale.squared = false;
    if (cache_reference) cfg.cache_reference = true;
    if (seed) cfg.seed = *seed;
    return cfg;
  }

  static std::string read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw gnr::ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) {
      // A diagnostics log: the first line carries the echoed config.
      std::istringstream lines(text);
      std::string first;
      std::getline(lines, first);
      j = json::parse(first, nullptr, false);
      if (j.is_discarded()) throw gnr::ConfigError("config file '" + path + "' is not valid JSON");
    }
    if (j.is_object() && j.size() == 1 && j.contains("config")) j = j.at("config");
    return j.dump();
  }
};

fs::path ensure_dir(const std::string& dir) {
  fs::path p(dir);
  if (!p.empty()) fs::create_directories(p);
  return p;
}

gnr::Tensor load_image(const gnr::Backbone& h, const std::string& path) {
  const gnr::Shape shape = h.codec().image_shape();
  gnr::Tensor img = gnr::read_png(path, shape.at(0));
  if (img.shape() != shape) {
    throw gnr::ArgumentError("image '" + path + "' is " + std::to_string(img.dim(2)) + "x" +
                             std::to_string(img.dim(1)) + " but backbone '" + h.name() + "' expects " +
                             std::to_string(shape[2]) + "x" + std::to_string(shape[1]));
  }
  return img;
}

// Grids of tiny images are enlarged for viewing; per-image outputs keep the
// backbone resolution so they can be fed back in.
int upscale_for(const gnr::Tensor& img) { return std::max(1, 64 / std::max(1, img.dim(1))); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_log(const fs::path& path, const gnr::RunConfig& cfg, const std::vector<gnr::StepDiagnostics>& diags) {
  std::ofstream out(path);
  out << "{\"config\":" << gnr::config_to_json(cfg) << "}\n";
  gnr::write_diagnostics_jsonl(out, diags);
}

double relative_error(const gnr::Tensor& a, const gnr::Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

struct Prompts {
  std::string src;
  std::string trg;
};

// --- Commands ------------------------------------------------------------------

int cmd_edit(const RunFlags& f, const std::string& image, const Prompts& p, const std::string& plot) {
  const gnr::RunConfig cfg = f.resolve();
  const auto h = gnr::load_backbone(cfg.backbone, f.weights_dir());
  gnr::EditRequest req;
  req.image = load_image(*h, image);
  req.y_src = p.src;
  req.y_trg = p.trg;
  gnr::apply_to_request(cfg, req);
  const gnr::EditResult res = gnr::edit(*h, req);
  const fs::path out = ensure_dir(f.out);
  gnr::write_png(out / "edited.png", res.image);
  write_log(out / "diagnostics.jsonl", cfg, res.diagnostics);
  if (!plot.empty()) {
    std::ofstream svg(plot);
    gnr::write_norm_curves_svg(svg, res.diagnostics);
  }
  std::cout << "wrote " << (out / "edited.png").string() << " and " << (out / "diagnostics.jsonl").string() << '\n';
  return 0;
}

int cmd_invert(const RunFlags& f, const std::string& image, const Prompts& p) {
  const gnr::RunConfig cfg = f.resolve();
  const auto h = gnr::load_backbone(cfg.backbone, f.weights_dir());
  const gnr::NoiseSchedule s = gnr::make_schedule(cfg.steps, cfg.schedule);
  const gnr::TrajectoryCache cache = gnr::invert(*h, load_image(*h, image), p.src, s);
  const fs::path out = ensure_dir(f.out);
  gnr::save_trajectory(out / "trajectory.bin", cache, p.src);
  std::cout << "wrote " << (out / "trajectory.bin").string() << " (" << cache.latents.size()
            << " latents, fingerprint " << std::hex << cache.fingerprint() << std::dec << ")\n";
  return 0;
}

int cmd_reconstruct(const RunFlags& f, const std::string& image, const std::string& trajectory, const Prompts& p) {
  const gnr::RunConfig cfg = f.resolve();
  const auto h = gnr::load_backbone(cfg.backbone, f.weights_dir());
  const gnr::NoiseSchedule s = gnr::make_schedule(cfg.steps, cfg.schedule);
  gnr::TrajectoryCache cache;
  gnr::Tensor original;
  if (!trajectory.empty()) {
    cache = gnr::load_trajectory(trajectory, *h);
    original = image.empty() ? h->codec().decode(cache.latents.front()) : load_image(*h, image);
  } else {
    if (image.empty()) throw gnr::ArgumentError("reconstruct needs an image or --trajectory");
    original = load_image(*h, image);
    cache = gnr::invert(*h, original, p.src, s);
  }
  const gnr::Tensor rec = gnr::reconstruct(*h, cache, s);
  const fs::path out = ensure_dir(f.out);
  gnr::write_png(out / "reconstructed.png", rec);
  std::cout << "relative_error " << fmt(relative_error(rec, original)) << '\n';
  return 0;
}

int cmd_naive(const RunFlags& f, const std::string& image, const Prompts& p) {
  const gnr::RunConfig cfg = f.resolve();
  const auto h = gnr::load_backbone(cfg.backbone, f.weights_dir());
  const gnr::NoiseSchedule s = gnr::make_schedule(cfg.steps, cfg.schedule);
  const gnr::TrajectoryCache cache = gnr::invert(*h, load_image(*h, image), p.src, s);
  gnr::NaiveTrace trace;
  const gnr::Tensor img = gnr::naive_edit(*h, cache, s, p.trg, cfg.w, &cfg.guiders, &trace);
  const fs::path out = ensure_dir(f.out);
  gnr::write_png(out / "naive.png", img);
  write_log(out / "diagnostics.jsonl", cfg, trace.diagnostics);
  std::cout << "wrote " << (out / "naive.png").string() << '\n';
  return 0;
}

// Applies one grid value. A zero guider scale keeps the guider for
// measurement only, so the cell matches the run without it.
void apply_sweep_value(gnr::RunConfig& cfg, const std::string& param, double v) {
  if (param == "v_self") {
    gnr::set_v_self(cfg, v);
  } else if (param == "v_feat") {
    gnr::set_v_feat(cfg, v);
  } else if (param == "w") {
    cfg.w = v;
  } else if (param == "tau") {
    if (v != std::floor(v)) throw gnr::ArgumentError("tau grid values must be integers");
    cfg.guiders.tau = static_cast<int>(v);
  } else {
    throw gnr::ArgumentError("sweep parameter must be one of v_self, v_feat, w, tau");
  }
}

// Self-attention energy at the last guided step; NaN when nothing was guided.
double final_self_attn_energy(const std::vector<gnr::StepDiagnostics>& diags) {
  double e = std::numeric_limits<double>::quiet_NaN();
  for (const gnr::StepDiagnostics& d : diags) {
    if (!d.guided) continue;
    for (const auto& [label, v] : d.energies) {
      if (label == "self_attn") e = v;
    }
  }
  return e;
}

int cmd_sweep(const RunFlags& f, const std::string& image, const Prompts& p, const std::string& param,
              const std::vector<double>& values) {
  if (values.empty()) throw gnr::ArgumentError("sweep grid is empty");
  const gnr::RunConfig base = f.resolve();
  const auto h = gnr::load_backbone(base.backbone, f.weights_dir());
  const gnr::NoiseSchedule s = gnr::make_schedule(base.steps, base.schedule);
  const gnr::Tensor src = load_image(*h, image);
  const gnr::TrajectoryCache cache = gnr::invert(*h, src, p.src, s, base.cache_reference);
  const fs::path out = ensure_dir(f.out);
  std::ofstream log(out / "sweep.jsonl");
  log << "{\"config\":" << gnr::config_to_json(base) << ",\"param\":\"" << param << "\"}\n";
  std::vector<gnr::Tensor> panels;
  for (std::size_t i = 0; i < values.size(); ++i) {
    gnr::RunConfig cfg = base;
    apply_sweep_value(cfg, param, values[i]);
    gnr::EditRequest req;
    req.image = src;
    req.y_src = p.src;
    req.y_trg = p.trg;
    gnr::apply_to_request(cfg, req);
    const gnr::EditResult res = gnr::edit(*h, req, cache, s);
    const double final_energy = final_self_attn_energy(res.diagnostics);
    const std::string name = "sweep_" + std::to_string(i) + ".png";
    gnr::write_png(out / name, res.image);
    panels.push_back(res.image);
    json j;
    j["index"] = i;
    j["value"] = values[i];
    j["file"] = name;
    j["final_self_attn_energy"] = std::isnan(final_energy) ? json(nullptr) : json(final_energy);
    const double mean_e = gnr::mean_guided_energy(res.diagnostics, "self_attn");
    j["mean_guided_self_attn_energy"] = std::isnan(mean_e) ? json(nullptr) : json(mean_e);
    log << j.dump() << '\n';
    std::cout << param << "=" << fmt(values[i]) << " -> " << name << " final_self_attn_energy " << fmt(final_energy)
              << '\n';
  }
  const gnr::Tensor grid = gnr::tile_grid(panels, static_cast<int>(panels.size()));
  gnr::write_png(out / "sweep_grid.png", grid, upscale_for(panels.front()));
  return 0;
}

struct EvalFlags {
  std::string method = "ours";
  bool no_metrics = false;
  std::string lpips = gnr::kDefaultLpips;
  std::string clip = gnr::kDefaultClip;
  std::string fid = gnr::kDefaultFid;
  std::string fid_reference;
  int jobs = 1;
};

int cmd_eval(const RunFlags& f, const EvalFlags& e, const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw gnr::IngestionError("cannot open manifest '" + manifest_path + "'");
  const std::vector<gnr::EditSpec> specs = gnr::read_manifest(in);
  if (specs.empty()) throw gnr::ArgumentError("manifest is empty");

  std::unique_ptr<gnr::LpipsProvider> lp;
  std::unique_ptr<gnr::ClipProvider> cp;
  std::unique_ptr<gnr::FidProvider> fp;
  gnr::MetricReport report;
  report.method = e.method;
  if (!e.no_metrics) {
    lp = gnr::make_lpips_provider(e.lpips);
    cp = gnr::make_clip_provider(e.clip);
    report.providers["lpips"] = lp->name() + "@" + lp->version();
    report.providers["clip"] = cp->name() + "@" + cp->version();
    if (!e.fid_reference.empty()) {
      fp = gnr::make_fid_provider(e.fid);
      report.providers["fid"] = fp->name() + "@" + fp->version();
    }
  }

  const fs::path out = ensure_dir(f.out);
  fs::create_directories(out / "edits");
  const auto start = std::chrono::steady_clock::now();
  report.edits.resize(specs.size());
  std::vector<gnr::Tensor> generated(specs.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr failure;

  auto worker = [&] {
    try {
      std::unique_ptr<gnr::Backbone> h;
      for (std::size_t i = next++; i < specs.size(); i = next++) {
        const gnr::EditSpec& spec = specs[i];
        RunFlags local = f;
        if (local.preset.empty() && local.mode.empty()) local.mode = gnr::to_string(gnr::mode_for(spec.edit_type));
        const gnr::RunConfig cfg = local.resolve();
        if (!h) h = gnr::load_backbone(cfg.backbone, f.weights_dir());
        const auto t0 = std::chrono::steady_clock::now();
        gnr::EditRequest req;
        req.image = load_image(*h, spec.image_ref);
        req.y_src = spec.y_src;
        req.y_trg = spec.y_trg;
        gnr::apply_to_request(cfg, req);
        const gnr::EditResult res = gnr::edit(*h, req);
        gnr::EditMetrics m;
        m.image_ref = spec.image_ref;
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (lp) m.lpips = gnr::lpips(req.image, res.image, *lp);
        if (cp) m.clip = gnr::clip_score(res.image, spec.y_trg, *cp);
        gnr::write_png(out / "edits" / (std::to_string(i) + ".png"), res.image);
        report.edits[i] = m;
        generated[i] = res.image;
      }
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!failure) failure = std::current_exception();
      next = specs.size();
    }
  };
  const int jobs = std::clamp(e.jobs, 1, static_cast<int>(specs.size()));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  if (fp) {
    std::vector<gnr::Tensor> reference;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(e.fid_reference)) {
      if (entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    const int channels = generated.front().dim(0);
    for (const fs::path& file : files) reference.push_back(gnr::read_png(file, channels));
    report.fid = gnr::fid(generated, reference, *fp);
    report.fid_generated = generated.size();
    report.fid_reference = reference.size();
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream rep(out / "report.jsonl");
  gnr::write_report(rep, report);
  std::cout << "evaluated " << specs.size() << " edits"
            << (e.no_metrics ? " (metrics disabled)" : "") << "; report at " << (out / "report.jsonl").string()
            << '\n';
  return 0;
}

int cmd_rank(const std::string& table, bool published, const std::string& out_file) {
  gnr::MetricTable t;
  if (published || table.empty()) {
    t = gnr::published_metric_table();
  } else {
    std::ifstream in(table);
    if (!in) throw gnr::IngestionError("cannot open table '" + table + "'");
    t = gnr::read_metric_table(in);
  }
  const gnr::RankTable ranks = gnr::average_rank(t);
  if (out_file.empty()) {
    gnr::write_rank_table(std::cout, ranks);
  } else {
    std::ofstream out(out_file);
    gnr::write_rank_table(out, ranks);
  }
  return 0;
}

int cmd_toy_train(const std::string& out_dir, int steps, std::uint64_t seed, int batch, double lr,
                  std::size_t dataset_size, bool adapter) {
  if (steps < 0) throw gnr::ArgumentError("--steps must be >= 0");
  gnr::TrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.batch = batch;
  cfg.learning_rate = lr;
  const fs::path out = ensure_dir(out_dir);
  if (adapter) {
    const gnr::AdapterBuild b = gnr::build_patch_pca_adapter(cfg, dataset_size);
    const fs::path file = out / (std::string(gnr::kPatchPcaAdapterName) + ".bin");
    b.adapter.save(file);
    std::cout << "initial_loss " << fmt(b.initial_loss) << "\nfinal_loss " << fmt(b.final_loss) << "\npsnr_floor "
              << fmt(b.adapter.patch_codec().psnr_floor()) << "\nwrote " << file.string() << '\n';
    return 0;
  }
  const gnr::TrainResult r = gnr::train_toy(gnr::make_shape_dataset(dataset_size, seed), cfg);
  const fs::path file = out / "toy.bin";
  r.net.save(file);
  std::cout << "initial_loss " << fmt(r.initial_loss) << "\nfinal_loss " << fmt(r.final_loss) << "\nwrote "
            << file.string() << '\n';
  return 0;
}

int cmd_manifest(const std::string& dataset, const std::string& source, std::uint64_t seed, std::size_t limit,
                 const std::string& out_file) {
  const auto specs = gnr::build_manifest(gnr::parse_dataset(dataset), source, seed, limit);
  if (out_file.empty() || out_file == "-") {
    gnr::write_manifest(std::cout, specs);
  } else {
    std::ofstream out(out_file);
    gnr::write_manifest(out, specs);
    std::cerr << "wrote " << specs.size() << " edit specs to " << out_file << '\n';
  }
  return 0;
}

int cmd_project(const RunFlags& f, const std::string& image, const Prompts& p, int step, const std::string& method) {
  const gnr::RunConfig cfg = f.resolve();
  const auto h = gnr::load_backbone(cfg.backbone, f.weights_dir());
  const gnr::NoiseSchedule s = gnr::make_schedule(cfg.steps, cfg.schedule);
  if (step < 0 || step > s.steps()) throw gnr::ArgumentError("--t must lie in [0, T]");
  const gnr::TrajectoryCache cache = gnr::invert(*h, load_image(*h, image), p.src, s);
  const gnr::PredictionRecord rec =
      gnr::predict(*h, cache.latents[static_cast<std::size_t>(step)], s.timestep(step), cache.y_src, true);
  const auto panels = gnr::project_internals(rec, gnr::parse_projection(method));
  const fs::path out = ensure_dir(f.out);
  for (const auto& panel : panels) {
    gnr::Tensor img = panel.image;
    for (double& v : img.data()) v = v * 2.0 - 1.0;
    std::string name = panel.label;
    std::replace(name.begin(), name.end(), '[', '_');
    name.erase(std::remove(name.begin(), name.end(), ']'), name.end());
    gnr::write_png(out / ("project_" + name + ".png"), img, std::max(1, 128 / img.dim(1)));
    std::cout << panel.label;
    for (double e : panel.explained) std::cout << ' ' << fmt(e);
    std::cout << '\n';
  }
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const gnr::CapabilityError*>(&e)) return 2;
  if (dynamic_cast<const gnr::NumericError*>(&e)) return 3;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided diffusion image editing with noise rescaling"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  RunFlags flags;
  Prompts prompts;
  std::string image, trajectory, plot, param, table, out_file, dataset, source, method = "pca3";
  std::vector<double> values;
  bool published = false, adapter = false, print_config = false;
  int step = 0, train_steps = 500, batch = 8;
  double lr = 2e-3;
  std::size_t dataset_size = 512, limit = 500;
  std::uint64_t seed = 0;
  EvalFlags eval;

  auto* edit = app.add_subcommand("edit", "Guided edit of one image");
  edit->add_option("image", image, "Input PNG")->required();
  edit->add_option("--src", prompts.src, "Source prompt")->required();
  edit->add_option("--trg", prompts.trg, "Target prompt")->required();
  edit->add_option("--plot", plot, "Write the per-step norm curves as SVG");
  edit->add_flag("--print-config", print_config, "Print the resolved config and exit");
  flags.add_to(*edit);

  auto* inv = app.add_subcommand("invert", "DDIM inversion; writes trajectory.bin");
  inv->add_option("image", image, "Input PNG")->required();
  inv->add_option("--src", prompts.src, "Source prompt")->required();
  flags.add_to(*inv, false);

  auto* rec = app.add_subcommand("reconstruct", "Invert and sample back; prints the relative error");
  rec->add_option("image", image, "Input PNG");
  rec->add_option("--src", prompts.src, "Source prompt");
  rec->add_option("--trajectory", trajectory, "Trajectory written by invert");
  flags.add_to(*rec, false);

  auto* naive = app.add_subcommand("naive", "CFG-only editing baseline");
  naive->add_option("image", image, "Input PNG")->required();
  naive->add_option("--src", prompts.src, "Source prompt")->required();
  naive->add_option("--trg", prompts.trg, "Target prompt")->required();
  flags.add_to(*naive);

  auto* sweep = app.add_subcommand("sweep", "Edit over a grid of one hyperparameter");
  sweep->add_option("image", image, "Input PNG")->required();
  sweep->add_option("--src", prompts.src, "Source prompt")->required();
  sweep->add_option("--trg", prompts.trg, "Target prompt")->required();
  sweep->add_option("--param", param, "v_self, v_feat, w or tau")->required();
  sweep->add_option("--values", values, "Grid values")->delimiter(',');
  flags.add_to(*sweep);

  auto* ev = app.add_subcommand("eval", "Run a manifest and write a metric report");
  ev->add_option("manifest", table, "Manifest (JSON lines)")->required();
  ev->add_option("--method", eval.method, "Method name recorded in the report");
  ev->add_flag("--no-metrics", eval.no_metrics, "Skip metric providers");
  ev->add_option("--lpips", eval.lpips, "LPIPS provider")->capture_default_str();
  ev->add_option("--clip", eval.clip, "CLIP provider")->capture_default_str();
  ev->add_option("--fid", eval.fid, "FID provider")->capture_default_str();
  ev->add_option("--fid-reference", eval.fid_reference, "Directory of reference PNGs for FID");
  ev->add_option("--jobs,-j", eval.jobs, "Worker threads");
  flags.add_to(*ev);

  auto* rank = app.add_subcommand("rank", "AverageRank over a methods x metrics table");
  rank->add_option("table", table, "Tab-separated table (default: the bundled published values)");
  rank->add_flag("--published", published, "Use the bundled published values");
  rank->add_option("--out,-o", out_file, "Output file (default: stdout)");

  auto* train = app.add_subcommand("toy-train", "Train the toy backbone (or the patch_pca adapter)");
  train->add_option("--steps", train_steps, "Optimizer steps")->capture_default_str();
  train->add_option("--seed", seed, "Seed")->capture_default_str();
  train->add_option("--batch", batch, "Batch size")->capture_default_str();
  train->add_option("--lr", lr, "Learning rate")->capture_default_str();
  train->add_option("--dataset-size", dataset_size, "Synthetic images")->capture_default_str();
  train->add_flag("--adapter", adapter, "Build the patch_pca latent adapter instead");
  train->add_option("--out,-o", flags.out, "Output directory")->capture_default_str();

  auto* man = app.add_subcommand("manifest", "Build an edit manifest from a dataset directory");
  man->add_option("--dataset", dataset, "custom, coco_styl, afhq_dog2cat or ffhq_emotion")->required();
  man->add_option("--source", source, "Dataset directory")->required();
  man->add_option("--seed", seed, "Seed")->capture_default_str();
  man->add_option("--limit", limit, "Maximum number of edits")->capture_default_str();
  man->add_option("--out,-o", out_file, "Output manifest (default: stdout)");

  auto* proj = app.add_subcommand("project", "Visualize attention maps and feature taps");
  proj->add_option("image", image, "Input PNG")->required();
  proj->add_option("--src", prompts.src, "Source prompt")->required();
  proj->add_option("--t", step, "Trajectory step to visualize")->capture_default_str();
  proj->add_option("--method", method, "pca3 or channel_mean")->capture_default_str();
  flags.add_to(*proj, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (edit->parsed()) {
      if (print_config) {
        std::cout << gnr::config_to_json(flags.resolve(), 2) << '\n';
        return 0;
      }
      return cmd_edit(flags, image, prompts, plot);
    }
    if (inv->parsed()) return cmd_invert(flags, image, prompts);
    if (rec->parsed()) return cmd_reconstruct(flags, image, trajectory, prompts);
    if (naive->parsed()) return cmd_naive(flags, image, prompts);
    if (sweep->parsed()) return cmd_sweep(flags, image, prompts, param, values);
    if (ev->parsed()) return cmd_eval(flags, eval, table);
    if (rank->parsed()) return cmd_rank(table, published, out_file);
    if (train->parsed()) return cmd_toy_train(flags.out, train_steps, seed, batch, lr, dataset_size, adapter);
    if (man->parsed()) return cmd_manifest(dataset, source, seed, limit, out_file);
    if (proj->parsed()) return cmd_project(flags, image, prompts, step, method);
  } catch (const gnr::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 1;
}
