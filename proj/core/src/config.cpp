#include "gnr/config.hpp"

#include "gnr/error.hpp"
#include "gnr/pipeline.hpp"
#include "json.hpp"

namespace gnr {

using json = nlohmann::ordered_json;

namespace {

const json& at_object(const json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  return j;
}

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

double get_number(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return j.get<double>();
}

int get_int(const json& j, const std::string& key) {
  if (!j.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  return j.get<int>();
}

json guider_to_json(const GuiderConfig& g) {
  json j;
  j["kind"] = to_string(g.kind);
  j["scale"] = g.scale;
  j["layers"] = g.layers;
  j["tap"] = g.tap;
  j["branch"] = to_string(g.branch);
  return j;
}

GuiderConfig guider_from_json(const json& j) {
  at_object(j, "guider entry");
  if (!j.contains("kind")) throw ConfigError("guider entry needs a 'kind'");
  const GuiderKind kind = parse_guider_kind(get<std::string>(j.at("kind"), "kind"));
  GuiderConfig g;
  switch (kind) {
    case GuiderKind::self_attn: g = self_attn_guider(0.0); break;
    case GuiderKind::latent_l2: g = latent_l2_guider(0.0); break;
    case GuiderKind::feature_l1: g = feature_guider(FeatureNorm::l1, 0.0, Branch::source); break;
    case GuiderKind::feature_l2: g = feature_guider(FeatureNorm::l2, 0.0, Branch::target); break;
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") continue;
    if (key == "scale") g.scale = get_number(v, "guiders.scale");
    else if (key == "layers") g.layers = get<std::vector<int>>(v, "guiders.layers");
    else if (key == "tap") g.tap = get<std::string>(v, "guiders.tap");
    else if (key == "branch") g.branch = parse_branch(get<std::string>(v, "guiders.branch"));
    else throw ConfigError("unknown guider key '" + key + "'");
  }
  return g;
}

void apply_rescale(RescaleConfig& r, const json& j) {
  at_object(j, "rescale");
  for (const auto& [key, v] : j.items()) {
    if (key == "policy") r.policy = parse_rescale_policy(get<std::string>(v, "rescale.policy"));
    else if (key == "r_fixed") r.r_fixed = get_number(v, "rescale.r_fixed");
    else if (key == "r_lower") r.r_lower = get_number(v, "rescale.r_lower");
    else if (key == "r_upper") r.r_upper = get_number(v, "rescale.r_upper");
    else if (key == "epsilon_norm") r.epsilon_norm = get_number(v, "rescale.epsilon_norm");
    else if (key == "squared") r.squared = get<bool>(v, "rescale.squared");
    else throw ConfigError("unknown rescale key '" + key + "'");
  }
}

void apply_schedule(ScheduleProfile& s, const json& j) {
  at_object(j, "schedule");
  for (const auto& [key, v] : j.items()) {
    if (key == "name") s.name = get<std::string>(v, "schedule.name");
    else if (key == "train_steps") s.train_steps = get_int(v, "schedule.train_steps");
    else if (key == "beta_start") s.beta_start = get_number(v, "schedule.beta_start");
    else if (key == "beta_end") s.beta_end = get_number(v, "schedule.beta_end");
    else if (key == "spacing") s.spacing = parse_spacing(get<std::string>(v, "schedule.spacing"));
    else if (key == "steps_offset") s.steps_offset = get_int(v, "schedule.steps_offset");
    else if (key == "alphas") s.alphas = get<std::vector<double>>(v, "schedule.alphas");
    else throw ConfigError("unknown schedule key '" + key + "'");
  }
}

json parse_object(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  at_object(j, "config");
  return j;
}

}  // namespace

bool RunConfig::operator==(const RunConfig& o) const { return config_to_json(*this) == config_to_json(o); }

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"default_edit", "stylisation_edit"};
  return names;
}

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;
  if (name == "default_edit") {
    cfg.guiders = default_guiders();
    cfg.rescale.policy = RescalePolicy::in_range;
    cfg.rescale.r_lower = 0.33;
    cfg.rescale.r_upper = 3.0;
    return cfg;
  }
  if (name == "stylisation_edit") {
    cfg.guiders = stylisation_guiders();
    cfg.rescale.policy = RescalePolicy::fixed;
    cfg.rescale.r_fixed = 1.5;
    return cfg;
  }
  std::string valid;
  for (const std::string& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (valid presets: " + valid + ")");
}

std::string preset_for(EditMode mode) { return mode == EditMode::stylisation ? "stylisation_edit" : "default_edit"; }

void set_v_self(RunConfig& cfg, double v) {
  bool found = false;
  for (GuiderConfig& g : cfg.guiders.guiders) {
    if (g.kind == GuiderKind::self_attn) {
      g.scale = v;
      found = true;
    }
  }
  if (!found) cfg.guiders.guiders.insert(cfg.guiders.guiders.begin(), self_attn_guider(v));
}

void set_v_feat(RunConfig& cfg, double v) {
  bool found = false;
  for (GuiderConfig& g : cfg.guiders.guiders) {
    if (g.kind == GuiderKind::feature_l1 || g.kind == GuiderKind::feature_l2) {
      g.scale = v;
      found = true;
    }
  }
  if (!found) {
    cfg.guiders.guiders.push_back(cfg.guiders.mode == EditMode::stylisation
                                      ? feature_guider(FeatureNorm::l2, v, Branch::target)
                                      : feature_guider(FeatureNorm::l1, v, Branch::source));
  }
}

void set_mode(RunConfig& cfg, EditMode mode) { cfg.guiders.mode = mode; }

std::string config_preset(const std::string& text) {
  const json j = parse_object(text);
  if (!j.contains("preset")) return {};
  return get<std::string>(j.at("preset"), "preset");
}

void apply_config_json(RunConfig& cfg, const std::string& text) {
  const json j = parse_object(text);
  // Explicit guider lists are applied before the v_self / v_feat shorthands.
  if (j.contains("guiders")) {
    const json& g = j.at("guiders");
    if (!g.is_array()) throw ConfigError("config key 'guiders' must be an array");
    cfg.guiders.guiders.clear();
    for (const json& e : g) cfg.guiders.guiders.push_back(guider_from_json(e));
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "guiders") continue;
    if (key == "backbone") cfg.backbone = get<std::string>(v, key);
    else if (key == "preset") cfg.preset = get<std::string>(v, key);
    else if (key == "mode") cfg.guiders.mode = parse_mode(get<std::string>(v, key));
    else if (key == "w") cfg.w = get_number(v, key);
    else if (key == "steps" || key == "T") cfg.steps = get_int(v, key);
    else if (key == "tau") cfg.guiders.tau = get_int(v, key);
    else if (key == "seed") {
      if (!v.is_number_unsigned()) {
        throw ConfigError("config key 'seed' must be a non-negative integer");
      }
      cfg.seed = v.get<std::uint64_t>();
    } else if (key == "cache_reference") cfg.cache_reference = get<bool>(v, key);
    else if (key == "v_self") set_v_self(cfg, get_number(v, key));
    else if (key == "v_feat") set_v_feat(cfg, get_number(v, key));
    else if (key == "rescale") apply_rescale(cfg.rescale, v);
    else if (key == "schedule") apply_schedule(cfg.schedule, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string config_to_json(const RunConfig& cfg, int indent) {
  json j;
  j["backbone"] = cfg.backbone;
  j["preset"] = cfg.preset;
  j["mode"] = to_string(cfg.guiders.mode);
  j["w"] = cfg.w;
  j["steps"] = cfg.steps;
  j["tau"] = cfg.guiders.tau;
  j["seed"] = cfg.seed;
  j["cache_reference"] = cfg.cache_reference;
  json guiders = json::array();
  for (const GuiderConfig& g : cfg.guiders.guiders) guiders.push_back(guider_to_json(g));
  j["guiders"] = guiders;
  json r;
  r["policy"] = to_string(cfg.rescale.policy);
  r["r_fixed"] = cfg.rescale.r_fixed;
  r["r_lower"] = cfg.rescale.r_lower;
  r["r_upper"] = cfg.rescale.r_upper;
  r["epsilon_norm"] = cfg.rescale.epsilon_norm;
  r["squared"] = cfg.rescale.squared;
  j["rescale"] = r;
  json s;
  s["name"] = cfg.schedule.name;
  s["train_steps"] = cfg.schedule.train_steps;
  s["beta_start"] = cfg.schedule.beta_start;
  s["beta_end"] = cfg.schedule.beta_end;
  s["spacing"] = to_string(cfg.schedule.spacing);
  s["steps_offset"] = cfg.schedule.steps_offset;
  s["alphas"] = cfg.schedule.alphas;
  j["schedule"] = s;
  return j.dump(indent);
}

void apply_to_request(const RunConfig& cfg, EditRequest& req) {
  req.w = cfg.w;
  req.steps = cfg.steps;
  req.guiders = cfg.guiders;
  req.rescale = cfg.rescale;
  req.schedule = cfg.schedule;
  req.seed = cfg.seed;
  req.cache_reference = cfg.cache_reference;
}

}  // namespace gnr
