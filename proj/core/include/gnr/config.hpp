#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gnr/guidance.hpp"
#include "gnr/rescale.hpp"
#include "gnr/schedule.hpp"

namespace gnr {

struct EditRequest;

/// Everything that determines a run besides the input image and prompts.
struct RunConfig {
  std::string backbone = "toy";
  std::string preset = "default_edit";
  double w = 7.5;
  int steps = 50;
  GuiderStack guiders = default_guiders();  // carries tau and mode
  RescaleConfig rescale;
  ScheduleProfile schedule;
  std::uint64_t seed = 0;
  bool cache_reference = false;

  bool operator==(const RunConfig& o) const;
};

const std::vector<std::string>& preset_names();
/// default_edit or stylisation_edit. Unknown names raise ConfigError listing the valid ones.
RunConfig preset_config(const std::string& name);
std::string preset_for(EditMode mode);

/// Scale of every self-attention guider; adds one when the stack has none.
void set_v_self(RunConfig& cfg, double v);
/// Scale of every feature guider; adds the mode's feature guider when absent.
void set_v_feat(RunConfig& cfg, double v);
void set_mode(RunConfig& cfg, EditMode mode);

/// Overlays the keys present in a JSON object onto `cfg`. The "preset" key is
/// recorded but not expanded here; callers start from preset_config first.
/// Unknown keys and type mismatches raise ConfigError.
void apply_config_json(RunConfig& cfg, const std::string& text);
/// Preset named inside a JSON config, or empty when absent.
std::string config_preset(const std::string& text);

/// Full resolved configuration as one JSON object. Applying it to any
/// starting config reproduces `cfg` exactly.
std::string config_to_json(const RunConfig& cfg, int indent = -1);

void apply_to_request(const RunConfig& cfg, EditRequest& req);

}  // namespace gnr
