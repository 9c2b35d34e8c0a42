#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gnr/autodiff.hpp"
#include "gnr/backbone.hpp"

namespace gnr {

enum class GuiderKind { latent_l2, self_attn, feature_l1, feature_l2 };
enum class Branch { source, target };
enum class EditMode { standard, stylisation };
enum class FeatureNorm { l1, l2 };

GuiderKind parse_guider_kind(const std::string& s);
std::string to_string(GuiderKind k);
Branch parse_branch(const std::string& s);
std::string to_string(Branch b);
/// "default" or "stylisation".
EditMode parse_mode(const std::string& s);
std::string to_string(EditMode m);

struct GuiderConfig {
  GuiderKind kind = GuiderKind::self_attn;
  double scale = 0.0;
  /// Attention layer indices compared by the self-attention guider; empty means all.
  std::vector<int> layers;
  /// Feature tap for the feature guiders.
  std::string tap;
  /// Which prompt the differentiated (current) branch is conditioned on.
  Branch branch = Branch::source;

  /// Display label used in diagnostics, e.g. "self_attn" or "feature_l1:last_up_block".
  std::string label() const;
};

struct GuiderStack {
  std::vector<GuiderConfig> guiders;
  int tau = 0;  // number of leading sampling steps with guidance on
  EditMode mode = EditMode::standard;

  /// Throws ConfigError on a negative scale, an out-of-range tau or layer
  /// index, or a feature guider without a tap. Pass num_layers < 0 to skip
  /// the layer check.
  void validate(int steps, int num_layers = -1) const;
  bool any_active() const;
  bool uses(Branch b) const;
};

GuiderConfig self_attn_guider(double scale);
GuiderConfig feature_guider(FeatureNorm norm, double scale, Branch branch);
GuiderConfig latent_l2_guider(double scale);

/// Preset stacks: v_self 300000 / v_feat 500 / tau 35 for default edits,
/// v_self 100000 / v_feat 2.5 / tau 25 with the target-branch feature
/// guider for stylisation.
GuiderStack default_guiders();
GuiderStack stylisation_guiders();

struct CfgOutput {
  Tensor delta;    // w (cond - uncond)
  Tensor eps_cfg;  // guided noise
};

/// eps_cfg is evaluated as w*cond + (1-w)*uncond, which equals cond exactly
/// at w = 1 and uncond exactly at w = 0.
CfgOutput cfg_delta(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// Energies on tape nodes. Every input is a node so the same definition serves
// plain evaluation (constant leaves) and differentiation.
namespace energy {
ad::Var latent_l2(ad::Var z, ad::Var z_star);
ad::Var self_attn(const std::vector<ad::Var>& current, const std::vector<ad::Var>& reference,
                  const std::vector<int>& layers = {});
ad::Var feature(ad::Var current, ad::Var reference, FeatureNorm norm);
}  // namespace energy

/// Sum of squared differences.
double latent_l2_energy(const Tensor& z, const Tensor& z_star);
/// Sum over layers of the mean squared map difference.
double self_attn_energy(const std::vector<Tensor>& current, const std::vector<Tensor>& reference,
                        const std::vector<int>& layers = {});
/// Mean absolute (l1) or squared (l2) difference.
double feature_energy(const Tensor& current, const Tensor& reference, FeatureNorm norm);

struct GuiderOutput {
  Tensor grad_sum;               // sum_i v_i d g_i / d z
  std::vector<double> energies;  // one per guider, unscaled
  /// Noise predicted by the target-conditioned current branch when it was
  /// evaluated (stylisation feature guider); lets the caller skip its own
  /// conditional pass.
  std::optional<Tensor> eps_target;
};

/// Differentiates every active guider with one backward pass. The reference
/// record is constant data.
GuiderOutput guider_gradient(const GuiderStack& stack, const Backbone& h, const Tensor& z, const Tensor& z_star,
                             const Timestep& t, const Conditioning& y_src, const Conditioning& y_trg,
                             const PredictionRecord& reference);

/// Energies only, without gradients.
std::vector<double> guider_energies(const GuiderStack& stack, const Backbone& h, const Tensor& z,
                                    const Tensor& z_star, const Timestep& t, const Conditioning& y_src,
                                    const Conditioning& y_trg, const PredictionRecord& reference);

}  // namespace gnr
