#include "gnr/guidance.hpp"

#include <cmath>

#include "gnr/error.hpp"

namespace gnr {

GuiderKind parse_guider_kind(const std::string& s) {
  if (s == "latent_l2") return GuiderKind::latent_l2;
  if (s == "self_attn") return GuiderKind::self_attn;
  if (s == "feature_l1") return GuiderKind::feature_l1;
  if (s == "feature_l2") return GuiderKind::feature_l2;
  throw ConfigError("unknown guider kind '" + s + "' (expected latent_l2, self_attn, feature_l1 or feature_l2)");
}

std::string to_string(GuiderKind k) {
  switch (k) {
    case GuiderKind::latent_l2: return "latent_l2";
    case GuiderKind::self_attn: return "self_attn";
    case GuiderKind::feature_l1: return "feature_l1";
    case GuiderKind::feature_l2: return "feature_l2";
  }
  return "?";
}

Branch parse_branch(const std::string& s) {
  if (s == "source") return Branch::source;
  if (s == "target") return Branch::target;
  throw ConfigError("unknown branch '" + s + "' (expected source or target)");
}

std::string to_string(Branch b) { return b == Branch::source ? "source" : "target"; }

EditMode parse_mode(const std::string& s) {
  if (s == "default") return EditMode::standard;
  if (s == "stylisation") return EditMode::stylisation;
  throw ConfigError("unknown edit mode '" + s + "' (expected default or stylisation)");
}

std::string to_string(EditMode m) { return m == EditMode::standard ? "default" : "stylisation"; }

std::string GuiderConfig::label() const {
  if (kind == GuiderKind::feature_l1 || kind == GuiderKind::feature_l2) return to_string(kind) + ":" + tap;
  return to_string(kind);
}

void GuiderStack::validate(int steps, int num_layers) const {
  if (tau < 0 || tau > steps) {
    throw ConfigError("tau must lie in [0, " + std::to_string(steps) + "], got " + std::to_string(tau));
  }
  for (const GuiderConfig& g : guiders) {
    if (!(g.scale >= 0.0) || !std::isfinite(g.scale)) {
      throw ConfigError("guider " + g.label() + " has invalid scale " + std::to_string(g.scale));
    }
    if ((g.kind == GuiderKind::feature_l1 || g.kind == GuiderKind::feature_l2) && g.tap.empty()) {
      throw ConfigError("feature guider needs a tap name");
    }
    if (num_layers >= 0) {
      for (int l : g.layers) {
        if (l < 0 || l >= num_layers) {
          throw ConfigError("attention layer " + std::to_string(l) + " out of range (backbone has " +
                            std::to_string(num_layers) + ")");
        }
      }
    }
  }
}

bool GuiderStack::any_active() const {
  if (tau == 0) return false;
  for (const GuiderConfig& g : guiders) {
    if (g.scale > 0.0) return true;
  }
  return false;
}

bool GuiderStack::uses(Branch b) const {
  for (const GuiderConfig& g : guiders) {
    if (g.kind != GuiderKind::latent_l2 && g.branch == b) return true;
  }
  return false;
}

GuiderConfig self_attn_guider(double scale) { return GuiderConfig{GuiderKind::self_attn, scale, {}, "", Branch::source}; }

GuiderConfig feature_guider(FeatureNorm norm, double scale, Branch branch) {
  return norm == FeatureNorm::l1 ? GuiderConfig{GuiderKind::feature_l1, scale, {}, kTapLastUpBlock, branch}
                                 : GuiderConfig{GuiderKind::feature_l2, scale, {}, kTapUp2Resnet2, branch};
}

GuiderConfig latent_l2_guider(double scale) { return GuiderConfig{GuiderKind::latent_l2, scale, {}, "", Branch::source}; }

GuiderStack default_guiders() {
  return GuiderStack{{self_attn_guider(300000.0), feature_guider(FeatureNorm::l1, 500.0, Branch::source)}, 35,
                     EditMode::standard};
}

GuiderStack stylisation_guiders() {
  return GuiderStack{{self_attn_guider(100000.0), feature_guider(FeatureNorm::l2, 2.5, Branch::target)}, 25,
                     EditMode::stylisation};
}

CfgOutput cfg_delta(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  require_same_shape(eps_cond, eps_uncond, "cfg_delta");
  CfgOutput out{Tensor(eps_cond.shape()), Tensor(eps_cond.shape())};
  const auto c = eps_cond.data(), u = eps_uncond.data();
  auto d = out.delta.data(), e = out.eps_cfg.data();
  for (std::size_t i = 0; i < c.size(); ++i) {
    d[i] = w * (c[i] - u[i]);
    e[i] = w * c[i] + (1.0 - w) * u[i];
  }
  return out;
}

namespace energy {

ad::Var latent_l2(ad::Var z, ad::Var z_star) {
  require_same_shape(z.value(), z_star.value(), "latent_l2 energy");
  return ad::sum(ad::square(z - z_star));
}

ad::Var self_attn(const std::vector<ad::Var>& current, const std::vector<ad::Var>& reference,
                  const std::vector<int>& layers) {
  if (current.size() != reference.size()) {
    throw ArgumentError("self-attention energy: " + std::to_string(current.size()) + " current maps vs " +
                        std::to_string(reference.size()) + " reference maps");
  }
  if (current.empty()) throw ArgumentError("self-attention energy: no attention maps recorded");
  std::vector<int> use = layers;
  if (use.empty()) {
    for (std::size_t i = 0; i < current.size(); ++i) use.push_back(static_cast<int>(i));
  }
  ad::Var total;
  for (int l : use) {
    if (l < 0 || l >= static_cast<int>(current.size())) {
      throw ArgumentError("self-attention energy: layer " + std::to_string(l) + " out of range");
    }
    const ad::Var a = current[static_cast<std::size_t>(l)], b = reference[static_cast<std::size_t>(l)];
    require_same_shape(a.value(), b.value(), "self-attention energy");
    const ad::Var e = ad::mean(ad::square(a - b));
    total = total.valid() ? total + e : e;
  }
  return total;
}

ad::Var feature(ad::Var current, ad::Var reference, FeatureNorm norm) {
  require_same_shape(current.value(), reference.value(), "feature energy");
  const ad::Var d = current - reference;
  return ad::mean(norm == FeatureNorm::l1 ? ad::abs(d) : ad::square(d));
}

}  // namespace energy

double latent_l2_energy(const Tensor& z, const Tensor& z_star) {
  ad::Tape tape;
  return energy::latent_l2(tape.constant_ref(z), tape.constant_ref(z_star)).value().item();
}

double self_attn_energy(const std::vector<Tensor>& current, const std::vector<Tensor>& reference,
                        const std::vector<int>& layers) {
  ad::Tape tape;
  std::vector<ad::Var> a, b;
  for (const Tensor& m : current) a.push_back(tape.constant_ref(m));
  for (const Tensor& m : reference) b.push_back(tape.constant_ref(m));
  return energy::self_attn(a, b, layers).value().item();
}

double feature_energy(const Tensor& current, const Tensor& reference, FeatureNorm norm) {
  ad::Tape tape;
  return energy::feature(tape.constant_ref(current), tape.constant_ref(reference), norm).value().item();
}

namespace {

FeatureNorm norm_of(GuiderKind k) { return k == GuiderKind::feature_l1 ? FeatureNorm::l1 : FeatureNorm::l2; }

GuiderOutput run_guiders(const GuiderStack& stack, const Backbone& h, const Tensor& z, const Tensor& z_star,
                         const Timestep& t, const Conditioning& y_src, const Conditioning& y_trg,
                         const PredictionRecord& reference, bool differentiate) {
  if (stack.guiders.empty()) throw ArgumentError("guider stack is empty");
  if (differentiate && !h.differentiable()) {
    throw CapabilityError("backbone '" + h.name() + "' does not support differentiation");
  }
  check_latent(h, z);
  require_same_shape(z, z_star, "guider latents");

  ad::Tape tape;
  const ad::Var zv = differentiate ? tape.variable(z) : tape.constant_ref(z);
  std::optional<RecordNodes> src, trg;
  if (stack.uses(Branch::source)) src = h.forward(tape, zv, t, y_src, true);
  if (stack.uses(Branch::target)) trg = h.forward(tape, zv, t, y_trg, true);

  std::vector<ad::Var> ref_maps;
  for (const Tensor& m : reference.self_attn) ref_maps.push_back(tape.constant_ref(m));

  GuiderOutput out;
  ad::Var total;
  for (const GuiderConfig& g : stack.guiders) {
    ad::Var e;
    const RecordNodes* cur = g.branch == Branch::source ? (src ? &*src : nullptr) : (trg ? &*trg : nullptr);
    switch (g.kind) {
      case GuiderKind::latent_l2:
        e = energy::latent_l2(zv, tape.constant_ref(z_star));
        break;
      case GuiderKind::self_attn:
        if (reference.self_attn.empty()) throw ArgumentError("reference record has no attention maps");
        e = energy::self_attn(cur->self_attn, ref_maps, g.layers);
        break;
      case GuiderKind::feature_l1:
      case GuiderKind::feature_l2: {
        const auto ref = reference.features.find(g.tap);
        const auto now = cur->features.find(g.tap);
        if (ref == reference.features.end() || now == cur->features.end()) {
          throw ArgumentError("feature tap '" + g.tap + "' was not recorded");
        }
        e = energy::feature(now->second, tape.constant_ref(ref->second), norm_of(g.kind));
        break;
      }
    }
    out.energies.push_back(e.value().item());
    if (g.scale > 0.0) {
      const ad::Var term = ad::scale(e, g.scale);
      total = total.valid() ? total + term : term;
    }
  }
  if (trg) out.eps_target = trg->eps.value();
  if (differentiate) {
    if (total.valid() && tape.requires_grad(total)) {
      tape.backward(total);
      out.grad_sum = tape.grad(zv);
    } else {
      out.grad_sum = Tensor(z.shape(), 0.0);
    }
  }
  return out;
}

}  // namespace

GuiderOutput guider_gradient(const GuiderStack& stack, const Backbone& h, const Tensor& z, const Tensor& z_star,
                             const Timestep& t, const Conditioning& y_src, const Conditioning& y_trg,
                             const PredictionRecord& reference) {
  return run_guiders(stack, h, z, z_star, t, y_src, y_trg, reference, true);
}

std::vector<double> guider_energies(const GuiderStack& stack, const Backbone& h, const Tensor& z,
                                    const Tensor& z_star, const Timestep& t, const Conditioning& y_src,
                                    const Conditioning& y_trg, const PredictionRecord& reference) {
  return run_guiders(stack, h, z, z_star, t, y_src, y_trg, reference, false).energies;
}

}  // namespace gnr
