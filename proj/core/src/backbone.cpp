#include "gnr/backbone.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <mutex>

#include "gnr/error.hpp"
#include "gnr/latent_adapter.hpp"
#include "gnr/toy_unet.hpp"

namespace gnr {

namespace {

std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}

WarningHandler& warning_handler() {
  static WarningHandler handler = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return handler;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(warning_mutex());
  WarningHandler prev = std::move(warning_handler());
  warning_handler() = std::move(handler);
  return prev;
}

void warn(std::string_view message) {
  std::lock_guard lock(warning_mutex());
  if (warning_handler()) warning_handler()(message);
}

PredictionRecord RecordNodes::values() const {
  PredictionRecord r;
  r.eps = eps.value();
  r.self_attn.reserve(self_attn.size());
  for (const ad::Var& a : self_attn) r.self_attn.push_back(a.value());
  for (const auto& [name, v] : features) r.features.emplace(name, v.value());
  return r;
}

std::size_t clip_image(Tensor& image) {
  std::size_t clipped = 0;
  for (double& v : image.data()) {
    if (std::isnan(v)) throw NumericError("image contains NaN");
    if (v < -1.0) {
      v = -1.0;
      ++clipped;
    } else if (v > 1.0) {
      v = 1.0;
      ++clipped;
    }
  }
  return clipped;
}

Tensor IdentityCodec::encode(const Tensor& image) const {
  if (image.shape() != shape_) {
    throw ArgumentError("image shape " + shape_str(image.shape()) + " does not match codec " + shape_str(shape_));
  }
  Tensor z = image;
  if (const std::size_t n = clip_image(z); n > 0) {
    warn("encode: clipped " + std::to_string(n) + " values outside [-1, 1]");
  }
  return z;
}

Tensor IdentityCodec::decode(const Tensor& latent) const {
  if (latent.shape() != shape_) {
    throw ArgumentError("latent shape " + shape_str(latent.shape()) + " does not match codec " + shape_str(shape_));
  }
  return latent;
}

double IdentityCodec::psnr_floor() const { return std::numeric_limits<double>::infinity(); }

void check_latent(const Backbone& h, const Tensor& z) {
  if (z.shape() != h.latent_shape()) {
    throw ArgumentError("latent shape " + shape_str(z.shape()) + " does not match backbone " +
                        shape_str(h.latent_shape()));
  }
  if (!all_finite(z)) throw NumericError("latent contains non-finite values");
}

PredictionRecord predict(const Backbone& h, const Tensor& z, const Timestep& t, const Conditioning& c,
                         bool record_internals) {
  check_latent(h, z);
  ad::Tape tape;
  const ad::Var zv = tape.constant_ref(z);
  return h.forward(tape, zv, t, c, record_internals).values();
}

LatentGradient grad_wrt_latent(const Backbone& h, const ScalarFn& scalar_fn, const Tensor& z, const Timestep& t,
                               const Conditioning& c) {
  if (!h.differentiable()) {
    throw CapabilityError("backbone '" + h.name() + "' does not support differentiation");
  }
  check_latent(h, z);
  ad::Tape tape;
  const ad::Var zv = tape.variable(z);
  const RecordNodes rec = h.forward(tape, zv, t, c, true);
  const ad::Var out = scalar_fn(rec);
  if (out.value().size() != 1) throw ArgumentError("scalar function returned " + shape_str(out.shape()));
  LatentGradient result;
  result.value = out.value().item();
  if (tape.requires_grad(out)) {
    tape.backward(out);
    result.grad = tape.grad(zv);
  } else {
    result.grad = Tensor(z.shape(), 0.0);
  }
  return result;
}

// --- Registry -------------------------------------------------------------

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, AdapterFactory>& registry() {
  static std::map<std::string, AdapterFactory> r = [] {
    std::map<std::string, AdapterFactory> init;
    init.emplace(kPatchPcaAdapterName, [](const std::filesystem::path& dir) -> std::unique_ptr<Backbone> {
      return std::make_unique<LatentAdapter>(LatentAdapter::load(dir / (std::string(kPatchPcaAdapterName) + ".bin")));
    });
    return init;
  }();
  return r;
}

}  // namespace

void register_adapter(const std::string& name, AdapterFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::vector<std::string> registered_adapters() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [name, f] : registry()) names.push_back(name);
  return names;
}

std::unique_ptr<Backbone> load_backbone(const std::string& spec, const std::filesystem::path& weights_dir) {
  if (spec == "toy") {
    return std::make_unique<ToyUNet>(ToyUNet::load(weights_dir / "toy.bin"));
  }
  constexpr std::string_view prefix = "adapter:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string name = spec.substr(prefix.size());
    AdapterFactory factory;
    {
      std::lock_guard lock(registry_mutex());
      const auto it = registry().find(name);
      if (it == registry().end()) {
        std::string known;
        for (const auto& [n, f] : registry()) known += (known.empty() ? "" : ", ") + n;
        throw CapabilityError("no backbone adapter named '" + name + "' is registered (available: " + known + ")");
      }
      factory = it->second;
    }
    auto backbone = factory(weights_dir);
    validate_adapter_contract(*backbone);
    return backbone;
  }
  throw ConfigError("backbone must be 'toy' or 'adapter:<name>', got '" + spec + "'");
}

void validate_adapter_contract(const Backbone& h) {
  const Tensor z(h.latent_shape(), 0.0);
  const Conditioning c = h.embed_prompt("");
  const PredictionRecord rec = predict(h, z, Timestep{}, c, true);
  if (rec.eps.shape() != h.latent_shape()) {
    throw ConsistencyError("adapter '" + h.name() + "' predicts noise of shape " + shape_str(rec.eps.shape()));
  }
  if (static_cast<int>(rec.self_attn.size()) != h.num_attn_layers()) {
    throw ConsistencyError("adapter '" + h.name() + "' declares " + std::to_string(h.num_attn_layers()) +
                           " attention layers but recorded " + std::to_string(rec.self_attn.size()));
  }
  for (const Tensor& a : rec.self_attn) {
    if (a.rank() != 3) throw ConsistencyError("attention map of rank " + std::to_string(a.rank()));
    const int rows = a.dim(0) * a.dim(1), cols = a.dim(2);
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int k = 0; k < cols; ++k) s += a[static_cast<std::size_t>(r * cols + k)];
      if (std::abs(s - 1.0) > 1e-4) throw ConsistencyError("attention rows are not normalized");
    }
  }
  for (const std::string& tap : h.tap_names()) {
    if (!rec.features.contains(tap)) {
      throw ConsistencyError("adapter '" + h.name() + "' does not produce tap '" + tap + "'");
    }
  }
  const Codec& codec = h.codec();
  if (codec.latent_shape() != h.latent_shape()) {
    throw ConsistencyError("codec latent shape does not match backbone latent shape");
  }
  if (!codec.is_identity() && !(codec.psnr_floor() > 0.0 && std::isfinite(codec.psnr_floor()))) {
    throw ConsistencyError("learned codec '" + codec.name() + "' must declare a finite round-trip PSNR floor");
  }
}

}  // namespace gnr
