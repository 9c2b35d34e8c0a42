#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "gnr/autodiff.hpp"
#include "gnr/schedule.hpp"
#include "gnr/tensor.hpp"

namespace gnr {

inline constexpr const char* kTapLastUpBlock = "last_up_block";
inline constexpr const char* kTapUp2Resnet2 = "up2_resnet2";

using WarningHandler = std::function<void(std::string_view)>;

/// Installs a sink for non-fatal diagnostics; returns the previous one.
/// The default writes to stderr.
WarningHandler set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

/// Text conditioning. The empty prompt maps to the canonical null conditioning.
struct Conditioning {
  Tensor embedding;         // (tokens, embed_dim)
  std::vector<int> tokens;  // backbone vocabulary ids; empty for the null conditioning
  std::string source_text;
  bool is_null = false;
};

/// Output of one denoiser forward pass.
struct PredictionRecord {
  Tensor eps;
  /// One (heads, query_tokens, key_tokens) map per self-attention layer,
  /// rows softmax-normalized over key tokens. Empty unless recording was on.
  std::vector<Tensor> self_attn;
  std::map<std::string, Tensor> features;
};

/// The same record as live tape nodes, so scalar functions of the internals
/// can be differentiated back to the input latent.
struct RecordNodes {
  ad::Var eps;
  std::vector<ad::Var> self_attn;
  std::map<std::string, ad::Var> features;

  PredictionRecord values() const;
};

/// Maps images (C, H, W) in [-1, 1] to latents and back.
class Codec {
 public:
  virtual ~Codec() = default;
  virtual std::string name() const = 0;
  virtual bool is_identity() const = 0;
  virtual Shape image_shape() const = 0;
  virtual Shape latent_shape() const = 0;
  virtual Tensor encode(const Tensor& image) const = 0;
  virtual Tensor decode(const Tensor& latent) const = 0;
  /// Round-trip PSNR (dB) the codec guarantees on in-distribution images.
  /// Infinite for the identity codec.
  virtual double psnr_floor() const = 0;
};

/// Clips values outside [-1, 1] in place; returns how many were clipped.
std::size_t clip_image(Tensor& image);

/// Pixel-space codec: encode/decode are the identity after range clipping.
class IdentityCodec final : public Codec {
 public:
  explicit IdentityCodec(Shape shape) : shape_(std::move(shape)) {}
  std::string name() const override { return "identity"; }
  bool is_identity() const override { return true; }
  Shape image_shape() const override { return shape_; }
  Shape latent_shape() const override { return shape_; }
  Tensor encode(const Tensor& image) const override;
  Tensor decode(const Tensor& latent) const override;
  double psnr_floor() const override;

 private:
  Shape shape_;
};

/// Abstract denoiser. Implementations build their forward pass on a caller
/// supplied tape; they hold no per-call state, so one instance can serve
/// concurrent callers that each own a tape.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual std::string name() const = 0;
  virtual Shape latent_shape() const = 0;
  virtual int num_attn_layers() const = 0;
  virtual std::vector<std::string> tap_names() const { return {kTapLastUpBlock, kTapUp2Resnet2}; }
  virtual bool differentiable() const = 0;
  virtual const Codec& codec() const = 0;

  /// Throws VocabularyError for words the backbone cannot embed.
  virtual Conditioning embed_prompt(std::string_view text) const = 0;

  virtual RecordNodes forward(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                              bool record_internals) const = 0;
};

void check_latent(const Backbone& h, const Tensor& z);

PredictionRecord predict(const Backbone& h, const Tensor& z, const Timestep& t, const Conditioning& c,
                         bool record_internals = true);

using ScalarFn = std::function<ad::Var(const RecordNodes&)>;

struct LatentGradient {
  Tensor grad;
  double value = 0.0;
};

/// d scalar_fn(forward(z)) / dz. Anything scalar_fn closes over from other
/// passes is a constant.
LatentGradient grad_wrt_latent(const Backbone& h, const ScalarFn& scalar_fn, const Tensor& z, const Timestep& t,
                               const Conditioning& c);

// --- Registry -------------------------------------------------------------

using AdapterFactory = std::function<std::unique_ptr<Backbone>(const std::filesystem::path& weights_dir)>;

void register_adapter(const std::string& name, AdapterFactory factory);
std::vector<std::string> registered_adapters();

/// Resolves `toy` or `adapter:<name>`. Weights are looked up in `weights_dir`
/// (toy: `toy.bin`). Unknown adapters raise CapabilityError.
std::unique_ptr<Backbone> load_backbone(const std::string& spec, const std::filesystem::path& weights_dir);

/// Checks the adapter contract: every declared tap is produced, the number
/// of attention maps equals num_attn_layers(), attention rows are normalized,
/// and the codec declares a finite positive round-trip floor (or is identity).
void validate_adapter_contract(const Backbone& h);

}  // namespace gnr
