#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gnr/backbone.hpp"

namespace gnr {

/// Architecture of the desk-scale denoiser.
///
/// A three-level U-Net (8x8 -> 4x4 -> 2x2) over (channels, height, width)
/// inputs with self-attention at the two finer resolutions in both encoder
/// and decoder (four maps). Time and text embeddings are summed and injected
/// into every residual block as a per-channel bias.
struct ToyConfig {
  int channels = 4;
  int height = 8;
  int width = 8;
  int base_channels = 16;  // 8x8 level
  int mid_channels = 32;   // 4x4 and 2x2 levels
  int embed_dim = 64;
  int heads = 2;
  int groups = 4;

  bool operator==(const ToyConfig&) const = default;
};

/// The fixed 32-word toy vocabulary.
const std::vector<std::string>& toy_vocabulary();

/// Lower-cases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize(std::string_view text);

class ToyUNet final : public Backbone {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  explicit ToyUNet(ToyConfig config = {}, std::uint64_t seed = 0);

  static ToyUNet load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::vector<std::uint8_t> serialize() const;
  static ToyUNet deserialize(std::span<const std::uint8_t> bytes);

  const ToyConfig& config() const { return config_; }

  std::string name() const override { return "toy"; }
  Shape latent_shape() const override { return {config_.channels, config_.height, config_.width}; }
  int num_attn_layers() const override { return 4; }
  bool differentiable() const override { return true; }
  const Codec& codec() const override { return codec_; }
  Conditioning embed_prompt(std::string_view text) const override;
  RecordNodes forward(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                      bool record_internals) const override;

  /// Forward pass with every weight entered as a gradient-tracking leaf;
  /// `weights` receives one node per parameter in parameter order.
  RecordNodes forward_trainable(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                                std::vector<ad::Var>& weights) const;

  std::size_t parameter_count() const { return params_.size(); }
  const std::string& parameter_name(std::size_t i) const { return names_[i]; }
  const Tensor& parameter(std::size_t i) const { return params_[i]; }
  Tensor& parameter(std::size_t i) { return params_[i]; }
  std::size_t scalar_count() const;

  bool operator==(const ToyUNet& other) const {
    return config_ == other.config_ && names_ == other.names_ && params_ == other.params_;
  }

 private:
  RecordNodes build(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c, bool record,
                    std::vector<ad::Var>* trainable) const;
  void add_param(const std::string& name, Tensor value);
  std::size_t index_of(const std::string& name) const;

  ToyConfig config_;
  IdentityCodec codec_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace gnr
