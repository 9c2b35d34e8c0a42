#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "gnr/backbone.hpp"
#include "gnr/toy_unet.hpp"

namespace gnr {

inline constexpr const char* kPatchPcaAdapterName = "patch_pca";

/// Learned, lossy codec: every 2x2 patch of a (3, 2H, 2W) image is projected
/// onto the leading principal components of the training patches, giving a
/// (components, H, W) latent with unit-variance channels.
class PatchPcaCodec final : public Codec {
 public:
  static constexpr int kPatch = 2;

  PatchPcaCodec() = default;
  PatchPcaCodec(int image_channels, int height, int width, Tensor mean, Tensor basis, Tensor scale,
                double psnr_floor);

  /// Fits the projection on `images` (all of shape (C, H, W)).
  static PatchPcaCodec fit(const std::vector<Tensor>& images, int components);

  std::string name() const override { return "patch_pca"; }
  bool is_identity() const override { return false; }
  Shape image_shape() const override { return {channels_, height_, width_}; }
  Shape latent_shape() const override;
  Tensor encode(const Tensor& image) const override;
  Tensor decode(const Tensor& latent) const override;
  double psnr_floor() const override { return psnr_floor_; }
  void set_psnr_floor(double db) { psnr_floor_ = db; }

  const Tensor& mean() const { return mean_; }
  const Tensor& basis() const { return basis_; }  // (components, patch_dim), orthonormal rows
  const Tensor& scale() const { return scale_; }  // (components)

  bool operator==(const PatchPcaCodec& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_ && mean_ == o.mean_ &&
           basis_ == o.basis_ && scale_ == o.scale_ && psnr_floor_ == o.psnr_floor_;
  }

 private:
  int channels_ = 3;
  int height_ = 16;
  int width_ = 16;
  Tensor mean_;
  Tensor basis_;
  Tensor scale_;
  double psnr_floor_ = 0.0;
};

/// PSNR (dB) for images in [-1, 1].
double psnr(const Tensor& a, const Tensor& b);

/// A latent-space backbone: a toy denoiser over the codec's latents. Exercises
/// the learned-codec path of the pipeline the way a pretrained latent model
/// adapter would.
class LatentAdapter final : public Backbone {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  LatentAdapter(PatchPcaCodec codec, ToyUNet denoiser);

  static LatentAdapter load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::vector<std::uint8_t> serialize() const;
  static LatentAdapter deserialize(std::span<const std::uint8_t> bytes);

  std::string name() const override { return kPatchPcaAdapterName; }
  Shape latent_shape() const override { return denoiser_.latent_shape(); }
  int num_attn_layers() const override { return denoiser_.num_attn_layers(); }
  bool differentiable() const override { return true; }
  const Codec& codec() const override { return codec_; }
  Conditioning embed_prompt(std::string_view text) const override { return denoiser_.embed_prompt(text); }
  RecordNodes forward(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                      bool record_internals) const override {
    return denoiser_.forward(tape, z, t, c, record_internals);
  }

  const PatchPcaCodec& patch_codec() const { return codec_; }
  const ToyUNet& denoiser() const { return denoiser_; }

 private:
  PatchPcaCodec codec_;
  ToyUNet denoiser_;
};

}  // namespace gnr
