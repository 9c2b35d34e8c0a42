#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gnr/latent_adapter.hpp"
#include "gnr/toy_unet.hpp"

namespace gnr {

/// One synthetic two-color shape image with its caption ("a red circle on blue").
struct ShapeSample {
  Tensor image;  // (channels, size, size) in [-1, 1]
  std::string caption;
  std::string shape;
  std::string foreground;
  std::string background;
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();

/// Color value in the given channel count (3 or 4).
std::vector<double> color_value(const std::string& name, int channels);

/// Renders one shape; `cx`, `cy`, `radius` are in pixels.
Tensor render_shape(const std::string& shape, const std::string& fg, const std::string& bg, int channels, int size,
                    double cx, double cy, double radius);

/// Random shapes with position and size jitter. Deterministic in `seed`.
std::vector<ShapeSample> make_shape_dataset(std::size_t count, std::uint64_t seed, int channels = 4, int size = 8);

struct TrainConfig {
  int steps = 500;
  int batch = 8;
  double learning_rate = 2e-3;
  double null_prob = 0.15;  // caption dropout for the unconditional branch
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  ToyConfig arch;
};

struct TrainResult {
  ToyUNet net;
  double initial_loss = 0.0;  // on a fixed held-out noise batch
  double final_loss = 0.0;
};

/// Noise-prediction training on (latent, caption) pairs. Deterministic given
/// the config; zero steps returns the initialized network.
TrainResult train_toy(const std::vector<Tensor>& latents, const std::vector<std::string>& captions,
                      const TrainConfig& config);
TrainResult train_toy(const std::vector<ShapeSample>& dataset, const TrainConfig& config);

struct AdapterBuild {
  LatentAdapter adapter;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double measured_min_psnr = 0.0;
};

/// Fits the patch codec on RGB 16x16 shapes, measures its round-trip floor on
/// held-out images, and trains a denoiser on the encoded latents.
AdapterBuild build_patch_pca_adapter(const TrainConfig& config, std::size_t dataset_size = 512);

}  // namespace gnr
