#include "gnr/toy_train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "gnr/error.hpp"
#include "gnr/schedule.hpp"

namespace gnr {

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle", "cross"};
  return names;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = {"red", "green", "blue", "yellow", "white", "black"};
  return names;
}

std::vector<double> color_value(const std::string& name, int channels) {
  // RGB plus a fourth channel so toy images fill every latent channel.
  static const std::map<std::string, std::vector<double>> table = {
      {"red", {1.0, -1.0, -1.0, 0.6}},   {"green", {-1.0, 1.0, -1.0, -0.2}}, {"blue", {-1.0, -1.0, 1.0, -0.6}},
      {"yellow", {1.0, 1.0, -1.0, 0.2}}, {"white", {1.0, 1.0, 1.0, 1.0}},    {"black", {-1.0, -1.0, -1.0, -1.0}}};
  const auto it = table.find(name);
  if (it == table.end()) throw ArgumentError("unknown color '" + name + "'");
  if (channels < 1 || channels > 4) throw ArgumentError("color_value supports 1 to 4 channels");
  return {it->second.begin(), it->second.begin() + channels};
}

namespace {

bool inside(const std::string& shape, double dx, double dy, double r) {
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
  if (shape == "triangle") return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
  if (shape == "cross") {
    const double arm = r / 3.0;
    return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
  }
  throw ArgumentError("unknown shape '" + shape + "'");
}

}  // namespace

Tensor render_shape(const std::string& shape, const std::string& fg, const std::string& bg, int channels, int size,
                    double cx, double cy, double radius) {
  const std::vector<double> f = color_value(fg, channels), b = color_value(bg, channels);
  constexpr int kSuper = 4;
  Tensor img({channels, size, size});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
          hits += inside(shape, px - cx, py - cy, radius) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      for (int c = 0; c < channels; ++c) {
        img[static_cast<std::size_t>((c * size + y) * size + x)] =
            cover * f[static_cast<std::size_t>(c)] + (1.0 - cover) * b[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

std::vector<ShapeSample> make_shape_dataset(std::size_t count, std::uint64_t seed, int channels, int size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& shapes = shape_names();
  const auto& colors = color_names();
  std::vector<ShapeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSample s;
    s.shape = shapes[rng() % shapes.size()];
    s.foreground = colors[rng() % colors.size()];
    do {
      s.background = colors[rng() % colors.size()];
    } while (s.background == s.foreground);
    const double cx = size * (0.5 + 0.15 * (2.0 * unit(rng) - 1.0));
    const double cy = size * (0.5 + 0.15 * (2.0 * unit(rng) - 1.0));
    const double r = size * (0.25 + 0.13 * unit(rng));
    s.image = render_shape(s.shape, s.foreground, s.background, channels, size, cx, cy, r);
    s.caption = "a " + s.foreground + " " + s.shape + " on " + s.background;
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

struct NoiseDraw {
  std::size_t sample;
  double alpha_bar;
  bool drop_caption;
  Tensor noise;
};

NoiseDraw draw(std::mt19937_64& rng, std::size_t n, const std::vector<double>& curve, const Shape& shape,
               double null_prob) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  NoiseDraw d;
  d.sample = rng() % n;
  d.alpha_bar = curve[rng() % curve.size()];
  d.drop_caption = unit(rng) < null_prob;
  d.noise = Tensor(shape);
  for (double& v : d.noise.data()) v = normal(rng);
  return d;
}

Tensor noised(const Tensor& x0, const NoiseDraw& d) {
  return axpy(std::sqrt(d.alpha_bar) * x0, std::sqrt(1.0 - d.alpha_bar), d.noise);
}

Timestep level(double alpha_bar) {
  Timestep t;
  t.alpha_bar = alpha_bar;
  return t;
}

class Adam {
 public:
  Adam(const ToyUNet& net, double lr) : lr_(lr) {
    for (std::size_t i = 0; i < net.parameter_count(); ++i) {
      m_.emplace_back(net.parameter(i).shape(), 0.0);
      v_.emplace_back(net.parameter(i).shape(), 0.0);
    }
  }

  void step(ToyUNet& net, const std::vector<Tensor>& grads) {
    ++t_;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto p = net.parameter(i).data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      const auto g = grads[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        p[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }

 private:
  double lr_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

double eval_loss(const ToyUNet& net, const std::vector<Tensor>& latents, const std::vector<Conditioning>& conds,
                 const Conditioning& null_cond, const std::vector<NoiseDraw>& batch) {
  double total = 0.0;
  for (const NoiseDraw& d : batch) {
    const Tensor zt = noised(latents[d.sample], d);
    const Conditioning& c = d.drop_caption ? null_cond : conds[d.sample];
    const Tensor eps = predict(net, zt, level(d.alpha_bar), c, false).eps;
    total += squared_norm(eps - d.noise) / static_cast<double>(eps.size());
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TrainResult train_toy(const std::vector<Tensor>& latents, const std::vector<std::string>& captions,
                      const TrainConfig& config) {
  if (latents.empty()) throw ArgumentError("training dataset is empty");
  if (latents.size() != captions.size()) throw ArgumentError("latent and caption counts differ");
  if (config.steps < 0 || config.batch < 1) throw ArgumentError("training needs steps >= 0 and batch >= 1");

  TrainResult result{ToyUNet(config.arch, config.seed), 0.0, 0.0};
  ToyUNet& net = result.net;
  const Shape shape = net.latent_shape();
  for (const Tensor& z : latents) {
    if (z.shape() != shape) throw ArgumentError("training latent shape " + shape_str(z.shape()));
  }
  std::vector<Conditioning> conds;
  conds.reserve(captions.size());
  for (const std::string& c : captions) conds.push_back(net.embed_prompt(c));
  const std::vector<double> curve = training_alpha_bars(ScheduleProfile{});

  std::mt19937_64 eval_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<NoiseDraw> eval_batch;
  for (int i = 0; i < 64; ++i) eval_batch.push_back(draw(eval_rng, latents.size(), curve, shape, config.null_prob));

  result.initial_loss = eval_loss(net, latents, conds, net.embed_prompt(""), eval_batch);

  std::mt19937_64 rng(config.seed + 1);
  Adam adam(net, config.learning_rate);
  const Conditioning null_cond = net.embed_prompt("");
  std::vector<Tensor> grads;
  for (int step = 0; step < config.steps; ++step) {
    grads.clear();
    for (std::size_t i = 0; i < net.parameter_count(); ++i) grads.emplace_back(net.parameter(i).shape(), 0.0);
    for (int b = 0; b < config.batch; ++b) {
      const NoiseDraw d = draw(rng, latents.size(), curve, shape, config.null_prob);
      ad::Tape tape;
      const ad::Var zt = tape.constant(noised(latents[d.sample], d));
      std::vector<ad::Var> weights;
      const RecordNodes rec =
          net.forward_trainable(tape, zt, level(d.alpha_bar), d.drop_caption ? null_cond : conds[d.sample], weights);
      const ad::Var loss = ad::mean(ad::square(rec.eps - tape.constant(d.noise)));
      tape.backward(loss);
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (tape.has_grad(weights[i])) grads[i] += tape.grad(weights[i]);
      }
    }
    double norm_sq = 0.0;
    for (Tensor& g : grads) {
      g = (1.0 / config.batch) * g;
      norm_sq += squared_norm(g);
    }
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw NumericError("training diverged at step " + std::to_string(step));
    if (config.grad_clip > 0 && norm > config.grad_clip) {
      for (Tensor& g : grads) g = (config.grad_clip / norm) * g;
    }
    adam.step(net, grads);
  }
  result.final_loss = eval_loss(net, latents, conds, net.embed_prompt(""), eval_batch);
  return result;
}

TrainResult train_toy(const std::vector<ShapeSample>& dataset, const TrainConfig& config) {
  std::vector<Tensor> latents;
  std::vector<std::string> captions;
  for (const ShapeSample& s : dataset) {
    latents.push_back(s.image);
    captions.push_back(s.caption);
  }
  return train_toy(latents, captions, config);
}

AdapterBuild build_patch_pca_adapter(const TrainConfig& config, std::size_t dataset_size) {
  const ToyConfig& arch = config.arch;
  const std::vector<ShapeSample> data =
      make_shape_dataset(dataset_size, config.seed, 3, arch.height * PatchPcaCodec::kPatch);
  const std::vector<ShapeSample> held_out =
      make_shape_dataset(64, config.seed + 7, 3, arch.height * PatchPcaCodec::kPatch);
  std::vector<Tensor> images;
  for (const ShapeSample& s : data) images.push_back(s.image);
  PatchPcaCodec codec = PatchPcaCodec::fit(images, arch.channels);

  double min_psnr = std::numeric_limits<double>::infinity();
  for (const ShapeSample& s : held_out) min_psnr = std::min(min_psnr, psnr(codec.decode(codec.encode(s.image)), s.image));
  // Declared floor keeps a 1 dB margin under the worst held-out image.
  codec.set_psnr_floor(std::floor(min_psnr) - 1.0);

  std::vector<Tensor> latents;
  std::vector<std::string> captions;
  for (const ShapeSample& s : data) {
    latents.push_back(codec.encode(s.image));
    captions.push_back(s.caption);
  }
  TrainResult trained = train_toy(latents, captions, config);
  return AdapterBuild{LatentAdapter(std::move(codec), std::move(trained.net)), trained.initial_loss,
                      trained.final_loss, min_psnr};
}

}  // namespace gnr
