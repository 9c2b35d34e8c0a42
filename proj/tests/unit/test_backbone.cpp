#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "gnr/backbone.hpp"
#include "gnr/error.hpp"
#include "gnr/guidance.hpp"
#include "gnr/latent_adapter.hpp"
#include "gnr/schedule.hpp"
#include "gnr/toy_train.hpp"
#include "gnr/toy_unet.hpp"
#include "test_support.hpp"

using namespace gnr;

namespace {

Timestep step_of(int t, int T = 50) { return make_schedule(T).timestep(t); }

}  // namespace

TEST(ToyBackbone, ShapesAndMapCount) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(1);
  const Tensor z = test::random_tensor(net.latent_shape(), rng);
  const PredictionRecord rec = predict(net, z, step_of(30), net.embed_prompt("a red circle on blue"));
  EXPECT_EQ(rec.eps.shape(), (Shape{4, 8, 8}));
  EXPECT_EQ(static_cast<int>(rec.self_attn.size()), net.num_attn_layers());
  EXPECT_GE(rec.self_attn.size(), 2u);
  EXPECT_TRUE(rec.features.count(kTapLastUpBlock));
  EXPECT_TRUE(rec.features.count(kTapUp2Resnet2));
  EXPECT_EQ(net.scalar_count(), 148132u);
}

TEST(ToyBackbone, PredictIsDeterministic) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(2);
  const Tensor z = test::random_tensor(net.latent_shape(), rng);
  const Conditioning c = net.embed_prompt("a cat");
  const PredictionRecord a = predict(net, z, step_of(10), c), b = predict(net, z, step_of(10), c);
  EXPECT_EQ(a.eps, b.eps);
  ASSERT_EQ(a.self_attn.size(), b.self_attn.size());
  for (std::size_t i = 0; i < a.self_attn.size(); ++i) EXPECT_EQ(a.self_attn[i], b.self_attn[i]);
  EXPECT_EQ(a.features, b.features);
}

TEST(ToyBackbone, AttentionRowsAreStochastic) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(3);
  for (int t : {1, 25, 50}) {
    const Tensor z = test::random_tensor(net.latent_shape(), rng, 2.0);
    const PredictionRecord rec = predict(net, z, step_of(t), net.embed_prompt(""));
    for (const Tensor& m : rec.self_attn) {
      const int heads = m.dim(0), q = m.dim(1), k = m.dim(2);
      for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < q; ++i) {
          double s = 0.0;
          for (int j = 0; j < k; ++j) s += m[(static_cast<std::size_t>(h) * q + i) * k + j];
          EXPECT_NEAR(s, 1.0, 1e-4);
        }
      }
    }
  }
}

TEST(ToyBackbone, RecordingIsOptIn) {
  const ToyUNet& net = test::untrained_net();
  const Tensor z(net.latent_shape(), 0.1);
  const PredictionRecord rec = predict(net, z, step_of(5), net.embed_prompt(""), false);
  EXPECT_TRUE(rec.self_attn.empty());
  EXPECT_TRUE(rec.features.empty());
  EXPECT_EQ(rec.eps, predict(net, z, step_of(5), net.embed_prompt(""), true).eps);
}

TEST(ToyBackbone, PromptEmbedding) {
  const ToyUNet& net = test::untrained_net();
  const Conditioning null_c = net.embed_prompt("");
  EXPECT_TRUE(null_c.is_null);
  const Conditioning a = net.embed_prompt("a cat"), b = net.embed_prompt("a cat");
  EXPECT_FALSE(a.is_null);
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_THROW(net.embed_prompt("zyzzyva"), VocabularyError);
  EXPECT_EQ(toy_vocabulary().size(), 32u);
}

TEST(ToyBackbone, PromptChangesPrediction) {
  const ToyUNet& net = test::untrained_net();
  const Tensor z(net.latent_shape(), 0.2);
  EXPECT_NE(predict(net, z, step_of(20), net.embed_prompt("a red square")).eps,
            predict(net, z, step_of(20), net.embed_prompt("a blue square")).eps);
}

TEST(ToyBackbone, InputValidation) {
  const ToyUNet& net = test::untrained_net();
  EXPECT_THROW(predict(net, Tensor({4, 4, 4}), step_of(1), net.embed_prompt("")), ArgumentError);
  Tensor bad(net.latent_shape(), 0.0);
  bad[3] = std::nan("");
  EXPECT_THROW(predict(net, bad, step_of(1), net.embed_prompt("")), NumericError);
}

TEST(ToyBackbone, IdentityCodec) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(4);
  Tensor img = test::random_tensor(net.latent_shape(), rng, 0.3);
  for (double& v : img.data()) v = std::clamp(v, -1.0, 1.0);
  EXPECT_TRUE(net.codec().is_identity());
  EXPECT_EQ(net.codec().decode(net.codec().encode(img)), img);
  EXPECT_THROW(net.codec().encode(Tensor({3, 8, 8})), ArgumentError);
}

TEST(ToyBackbone, OutOfRangeImagesAreClippedWithWarning) {
  const ToyUNet& net = test::untrained_net();
  std::vector<std::string> warnings;
  const WarningHandler old = set_warning_handler([&](std::string_view m) { warnings.emplace_back(m); });
  Tensor img(net.latent_shape(), 0.0);
  img[0] = 3.0;
  img[1] = -2.0;
  const Tensor z = net.codec().encode(img);
  set_warning_handler(old);
  EXPECT_EQ(z[0], 1.0);
  EXPECT_EQ(z[1], -1.0);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(ToyBackbone, GradWrtLatentOfConstantIsZero) {
  const ToyUNet& net = test::untrained_net();
  const Tensor z(net.latent_shape(), 0.3);
  const LatentGradient g = grad_wrt_latent(
      net, [](const RecordNodes& r) { return r.eps.tape->constant(Tensor::scalar(2.0)); }, z, step_of(10),
      net.embed_prompt(""));
  EXPECT_EQ(max_abs(g.grad), 0.0);
}

TEST(ToyBackbone, GradWrtLatentMatchesFiniteDifferences) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(5);
  const Tensor z = test::random_tensor(net.latent_shape(), rng);
  const Timestep t = step_of(25);
  const Conditioning c = net.embed_prompt("a green cross on white");

  const LatentGradient g =
      grad_wrt_latent(net, [](const RecordNodes& r) { return ad::mean(r.eps); }, z, t, c);
  const auto mean_eps = [&](const Tensor& x) { return mean(predict(net, x, t, c, false).eps); };
  const test::FdCheck fd = test::finite_difference_check(mean_eps, z, g.grad, 16, 99);
  EXPECT_EQ(fd.failed, 0) << "worst relative error " << fd.worst;

  // Self-attention energy against a constant reference record.
  const PredictionRecord ref = predict(net, test::random_tensor(net.latent_shape(), rng), t, c);
  const LatentGradient ga = grad_wrt_latent(
      net,
      [&](const RecordNodes& r) {
        std::vector<ad::Var> refs;
        for (const Tensor& m : ref.self_attn) refs.push_back(r.eps.tape->constant_ref(m));
        return energy::self_attn(r.self_attn, refs);
      },
      z, t, c);
  const auto attn_energy = [&](const Tensor& x) { return self_attn_energy(predict(net, x, t, c).self_attn, ref.self_attn); };
  const test::FdCheck fa = test::finite_difference_check(attn_energy, z, ga.grad, 16, 100);
  EXPECT_EQ(fa.failed, 0) << "worst relative error " << fa.worst;
}

TEST(ToyBackbone, NotDifferentiableBackboneIsCapabilityError) {
  class Frozen final : public Backbone {
   public:
    std::string name() const override { return "frozen"; }
    Shape latent_shape() const override { return inner.latent_shape(); }
    int num_attn_layers() const override { return inner.num_attn_layers(); }
    bool differentiable() const override { return false; }
    const Codec& codec() const override { return inner.codec(); }
    Conditioning embed_prompt(std::string_view text) const override { return inner.embed_prompt(text); }
    RecordNodes forward(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                        bool record) const override {
      return inner.forward(tape, z, t, c, record);
    }
    const ToyUNet& inner = test::untrained_net();
  } frozen;
  EXPECT_THROW(grad_wrt_latent(
                   frozen, [](const RecordNodes& r) { return ad::mean(r.eps); }, Tensor(frozen.latent_shape(), 0.0),
                   step_of(3), frozen.embed_prompt("")),
               CapabilityError);
}

TEST(ToyBackbone, SerializationRoundTrip) {
  const ToyUNet& net = test::untrained_net();
  const ToyUNet copy = ToyUNet::deserialize(net.serialize());
  EXPECT_TRUE(copy == net);
  std::vector<std::uint8_t> bytes = net.serialize();
  bytes[0] = 'X';
  EXPECT_THROW(ToyUNet::deserialize(bytes), ConsistencyError);
  bytes = net.serialize();
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(ToyUNet::deserialize(bytes), ConsistencyError);
}

TEST(ToyTraining, LossDecreasesAndIsDeterministic) {
  const auto data = make_shape_dataset(64, 3);
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.seed = 3;
  const TrainResult a = train_toy(data, cfg), b = train_toy(data, cfg);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_TRUE(a.net == b.net);
  EXPECT_EQ(a.final_loss, b.final_loss);
}

TEST(ToyTraining, ZeroStepsExportsInitialNet) {
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 9;
  const TrainResult r = train_toy(make_shape_dataset(8, 1), cfg);
  EXPECT_TRUE(r.net == ToyUNet(cfg.arch, cfg.seed));
  EXPECT_EQ(r.initial_loss, r.final_loss);
  const ToyUNet copy = ToyUNet::deserialize(r.net.serialize());
  EXPECT_TRUE(copy == r.net);
}

TEST(ToyTraining, EmptyDatasetIsArgumentError) {
  EXPECT_THROW(train_toy(std::vector<ShapeSample>{}, TrainConfig{}), ArgumentError);
}

TEST(ShapeDataset, CaptionsUseVocabularyAndDistinctColors) {
  for (const ShapeSample& s : make_shape_dataset(50, 4)) {
    EXPECT_NE(s.foreground, s.background);
    EXPECT_NO_THROW(test::untrained_net().embed_prompt(s.caption));
    EXPECT_EQ(s.image.shape(), (Shape{4, 8, 8}));
    EXPECT_LE(max_abs(s.image), 1.0);
  }
  EXPECT_EQ(make_shape_dataset(5, 4)[2].image, make_shape_dataset(5, 4)[2].image);
}

TEST(Registry, ResolvesToyAndRejectsUnknown) {
  EXPECT_THROW(load_backbone("adapter:does_not_exist", "."), CapabilityError);
  EXPECT_THROW(load_backbone("sd15", "."), ConfigError);
  const auto names = registered_adapters();
  EXPECT_NE(std::find(names.begin(), names.end(), kPatchPcaAdapterName), names.end());
}

TEST(Registry, ToyWeightsFromDirectory) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "gnr_registry_test";
  std::filesystem::create_directories(dir);
  test::untrained_net().save(dir / "toy.bin");
  const auto h = load_backbone("toy", dir);
  EXPECT_EQ(h->name(), "toy");
  const Tensor z(h->latent_shape(), 0.0);
  EXPECT_EQ(predict(*h, z, step_of(2), h->embed_prompt("")).eps,
            predict(test::untrained_net(), z, step_of(2), h->embed_prompt("")).eps);
  std::filesystem::remove_all(dir);
}

TEST(PatchPcaAdapter, ContractAndRoundTripFloor) {
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.seed = 2;
  const AdapterBuild b = build_patch_pca_adapter(cfg, 64);
  const LatentAdapter& h = b.adapter;
  EXPECT_NO_THROW(validate_adapter_contract(h));
  EXPECT_EQ(h.codec().image_shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(h.latent_shape(), (Shape{4, 8, 8}));
  EXPECT_FALSE(h.codec().is_identity());
  EXPECT_TRUE(std::isfinite(h.codec().psnr_floor()));
  EXPECT_LE(h.codec().psnr_floor(), b.measured_min_psnr);

  // Held-out images round-trip above the declared floor.
  for (const ShapeSample& s : make_shape_dataset(16, 1234, 3, 16)) {
    EXPECT_GE(psnr(h.codec().decode(h.codec().encode(s.image)), s.image), h.codec().psnr_floor());
  }
  const Tensor& basis = h.patch_codec().basis();
  const int k = basis.dim(0), d = basis.dim(1);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      double s = 0.0;
      for (int q = 0; q < d; ++q) s += basis[static_cast<std::size_t>(i * d + q)] * basis[static_cast<std::size_t>(j * d + q)];
      EXPECT_NEAR(s, i == j ? 1.0 : 0.0, 1e-9);
    }
  }

  const LatentAdapter copy = LatentAdapter::deserialize(h.serialize());
  EXPECT_TRUE(copy.patch_codec() == h.patch_codec());
  EXPECT_TRUE(copy.denoiser() == h.denoiser());
}
