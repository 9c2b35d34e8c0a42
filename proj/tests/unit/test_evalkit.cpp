#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "gnr/error.hpp"
#include "gnr/evalkit.hpp"
#include "gnr/image_io.hpp"
#include "gnr/toy_train.hpp"
#include "test_support.hpp"

using namespace gnr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("gnr_evalkit_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_images(const fs::path& dir, int count) {
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03d.png", i);
    write_png(dir / name, render_shape("circle", "red", "blue", 3, 8, 3.5, 3.5, 1.0 + 0.1 * i));
  }
}

MetricTable two_metric_table(std::vector<std::string> methods, std::vector<std::vector<double>> values) {
  MetricTable t;
  t.methods = std::move(methods);
  t.metrics = {"LPIPS", "CLIP"};
  t.directions = {RankDirection::lower_better, RankDirection::higher_better};
  t.values = std::move(values);
  return t;
}

}  // namespace

TEST(Manifest, CustomTableIsReadVerbatim) {
  TempDir d("custom");
  write_images(d.path, 2);
  std::ofstream(d.path / "edits.tsv") << "image\ty_src\ty_trg\tedit_type\n"
                                      << "img_000.png\ta cat\ta dog\tanimal2animal\n"
                                      << "img_001.png\ta photo\ta sketch\tstylisation\n";
  const auto specs = build_manifest(DatasetKind::custom, d.path, 0);
  ASSERT_EQ(specs.size(), 2u);
  EXPECT_EQ(specs[0].image_ref, (d.path / "img_000.png").string());
  EXPECT_EQ(specs[0].y_trg, "a dog");
  EXPECT_EQ(specs[1].edit_type, EditType::stylisation);
  EXPECT_EQ(mode_for(specs[1].edit_type), EditMode::stylisation);
  EXPECT_EQ(mode_for(specs[0].edit_type), EditMode::standard);
}

TEST(Manifest, MissingImagesAreListed) {
  TempDir d("missing");
  std::ofstream(d.path / "edits.tsv") << "a.png\tx\ty\tanimal2animal\nb.png\tx\ty\tanimal2animal\n";
  try {
    build_manifest(DatasetKind::custom, d.path, 0);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("a.png"), std::string::npos);
    EXPECT_NE(msg.find("b.png"), std::string::npos);
  }
}

TEST(Manifest, DogToCatSubsamplesDeterministically) {
  TempDir d("afhq");
  write_images(d.path, 12);
  const auto a = build_manifest(DatasetKind::afhq_dog2cat, d.path, 5, 5);
  const auto b = build_manifest(DatasetKind::afhq_dog2cat, d.path, 5, 5);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a, b);
  std::set<std::string> refs;
  for (const EditSpec& s : a) {
    EXPECT_EQ(s.y_src, "a dog");
    EXPECT_EQ(s.y_trg, "a cat");
    EXPECT_EQ(s.edit_type, EditType::dog2cat);
    refs.insert(s.image_ref);
  }
  EXPECT_EQ(refs.size(), 5u);
  EXPECT_EQ(build_manifest(DatasetKind::afhq_dog2cat, d.path, 5).size(), 12u);
}

TEST(Manifest, EmotionAndStylePromptsComeFromTheLists) {
  TempDir d("ffhq");
  write_images(d.path, 6);
  EXPECT_EQ(style_prompts().size(), 25u);
  EXPECT_EQ(emotion_words().size(), 15u);
  for (const EditSpec& s : build_manifest(DatasetKind::ffhq_emotion, d.path, 1)) {
    bool found = false;
    for (const std::string& w : emotion_words()) found |= s.y_trg == "A photo of a " + w + " person";
    EXPECT_TRUE(found) << s.y_trg;
    EXPECT_EQ(s.edit_type, EditType::emotion);
  }

  TempDir c("coco");
  write_images(c.path, 3);
  std::ofstream(c.path / "captions.tsv") << "img_000.png\ta bus on a street\nimg_001.png\ta plate of food\n"
                                         << "img_002.png\ta dog on a couch\n";
  const auto specs = build_manifest(DatasetKind::coco_styl, c.path, 2);
  ASSERT_EQ(specs.size(), 3u);
  for (const EditSpec& s : specs) {
    EXPECT_EQ(s.edit_type, EditType::stylisation);
    EXPECT_EQ(s.y_trg.substr(s.y_trg.size() - s.y_src.size()), s.y_src);
    EXPECT_GT(s.y_trg.size(), s.y_src.size());
  }
}

TEST(Manifest, JsonLinesRoundTripAndLineNumbers) {
  const std::vector<EditSpec> specs = {{"x.png", "a cat", "a dog", EditType::animal2animal},
                                       {"y.png", "a person", "a smiling person", EditType::emotion}};
  std::stringstream buf;
  write_manifest(buf, specs);
  EXPECT_EQ(read_manifest(buf), specs);

  std::istringstream bad("{\"image\":\"x\",\"y_src\":\"a\",\"y_trg\":\"b\",\"edit_type\":\"dog2cat\"}\n\nnot json\n");
  try {
    read_manifest(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  EXPECT_THROW(parse_dataset("imagenet"), ConfigError);
}

TEST(AverageRank, PublishedTableGolden) {
  // Ranks worked out by hand from the published columns.
  const RankTable r = average_rank(published_metric_table());
  const std::vector<std::string> order = {"ours", "P2P+NPI Prox", "PnP", "P2P+NPI", "EDICT", "P2P+NTI", "ProxMasaCtrl",
                                          "MasaCtrl"};
  const std::vector<std::vector<int>> ranks = {{3, 2, 1}, {1, 4, 4}, {8, 1, 2}, {4, 3, 5},
                                               {2, 6, 6}, {6, 5, 3}, {5, 8, 7}, {7, 7, 8}};
  EXPECT_EQ(r.methods, order);
  EXPECT_EQ(r.ranks, ranks);
  const std::vector<double> avg = {2.0, 3.0, 11.0 / 3, 4.0, 14.0 / 3, 14.0 / 3, 20.0 / 3, 22.0 / 3};
  ASSERT_EQ(r.average.size(), avg.size());
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(r.average[i], avg[i], 1e-12) << order[i];
  ASSERT_EQ(r.ties.size(), 1u);
  EXPECT_NE(r.ties[0].find("P2P+NPI Prox"), std::string::npos);
  EXPECT_NE(r.ties[0].find("P2P+NTI"), std::string::npos);

  std::ostringstream out;
  write_rank_table(out, r);
  EXPECT_NE(out.str().find("2.0"), std::string::npos);
  EXPECT_NE(out.str().find("# tie:"), std::string::npos);
}

TEST(AverageRank, SingleMethodAndPermutation) {
  const RankTable one = average_rank(two_metric_table({"m"}, {{0.5, 0.5}}));
  EXPECT_EQ(one.ranks, (std::vector<std::vector<int>>{{1, 1}}));
  EXPECT_EQ(one.average, std::vector<double>{1.0});

  const RankTable a = average_rank(two_metric_table({"a", "b", "c"}, {{0.1, 0.3}, {0.2, 0.1}, {0.3, 0.2}}));
  const RankTable b = average_rank(two_metric_table({"c", "a", "b"}, {{0.3, 0.2}, {0.1, 0.3}, {0.2, 0.1}}));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t j = static_cast<std::size_t>(std::find(b.methods.begin(), b.methods.end(), a.methods[i]) -
                                                   b.methods.begin());
    EXPECT_EQ(a.ranks[i], b.ranks[j]);
    EXPECT_EQ(a.average[i], b.average[j]);
  }
  EXPECT_TRUE(a.ties.empty());
}

TEST(AverageRank, RejectsMissingCells) {
  EXPECT_THROW(average_rank(two_metric_table({"a", "b"}, {{0.1, std::nan("")}, {0.2, 0.3}})), ArgumentError);
  EXPECT_THROW(average_rank(two_metric_table({"a", "b"}, {{0.1}, {0.2, 0.3}})), ArgumentError);
}

TEST(AverageRank, TableParsing) {
  std::istringstream good("# comment\nmethod\tLPIPS:lower\tCLIP:higher\n\nx\t0.1\t0.2\ny\t0.2\t0.3\n");
  const MetricTable t = read_metric_table(good);
  EXPECT_EQ(t.methods, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(t.directions[1], RankDirection::higher_better);

  std::istringstream bad_count("method\tLPIPS:lower\nx\t0.1\ny\t0.2\t0.3\n");
  try {
    read_metric_table(bad_count);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  std::istringstream bad_value("method\tLPIPS:lower\nx\tabc\n");
  try {
    read_metric_table(bad_value);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(UserStudy, TallyProportions) {
  std::vector<StudyResponse> rs;
  for (int i = 0; i < 100; ++i) rs.push_back({"masactrl", 1, i < 85});
  for (int i = 0; i < 100; ++i) rs.push_back({"masactrl", 2, i < 70});
  for (int i = 0; i < 4; ++i) rs.push_back({"pnp", 1, true});
  const StudyTally t = tally_user_study(rs);
  EXPECT_EQ(t.size(), study_baselines().size());
  EXPECT_DOUBLE_EQ(*t.at("masactrl")[0].percent, published_user_study().at("masactrl")[0]);
  EXPECT_DOUBLE_EQ(*t.at("masactrl")[1].percent, published_user_study().at("masactrl")[1]);
  EXPECT_DOUBLE_EQ(*t.at("pnp")[0].percent, 100.0);
  EXPECT_FALSE(t.at("pnp")[1].percent.has_value());
  EXPECT_FALSE(t.at("edict")[0].percent.has_value());
  EXPECT_THROW(tally_user_study({{"sdedit", 1, true}}), ArgumentError);
  EXPECT_THROW(tally_user_study({{"pnp", 3, true}}), ArgumentError);
}

TEST(Pca, OrthonormalOrderedComponents) {
  std::mt19937_64 rng(4);
  const Tensor x = test::random_tensor({40, 6}, rng);
  const PcaResult p = pca(x, 3);
  ASSERT_EQ(p.components.shape(), (Shape{3, 6}));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double d = 0.0;
      for (int k = 0; k < 6; ++k) d += p.components[static_cast<std::size_t>(i * 6 + k)] *
                                       p.components[static_cast<std::size_t>(j * 6 + k)];
      EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-10);
    }
  }
  EXPECT_GE(p.explained[0], p.explained[1]);
  EXPECT_GE(p.explained[1], p.explained[2]);
  EXPECT_EQ(p.scores.shape(), (Shape{40, 3}));
}

TEST(Pca, RankOneInput) {
  Tensor x({5, 3});
  for (int i = 0; i < 5; ++i) {
    for (int k = 0; k < 3; ++k) x[static_cast<std::size_t>(i * 3 + k)] = (i - 2.0) * (k + 1.0);
  }
  const PcaResult p = pca(x, 3);
  EXPECT_GT(p.explained[0], 1.0);
  EXPECT_NEAR(p.explained[1], 0.0, 1e-10);
  const double n = std::sqrt(14.0);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p.components[static_cast<std::size_t>(k)], (k + 1.0) / n, 1e-10);
  EXPECT_THROW(pca(Tensor({3}), 2), ArgumentError);
}

TEST(Projection, PanelsFromARecord) {
  const ToyUNet& net = test::untrained_net();
  std::mt19937_64 rng(5);
  const Conditioning c = net.embed_prompt("a red circle");
  const PredictionRecord rec = predict(net, test::random_tensor(net.latent_shape(), rng), make_schedule(10).timestep(5),
                                       c, true);
  const auto panels = project_internals(rec, Projection::pca3);
  EXPECT_EQ(panels.size(), rec.self_attn.size() + rec.features.size());
  for (const ProjectionPanel& p : panels) {
    EXPECT_EQ(p.image.dim(0), 3);
    for (double v : p.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  const auto means = project_internals(rec, Projection::channel_mean);
  EXPECT_EQ(means.size(), rec.features.size());
  EXPECT_EQ(means.front().image.dim(0), 1);
  EXPECT_THROW(project_internals(PredictionRecord{}, Projection::pca3), ArgumentError);
}

TEST(Providers, ToyProvidersBehaveLikeMetrics) {
  const Tensor a = render_shape("circle", "red", "blue", 3, 16, 7.5, 7.5, 5);
  const Tensor b = render_shape("square", "green", "yellow", 3, 16, 7.5, 7.5, 5);
  const auto lp = make_lpips_provider(kToyLpips);
  EXPECT_NEAR(lpips(a, a, *lp), 0.0, 1e-12);
  EXPECT_GT(lpips(a, b, *lp), 0.0);
  EXPECT_NEAR(lpips(a, b, *lp), lpips(b, a, *lp), 1e-12);

  const auto cl = make_clip_provider(kToyClip);
  EXPECT_GT(clip_score(a, "a red circle on blue", *cl), clip_score(a, "a green square on yellow", *cl));

  const auto fp = make_fid_provider(kToyFid);
  const std::vector<Tensor> set1 = {a, b, render_shape("triangle", "red", "white", 3, 16, 7.5, 7.5, 5)};
  EXPECT_NEAR(fid(set1, set1, *fp), 0.0, 1e-6);
  EXPECT_GT(fid(set1, {a, a, a}, *fp), 0.0);
}

TEST(Providers, DefaultModelsAreCapabilityErrors) {
  try {
    make_lpips_provider(kDefaultLpips);
    FAIL();
  } catch (const CapabilityError& e) {
    EXPECT_NE(std::string(e.what()).find(kDefaultLpips), std::string::npos);
  }
  EXPECT_THROW(make_clip_provider(kDefaultClip), CapabilityError);
  EXPECT_THROW(make_fid_provider(kDefaultFid), CapabilityError);
}

TEST(Providers, FrechetDistanceOfShiftedGaussian) {
  // Same covariance, mean shift of 2 along one axis: distance 4.
  std::vector<std::vector<double>> a, b;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const std::vector<double> x = {n(rng), n(rng)};
    a.push_back(x);
    b.push_back({x[0] + 2.0, x[1]});
  }
  EXPECT_NEAR(frechet_distance(a, b), 4.0, 1e-8);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(Report, SummaryLineFollowsEdits) {
  MetricReport r;
  r.method = "ours";
  r.edits = {{"a.png", 0.1, 0.2, 1.0}, {"b.png", std::nullopt, std::nullopt, 2.0}};
  r.fid = 3.0;
  std::ostringstream out;
  write_report(out, r);
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_NE(lines[2].find("\"fid\""), std::string::npos);
  EXPECT_NE(lines[1].find("null"), std::string::npos);
}
