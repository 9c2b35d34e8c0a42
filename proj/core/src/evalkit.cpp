#include "gnr/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

#include "gnr/error.hpp"
#include "gnr/toy_train.hpp"
#include "json.hpp"

namespace gnr {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// --- Manifests ----------------------------------------------------------------

EditType parse_edit_type(const std::string& s) {
  static const std::map<std::string, EditType> m = {
      {"animal2animal", EditType::animal2animal}, {"face_wild", EditType::face_wild},
      {"person_wild", EditType::person_wild},     {"stylisation", EditType::stylisation},
      {"dog2cat", EditType::dog2cat},             {"emotion", EditType::emotion}};
  const auto it = m.find(s);
  if (it == m.end()) throw ConfigError("unknown edit type '" + s + "'");
  return it->second;
}

std::string to_string(EditType t) {
  switch (t) {
    case EditType::animal2animal: return "animal2animal";
    case EditType::face_wild: return "face_wild";
    case EditType::person_wild: return "person_wild";
    case EditType::stylisation: return "stylisation";
    case EditType::dog2cat: return "dog2cat";
    case EditType::emotion: return "emotion";
  }
  return "?";
}

DatasetKind parse_dataset(const std::string& s) {
  if (s == "custom") return DatasetKind::custom;
  if (s == "coco_styl") return DatasetKind::coco_styl;
  if (s == "afhq_dog2cat") return DatasetKind::afhq_dog2cat;
  if (s == "ffhq_emotion") return DatasetKind::ffhq_emotion;
  throw ConfigError("unknown dataset '" + s + "' (expected custom, coco_styl, afhq_dog2cat or ffhq_emotion)");
}

std::string to_string(DatasetKind d) {
  switch (d) {
    case DatasetKind::custom: return "custom";
    case DatasetKind::coco_styl: return "coco_styl";
    case DatasetKind::afhq_dog2cat: return "afhq_dog2cat";
    case DatasetKind::ffhq_emotion: return "ffhq_emotion";
  }
  return "?";
}

EditMode mode_for(EditType t) { return t == EditType::stylisation ? EditMode::stylisation : EditMode::standard; }

const std::vector<std::string>& style_prompts() {
  static const std::vector<std::string> styles = {
      "Anime Style",
      "A pop art style",
      "A pixar style",
      "A Van Gogh painting of",
      "A Fernando Botero painting of",
      "A Ukiyo-e painting of",
      "A Picasso painting of",
      "A charocal painting of",
      "An oil painting of",
      "A sketch of",
      "A cubism painting of",
      "An impressionist painting of",
      "A watercolor drawing of",
      "A minecraft painting of",
      "Banksy art of",
      "da Vinci sketch of",
      "A mosaic depicting of",
      "A gothic painting of",
      "A geometric abstract painting of",
      "A white wool of",
      "A futurism painting of",
      "A Pixel art style",
      "Comic book style",
      "Cyberpunk style",
      "Flat style"};
  return styles;
}

const std::vector<std::string>& emotion_words() {
  static const std::vector<std::string> words = {"frightened", "laughing",  "shy",      "surprised",   "smiling",
                                                 "crying",     "angry",     "sad",      "happy",       "emotionless",
                                                 "disgusted",  "painful",   "thoughtful", "worried",   "curious"};
  return words;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool skippable(const std::string& line) {
  const auto first = line.find_first_not_of(" \t\r");
  return first == std::string::npos || line[first] == '#';
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void require_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IngestionError("source directory '" + dir.string() + "' does not exist");
}

std::vector<std::string> list_images(const fs::path& dir) {
  require_dir(dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IngestionError("no images found in '" + dir.string() + "'");
  return names;
}

// Rows of a tab-separated file with at least `columns` fields.
std::vector<std::vector<std::string>> read_rows(const fs::path& file, std::size_t columns, const char* header0) {
  std::ifstream in(file);
  if (!in) throw IngestionError("missing file '" + file.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (skippable(line)) continue;
    std::vector<std::string> f = split_tabs(line);
    if (rows.empty() && f[0] == header0) continue;
    if (f.size() < columns) {
      throw ParseError(file.filename().string() + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(columns) + " tab-separated fields",
                       lineno);
    }
    rows.push_back(std::move(f));
  }
  return rows;
}

void check_exists(const fs::path& dir, const std::vector<EditSpec>& specs) {
  std::vector<std::string> missing;
  std::set<std::string> seen;
  for (const EditSpec& s : specs) {
    if (!fs::exists(fs::path(s.image_ref)) && seen.insert(s.image_ref).second) missing.push_back(s.image_ref);
  }
  if (!missing.empty()) {
    std::string list;
    for (const std::string& m : missing) list += "\n  " + m;
    throw IngestionError("missing " + std::to_string(missing.size()) + " image(s) under '" + dir.string() + "':" +
                         list);
  }
}

template <typename T>
std::vector<T> subsample(std::vector<T> items, std::size_t limit, std::mt19937_64& rng) {
  if (items.size() <= limit) return items;
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  for (std::size_t i : idx) out.push_back(std::move(items[i]));
  return out;
}

}  // namespace

std::vector<EditSpec> build_manifest(DatasetKind dataset, const fs::path& source_dir, std::uint64_t seed,
                                     std::size_t limit) {
  std::mt19937_64 pick(seed);
  std::mt19937_64 assign(seed ^ 0xa5a5a5a5a5a5a5a5ULL);
  std::vector<EditSpec> specs;
  const auto ref = [&](const std::string& name) { return (source_dir / name).string(); };
  switch (dataset) {
    case DatasetKind::custom: {
      require_dir(source_dir);
      for (const auto& row : read_rows(source_dir / "edits.tsv", 4, "image")) {
        specs.push_back({ref(row[0]), row[1], row[2], parse_edit_type(row[3])});
      }
      break;
    }
    case DatasetKind::coco_styl: {
      require_dir(source_dir);
      auto rows = subsample(read_rows(source_dir / "captions.tsv", 2, "image"), limit, pick);
      for (const auto& row : rows) {
        const std::string& style = style_prompts()[assign() % style_prompts().size()];
        specs.push_back({ref(row[0]), row[1], style + " " + row[1], EditType::stylisation});
      }
      break;
    }
    case DatasetKind::afhq_dog2cat: {
      for (const std::string& name : subsample(list_images(source_dir), limit, pick)) {
        specs.push_back({ref(name), "a dog", "a cat", EditType::dog2cat});
      }
      break;
    }
    case DatasetKind::ffhq_emotion: {
      for (const std::string& name : subsample(list_images(source_dir), limit, pick)) {
        const std::string& emotion = emotion_words()[assign() % emotion_words().size()];
        specs.push_back({ref(name), "A photo of a person", "A photo of a " + emotion + " person", EditType::emotion});
      }
      break;
    }
  }
  for (const EditSpec& s : specs) {
    if (s.y_src.empty() || s.y_trg.empty()) throw IngestionError("empty prompt for '" + s.image_ref + "'");
  }
  check_exists(source_dir, specs);
  return specs;
}

void write_manifest(std::ostream& out, const std::vector<EditSpec>& specs) {
  for (const EditSpec& s : specs) {
    json j;
    j["image"] = s.image_ref;
    j["y_src"] = s.y_src;
    j["y_trg"] = s.y_trg;
    j["edit_type"] = to_string(s.edit_type);
    out << j.dump() << '\n';
  }
}

std::vector<EditSpec> read_manifest(std::istream& in) {
  std::vector<EditSpec> specs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (skippable(line)) continue;
    try {
      const json j = json::parse(line);
      EditSpec s{j.at("image").get<std::string>(), j.at("y_src").get<std::string>(), j.at("y_trg").get<std::string>(),
                 parse_edit_type(j.at("edit_type").get<std::string>())};
      specs.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ParseError("manifest line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return specs;
}

// --- Metric providers ---------------------------------------------------------

namespace {

// Per-pixel unit-normalized [value, dx, dy] features, compared at two scales.
class ToyLpips final : public LpipsProvider {
 public:
  std::string name() const override { return kToyLpips; }
  std::string version() const override { return "1"; }
  double distance(const Tensor& a, const Tensor& b) const override {
    require_same_shape(a, b, "lpips");
    if (a.rank() != 3) throw ArgumentError("lpips expects (C, H, W) images");
    double total = 0.0;
    int scales = 0;
    Tensor x = a, y = b;
    while (true) {
      total += compare(x, y);
      ++scales;
      if (x.dim(1) < 4 || x.dim(2) < 4 || x.dim(1) % 2 || x.dim(2) % 2 || scales == 2) break;
      x = pool(x);
      y = pool(y);
    }
    return total / scales;
  }

 private:
  static Tensor pool(const Tensor& x) {
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2, W = x.dim(2);
    Tensor out({c, h, w});
    for (int k = 0; k < c; ++k) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          double s = 0.0;
          for (int di = 0; di < 2; ++di) {
            for (int dj = 0; dj < 2; ++dj) s += x[static_cast<std::size_t>((k * x.dim(1) + 2 * i + di) * W + 2 * j + dj)];
          }
          out[static_cast<std::size_t>((k * h + i) * w + j)] = s / 4.0;
        }
      }
    }
    return out;
  }
  static std::vector<double> feature(const Tensor& x, int i, int j) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> f;
    auto at = [&](int k, int y, int xx) {
      y = std::clamp(y, 0, h - 1);
      xx = std::clamp(xx, 0, w - 1);
      return x[static_cast<std::size_t>((k * h + y) * w + xx)];
    };
    for (int k = 0; k < c; ++k) {
      f.push_back(at(k, i, j));
      f.push_back(at(k, i, j + 1) - at(k, i, j - 1));
      f.push_back(at(k, i + 1, j) - at(k, i - 1, j));
    }
    double n = 0.0;
    for (double v : f) n += v * v;
    n = std::sqrt(n) + 1e-10;
    for (double& v : f) v /= n;
    return f;
  }
  static double compare(const Tensor& x, const Tensor& y) {
    double s = 0.0;
    for (int i = 0; i < x.dim(1); ++i) {
      for (int j = 0; j < x.dim(2); ++j) {
        const auto fa = feature(x, i, j), fb = feature(y, i, j);
        for (std::size_t k = 0; k < fa.size(); ++k) s += (fa[k] - fb[k]) * (fa[k] - fb[k]);
      }
    }
    return s / (x.dim(1) * x.dim(2));
  }
};

// Cosine between the image's nearest-palette-color histogram and the color
// words of the prompt.
class ToyClip final : public ClipProvider {
 public:
  std::string name() const override { return kToyClip; }
  std::string version() const override { return "1"; }
  double score(const Tensor& image, const std::string& prompt) const override {
    if (image.rank() != 3 || image.dim(0) < 3) throw ArgumentError("clip score expects (C>=3, H, W) images");
    const auto& colors = color_names();
    std::vector<std::vector<double>> palette;
    for (const std::string& c : colors) palette.push_back(color_value(c, 3));
    std::vector<double> hist(colors.size(), 0.0), text(colors.size(), 0.0);
    const int hw = image.dim(1) * image.dim(2);
    for (int p = 0; p < hw; ++p) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < palette.size(); ++k) {
        double d = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double v = image[static_cast<std::size_t>(c * hw + p)] - palette[k][static_cast<std::size_t>(c)];
          d += v * v;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      hist[best] += 1.0;
    }
    for (const std::string& w : tokenize(prompt)) {
      const auto it = std::find(colors.begin(), colors.end(), w);
      if (it != colors.end()) text[static_cast<std::size_t>(it - colors.begin())] += 1.0;
    }
    double dot_v = 0.0, nh = 0.0, nt = 0.0;
    for (std::size_t k = 0; k < hist.size(); ++k) {
      dot_v += hist[k] * text[k];
      nh += hist[k] * hist[k];
      nt += text[k] * text[k];
    }
    if (nh == 0.0 || nt == 0.0) return 0.0;
    return dot_v / std::sqrt(nh * nt);
  }
};

// Per-channel mean and standard deviation as the feature embedding.
class ToyFid final : public FidProvider {
 public:
  std::string name() const override { return kToyFid; }
  std::string version() const override { return "1"; }
  double distance(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference) const override {
    return frechet_distance(features(generated), features(reference));
  }

 private:
  static std::vector<std::vector<double>> features(const std::vector<Tensor>& set) {
    std::vector<std::vector<double>> out;
    for (const Tensor& img : set) {
      if (img.rank() != 3) throw ArgumentError("fid expects (C, H, W) images");
      const int c = img.dim(0), hw = img.dim(1) * img.dim(2);
      std::vector<double> f;
      for (int k = 0; k < c; ++k) {
        double m = 0.0, s = 0.0;
        for (int p = 0; p < hw; ++p) m += img[static_cast<std::size_t>(k * hw + p)];
        m /= hw;
        for (int p = 0; p < hw; ++p) {
          const double d = img[static_cast<std::size_t>(k * hw + p)] - m;
          s += d * d;
        }
        f.push_back(m);
        f.push_back(std::sqrt(s / hw));
      }
      out.push_back(std::move(f));
    }
    return out;
  }
};

template <typename P>
struct ProviderRegistry {
  explicit ProviderRegistry(std::string builtin, std::function<std::unique_ptr<P>()> factory) {
    factories[std::move(builtin)] = std::move(factory);
  }
  std::mutex mutex;
  std::map<std::string, std::function<std::unique_ptr<P>()>> factories;

  std::unique_ptr<P> make(const std::string& name, const char* metric) {
    std::lock_guard lock(mutex);
    const auto it = factories.find(name);
    if (it == factories.end()) {
      std::string known;
      for (const auto& [n, f] : factories) known += (known.empty() ? "" : ", ") + n;
      throw CapabilityError(std::string(metric) + " provider plugin '" + name + "' is not registered (available: " +
                            known + "; pass --no-metrics to skip metrics)");
    }
    return it->second();
  }
};

ProviderRegistry<LpipsProvider>& lpips_registry() {
  static ProviderRegistry<LpipsProvider> r(kToyLpips, [] { return std::make_unique<ToyLpips>(); });
  return r;
}

ProviderRegistry<ClipProvider>& clip_registry() {
  static ProviderRegistry<ClipProvider> r(kToyClip, [] { return std::make_unique<ToyClip>(); });
  return r;
}

ProviderRegistry<FidProvider>& fid_registry() {
  static ProviderRegistry<FidProvider> r(kToyFid, [] { return std::make_unique<ToyFid>(); });
  return r;
}

}  // namespace

void register_lpips_provider(const std::string& name, std::function<std::unique_ptr<LpipsProvider>()> factory) {
  std::lock_guard lock(lpips_registry().mutex);
  lpips_registry().factories[name] = std::move(factory);
}

void register_clip_provider(const std::string& name, std::function<std::unique_ptr<ClipProvider>()> factory) {
  std::lock_guard lock(clip_registry().mutex);
  clip_registry().factories[name] = std::move(factory);
}

void register_fid_provider(const std::string& name, std::function<std::unique_ptr<FidProvider>()> factory) {
  std::lock_guard lock(fid_registry().mutex);
  fid_registry().factories[name] = std::move(factory);
}

std::unique_ptr<LpipsProvider> make_lpips_provider(const std::string& name) {
  return lpips_registry().make(name, "LPIPS");
}
std::unique_ptr<ClipProvider> make_clip_provider(const std::string& name) { return clip_registry().make(name, "CLIP"); }
std::unique_ptr<FidProvider> make_fid_provider(const std::string& name) { return fid_registry().make(name, "FID"); }

double lpips(const Tensor& a, const Tensor& b, const LpipsProvider& provider) { return provider.distance(a, b); }

double clip_score(const Tensor& image, const std::string& prompt, const ClipProvider& provider) {
  return provider.score(image, prompt);
}

double fid(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference, const FidProvider& provider) {
  return provider.distance(generated, reference);
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() < 2 || b.size() < 2) throw ArgumentError("Frechet distance needs at least two samples per set");
  const std::size_t d = a.front().size();
  auto to_matrix = [d](const std::vector<std::vector<double>>& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) throw ArgumentError("Frechet distance: feature sizes differ");
      for (std::size_t k = 0; k < d; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    }
    return m;
  };
  const Eigen::MatrixXd A = to_matrix(a), B = to_matrix(b);
  const Eigen::VectorXd mu_a = A.colwise().mean(), mu_b = B.colwise().mean();
  const Eigen::MatrixXd ca = A.rowwise() - mu_a.transpose(), cb = B.rowwise() - mu_b.transpose();
  const Eigen::MatrixXd sa = ca.transpose() * ca / static_cast<double>(A.rows() - 1);
  const Eigen::MatrixXd sb = cb.transpose() * cb / static_cast<double>(B.rows() - 1);

  // Tr sqrt(Sa Sb) = Tr sqrt(Sa^1/2 Sb Sa^1/2), which is symmetric PSD.
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd m = sqrt_a * sb * sqrt_a;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()));
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

void write_report(std::ostream& out, const MetricReport& report) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const EditMetrics& e : report.edits) {
    json j;
    j["method"] = report.method;
    j["image"] = e.image_ref;
    j["lpips"] = opt(e.lpips);
    j["clip"] = opt(e.clip);
    j["seconds"] = e.seconds;
    out << j.dump() << '\n';
  }
  json s;
  s["method"] = report.method;
  s["summary"] = true;
  s["edits"] = report.edits.size();
  s["fid"] = opt(report.fid);
  s["fid_generated"] = report.fid_generated;
  s["fid_reference"] = report.fid_reference;
  s["seconds"] = report.seconds;
  s["providers"] = report.providers;
  out << s.dump() << '\n';
}

// --- AverageRank --------------------------------------------------------------

RankTable average_rank(const MetricTable& table) {
  const std::size_t n = table.methods.size(), m = table.metrics.size();
  if (n == 0) throw ArgumentError("rank table has no methods");
  if (table.directions.size() != m) throw ArgumentError("one direction per metric is required");
  if (table.values.size() != n) throw ArgumentError("one value row per method is required");
  for (std::size_t i = 0; i < n; ++i) {
    if (table.values[i].size() != m) throw ArgumentError("method '" + table.methods[i] + "' has a missing cell");
    for (std::size_t k = 0; k < m; ++k) {
      if (std::isnan(table.values[i][k])) {
        throw ArgumentError("NaN cell for method '" + table.methods[i] + "', metric '" + table.metrics[k] + "'");
      }
    }
  }
  RankTable out;
  out.methods = table.methods;
  out.metrics = table.metrics;
  out.ranks.assign(n, std::vector<int>(m, 0));
  out.average.assign(n, 0.0);
  for (std::size_t k = 0; k < m; ++k) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const bool lower = table.directions[k] == RankDirection::lower_better;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return lower ? table.values[x][k] < table.values[y][k] : table.values[x][k] > table.values[y][k];
    });
    for (std::size_t r = 0; r < n; ++r) {
      out.ranks[order[r]][k] = static_cast<int>(r) + 1;
      if (r > 0 && table.values[order[r]][k] == table.values[order[r - 1]][k]) {
        std::ostringstream note;
        note << table.metrics[k] << ": '" << table.methods[order[r - 1]] << "' (rank " << r << ") and '"
             << table.methods[order[r]] << "' (rank " << r + 1 << ") tie at " << table.values[order[r]][k]
             << "; broken by input order";
        out.ties.push_back(note.str());
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int r : out.ranks[i]) s += r;
    out.average[i] = s / static_cast<double>(m);
  }
  return out;
}

MetricTable read_metric_table(std::istream& in) {
  MetricTable t;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (skippable(line)) continue;
    const std::vector<std::string> f = split_tabs(line);
    if (!have_header) {
      if (f.size() < 2) throw ParseError("line " + std::to_string(lineno) + ": header needs at least one metric", lineno);
      for (std::size_t k = 1; k < f.size(); ++k) {
        const auto colon = f[k].rfind(':');
        if (colon == std::string::npos) {
          throw ParseError("line " + std::to_string(lineno) + ": metric '" + f[k] + "' lacks ':lower' or ':higher'",
                           lineno);
        }
        const std::string dir = f[k].substr(colon + 1);
        if (dir != "lower" && dir != "higher") {
          throw ParseError("line " + std::to_string(lineno) + ": direction must be lower or higher, got '" + dir + "'",
                           lineno);
        }
        t.metrics.push_back(f[k].substr(0, colon));
        t.directions.push_back(dir == "lower" ? RankDirection::lower_better : RankDirection::higher_better);
      }
      have_header = true;
      continue;
    }
    if (f.size() != t.metrics.size() + 1) {
      throw ParseError("line " + std::to_string(lineno) + ": expected " + std::to_string(t.metrics.size() + 1) +
                           " tab-separated fields, got " + std::to_string(f.size()),
                       lineno);
    }
    std::vector<double> row;
    for (std::size_t k = 1; k < f.size(); ++k) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(f[k], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != f[k].size()) {
        throw ParseError("line " + std::to_string(lineno) + ": '" + f[k] + "' is not a number", lineno);
      }
      row.push_back(v);
    }
    t.methods.push_back(f[0]);
    t.values.push_back(std::move(row));
  }
  if (!have_header) throw ParseError("metric table is empty", lineno);
  return t;
}

void write_rank_table(std::ostream& out, const RankTable& ranks) {
  out << "method";
  for (const std::string& m : ranks.metrics) out << '\t' << m << "_rank";
  out << "\taverage_rank\n";
  for (std::size_t i = 0; i < ranks.methods.size(); ++i) {
    out << ranks.methods[i];
    for (int r : ranks.ranks[i]) out << '\t' << r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", ranks.average[i]);
    out << '\t' << buf << '\n';
  }
  for (const std::string& note : ranks.ties) out << "# tie: " << note << '\n';
}

MetricTable published_metric_table() {
  MetricTable t;
  t.metrics = {"LPIPS", "CLIP", "FID"};
  t.directions = {RankDirection::lower_better, RankDirection::higher_better, RankDirection::lower_better};
  t.methods = {"ours", "P2P+NPI Prox", "PnP", "P2P+NPI", "EDICT", "P2P+NTI", "ProxMasaCtrl", "MasaCtrl"};
  t.values = {{0.228, 0.243, 39.07}, {0.170, 0.233, 43.16}, {0.366, 0.256, 39.55},  {0.251, 0.234, 44.05},
              {0.221, 0.229, 47.13}, {0.279, 0.233, 42.46}, {0.267, 0.215, 94.53}, {0.306, 0.223, 100.62}};
  return t;
}

// --- User study ---------------------------------------------------------------

const std::vector<std::string>& study_baselines() {
  static const std::vector<std::string> keys = {"masactrl", "proxmasactrl", "p2p_nti", "p2p_npi",
                                                "p2p_npi_prox", "pnp", "edict"};
  return keys;
}

StudyTally tally_user_study(const std::vector<StudyResponse>& responses) {
  StudyTally tally;
  for (const std::string& k : study_baselines()) tally[k] = {};
  for (const StudyResponse& r : responses) {
    const auto it = tally.find(r.baseline);
    if (it == tally.end()) throw ArgumentError("unknown baseline key '" + r.baseline + "'");
    if (r.question != 1 && r.question != 2) throw ArgumentError("question must be 1 or 2");
    StudyCell& cell = it->second[static_cast<std::size_t>(r.question - 1)];
    ++cell.responses;
    if (r.prefers_method) ++cell.preferred;
  }
  for (auto& [key, cells] : tally) {
    for (StudyCell& c : cells) {
      if (c.responses > 0) c.percent = 100.0 * c.preferred / c.responses;
    }
  }
  return tally;
}

std::map<std::string, std::array<double, 2>> published_user_study() {
  return {{"masactrl", {85, 70}}, {"proxmasactrl", {82, 63}}, {"p2p_nti", {60, 49}}, {"p2p_npi", {59, 58}},
          {"p2p_npi_prox", {50, 55}}, {"pnp", {60, 61}}, {"edict", {56, 59}}};
}

// --- Internals visualization --------------------------------------------------

Projection parse_projection(const std::string& s) {
  if (s == "pca3") return Projection::pca3;
  if (s == "channel_mean") return Projection::channel_mean;
  throw ConfigError("unknown projection '" + s + "' (expected pca3 or channel_mean)");
}

PcaResult pca(const Tensor& samples, int k) {
  if (samples.rank() != 2 || samples.dim(0) < 1) throw ArgumentError("pca expects an (n, d) sample matrix");
  const int n = samples.dim(0), d = samples.dim(1);
  k = std::min(k, d);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(samples.data().data(), n, d);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mu;
  const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  PcaResult r;
  r.components = Tensor({k, d});
  r.scores = Tensor({n, k});
  for (int j = 0; j < k; ++j) {
    const Eigen::Index col = d - 1 - j;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (int i = 0; i < d; ++i) r.components[static_cast<std::size_t>(j * d + i)] = v(i);
    r.explained.push_back(std::max(eig.eigenvalues()(col), 0.0));
    const Eigen::VectorXd s = c * v;
    for (int i = 0; i < n; ++i) r.scores[static_cast<std::size_t>(i * k + j)] = s(i);
  }
  return r;
}

namespace {

Tensor normalize_channels(const Tensor& scores, int k, int h, int w, int out_channels) {
  const int n = h * w;
  Tensor img({out_channels, h, w}, 0.0);
  for (int j = 0; j < std::min(k, out_channels); ++j) {
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < n; ++i) {
      const double v = scores[static_cast<std::size_t>(i * k + j)];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    for (int i = 0; i < n; ++i) {
      const double v = scores[static_cast<std::size_t>(i * k + j)];
      img[static_cast<std::size_t>(j * n + i)] = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    }
  }
  return img;
}

int side_of(int tokens) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens))));
  if (s * s != tokens) throw ArgumentError("attention map over " + std::to_string(tokens) + " tokens is not square");
  return s;
}

}  // namespace

std::vector<ProjectionPanel> project_internals(const PredictionRecord& record, Projection method) {
  std::vector<ProjectionPanel> panels;
  if (method == Projection::pca3) {
    if (record.self_attn.empty() && record.features.empty()) {
      throw ArgumentError("record holds no internals; predict with recording enabled");
    }
    for (std::size_t l = 0; l < record.self_attn.size(); ++l) {
      const Tensor& a = record.self_attn[l];
      const int heads = a.dim(0), q = a.dim(1), kk = a.dim(2);
      Tensor samples({q, heads * kk});
      for (int i = 0; i < q; ++i) {
        for (int h = 0; h < heads; ++h) {
          for (int j = 0; j < kk; ++j) {
            samples[static_cast<std::size_t>(i * heads * kk + h * kk + j)] =
                a[static_cast<std::size_t>((h * q + i) * kk + j)];
          }
        }
      }
      const PcaResult p = pca(samples, 3);
      const int s = side_of(q);
      panels.push_back({"self_attn[" + std::to_string(l) + "]",
                        normalize_channels(p.scores, p.components.dim(0), s, s, 3), p.explained});
    }
  } else if (record.features.empty()) {
    throw ArgumentError("record holds no feature taps; predict with recording enabled");
  }
  for (const auto& [name, f] : record.features) {
    const int c = f.dim(0), h = f.dim(1), w = f.dim(2), n = h * w;
    if (method == Projection::pca3) {
      Tensor samples({n, c});
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k < c; ++k) samples[static_cast<std::size_t>(i * c + k)] = f[static_cast<std::size_t>(k * n + i)];
      }
      const PcaResult p = pca(samples, 3);
      panels.push_back({name, normalize_channels(p.scores, p.components.dim(0), h, w, 3), p.explained});
    } else {
      Tensor mean_map({n, 1});
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int k = 0; k < c; ++k) s += f[static_cast<std::size_t>(k * n + i)];
        mean_map[static_cast<std::size_t>(i)] = s / c;
      }
      panels.push_back({name, normalize_channels(mean_map, 1, h, w, 1), {}});
    }
  }
  return panels;
}

}  // namespace gnr
