#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gnr/backbone.hpp"
#include "gnr/guidance.hpp"

namespace gnr {

// --- Manifests ----------------------------------------------------------------

enum class EditType { animal2animal, face_wild, person_wild, stylisation, dog2cat, emotion };
enum class DatasetKind { custom, coco_styl, afhq_dog2cat, ffhq_emotion };

EditType parse_edit_type(const std::string& s);
std::string to_string(EditType t);
DatasetKind parse_dataset(const std::string& s);
std::string to_string(DatasetKind d);
EditMode mode_for(EditType t);

struct EditSpec {
  std::string image_ref;
  std::string y_src;
  std::string y_trg;
  EditType edit_type = EditType::animal2animal;

  bool operator==(const EditSpec&) const = default;
};

/// The 25 style prefixes used for the stylisation set.
const std::vector<std::string>& style_prompts();
/// The 15 emotion descriptions used for the emotion set.
const std::vector<std::string>& emotion_words();

/// Expected layouts under `source_dir`:
///   custom:       edits.tsv with rows  image<TAB>y_src<TAB>y_trg<TAB>edit_type
///   coco_styl:    captions.tsv with rows  image<TAB>caption
///   afhq_dog2cat: image files (.png/.jpg/.jpeg)
///   ffhq_emotion: image files
/// Image sets larger than `limit` are subsampled with the seeded RNG.
/// Referenced images that do not exist raise IngestionError listing them all.
std::vector<EditSpec> build_manifest(DatasetKind dataset, const std::filesystem::path& source_dir,
                                     std::uint64_t seed, std::size_t limit = 500);

void write_manifest(std::ostream& out, const std::vector<EditSpec>& specs);
/// Throws ParseError carrying the 1-based line number.
std::vector<EditSpec> read_manifest(std::istream& in);

// --- Metric providers ---------------------------------------------------------

class LpipsProvider {
 public:
  virtual ~LpipsProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  virtual double distance(const Tensor& a, const Tensor& b) const = 0;
};

class ClipProvider {
 public:
  virtual ~ClipProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  virtual double score(const Tensor& image, const std::string& prompt) const = 0;
};

class FidProvider {
 public:
  virtual ~FidProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  virtual double distance(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference) const = 0;
};

inline constexpr const char* kDefaultLpips = "lpips-alex";
inline constexpr const char* kDefaultClip = "clip-vit-b32";
inline constexpr const char* kDefaultFid = "fid-inception-v3";

inline constexpr const char* kToyLpips = "toy-lpips";
inline constexpr const char* kToyClip = "toy-clip";
inline constexpr const char* kToyFid = "toy-fid";

void register_lpips_provider(const std::string& name, std::function<std::unique_ptr<LpipsProvider>()> factory);
void register_clip_provider(const std::string& name, std::function<std::unique_ptr<ClipProvider>()> factory);
void register_fid_provider(const std::string& name, std::function<std::unique_ptr<FidProvider>()> factory);

/// Throw CapabilityError naming the missing plugin.
std::unique_ptr<LpipsProvider> make_lpips_provider(const std::string& name);
std::unique_ptr<ClipProvider> make_clip_provider(const std::string& name);
std::unique_ptr<FidProvider> make_fid_provider(const std::string& name);

double lpips(const Tensor& a, const Tensor& b, const LpipsProvider& provider);
double clip_score(const Tensor& image, const std::string& prompt, const ClipProvider& provider);
double fid(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference, const FidProvider& provider);

/// Frechet distance between Gaussians fitted to the rows of two feature sets.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct EditMetrics {
  std::string image_ref;
  std::optional<double> lpips;
  std::optional<double> clip;
  double seconds = 0.0;
};

struct MetricReport {
  std::string method;
  std::vector<EditMetrics> edits;
  std::optional<double> fid;
  std::size_t fid_generated = 0;
  std::size_t fid_reference = 0;
  double seconds = 0.0;
  std::map<std::string, std::string> providers;  // metric -> "name@version"
};

void write_report(std::ostream& out, const MetricReport& report);

// --- AverageRank --------------------------------------------------------------

enum class RankDirection { lower_better, higher_better };

struct MetricTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<RankDirection> directions;
  std::vector<std::vector<double>> values;  // [method][metric]
};

struct RankTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<std::vector<int>> ranks;  // [method][metric], 1 = best
  std::vector<double> average;
  /// Human-readable notes for every tie that was broken by input order.
  std::vector<std::string> ties;
};

RankTable average_rank(const MetricTable& table);

/// Tab-separated text: a header `method<TAB>NAME:lower|higher...`, then one
/// row per method. Blank lines and lines starting with '#' are skipped.
/// Throws ParseError with the offending line number.
MetricTable read_metric_table(std::istream& in);
void write_rank_table(std::ostream& out, const RankTable& ranks);

/// LPIPS / CLIP / FID columns of the published comparison, listed in the
/// order of the published rank table.
MetricTable published_metric_table();

// --- User study ---------------------------------------------------------------

/// Baseline keys: masactrl, proxmasactrl, p2p_nti, p2p_npi, p2p_npi_prox, pnp, edict.
const std::vector<std::string>& study_baselines();

struct StudyResponse {
  std::string baseline;
  int question = 1;  // 1: editing, 2: preservation
  bool prefers_method = true;
};

struct StudyCell {
  int responses = 0;
  int preferred = 0;
  std::optional<double> percent;  // empty when there were no responses
};

using StudyTally = std::map<std::string, std::array<StudyCell, 2>>;

StudyTally tally_user_study(const std::vector<StudyResponse>& responses);
/// Published aggregate percentages (Q1, Q2) per baseline key.
std::map<std::string, std::array<double, 2>> published_user_study();

// --- Internals visualization --------------------------------------------------

enum class Projection { pca3, channel_mean };
Projection parse_projection(const std::string& s);

struct PcaResult {
  Tensor components;                // (k, d) orthonormal rows
  std::vector<double> explained;    // variance per component, non-increasing
  Tensor scores;                    // (n, k) projections of the centered samples
};

/// Top-k principal components of `samples` (n, d).
PcaResult pca(const Tensor& samples, int k = 3);

struct ProjectionPanel {
  std::string label;
  Tensor image;  // (3, H, W) or (1, H, W), scaled to [0, 1]
  std::vector<double> explained;
};

/// pca3: one panel per attention layer (query tokens as samples) and per
/// feature tap (pixels as samples). channel_mean: one panel per feature tap.
std::vector<ProjectionPanel> project_internals(const PredictionRecord& record, Projection method);

}  // namespace gnr
