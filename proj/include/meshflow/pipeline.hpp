#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "meshflow/autodiff.hpp"
#include "meshflow/gnn.hpp"
#include "meshflow/image.hpp"
#include "meshflow/losses.hpp"
#include "meshflow/mesh.hpp"
#include "meshflow/synth.hpp"

namespace meshflow {

// ---- configuration -----------------------------------------------------------

enum class FeatureMode { global, pooling };

std::string feature_mode_name(FeatureMode mode);
FeatureMode parse_feature_mode(const std::string& name);

struct TrainConfig {
  FeatureMode feature_mode = FeatureMode::pooling;
  LossConfig loss;
  GraphNetConfig gnn;
  ExtractorConfig extractor;  // mode follows feature_mode
  int epochs = 100;
  double lr = 1e-5;
  int accumulation_steps = 5;
  int batch_size = 1;
  int fold_count = 10;
  std::uint64_t seed = 0;

  void validate() const;
  ExtractorConfig extractor_config() const;
};

// Config file: {"synth": {...}, "train": {...}}; every key is optional and
// unknown keys are rejected.
struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
};

RunConfig parse_run_config(std::string_view json_text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
std::string run_config_json(const RunConfig& cfg);
std::string train_config_json(const TrainConfig& cfg);
TrainConfig parse_train_config(std::string_view json_text, TrainConfig base = {});

// ---- prepared data -------------------------------------------------------------

// One subject in the normalised frame of its reference mesh. Every frame uses
// the reference's transform so breathing translation survives normalisation.
struct PreparedSubject {
  int subject = 0;
  TriMesh reference_world;
  NormalizeTransform transform;
  TriMesh reference;
  Neighborhoods graph;
  std::vector<PixelIndex> pixels;  // reference vertices on the slice
  std::vector<TriMesh> frames;     // normalised
  std::vector<TriMesh> frames_world;
  std::vector<SurrogateImage> images;
  std::size_t reference_frame = 0;  // frame at the reference state

  const SurrogateImage& reference_image() const { return images.at(reference_frame); }
};

PreparedSubject prepare_subject(const BreathingSequence& seq);
std::vector<PreparedSubject> prepare_dataset(const std::vector<BreathingSequence>& data);

// ---- model ---------------------------------------------------------------------

class Model {
 public:
  Model() = default;
  Model(const TrainConfig& cfg, std::size_t image_height, std::size_t image_width);

  const TrainConfig& config() const { return cfg_; }
  FeatureMode feature_mode() const { return cfg_.feature_mode; }
  std::size_t image_height() const { return image_height_; }
  std::size_t image_width() const { return image_width_; }
  const ConvExtractor& extractor() const { return extractor_; }
  const GraphNet& graph_net() const { return gnn_; }
  GraphNet& graph_net() { return gnn_; }

  // Per-vertex conditioning features, N x feature_width.
  ad::Tensor vertex_features(std::size_t vertex_count, std::span<const PixelIndex> pixels,
                             const SurrogateImage& img) const;
  // Predicted normalised vertex positions, N x 3.
  ad::Tensor predict(const TriMesh& reference, const Neighborhoods& graph, std::span<const PixelIndex> pixels,
                     const SurrogateImage& img) const;
  ad::Tensor predict(const PreparedSubject& subject, const SurrogateImage& img) const;

  std::vector<ad::NamedTensor> parameters() const;

  std::vector<int> train_subjects;

  std::string metadata_json() const;
  void save(const std::filesystem::path& path) const;
  std::string encode() const;
  static Model load(const std::filesystem::path& path);
  static Model decode(std::string_view bytes);

 private:
  TrainConfig cfg_;
  std::size_t image_height_ = 0, image_width_ = 0;
  ConvExtractor extractor_;
  GraphNet gnn_;
};

struct Inference {
  TriMesh mesh;  // world frame
  double seconds = 0.0;
};

// Normalises the reference, predicts, and maps back to world coordinates.
Inference infer(const Model& model, const TriMesh& reference_world, const SurrogateImage& img);

// ---- losses and training --------------------------------------------------------

// L(M_r, f(M_r, I_r)) with L per cfg.variant.
ad::Tensor identity_loss(const Model& model, const PreparedSubject& subject, const LossConfig& cfg, Rng& rng);

struct LossTerms {
  ad::Tensor total, data, identity;  // identity undefined when alpha == 0
};

LossTerms total_loss(const ad::Tensor& pred, const TriMesh& truth, const Model& model, const PreparedSubject& subject,
                     const LossConfig& cfg, Rng& rng);

struct TrainLogRow {
  int epoch = 0;
  std::size_t step = 0;
  int subject = 0;
  std::size_t frame = 0;
  double total = 0.0, data = 0.0, identity = 0.0;
};

using TrainCallback = std::function<void(const TrainLogRow&)>;

// Batch size one; gradients summed over accumulation_steps samples per Adam
// update. Throws NumericError naming the step on a non-finite loss.
std::vector<TrainLogRow> train_model(Model& model, std::span<const PreparedSubject> subjects,
                                     const TrainConfig& cfg, const TrainCallback& on_step = {});

std::string format_train_log(std::span<const TrainLogRow> rows);

// ---- evaluation -------------------------------------------------------------------

struct FrameResult {
  int fold = 0;
  int subject = 0;
  std::size_t frame = 0;
  double chamfer_l2 = 0.0;     // normalised units
  double avg_error_mm = 0.0;   // symmetric unsigned surface distance
  double inference_seconds = 0.0;
};

struct Aggregate {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

Aggregate aggregate(std::span<const double> values);

struct EvalReport {
  std::string model;
  std::vector<FrameResult> rows;
  Aggregate chamfer_l2, avg_error_mm, inference_seconds;
  // Across folds: statistics of per-fold means (empty count when one fold).
  Aggregate fold_chamfer_l2, fold_avg_error_mm;

  void recompute();
  // Throws DataError unless the aggregates match a recomputation from rows.
  void verify(double tol = 1e-9) const;

  std::string rows_csv() const;
  std::string summary_json() const;
  void save(const std::filesystem::path& csv_path, const std::filesystem::path& json_path) const;
  static EvalReport load(const std::filesystem::path& csv_path, const std::filesystem::path& json_path);
};

// Throws UsageError if a subject appears in model.train_subjects.
EvalReport evaluate(const Model& model, std::span<const PreparedSubject> subjects, int fold = 0);
// Always predicts the reference mesh.
EvalReport evaluate_static(std::span<const PreparedSubject> subjects, int fold = 0);

// Subject-level folds: ids shuffled with `seed`, position i goes to fold i % k.
std::vector<std::vector<int>> assign_folds(std::span<const int> subject_ids, int fold_count, std::uint64_t seed);

struct CrossvalResult {
  std::vector<std::vector<int>> folds;
  std::vector<EvalReport> reports;
  EvalReport combined;
};

using FoldCallback = std::function<void(int fold, const EvalReport&)>;

CrossvalResult crossval(std::span<const PreparedSubject> subjects, const TrainConfig& cfg,
                        const FoldCallback& on_fold = {});

// ---- visualisation ------------------------------------------------------------------

struct VizOutput {
  std::filesystem::path ply;
  std::vector<std::filesystem::path> contours;
  std::vector<double> signed_distance;
};

// PLY of pred with the signed distance to truth as per-vertex quality, plus
// contour CSVs (polyline,x,y,z) of both meshes on the axial, sagittal and
// coronal planes through truth's centroid.
VizOutput export_viz(const TriMesh& pred, const TriMesh& truth, const std::filesystem::path& out_dir);
std::string contour_csv(const std::vector<Polyline>& lines);

}  // namespace meshflow
