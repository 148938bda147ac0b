#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

using nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

json aggregate_json(const Aggregate& a) { return {{"count", a.count}, {"mean", a.mean}, {"std", a.std}}; }

Aggregate json_aggregate(const json& j) {
  return {j.at("count").get<std::size_t>(), j.at("mean").get<double>(), j.at("std").get<double>()};
}

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

void check(const Aggregate& stored, const Aggregate& fresh, const char* what, double tol) {
  if (stored.count != fresh.count || !close(stored.mean, fresh.mean, tol) || !close(stored.std, fresh.std, tol)) {
    char msg[256];
    std::snprintf(msg, sizeof msg, "report: %s aggregate (n=%zu, %.17g +/- %.17g) disagrees with rows (n=%zu, %.17g +/- %.17g)",
                  what, stored.count, stored.mean, stored.std, fresh.count, fresh.mean, fresh.std);
    throw DataError(msg);
  }
}

// `world` is the prediction in millimetres; it defaults to inverting `points`.
FrameResult score(const PreparedSubject& s, std::size_t t, const std::vector<Vec3>& points, const TriMesh* world,
                  double seconds, int fold) {
  FrameResult r;
  r.fold = fold;
  r.subject = s.subject;
  r.frame = t;
  r.chamfer_l2 = chamfer_value(points, s.frames[t].vertices());
  const TriMesh mm = world ? *world : s.transform.invert(s.reference.with_vertices(points));
  r.avg_error_mm = unsigned_surface_distance(mm, s.frames_world[t]);
  r.inference_seconds = seconds;
  return r;
}

}  // namespace

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

void EvalReport::recompute() {
  std::vector<double> c, e, s;
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_fold;
  for (const auto& r : rows) {
    c.push_back(r.chamfer_l2);
    e.push_back(r.avg_error_mm);
    s.push_back(r.inference_seconds);
    by_fold[r.fold].first.push_back(r.chamfer_l2);
    by_fold[r.fold].second.push_back(r.avg_error_mm);
  }
  chamfer_l2 = aggregate(c);
  avg_error_mm = aggregate(e);
  inference_seconds = aggregate(s);
  std::vector<double> fc, fe;
  for (const auto& [fold, v] : by_fold) {
    fc.push_back(aggregate(v.first).mean);
    fe.push_back(aggregate(v.second).mean);
  }
  fold_chamfer_l2 = aggregate(fc);
  fold_avg_error_mm = aggregate(fe);
}

void EvalReport::verify(double tol) const {
  EvalReport fresh = *this;
  fresh.recompute();
  check(chamfer_l2, fresh.chamfer_l2, "chamfer_l2", tol);
  check(avg_error_mm, fresh.avg_error_mm, "avg_error_mm", tol);
  check(inference_seconds, fresh.inference_seconds, "inference_seconds", tol);
  check(fold_chamfer_l2, fresh.fold_chamfer_l2, "fold chamfer_l2", tol);
  check(fold_avg_error_mm, fresh.fold_avg_error_mm, "fold avg_error_mm", tol);
}

std::string EvalReport::rows_csv() const {
  std::string out = "fold,subject,frame,chamfer_l2,avg_error_mm,inference_seconds\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%d,%d,%zu,%.17g,%.17g,%.17g\n", r.fold, r.subject, r.frame, r.chamfer_l2,
                  r.avg_error_mm, r.inference_seconds);
    out += line;
  }
  return out;
}

std::string EvalReport::summary_json() const {
  json j;
  j["model"] = model;
  j["frames"] = rows.size();
  j["chamfer_l2"] = aggregate_json(chamfer_l2);
  j["avg_error_mm"] = aggregate_json(avg_error_mm);
  j["inference_seconds"] = aggregate_json(inference_seconds);
  j["folds"] = {{"chamfer_l2", aggregate_json(fold_chamfer_l2)}, {"avg_error_mm", aggregate_json(fold_avg_error_mm)}};
  return j.dump(2);
}

void EvalReport::save(const std::filesystem::path& csv_path, const std::filesystem::path& json_path) const {
  write_text(csv_path, rows_csv());
  write_text(json_path, summary_json() + "\n");
}

EvalReport EvalReport::load(const std::filesystem::path& csv_path, const std::filesystem::path& json_path) {
  EvalReport report;
  std::istringstream csv(read_text(csv_path));
  std::string line;
  if (!std::getline(csv, line) || line != "fold,subject,frame,chamfer_l2,avg_error_mm,inference_seconds") {
    throw DataError(csv_path.string() + ": unexpected header");
  }
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    FrameResult r;
    if (std::sscanf(line.c_str(), "%d,%d,%zu,%lf,%lf,%lf", &r.fold, &r.subject, &r.frame, &r.chamfer_l2,
                    &r.avg_error_mm, &r.inference_seconds) != 6) {
      throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    report.rows.push_back(r);
  }
  try {
    const json j = json::parse(read_text(json_path));
    report.model = j.at("model").get<std::string>();
    report.chamfer_l2 = json_aggregate(j.at("chamfer_l2"));
    report.avg_error_mm = json_aggregate(j.at("avg_error_mm"));
    report.inference_seconds = json_aggregate(j.at("inference_seconds"));
    report.fold_chamfer_l2 = json_aggregate(j.at("folds").at("chamfer_l2"));
    report.fold_avg_error_mm = json_aggregate(j.at("folds").at("avg_error_mm"));
  } catch (const json::exception& e) {
    throw DataError(json_path.string() + ": " + e.what());
  }
  report.verify();
  return report;
}

EvalReport evaluate(const Model& model, std::span<const PreparedSubject> subjects, int fold) {
  const std::set<int> trained(model.train_subjects.begin(), model.train_subjects.end());
  for (const auto& s : subjects) {
    if (trained.count(s.subject)) {
      throw UsageError("evaluate: subject " + std::to_string(s.subject) + " was used to train this model");
    }
  }
  EvalReport report;
  report.model = feature_mode_name(model.feature_mode());
  for (const auto& s : subjects) {
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      const auto start = std::chrono::steady_clock::now();
      const ad::Tensor pred = model.predict(s, s.images[t]);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      report.rows.push_back(score(s, t, tensor_points(pred), nullptr, seconds, fold));
    }
  }
  report.recompute();
  return report;
}

EvalReport evaluate_static(std::span<const PreparedSubject> subjects, int fold) {
  EvalReport report;
  report.model = "static";
  for (const auto& s : subjects) {
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      report.rows.push_back(score(s, t, s.reference.vertices(), &s.reference_world, 0.0, fold));
    }
  }
  report.recompute();
  return report;
}

std::vector<std::vector<int>> assign_folds(std::span<const int> subject_ids, int fold_count, std::uint64_t seed) {
  if (fold_count < 2) throw UsageError("crossval: fold_count must be >= 2");
  if (static_cast<std::size_t>(fold_count) > subject_ids.size()) {
    throw UsageError("crossval: " + std::to_string(subject_ids.size()) + " subjects cannot fill " +
                     std::to_string(fold_count) + " folds; reduce fold_count to at most " +
                     std::to_string(subject_ids.size()));
  }
  std::vector<int> ids(subject_ids.begin(), subject_ids.end());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw UsageError("crossval: duplicate subject ids");
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(fold_count));
  for (std::size_t i = 0; i < ids.size(); ++i) folds[i % folds.size()].push_back(ids[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

CrossvalResult crossval(std::span<const PreparedSubject> subjects, const TrainConfig& cfg, const FoldCallback& on_fold) {
  cfg.validate();
  if (subjects.empty()) throw UsageError("crossval: no subjects");
  std::vector<int> ids;
  for (const auto& s : subjects) ids.push_back(s.subject);
  CrossvalResult result;
  result.folds = assign_folds(ids, cfg.fold_count, cfg.seed);
  const auto& img = subjects.front().images.front();
  for (std::size_t k = 0; k < result.folds.size(); ++k) {
    const std::set<int> test_ids(result.folds[k].begin(), result.folds[k].end());
    std::vector<PreparedSubject> train, test;
    for (const auto& s : subjects) (test_ids.count(s.subject) ? test : train).push_back(s);
    Model model(cfg, img.height, img.width);
    for (const auto& s : train) model.train_subjects.push_back(s.subject);
    train_model(model, train, cfg);
    EvalReport report = evaluate(model, test, static_cast<int>(k));
    if (on_fold) on_fold(static_cast<int>(k), report);
    result.combined.rows.insert(result.combined.rows.end(), report.rows.begin(), report.rows.end());
    result.reports.push_back(std::move(report));
  }
  result.combined.model = feature_mode_name(cfg.feature_mode);
  result.combined.recompute();
  return result;
}

}  // namespace meshflow
