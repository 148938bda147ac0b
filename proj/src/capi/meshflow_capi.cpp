#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <new>
#include <set>
#include <string>

#include "meshflow/error.hpp"
#include "meshflow/meshflow.h"
#include "meshflow/pipeline.hpp"

struct mf_mesh {
  meshflow::TriMesh mesh;
};

struct mf_image {
  meshflow::SurrogateImage image;
};

struct mf_model {
  meshflow::Model model;
};

namespace {

using namespace meshflow;

thread_local std::string g_last_error;

template <typename F>
mf_status guard(F&& fn) {
  try {
    fn();
    return MF_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<mf_status>(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MF_ERR_DATA;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return MF_ERR_DATA;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MF_ERR_DATA;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw UsageError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

RunConfig resolve(const char* config_json, int64_t seed) {
  RunConfig cfg = config_json ? parse_run_config(config_json) : RunConfig{};
  if (seed >= 0) {
    cfg.synth.seed = static_cast<std::uint64_t>(seed);
    cfg.train.seed = static_cast<std::uint64_t>(seed);
  }
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<PreparedSubject> load_prepared(const char* dataset_dir) {
  require(dataset_dir, "dataset_dir");
  return prepare_dataset(load_dataset(dataset_dir));
}

void emit(mf_log_fn log, void* user, const std::string& line) {
  if (log) log(line.c_str(), user);
}

}  // namespace

extern "C" {

const char* mf_version(void) { return "0.1.0"; }

const char* mf_last_error(void) { return g_last_error.c_str(); }

void mf_string_free(char* s) { std::free(s); }

mf_status mf_config_resolve(const char* config_json, int64_t seed, char** out_json) {
  return guard([&] {
    require(out_json, "out_json");
    *out_json = dup_string(run_config_json(resolve(config_json, seed)));
  });
}

mf_status mf_mesh_create(const double* xyz, size_t vertex_count, const uint32_t* facets, size_t facet_count,
                         mf_mesh** out) {
  return guard([&] {
    require(out, "out");
    if (vertex_count > 0) require(xyz, "xyz");
    if (facet_count > 0) require(facets, "facets");
    std::vector<Vec3> v(vertex_count);
    for (size_t i = 0; i < vertex_count; ++i) v[i] = Vec3(xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]);
    std::vector<Facet> f(facet_count);
    for (size_t i = 0; i < facet_count; ++i) f[i] = {facets[3 * i], facets[3 * i + 1], facets[3 * i + 2]};
    *out = new mf_mesh{TriMesh(std::move(v), std::move(f))};
  });
}

mf_status mf_mesh_load_obj(const char* path, mf_mesh** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new mf_mesh{load_obj(path)};
  });
}

mf_status mf_mesh_save_obj(const mf_mesh* mesh, const char* path) {
  return guard([&] {
    require(mesh, "mesh");
    require(path, "path");
    save_obj(mesh->mesh, path);
  });
}

size_t mf_mesh_vertex_count(const mf_mesh* mesh) { return mesh ? mesh->mesh.vertex_count() : 0; }

size_t mf_mesh_facet_count(const mf_mesh* mesh) { return mesh ? mesh->mesh.facet_count() : 0; }

mf_status mf_mesh_vertices(const mf_mesh* mesh, double* out, size_t capacity) {
  return guard([&] {
    require(mesh, "mesh");
    require(out, "out");
    const auto& v = mesh->mesh.vertices();
    if (capacity < 3 * v.size()) throw UsageError("mf_mesh_vertices: capacity below 3 * vertex_count");
    for (size_t i = 0; i < v.size(); ++i) {
      for (int k = 0; k < 3; ++k) out[3 * i + k] = v[i][k];
    }
  });
}

mf_status mf_mesh_facets(const mf_mesh* mesh, uint32_t* out, size_t capacity) {
  return guard([&] {
    require(mesh, "mesh");
    require(out, "out");
    const auto& f = mesh->mesh.facets();
    if (capacity < 3 * f.size()) throw UsageError("mf_mesh_facets: capacity below 3 * facet_count");
    for (size_t i = 0; i < f.size(); ++i) {
      for (int k = 0; k < 3; ++k) out[3 * i + k] = f[i][k];
    }
  });
}

mf_status mf_mesh_unsigned_distance(const mf_mesh* a, const mf_mesh* b, double* out) {
  return guard([&] {
    require(a, "a");
    require(b, "b");
    require(out, "out");
    *out = unsigned_surface_distance(a->mesh, b->mesh);
  });
}

void mf_mesh_free(mf_mesh* mesh) { delete mesh; }

mf_status mf_image_load(const char* path, const char* sidecar, mf_image** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    std::optional<std::filesystem::path> side;
    if (sidecar) side = sidecar;
    *out = new mf_image{load_image(path, side)};
  });
}

mf_status mf_image_size(const mf_image* image, size_t* width, size_t* height) {
  return guard([&] {
    require(image, "image");
    if (width) *width = image->image.width;
    if (height) *height = image->image.height;
  });
}

void mf_image_free(mf_image* image) { delete image; }

mf_status mf_model_create(const char* config_json, int64_t seed, size_t image_height, size_t image_width,
                          mf_model** out) {
  return guard([&] {
    require(out, "out");
    *out = new mf_model{Model(resolve(config_json, seed).train, image_height, image_width)};
  });
}

mf_status mf_model_load(const char* path, mf_model** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new mf_model{Model::load(path)};
  });
}

mf_status mf_model_save(const mf_model* model, const char* path) {
  return guard([&] {
    require(model, "model");
    require(path, "path");
    model->model.save(path);
  });
}

mf_status mf_model_infer(const mf_model* model, const mf_mesh* reference, const mf_image* image, mf_mesh** out,
                         double* seconds) {
  return guard([&] {
    require(model, "model");
    require(reference, "reference");
    require(image, "image");
    require(out, "out");
    Inference result = infer(model->model, reference->mesh, image->image);
    if (seconds) *seconds = result.seconds;
    *out = new mf_mesh{std::move(result.mesh)};
  });
}

void mf_model_free(mf_model* model) { delete model; }

mf_status mf_generate_dataset(const char* config_json, int64_t seed, const char* out_dir) {
  return guard([&] {
    require(out_dir, "out_dir");
    const RunConfig cfg = resolve(config_json, seed);
    save_dataset(make_dataset(cfg.synth), cfg.synth, out_dir);
  });
}

mf_status mf_train(const char* dataset_dir, const char* config_json, int64_t seed, const int* holdout,
                   size_t holdout_count, const char* checkpoint_path, const char* log_path, mf_log_fn log,
                   void* user) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    if (holdout_count > 0) require(holdout, "holdout");
    const RunConfig cfg = resolve(config_json, seed);
    const std::set<int> held(holdout, holdout + holdout_count);
    std::vector<PreparedSubject> train;
    for (auto& s : load_prepared(dataset_dir)) {
      if (!held.count(s.subject)) train.push_back(std::move(s));
    }
    if (train.empty()) throw UsageError("train: every subject is held out");
    const auto& img = train.front().images.front();
    Model model(cfg.train, img.height, img.width);
    for (const auto& s : train) model.train_subjects.push_back(s.subject);
    const std::size_t steps_per_epoch = [&] {
      std::size_t n = 0;
      for (const auto& s : train) n += s.frames.size();
      return n;
    }();
    double epoch_sum = 0.0;
    const auto rows = train_model(model, train, cfg.train, [&](const TrainLogRow& row) {
      epoch_sum += row.total;
      if ((row.step + 1) % steps_per_epoch == 0) {
        char line[128];
        std::snprintf(line, sizeof line, "epoch %d mean loss %.6g", row.epoch, epoch_sum / steps_per_epoch);
        emit(log, user, line);
        epoch_sum = 0.0;
      }
    });
    model.save(checkpoint_path);
    if (log_path) write_text(log_path, format_train_log(rows));
  });
}

mf_status mf_evaluate(const char* checkpoint_path, const char* dataset_dir, const int* subjects, size_t count,
                      const char* csv_path, const char* json_path, char** summary_json) {
  return guard([&] {
    if (count > 0) require(subjects, "subjects");
    auto all = load_prepared(dataset_dir);
    std::optional<Model> model;
    if (checkpoint_path) model = Model::load(checkpoint_path);
    std::set<int> wanted(subjects, subjects + count);
    if (wanted.empty()) {
      std::set<int> trained;
      if (model) trained.insert(model->train_subjects.begin(), model->train_subjects.end());
      for (const auto& s : all) {
        if (!trained.count(s.subject)) wanted.insert(s.subject);
      }
    }
    std::vector<PreparedSubject> test;
    for (auto& s : all) {
      if (wanted.count(s.subject)) test.push_back(std::move(s));
    }
    if (test.size() != wanted.size()) throw UsageError("evaluate: requested subject missing from the dataset");
    if (test.empty()) throw UsageError("evaluate: no held-out subjects to evaluate");
    const EvalReport report = model ? evaluate(*model, test) : evaluate_static(test);
    if (csv_path && json_path) report.save(csv_path, json_path);
    if (summary_json) *summary_json = dup_string(report.summary_json());
  });
}

mf_status mf_crossval(const char* dataset_dir, const char* config_json, int64_t seed, const char* out_dir,
                      mf_log_fn log, void* user, char** summary_json) {
  return guard([&] {
    require(out_dir, "out_dir");
    const RunConfig cfg = resolve(config_json, seed);
    const auto data = load_prepared(dataset_dir);
    const CrossvalResult result = crossval(data, cfg.train, [&](int fold, const EvalReport& r) {
      char line[160];
      std::snprintf(line, sizeof line, "fold %d: avg_error %.4f mm, chamfer %.6g (%zu frames)", fold,
                    r.avg_error_mm.mean, r.chamfer_l2.mean, r.rows.size());
      emit(log, user, line);
    });
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    result.combined.save(dir / "rows.csv", dir / "summary.json");
    write_text(dir / "folds.json", nlohmann::json(result.folds).dump() + "\n");
    if (summary_json) *summary_json = dup_string(result.combined.summary_json());
  });
}

mf_status mf_export_viz(const mf_mesh* pred, const mf_mesh* truth, const char* out_dir) {
  return guard([&] {
    require(pred, "pred");
    require(truth, "truth");
    require(out_dir, "out_dir");
    export_viz(pred->mesh, truth->mesh, out_dir);
  });
}

}  // extern "C"
