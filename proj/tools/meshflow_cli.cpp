#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <malloc.h>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "meshflow/meshflow.h"

namespace {

struct Globals {
  std::string config_path;
  int64_t seed = -1;
  std::string out_dir = ".";
};

std::optional<std::string> g_config;

int fail(mf_status status) {
  std::fprintf(stderr, "meshflow: %s\n", mf_last_error());
  return static_cast<int>(status);
}

int usage(const std::string& msg) {
  std::fprintf(stderr, "meshflow: %s\n", msg.c_str());
  return MF_ERR_USAGE;
}

const char* config_text() { return g_config ? g_config->c_str() : nullptr; }

std::string out_path(const Globals& g, const std::string& name) {
  return (std::filesystem::path(g.out_dir) / name).string();
}

void print_line(const char* line, void*) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

void print_and_free(char* text) {
  if (text) {
    std::printf("%s\n", text);
    mf_string_free(text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Tensors are allocated and freed at a high rate; keep freed blocks in the
  // heap instead of returning them to the kernel on every op.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  CLI::App app{"Single-slice mesh deformation: synthetic data, training, inference and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file ({\"synth\": {...}, \"train\": {...}})");
  app.add_option("--seed", g.seed, "Seed overriding the config seeds")->check(CLI::NonNegativeNumber);
  app.add_option("--out-dir", g.out_dir, "Directory for outputs");

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic breathing dataset to --out-dir");

  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  std::string train_dataset, train_ckpt;
  std::vector<int> holdout;
  train->add_option("--dataset", train_dataset, "Dataset directory")->required();
  train->add_option("--holdout", holdout, "Subject ids to leave out of training")->delimiter(',');
  train->add_option("--checkpoint", train_ckpt, "Checkpoint path (default <out-dir>/model.ckpt)");

  auto* inf = app.add_subcommand("infer", "Deform a reference mesh from one slice");
  std::string inf_ckpt, inf_ref, inf_img, inf_sidecar, inf_out;
  inf->add_option("--checkpoint", inf_ckpt, "Trained checkpoint")->required();
  inf->add_option("--reference", inf_ref, "Reference mesh (OBJ, mm)")->required();
  inf->add_option("--image", inf_img, "Slice image (PGM or raw f64)")->required();
  inf->add_option("--sidecar", inf_sidecar, "Image geometry JSON");
  inf->add_option("--output", inf_out, "Output OBJ (default <out-dir>/prediction.obj)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or the static baseline) on held-out subjects");
  std::string ev_dataset, ev_ckpt;
  std::vector<int> ev_subjects;
  bool ev_static = false;
  ev->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  auto* ckpt_opt = ev->add_option("--checkpoint", ev_ckpt, "Trained checkpoint");
  ev->add_flag("--static", ev_static, "Evaluate the static reference baseline")->excludes(ckpt_opt);
  ev->add_option("--subjects", ev_subjects, "Subject ids (default: all not used in training)")->delimiter(',');

  auto* cv = app.add_subcommand("crossval", "Subject-level k-fold cross-validation");
  std::string cv_dataset;
  cv->add_option("--dataset", cv_dataset, "Dataset directory")->required();

  auto* viz = app.add_subcommand("export-viz", "Signed-distance PLY and contour CSVs for a prediction");
  std::string viz_pred, viz_truth;
  viz->add_option("--pred", viz_pred, "Predicted mesh (OBJ)")->required();
  viz->add_option("--truth", viz_truth, "Ground-truth mesh (OBJ, closed)")->required();

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : MF_ERR_USAGE;
  }

  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) return usage("cannot open config " + g.config_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    g_config = buf.str();
  }
  std::error_code ec;
  std::filesystem::create_directories(g.out_dir, ec);
  if (ec) return usage("cannot create --out-dir " + g.out_dir + ": " + ec.message());

  mf_status st = MF_OK;
  if (*show) {
    char* text = nullptr;
    if ((st = mf_config_resolve(config_text(), g.seed, &text)) != MF_OK) return fail(st);
    print_and_free(text);
  } else if (*gen) {
    if ((st = mf_generate_dataset(config_text(), g.seed, g.out_dir.c_str())) != MF_OK) return fail(st);
    std::printf("dataset written to %s\n", g.out_dir.c_str());
  } else if (*train) {
    const std::string ckpt = train_ckpt.empty() ? out_path(g, "model.ckpt") : train_ckpt;
    const std::string log = out_path(g, "train_log.csv");
    st = mf_train(train_dataset.c_str(), config_text(), g.seed, holdout.data(), holdout.size(), ckpt.c_str(),
                  log.c_str(), print_line, nullptr);
    if (st != MF_OK) return fail(st);
    std::printf("checkpoint %s, log %s\n", ckpt.c_str(), log.c_str());
  } else if (*inf) {
    mf_model* model = nullptr;
    mf_mesh* ref = nullptr;
    mf_image* img = nullptr;
    mf_mesh* out = nullptr;
    double seconds = 0.0;
    const std::string path = inf_out.empty() ? out_path(g, "prediction.obj") : inf_out;
    if ((st = mf_model_load(inf_ckpt.c_str(), &model)) == MF_OK &&
        (st = mf_mesh_load_obj(inf_ref.c_str(), &ref)) == MF_OK &&
        (st = mf_image_load(inf_img.c_str(), inf_sidecar.empty() ? nullptr : inf_sidecar.c_str(), &img)) == MF_OK &&
        (st = mf_model_infer(model, ref, img, &out, &seconds)) == MF_OK) {
      st = mf_mesh_save_obj(out, path.c_str());
    }
    const int code = st == MF_OK ? 0 : fail(st);
    if (st == MF_OK) std::printf("wrote %s (inference %.3f ms)\n", path.c_str(), seconds * 1e3);
    mf_mesh_free(out);
    mf_image_free(img);
    mf_mesh_free(ref);
    mf_model_free(model);
    return code;
  } else if (*ev) {
    if (ev_ckpt.empty() && !ev_static) return usage("eval needs --checkpoint or --static");
    char* summary = nullptr;
    const std::string csv = out_path(g, "eval_rows.csv"), json = out_path(g, "eval_summary.json");
    st = mf_evaluate(ev_static ? nullptr : ev_ckpt.c_str(), ev_dataset.c_str(), ev_subjects.data(), ev_subjects.size(),
                     csv.c_str(), json.c_str(), &summary);
    if (st != MF_OK) return fail(st);
    print_and_free(summary);
  } else if (*cv) {
    char* summary = nullptr;
    st = mf_crossval(cv_dataset.c_str(), config_text(), g.seed, g.out_dir.c_str(), print_line, nullptr, &summary);
    if (st != MF_OK) return fail(st);
    print_and_free(summary);
  } else if (*viz) {
    mf_mesh* pred = nullptr;
    mf_mesh* truth = nullptr;
    if ((st = mf_mesh_load_obj(viz_pred.c_str(), &pred)) == MF_OK &&
        (st = mf_mesh_load_obj(viz_truth.c_str(), &truth)) == MF_OK) {
      st = mf_export_viz(pred, truth, g.out_dir.c_str());
    }
    mf_mesh_free(pred);
    mf_mesh_free(truth);
    if (st != MF_OK) return fail(st);
    std::printf("visualisation written to %s\n", g.out_dir.c_str());
  }
  return 0;
}
