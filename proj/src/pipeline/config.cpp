#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw UsageError("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: '" + where + "." + key + "' has the wrong type");
  }
}

json loss_json(const LossConfig& c) {
  return {{"variant", c.variant == LossVariant::chamfer ? "chamfer" : "sampled_chamfer"},
          {"sample_count", c.sample_count},
          {"alpha", c.alpha},
          {"rng_seed", c.rng_seed}};
}

json train_json(const TrainConfig& c) {
  return {{"feature_mode", feature_mode_name(c.feature_mode)},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"accumulation_steps", c.accumulation_steps},
          {"batch_size", c.batch_size},
          {"fold_count", c.fold_count},
          {"seed", c.seed},
          {"loss", loss_json(c.loss)},
          {"gnn",
           {{"layer_count", c.gnn.layer_count},
            {"hidden_width", c.gnn.hidden_width},
            {"heads", c.gnn.heads},
            {"leaky_slope", c.gnn.leaky_slope},
            {"norm", c.gnn.norm == NormKind::none ? "none" : "feature_standardize"}}},
          {"extractor",
           {{"map_count", c.extractor.map_count},
            {"block_count", c.extractor.block_count},
            {"latent_width", c.extractor.latent_width},
            {"leaky_slope", c.extractor.leaky_slope}}}};
}

json synth_json(const SynthConfig& c) {
  return {{"subjects", c.subjects},
          {"frames", c.frames},
          {"vertex_budget", c.vertex_budget},
          {"kind", reference_kind_name(c.kind)},
          {"image_size", c.image_size},
          {"spacing", c.spacing},
          {"noise_sigma", c.noise_sigma},
          {"translation_amp", c.translation_amp},
          {"expansion_amp", c.expansion_amp},
          {"bump_amp", c.bump_amp},
          {"amplitude_jitter", c.amplitude_jitter},
          {"cycles", c.cycles},
          {"seed", c.seed}};
}

TrainConfig apply_train(const json& j, TrainConfig c) {
  check_keys(j, {"feature_mode", "epochs", "lr", "accumulation_steps", "batch_size", "fold_count", "seed", "loss",
                 "gnn", "extractor"},
             "train");
  if (j.contains("feature_mode")) {
    std::string mode;
    read(j, "feature_mode", mode, "train");
    c.feature_mode = parse_feature_mode(mode);
  }
  read(j, "epochs", c.epochs, "train");
  read(j, "lr", c.lr, "train");
  read(j, "accumulation_steps", c.accumulation_steps, "train");
  read(j, "batch_size", c.batch_size, "train");
  read(j, "fold_count", c.fold_count, "train");
  read(j, "seed", c.seed, "train");
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"variant", "sample_count", "alpha", "rng_seed"}, "train.loss");
    if (l.contains("variant")) {
      std::string v;
      read(l, "variant", v, "train.loss");
      if (v == "chamfer") {
        c.loss.variant = LossVariant::chamfer;
      } else if (v == "sampled_chamfer") {
        c.loss.variant = LossVariant::sampled_chamfer;
      } else {
        throw UsageError("config: train.loss.variant must be chamfer or sampled_chamfer, got '" + v + "'");
      }
    }
    read(l, "sample_count", c.loss.sample_count, "train.loss");
    read(l, "alpha", c.loss.alpha, "train.loss");
    read(l, "rng_seed", c.loss.rng_seed, "train.loss");
  }
  if (j.contains("gnn")) {
    const auto& g = j.at("gnn");
    check_keys(g, {"layer_count", "hidden_width", "heads", "leaky_slope", "norm"}, "train.gnn");
    read(g, "layer_count", c.gnn.layer_count, "train.gnn");
    read(g, "hidden_width", c.gnn.hidden_width, "train.gnn");
    read(g, "heads", c.gnn.heads, "train.gnn");
    read(g, "leaky_slope", c.gnn.leaky_slope, "train.gnn");
    if (g.contains("norm")) {
      std::string n;
      read(g, "norm", n, "train.gnn");
      if (n == "none") {
        c.gnn.norm = NormKind::none;
      } else if (n == "feature_standardize") {
        c.gnn.norm = NormKind::feature_standardize;
      } else {
        throw UsageError("config: train.gnn.norm must be feature_standardize or none, got '" + n + "'");
      }
    }
  }
  if (j.contains("extractor")) {
    const auto& e = j.at("extractor");
    check_keys(e, {"map_count", "block_count", "latent_width", "leaky_slope"}, "train.extractor");
    read(e, "map_count", c.extractor.map_count, "train.extractor");
    read(e, "block_count", c.extractor.block_count, "train.extractor");
    read(e, "latent_width", c.extractor.latent_width, "train.extractor");
    read(e, "leaky_slope", c.extractor.leaky_slope, "train.extractor");
  }
  c.validate();
  return c;
}

SynthConfig apply_synth(const json& j, SynthConfig c) {
  check_keys(j, {"subjects", "frames", "vertex_budget", "kind", "image_size", "spacing", "noise_sigma",
                 "translation_amp", "expansion_amp", "bump_amp", "amplitude_jitter", "cycles", "seed"},
             "synth");
  read(j, "subjects", c.subjects, "synth");
  read(j, "frames", c.frames, "synth");
  read(j, "vertex_budget", c.vertex_budget, "synth");
  if (j.contains("kind")) {
    std::string k;
    read(j, "kind", k, "synth");
    c.kind = parse_reference_kind(k);
  }
  read(j, "image_size", c.image_size, "synth");
  read(j, "spacing", c.spacing, "synth");
  read(j, "noise_sigma", c.noise_sigma, "synth");
  read(j, "translation_amp", c.translation_amp, "synth");
  read(j, "expansion_amp", c.expansion_amp, "synth");
  read(j, "bump_amp", c.bump_amp, "synth");
  read(j, "amplitude_jitter", c.amplitude_jitter, "synth");
  read(j, "cycles", c.cycles, "synth");
  read(j, "seed", c.seed, "synth");
  c.validate();
  return c;
}

json parse_or_throw(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: invalid JSON: ") + e.what());
  }
}

}  // namespace

std::string feature_mode_name(FeatureMode mode) { return mode == FeatureMode::global ? "global" : "pooling"; }

FeatureMode parse_feature_mode(const std::string& name) {
  if (name == "global") return FeatureMode::global;
  if (name == "pooling") return FeatureMode::pooling;
  throw UsageError("unknown feature mode '" + name + "' (expected global or pooling)");
}

void TrainConfig::validate() const {
  loss.validate();
  gnn.validate();
  extractor.validate();
  if (epochs < 0) throw UsageError("train config: epochs must be >= 0");
  if (!(lr > 0.0)) throw UsageError("train config: lr must be positive");
  if (accumulation_steps < 1) throw UsageError("train config: accumulation_steps must be >= 1");
  if (batch_size != 1) throw UsageError("train config: batch_size is fixed at 1");
  if (fold_count < 2) throw UsageError("train config: fold_count must be >= 2");
}

ExtractorConfig TrainConfig::extractor_config() const {
  ExtractorConfig e = extractor;
  e.mode = feature_mode == FeatureMode::global ? ExtractorMode::global : ExtractorMode::preserving;
  return e;
}

RunConfig parse_run_config(std::string_view json_text, RunConfig base) {
  const json j = parse_or_throw(json_text);
  check_keys(j, {"synth", "train"}, "");
  if (j.contains("synth")) base.synth = apply_synth(j.at("synth"), base.synth);
  if (j.contains("train")) base.train = apply_train(j.at("train"), base.train);
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), std::move(base));
}

std::string run_config_json(const RunConfig& cfg) {
  return json{{"synth", synth_json(cfg.synth)}, {"train", train_json(cfg.train)}}.dump(2);
}

std::string train_config_json(const TrainConfig& cfg) { return train_json(cfg).dump(); }

TrainConfig parse_train_config(std::string_view json_text, TrainConfig base) {
  return apply_train(parse_or_throw(json_text), std::move(base));
}

}  // namespace meshflow
