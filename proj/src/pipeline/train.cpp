#include <algorithm>
#include <cmath>
#include <cstdio>

#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

ad::Tensor identity_loss(const Model& model, const PreparedSubject& subject, const LossConfig& cfg, Rng& rng) {
  const ad::Tensor pred = model.predict(subject, subject.reference_image());
  const TapedMesh predicted{pred, subject.reference.shared_facets()};
  return mesh_loss(predicted, TapedMesh::from(subject.reference), cfg, rng);
}

LossTerms total_loss(const ad::Tensor& pred, const TriMesh& truth, const Model& model, const PreparedSubject& subject,
                     const LossConfig& cfg, Rng& rng) {
  cfg.validate();
  LossTerms out;
  out.data = mesh_loss(TapedMesh{pred, subject.reference.shared_facets()}, TapedMesh::from(truth), cfg, rng);
  if (cfg.alpha > 0.0) out.identity = identity_loss(model, subject, cfg, rng);
  out.total = weighted_total(out.data, out.identity, cfg.alpha);
  return out;
}

std::vector<TrainLogRow> train_model(Model& model, std::span<const PreparedSubject> subjects, const TrainConfig& cfg,
                                     const TrainCallback& on_step) {
  cfg.validate();
  if (subjects.empty()) throw UsageError("train: no training subjects");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    for (std::size_t t = 0; t < subjects[s].frames.size(); ++t) pairs.emplace_back(s, t);
  }
  std::vector<ad::Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  ad::Adam adam(params, {.lr = cfg.lr});
  adam.zero_grad();

  Rng order_rng(cfg.seed);
  Rng loss_rng(subject_seed(cfg.seed, -1) ^ cfg.loss.rng_seed);
  std::vector<TrainLogRow> log;
  std::size_t step = 0;
  int pending = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pairs.begin(), pairs.end(), order_rng);
    for (const auto& [s, t] : pairs) {
      const PreparedSubject& subject = subjects[s];
      ad::Tape tape;
      TrainLogRow row;
      const auto fail = [&](const std::string& what) {
        char where[128];
        std::snprintf(where, sizeof where, " at step %zu (epoch %d, subject %d, frame %zu)", step, epoch,
                      subject.subject, t);
        throw NumericError("train: " + what + where);
      };
      {
        ad::TapeScope scope(tape);
        LossTerms terms;
        try {
          const ad::Tensor pred = model.predict(subject, subject.images[t]);
          terms = total_loss(pred, subject.frames[t], model, subject, cfg.loss, loss_rng);
        } catch (const NumericError& e) {
          fail(e.what());
        }
        row = {epoch, step, subject.subject, t, terms.total.item(), terms.data.item(),
               terms.identity.defined() ? terms.identity.item() : 0.0};
        if (!std::isfinite(row.total)) fail("non-finite loss");
        tape.backward(terms.total);
      }
      log.push_back(row);
      if (on_step) on_step(row);
      ++step;
      if (++pending == cfg.accumulation_steps) {
        adam.step();
        adam.zero_grad();
        pending = 0;
      }
    }
  }
  if (pending > 0) {
    adam.step();
    adam.zero_grad();
  }
  return log;
}

std::string format_train_log(std::span<const TrainLogRow> rows) {
  std::string out = "epoch,step,subject,frame,total,data,identity\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%d,%zu,%d,%zu,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.subject, r.frame, r.total,
                  r.data, r.identity);
    out += line;
  }
  return out;
}

}  // namespace meshflow
