#include "meshflow/error.hpp"
#include "meshflow/pipeline.hpp"

namespace meshflow {

PreparedSubject prepare_subject(const BreathingSequence& seq) {
  if (seq.frames.empty()) throw DataError("subject " + std::to_string(seq.subject) + " has no frames");
  if (seq.frames.size() != seq.images.size()) {
    throw DataError("subject " + std::to_string(seq.subject) + ": frame and image counts differ");
  }
  PreparedSubject s;
  s.subject = seq.subject;
  s.reference_world = seq.reference;
  auto [reference, transform] = normalize(seq.reference);
  s.reference = std::move(reference);
  s.transform = transform;
  s.graph = Neighborhoods::from_mesh(s.reference);
  s.frames_world = seq.frames;
  for (const auto& f : seq.frames) {
    if (f.vertex_count() != seq.reference.vertex_count()) {
      throw DataError("subject " + std::to_string(seq.subject) + ": frame topology differs from the reference");
    }
    s.frames.push_back(s.transform.apply(f));
  }
  s.images = seq.images;
  double best = 2.0;
  for (std::size_t t = 0; t < seq.phases.size() && t < seq.frames.size(); ++t) {
    const double a = breathing_amplitude(seq.phases[t]);
    if (a < best) {
      best = a;
      s.reference_frame = t;
    }
  }
  for (const auto& img : s.images) {
    img.validate();
    if (img.width != s.images.front().width || img.height != s.images.front().height) {
      throw DataError("subject " + std::to_string(seq.subject) + ": slice sizes differ between frames");
    }
  }
  s.pixels = vertex_pixel_indices(s.reference, s.reference_image(), s.transform);
  return s;
}

std::vector<PreparedSubject> prepare_dataset(const std::vector<BreathingSequence>& data) {
  std::vector<PreparedSubject> out;
  out.reserve(data.size());
  for (const auto& seq : data) out.push_back(prepare_subject(seq));
  return out;
}

}  // namespace meshflow
