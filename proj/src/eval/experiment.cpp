#include "spotkit/eval/experiment.hpp"

namespace spotkit::eval {

std::vector<TrackPair> predict_tracks(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                      const std::vector<backbone::Sample>& samples) {
  std::vector<TrackPair> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto p = backbone::infer(model, flags, s.content, s.mel, s.style_voicing);
    out.push_back({s.id, std::move(p.pitch), s.pitch});
  }
  return out;
}

std::vector<double> style_vector(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                 const backbone::Sample& s) {
  const auto p = backbone::infer(model, flags, s.content, s.mel, s.style_voicing);
  const auto& a = p.aligned_style;
  std::vector<double> v(a.cols(), 0.0);
  for (std::size_t t = 0; t < a.rows(); ++t)
    for (std::size_t k = 0; k < a.cols(); ++k) v[k] += a(t, k);
  for (auto& x : v) x /= double(a.rows());
  return v;
}

std::vector<ProbeExample> probe_examples(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                         const backbone::Dataset& data) {
  std::vector<ProbeExample> out;
  for (const auto* split : {&data.train, &data.test})
    for (const auto& s : *split)
      out.push_back({style_vector(model, flags, s), s.style_id, s.sentence_id, split == &data.test});
  return out;
}

}  // namespace spotkit::eval
