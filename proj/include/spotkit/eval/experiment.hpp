#pragma once

#include <vector>

#include "spotkit/backbone/trainer.hpp"
#include "spotkit/eval/metrics.hpp"
#include "spotkit/eval/probe.hpp"

namespace spotkit::eval {

/// Predicted pitch tracks for each sample, with the sample itself as the style
/// reference (parallel transfer), paired with the ground-truth tracks.
std::vector<TrackPair> predict_tracks(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                      const std::vector<backbone::Sample>& samples);

/// Utterance-mean aligned style embedding of a sample.
std::vector<double> style_vector(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                 const backbone::Sample& s);

/// Probe examples for every train and test sample of the dataset.
std::vector<ProbeExample> probe_examples(const backbone::Model<float>& model, const backbone::AblationFlags& flags,
                                         const backbone::Dataset& data);

}  // namespace spotkit::eval
