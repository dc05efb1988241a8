#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spotkit/signal/pitch.hpp"

namespace spotkit::eval {

/// RMSE in Hz over frames voiced in both tracks.
double rmse_f0(const signal::PitchTrack& pred, const signal::PitchTrack& gt);
/// RMSE over all frames of the periodicity arrays.
double rmse_periodicity(const signal::PitchTrack& pred, const signal::PitchTrack& gt);
/// F1 with voiced as the positive class. Throws if gt has no voiced frame.
double f1_vuv(const signal::PitchTrack& pred, const signal::PitchTrack& gt);

struct UtteranceMetrics {
  std::string id;
  std::optional<double> rmse_f0_hz;  // empty when no frame is voiced in both
  double rmse_periodicity = 0.0;
  std::optional<double> f1_vuv;      // empty when gt is all unvoiced
  std::size_t n_frames = 0;
  std::size_t n_voiced_both = 0;

  bool operator==(const UtteranceMetrics&) const = default;
};

inline constexpr const char* kPeriodicityNote =
    "rmse_periodicity compares the model's periodicity head with the reference pitch track; "
    "no vocoder is involved, so this stands in for an audio-domain periodicity error";

struct MetricReport {
  double rmse_f0_hz = 0.0;
  double rmse_periodicity = 0.0;
  double f1_vuv = 0.0;
  std::size_t n_frames_compared = 0;  // frames voiced in both, pooled over utterances
  std::size_t n_frames_total = 0;
  std::string note = kPeriodicityNote;
  std::vector<UtteranceMetrics> utterances;

  bool operator==(const MetricReport&) const = default;
};

struct TrackPair {
  std::string id;
  signal::PitchTrack pred;
  signal::PitchTrack gt;
};

/// Pooled metrics (frame-weighted) plus the per-utterance breakdown.
MetricReport evaluate(const std::vector<TrackPair>& pairs);

void to_json(nlohmann::json& j, const UtteranceMetrics& m);
void from_json(const nlohmann::json& j, UtteranceMetrics& m);
void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

}  // namespace spotkit::eval
