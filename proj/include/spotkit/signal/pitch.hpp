#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "spotkit/signal/audio.hpp"

namespace spotkit::signal {

struct PitchConfig {
  std::uint32_t sample_rate = 22050;
  std::size_t window = 1024;  // analysis span; the YIN sum runs over window - max_lag samples
  std::size_t hop_length = 256;
  double fmin = 70.0;
  double fmax = 500.0;
  double yin_threshold = 0.15;
  double voicing_threshold = 0.5;
  double energy_floor = 1e-4;

  std::size_t min_lag() const;
  std::size_t max_lag() const;
  /// Throws std::invalid_argument for an unusable search range.
  void validate() const;
};

struct PitchTrack {
  std::vector<double> f0_hz;  // 0 where unvoiced
  std::vector<bool> vuv;
  std::vector<double> periodicity;

  std::size_t size() const { return f0_hz.size(); }
  std::size_t voiced_count() const;
};

/// YIN estimate per mel frame (frame t centered on sample t * hop, zero padded
/// at the edges). Produces 1 + floor(n / hop) frames, matching the mel front end.
PitchTrack estimate_f0_vuv(const Waveform& wave, const PitchConfig& cfg = {});

/// CSV with header `frame,f0_hz,vuv,periodicity`.
void save_pitch_csv(const std::filesystem::path& path, const PitchTrack& track);
PitchTrack load_pitch_csv(const std::filesystem::path& path);

}  // namespace spotkit::signal
