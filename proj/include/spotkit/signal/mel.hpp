#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "spotkit/signal/audio.hpp"

namespace spotkit::signal {

/// STFT + mel front end settings. fmax <= 0 means sample_rate / 2.
struct MelConfig {
  std::uint32_t sample_rate = 22050;
  std::size_t n_fft = 1024;
  std::size_t win_length = 1024;
  std::size_t hop_length = 256;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;
  double log_floor = 1e-5;

  double effective_fmax() const { return fmax > 0 ? fmax : sample_rate / 2.0; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  /// 1 + floor(n_samples / hop) under center (n_fft/2 reflection) padding.
  std::size_t frame_count(std::size_t n_samples) const { return 1 + n_samples / hop_length; }
};

/// Row-major frames x columns matrix of float32, used for log-mel
/// spectrograms and any other per-frame feature sequence.
struct FrameMatrix {
  std::size_t frames = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  float& operator()(std::size_t t, std::size_t c) { return data[t * cols + c]; }
  float operator()(std::size_t t, std::size_t c) const { return data[t * cols + c]; }
};

struct Mel {
  FrameMatrix frames;  // T x n_mels natural-log magnitudes
  MelConfig config;

  std::size_t length() const { return frames.frames; }
};

double hz_to_mel_slaney(double hz);
double mel_to_hz_slaney(double mel);

/// Slaney-style area-normalized triangular filters, n_mels x (n_fft/2 + 1).
std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg);

/// Hann-windowed STFT magnitude with center reflection padding, projected on
/// the filterbank and log-compressed with floor cfg.log_floor.
Mel mel_spectrogram(const Waveform& wave, const MelConfig& cfg = {});

/// "SPOTMEL1" container: magic, u32 frames, u32 cols, little-endian float32 row-major.
void save_frames(const std::filesystem::path& path, const FrameMatrix& m);
FrameMatrix load_frames(const std::filesystem::path& path);

}  // namespace spotkit::signal
