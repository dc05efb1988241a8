#include "spotkit/signal/mel.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include <unsupported/Eigen/FFT>

namespace spotkit::signal {

void MelConfig::validate() const {
  if (sample_rate == 0) throw std::invalid_argument("MelConfig: sample_rate must be positive");
  if (n_fft == 0 || win_length == 0 || hop_length == 0)
    throw std::invalid_argument("MelConfig: sizes must be positive");
  if (win_length > n_fft) throw std::invalid_argument("MelConfig: win_length exceeds n_fft");
  if (hop_length > win_length) throw std::invalid_argument("MelConfig: hop_length exceeds win_length");
  if (n_mels < 21) throw std::invalid_argument("MelConfig: need at least 21 mel bins");
  if (fmin < 0 || fmin >= effective_fmax() || effective_fmax() > sample_rate / 2.0)
    throw std::invalid_argument("MelConfig: invalid frequency range");
  if (!(log_floor > 0)) throw std::invalid_argument("MelConfig: log_floor must be positive");
}

namespace {
constexpr double kMinLogHz = 1000.0;
constexpr double kLinearStep = 200.0 / 3.0;
const double kLogStep = std::log(6.4) / 27.0;
constexpr double kMinLogMel = kMinLogHz / kLinearStep;
}  // namespace

double hz_to_mel_slaney(double hz) {
  if (hz < kMinLogHz) return hz / kLinearStep;
  return kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}

double mel_to_hz_slaney(double mel) {
  if (mel < kMinLogMel) return mel * kLinearStep;
  return kMinLogHz * std::exp(kLogStep * (mel - kMinLogMel));
}

std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const std::size_t n_bins = cfg.n_fft / 2 + 1;
  const double lo = hz_to_mel_slaney(cfg.fmin);
  const double hi = hz_to_mel_slaney(cfg.effective_fmax());
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz_slaney(lo + (hi - lo) * static_cast<double>(i) / (cfg.n_mels + 1));
  }
  std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(n_bins, 0.0));
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double enorm = 2.0 / (right - left);
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      fb[m][k] = std::max(0.0, std::min(rise, fall)) * enorm;
    }
  }
  return fb;
}

Mel mel_spectrogram(const Waveform& wave, const MelConfig& cfg) {
  cfg.validate();
  if (wave.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("mel_spectrogram: waveform rate " + std::to_string(wave.sample_rate) +
                                " Hz differs from config rate " + std::to_string(cfg.sample_rate) + " Hz");
  }
  const std::size_t n = wave.samples.size();
  if (n < cfg.win_length) {
    throw std::invalid_argument("mel_spectrogram: input of " + std::to_string(n) +
                                " samples is shorter than the window (" +
                                std::to_string(cfg.win_length) + ")");
  }
  const std::size_t pad = cfg.n_fft / 2;
  std::vector<double> padded(n + 2 * pad);
  for (std::size_t i = 0; i < padded.size(); ++i) {
    // Reflection without repeating the edge sample.
    std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad);
    const auto last = static_cast<std::ptrdiff_t>(n) - 1;
    if (j < 0) j = -j;
    if (j > last) j = 2 * last - j;
    padded[i] = wave.samples[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(j, 0, last))];
  }

  // Periodic Hann of win_length, centered inside n_fft.
  std::vector<double> window(cfg.n_fft, 0.0);
  const std::size_t woff = (cfg.n_fft - cfg.win_length) / 2;
  for (std::size_t i = 0; i < cfg.win_length; ++i) {
    window[woff + i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / cfg.win_length);
  }

  const auto fb = mel_filterbank(cfg);
  const std::size_t n_bins = cfg.n_fft / 2 + 1;
  const std::size_t T = cfg.frame_count(n);

  Mel mel;
  mel.config = cfg;
  mel.frames.frames = T;
  mel.frames.cols = cfg.n_mels;
  mel.frames.data.assign(T * cfg.n_mels, 0.f);

  Eigen::FFT<double> fft;
  std::vector<double> frame(cfg.n_fft);
  std::vector<std::complex<double>> spec;
  std::vector<double> mag(n_bins);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t start = t * cfg.hop_length;
    for (std::size_t i = 0; i < cfg.n_fft; ++i) frame[i] = padded[start + i] * window[i];
    fft.fwd(spec, frame);
    for (std::size_t k = 0; k < n_bins; ++k) mag[k] = std::abs(spec[k]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < n_bins; ++k) e += fb[m][k] * mag[k];
      mel.frames(t, m) = static_cast<float>(std::log(std::max(e, cfg.log_floor)));
    }
  }
  return mel;
}

void save_frames(const std::filesystem::path& path, const FrameMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("SPOTMEL1", 8);
  const auto frames = static_cast<std::uint32_t>(m.frames);
  const auto cols = static_cast<std::uint32_t>(m.cols);
  out.write(reinterpret_cast<const char*>(&frames), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  out.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

FrameMatrix load_frames(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "SPOTMEL1", 8) != 0)
    throw std::runtime_error(path.string() + ": not a SPOTMEL1 file");
  std::uint32_t frames = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&frames), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  FrameMatrix m;
  m.frames = frames;
  m.cols = cols;
  m.data.resize(static_cast<std::size_t>(frames) * cols);
  in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (!in) throw std::runtime_error(path.string() + ": truncated SPOTMEL1 payload");
  return m;
}

}  // namespace spotkit::signal
