#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace spotkit::signal {

struct Waveform {
  std::vector<double> samples;
  std::uint32_t sample_rate = 22050;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class WavFormat { pcm16, float32 };

/// Reads a mono RIFF WAV (PCM16 or IEEE float32). PCM16 is scaled by 1/32768;
/// float data peaking above 1 is normalized to unit peak.
Waveform load_wav(const std::filesystem::path& path);

void save_wav(const std::filesystem::path& path, const Waveform& wave,
              WavFormat format = WavFormat::pcm16);

}  // namespace spotkit::signal
