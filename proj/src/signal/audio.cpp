#include "spotkit/signal/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace spotkit::signal {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

namespace {

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t pos) {
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  return v;
}

template <typename T>
void write_le(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

[[noreturn]] void bad(const std::filesystem::path& path, const std::string& why) {
  throw std::runtime_error(path.string() + ": " + why);
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) bad(path, "cannot open");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    bad(path, "malformed header (not RIFF/WAVE)");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_pos = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.data() + pos, 4);
    const auto len = read_le<std::uint32_t>(buf, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > buf.size() && id != "data") bad(path, "truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (len < 16) bad(path, "malformed fmt chunk");
      format = read_le<std::uint16_t>(buf, body);
      channels = read_le<std::uint16_t>(buf, body + 2);
      rate = read_le<std::uint32_t>(buf, body + 4);
      bits = read_le<std::uint16_t>(buf, body + 14);
      if (format == 0xFFFE && len >= 26) format = read_le<std::uint16_t>(buf, body + 24);
      have_fmt = true;
    } else if (id == "data") {
      data_pos = body;
      data_len = std::min<std::size_t>(len, buf.size() - body);
      break;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) bad(path, "malformed header (missing fmt chunk)");
  if (data_pos == 0) bad(path, "malformed header (missing data chunk)");
  if (channels != 1) {
    bad(path, "mono required, file has " + std::to_string(channels) + " channels; downmix first");
  }
  if (rate == 0) bad(path, "malformed header (zero sample rate)");

  Waveform w;
  w.sample_rate = rate;
  if (format == 1 && bits == 16) {
    const std::size_t n = data_len / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      w.samples[i] = read_le<std::int16_t>(buf, data_pos + 2 * i) / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t n = data_len / 4;
    w.samples.resize(n);
    double peak = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = read_le<float>(buf, data_pos + 4 * i);
      if (!std::isfinite(v)) bad(path, "non-finite sample at index " + std::to_string(i));
      w.samples[i] = v;
      peak = std::max(peak, std::abs(v));
    }
    if (peak > 1.0)
      for (auto& s : w.samples) s /= peak;
  } else {
    bad(path, "unsupported encoding (format " + std::to_string(format) + ", " +
                  std::to_string(bits) + " bits); PCM16 or float32 required");
  }
  return w;
}

void save_wav(const std::filesystem::path& path, const Waveform& wave, WavFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
  const std::uint16_t block = bits / 8;
  const auto data_len = static_cast<std::uint32_t>(wave.samples.size() * block);
  out.write("RIFF", 4);
  write_le<std::uint32_t>(out, 36 + data_len);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_le<std::uint32_t>(out, 16);
  write_le<std::uint16_t>(out, format == WavFormat::pcm16 ? 1 : 3);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint32_t>(out, wave.sample_rate);
  write_le<std::uint32_t>(out, wave.sample_rate * block);
  write_le<std::uint16_t>(out, block);
  write_le<std::uint16_t>(out, bits);
  out.write("data", 4);
  write_le<std::uint32_t>(out, data_len);
  for (double s : wave.samples) {
    if (format == WavFormat::pcm16) {
      const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
      write_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
    } else {
      write_le<float>(out, static_cast<float>(s));
    }
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace spotkit::signal
