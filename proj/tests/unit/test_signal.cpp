#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "spotkit/signal/audio.hpp"
#include "spotkit/signal/mel.hpp"
#include "spotkit/signal/pitch.hpp"

using namespace spotkit::signal;
namespace fs = std::filesystem;

namespace {

Waveform sine(double hz, double seconds, double amp = 0.5, std::uint32_t sr = 22050) {
  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(static_cast<std::size_t>(seconds * sr));
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * i / sr);
  return w;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("spotkit_test_" + name);
}

// Raw 16-bit writer so the loader is checked against hand-built bytes.
void write_raw_wav(const fs::path& p, const std::vector<std::int16_t>& data, std::uint16_t channels) {
  std::ofstream out(p, std::ios::binary);
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const std::uint32_t bytes = static_cast<std::uint32_t>(data.size() * 2);
  out.write("RIFF", 4);
  u32(36 + bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(1);
  u16(channels);
  u32(22050);
  u32(22050 * 2 * channels);
  u16(2 * channels);
  u16(16);
  out.write("data", 4);
  u32(bytes);
  out.write(reinterpret_cast<const char*>(data.data()), bytes);
}

}  // namespace

TEST_CASE("load_wav reads 16-bit silence") {
  const auto p = temp_file("silence.wav");
  write_raw_wav(p, std::vector<std::int16_t>(22050, 0), 1);
  const auto w = load_wav(p);
  CHECK(w.sample_rate == 22050);
  REQUIRE(w.samples.size() == 22050);
  for (double s : w.samples) CHECK(s == 0.0);
  fs::remove(p);
}

TEST_CASE("load_wav scales full-scale square by 1/32768") {
  const auto p = temp_file("square.wav");
  std::vector<std::int16_t> data;
  for (int i = 0; i < 400; ++i) data.push_back((i / 50) % 2 ? -32768 : 32767);
  write_raw_wav(p, data, 1);
  const auto w = load_wav(p);
  REQUIRE(w.samples.size() == 400);
  for (std::size_t i = 0; i < 400; ++i) {
    CHECK(std::abs(std::abs(w.samples[i]) - 1.0) <= 1.0 / 32768 + 1e-12);
    CHECK(w.samples[i] == data[i] / 32768.0);
  }
  fs::remove(p);
}

TEST_CASE("load_wav rejects stereo and garbage") {
  const auto p = temp_file("stereo.wav");
  write_raw_wav(p, std::vector<std::int16_t>(200, 0), 2);
  CHECK_THROWS_WITH_AS(load_wav(p), doctest::Contains("mono required"), std::runtime_error);
  {
    std::ofstream out(p, std::ios::binary);
    out << "definitely not a wave file";
  }
  CHECK_THROWS_WITH_AS(load_wav(p), doctest::Contains("malformed header"), std::runtime_error);
  fs::remove(p);
}

TEST_CASE("save_wav and load_wav round trip") {
  const auto w = sine(330, 0.1, 0.7);
  const auto p = temp_file("rt.wav");
  save_wav(p, w, WavFormat::float32);
  const auto f = load_wav(p);
  REQUIRE(f.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(f.samples[i] == doctest::Approx(w.samples[i]).epsilon(1e-6));
  save_wav(p, w, WavFormat::pcm16);
  const auto q = load_wav(p);
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(q.samples[i] - w.samples[i]) <= 1.0 / 32768);
  fs::remove(p);
}

TEST_CASE("MelConfig validation") {
  MelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_mels = 20;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.win_length = 2048;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.hop_length = 2048;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("Slaney mel scale") {
  // Linear below 1 kHz at 200/3 Hz per mel, log spaced above with 27 mels per factor 6.4.
  CHECK(hz_to_mel_slaney(200.0 / 3.0) == doctest::Approx(1.0));
  CHECK(hz_to_mel_slaney(1000.0) == doctest::Approx(15.0));
  CHECK(hz_to_mel_slaney(6400.0) == doctest::Approx(42.0));
  for (double hz : {0.0, 120.0, 999.0, 1000.0, 4321.0, 11025.0})
    CHECK(mel_to_hz_slaney(hz_to_mel_slaney(hz)) == doctest::Approx(hz).epsilon(1e-12));
}

TEST_CASE("filterbank triangles have unit area in Hz") {
  MelConfig c;
  const auto fb = mel_filterbank(c);
  REQUIRE(fb.size() == 80);
  REQUIRE(fb[0].size() == 513);
  const double df = static_cast<double>(c.sample_rate) / c.n_fft;
  // Only filters much wider than a bin sample their triangle densely enough.
  for (std::size_t m = 40; m < 80; ++m) {
    double area = 0;
    for (double v : fb[m]) area += v * df;
    CHECK(area == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("mel of silence is the log floor everywhere") {
  Waveform w;
  w.samples.assign(4096, 0.0);
  const auto m = mel_spectrogram(w);
  CHECK(m.length() == 17);
  for (float v : m.frames.data) CHECK(v == static_cast<float>(std::log(1e-5)));
}

TEST_CASE("mel frame count follows the centre-padding rule") {
  MelConfig c;
  Waveform w = sine(220, 1.0);
  w.samples.resize(c.win_length);
  CHECK(mel_spectrogram(w, c).length() == 1 + c.win_length / c.hop_length);
  for (std::size_t n : {1024u, 1025u, 1279u, 1280u, 22050u}) {
    Waveform x = sine(220, 1.0);
    x.samples.resize(n);
    CHECK(mel_spectrogram(x, c).length() == 1 + n / c.hop_length);
  }
  w.samples.resize(c.win_length - 1);
  CHECK_THROWS_WITH_AS(mel_spectrogram(w, c), doctest::Contains("shorter than the window"), std::invalid_argument);
}

TEST_CASE("220 Hz sine peaks in a constant mel band covering 220 Hz") {
  MelConfig c;
  const auto m = mel_spectrogram(sine(220, 1.0), c);
  // Independent band edges: linear mel scale below 1 kHz, 82 equally spaced points in mel.
  const double top = 15.0 + std::log(11025.0 / 1000.0) / (std::log(6.4) / 27.0);
  auto edge_hz = [&](std::size_t i) {
    const double mel = top * static_cast<double>(i) / 81.0;
    return mel < 15.0 ? mel * 200.0 / 3.0 : 1000.0 * std::exp(std::log(6.4) / 27.0 * (mel - 15.0));
  };
  std::size_t first_arg = 0;
  for (std::size_t t = 2; t + 2 < m.length(); ++t) {
    std::size_t arg = 0;
    for (std::size_t b = 1; b < 80; ++b)
      if (m.frames(t, b) > m.frames(t, arg)) arg = b;
    CHECK(edge_hz(arg) < 220.0);
    CHECK(edge_hz(arg + 2) > 220.0);
    if (t == 2) first_arg = arg;
    CHECK(arg == first_arg);
  }
}

TEST_CASE("mel is unaffected by appended silence on frames that do not reach the end") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 0.2);
  Waveform w;
  w.samples.resize(5000);
  for (auto& s : w.samples) s = g(rng);
  Waveform longer = w;
  longer.samples.resize(9000, 0.0);
  const auto a = mel_spectrogram(w), b = mel_spectrogram(longer);
  std::size_t checked = 0;
  for (std::size_t t = 0; t < a.length(); ++t) {
    if (t * 256 + 512 > w.samples.size()) break;
    for (std::size_t k = 0; k < 80; ++k) CHECK(std::abs(a.frames(t, k) - b.frames(t, k)) <= 1e-6);
    ++checked;
  }
  CHECK(checked >= 15);
}

TEST_CASE("SPOTMEL1 round trip") {
  const auto m = mel_spectrogram(sine(440, 0.2));
  const auto p = temp_file("mel.bin");
  save_frames(p, m.frames);
  const auto back = load_frames(p);
  CHECK(back.frames == m.frames.frames);
  CHECK(back.cols == 80);
  CHECK(back.data == m.frames.data);
  fs::remove(p);
}

TEST_CASE("YIN tracks a pure 220 Hz sine") {
  const auto w = sine(220, 1.0);
  const auto tr = estimate_f0_vuv(w);
  REQUIRE(tr.size() == mel_spectrogram(w).length());
  std::size_t good = 0;
  for (std::size_t t = 0; t < tr.size(); ++t) {
    CHECK(tr.vuv[t]);
    if (std::abs(tr.f0_hz[t] - 220.0) <= 2.0) ++good;
  }
  CHECK(good >= static_cast<std::size_t>(std::ceil(0.95 * tr.size())));
}

TEST_CASE("YIN rejects white noise at -20 dBFS") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0, 0.1);
  Waveform w;
  w.samples.resize(22050);
  for (auto& s : w.samples) s = std::clamp(g(rng), -1.0, 1.0);
  const auto tr = estimate_f0_vuv(w);
  CHECK(tr.voiced_count() <= static_cast<std::size_t>(0.05 * tr.size()));
}

TEST_CASE("YIN on digital silence") {
  Waveform w;
  w.samples.assign(8000, 0.0);
  const auto tr = estimate_f0_vuv(w);
  for (std::size_t t = 0; t < tr.size(); ++t) {
    CHECK_FALSE(tr.vuv[t]);
    CHECK(tr.f0_hz[t] == 0.0);
  }
}

TEST_CASE("pitch track invariants and gain invariance") {
  // Gliding three-harmonic tone with silence gaps.
  Waveform w;
  w.samples.resize(22050);
  double phase = 0;
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    const double f = 150 + 100 * static_cast<double>(i) / w.samples.size();
    phase += 2 * std::numbers::pi * f / 22050;
    const bool gap = (i / 4000) % 3 == 2;
    w.samples[i] = gap ? 0.0 : 0.4 * (std::sin(phase) + 0.5 * std::sin(2 * phase) + 0.25 * std::sin(3 * phase));
  }
  const auto ref = estimate_f0_vuv(w);
  for (std::size_t t = 0; t < ref.size(); ++t) {
    CHECK(ref.vuv[t] == (ref.f0_hz[t] > 0));
    CHECK(ref.periodicity[t] >= 0.0);
    CHECK(ref.periodicity[t] <= 1.0);
  }
  CHECK(ref.voiced_count() > ref.size() / 3);
  for (double gain : {0.11, 0.3, 0.75, 1.0}) {
    Waveform s = w;
    for (auto& v : s.samples) v *= gain;
    const auto tr = estimate_f0_vuv(s);
    for (std::size_t t = 0; t < tr.size(); ++t) {
      CHECK(tr.vuv[t] == ref.vuv[t]);
      CHECK(std::abs(tr.f0_hz[t] - ref.f0_hz[t]) <= 0.1);
    }
  }
}

TEST_CASE("PitchConfig rejects invalid search ranges") {
  PitchConfig c;
  c.fmin = 600;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.fmax = 12000;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.fmin = 20;  // lag longer than the window
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.sample_rate = 4000;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("pitch CSV round trip") {
  PitchTrack tr;
  tr.f0_hz = {0.0, 201.5, 199.25};
  tr.vuv = {false, true, true};
  tr.periodicity = {0.1, 0.9, 0.875};
  const auto p = temp_file("pitch.csv");
  save_pitch_csv(p, tr);
  const auto back = load_pitch_csv(p);
  CHECK(back.f0_hz == tr.f0_hz);
  CHECK(back.vuv == tr.vuv);
  CHECK(back.periodicity == tr.periodicity);
  {
    std::ofstream out(p);
    out << "frame,f0_hz,vuv,periodicity\n0,120,0,0.9\n";
  }
  CHECK_THROWS_AS(load_pitch_csv(p), std::runtime_error);
  fs::remove(p);
}
