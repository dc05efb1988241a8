#include "spotkit/corpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace spotkit::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

void StyleSpecimen::validate(double pitch_fmin) const {
  if (!(f0_mean - f0_range / 2 > pitch_fmin)) {
    throw std::invalid_argument("style " + std::to_string(style_id) + ": f0_mean - f0_range/2 must exceed " +
                                std::to_string(pitch_fmin) + " Hz");
  }
  if (f0_range <= 0 || vibrato_depth < 0 || vibrato_rate < 0)
    throw std::invalid_argument("style " + std::to_string(style_id) + ": negative range or vibrato");
  if (!(vibrato_depth < f0_range))
    throw std::invalid_argument("style " + std::to_string(style_id) + ": vibrato_depth must be below f0_range");
}

std::vector<StyleSpecimen> default_styles() {
  return {
      {0, 140.0, 30.0, 0.0, 0.0, 0.0},
      {1, 200.0, 40.0, 3.0, 4.0, 0.25},
      {2, 260.0, 50.0, 5.5, 5.0, 0.5},
      {3, 320.0, 60.0, 8.0, 6.0, 0.75},
  };
}

int UtterancePlan::total_frames() const {
  int n = 0;
  for (const auto& s : segments) n += s.n_frames;
  return n;
}

int UtterancePlan::voiced_frames() const {
  int n = 0;
  for (const auto& s : segments)
    if (s.voiced) n += s.n_frames;
  return n;
}

void UtterancePlan::validate() const {
  bool any_v = false, any_uv = false;
  for (const auto& s : segments) {
    if (s.n_frames < 2) throw std::invalid_argument("plan: every segment needs at least 2 frames");
    (s.voiced ? any_v : any_uv) = true;
  }
  if (total_frames() < 32) throw std::invalid_argument("plan: fewer than 32 frames");
  if (!any_v || !any_uv) throw std::invalid_argument("plan: needs both voiced and unvoiced segments");
}

void CorpusConfig::validate() const {
  if (utterances_per_style <= 0 || n_styles <= 0) throw std::invalid_argument("empty corpus");
  if (static_cast<int>(styles.size()) < n_styles)
    throw std::invalid_argument("corpus config: fewer style specimens than n_styles");
  if (n_voiced_symbols <= 0 || n_voiced_symbols >= n_symbols)
    throw std::invalid_argument("corpus config: need both voiced and unvoiced symbols");
  if (n_sentences <= 0) throw std::invalid_argument("corpus config: n_sentences must be positive");
  if (test_fraction < 0 || test_fraction >= 1) throw std::invalid_argument("corpus config: test_fraction in [0, 1)");
  if (voiced_min_frames < 2 || unvoiced_min_frames < 2 || voiced_max_frames < voiced_min_frames ||
      unvoiced_max_frames < unvoiced_min_frames)
    throw std::invalid_argument("corpus config: invalid segment duration range");
  if (!(min_voiced_fraction <= max_voiced_fraction))
    throw std::invalid_argument("corpus config: invalid voiced fraction range");
  mel.validate();
  pitch.validate();
  if (mel.sample_rate != pitch.sample_rate || mel.hop_length != pitch.hop_length)
    throw std::invalid_argument("corpus config: mel and pitch framing differ");
  for (int s = 0; s < n_styles; ++s) styles[static_cast<std::size_t>(s)].validate(pitch.fmin);
}

void to_json(json& j, const StyleSpecimen& s) {
  j = json{{"style_id", s.style_id},         {"f0_mean", s.f0_mean},
           {"f0_range", s.f0_range},         {"vibrato_rate", s.vibrato_rate},
           {"vibrato_depth", s.vibrato_depth}, {"energy_tilt", s.energy_tilt}};
}

void from_json(const json& j, StyleSpecimen& s) {
  s.style_id = j.at("style_id").get<int>();
  s.f0_mean = j.at("f0_mean").get<double>();
  s.f0_range = j.at("f0_range").get<double>();
  s.vibrato_rate = j.value("vibrato_rate", 0.0);
  s.vibrato_depth = j.value("vibrato_depth", 0.0);
  s.energy_tilt = j.value("energy_tilt", 0.0);
}

void to_json(json& j, const CorpusConfig& c) {
  j = json{{"n_styles", c.n_styles},
           {"n_symbols", c.n_symbols},
           {"n_voiced_symbols", c.n_voiced_symbols},
           {"n_sentences", c.n_sentences},
           {"utterances_per_style", c.utterances_per_style},
           {"test_fraction", c.test_fraction},
           {"voiced_frames", {c.voiced_min_frames, c.voiced_max_frames}},
           {"unvoiced_frames", {c.unvoiced_min_frames, c.unvoiced_max_frames}},
           {"max_frames", c.max_frames},
           {"voiced_fraction", {c.min_voiced_fraction, c.max_voiced_fraction}},
           {"voiced_rms", c.voiced_rms},
           {"unvoiced_rms", c.unvoiced_rms},
           {"sample_rate", c.mel.sample_rate},
           {"hop_length", c.mel.hop_length},
           {"pitch_fmin", c.pitch.fmin},
           {"pitch_fmax", c.pitch.fmax},
           {"styles", c.styles}};
}

void from_json(const json& j, CorpusConfig& c) {
  c = CorpusConfig{};
  c.n_styles = j.value("n_styles", c.n_styles);
  c.n_symbols = j.value("n_symbols", c.n_symbols);
  c.n_voiced_symbols = j.value("n_voiced_symbols", c.n_voiced_symbols);
  c.n_sentences = j.value("n_sentences", c.n_sentences);
  c.utterances_per_style = j.value("utterances_per_style", c.utterances_per_style);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  if (j.contains("voiced_frames")) {
    c.voiced_min_frames = j["voiced_frames"].at(0).get<int>();
    c.voiced_max_frames = j["voiced_frames"].at(1).get<int>();
  }
  if (j.contains("unvoiced_frames")) {
    c.unvoiced_min_frames = j["unvoiced_frames"].at(0).get<int>();
    c.unvoiced_max_frames = j["unvoiced_frames"].at(1).get<int>();
  }
  c.max_frames = j.value("max_frames", c.max_frames);
  if (j.contains("voiced_fraction")) {
    c.min_voiced_fraction = j["voiced_fraction"].at(0).get<double>();
    c.max_voiced_fraction = j["voiced_fraction"].at(1).get<double>();
  }
  c.voiced_rms = j.value("voiced_rms", c.voiced_rms);
  c.unvoiced_rms = j.value("unvoiced_rms", c.unvoiced_rms);
  c.mel.sample_rate = c.pitch.sample_rate = j.value("sample_rate", c.mel.sample_rate);
  c.mel.hop_length = c.pitch.hop_length = j.value("hop_length", c.mel.hop_length);
  c.pitch.fmin = j.value("pitch_fmin", c.pitch.fmin);
  c.pitch.fmax = j.value("pitch_fmax", c.pitch.fmax);
  if (j.contains("styles")) c.styles = j["styles"].get<std::vector<StyleSpecimen>>();
}

std::vector<int> sentence_symbols(const CorpusConfig& cfg, int sentence_id) {
  // Four voiced segments framed by five unvoiced ones. Symbols follow a fixed
  // per-sentence draw so each sentence is its own content template.
  std::mt19937_64 rng(0x5e17e1ceULL + static_cast<std::uint64_t>(sentence_id) * 7919ULL);
  std::uniform_int_distribution<int> v(0, cfg.n_voiced_symbols - 1);
  std::uniform_int_distribution<int> uv(cfg.n_voiced_symbols, cfg.n_symbols - 1);
  std::vector<int> out;
  for (int k = 0; k < 9; ++k) out.push_back(k % 2 ? v(rng) : uv(rng));
  return out;
}

UtterancePlan make_plan(const CorpusConfig& cfg, int sentence_id, int style_id, std::uint64_t seed) {
  const auto symbols = sentence_symbols(cfg, sentence_id);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> vd(cfg.voiced_min_frames, cfg.voiced_max_frames);
  std::uniform_int_distribution<int> ud(cfg.unvoiced_min_frames, cfg.unvoiced_max_frames);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    UtterancePlan plan;
    plan.style_id = style_id;
    plan.seed = seed;
    for (int s : symbols) {
      const bool voiced = s < cfg.n_voiced_symbols;
      plan.segments.push_back({s, voiced ? vd(rng) : ud(rng), voiced});
    }
    const double frac = static_cast<double>(plan.voiced_frames()) / plan.total_frames();
    if (plan.total_frames() >= 32 && plan.total_frames() <= cfg.max_frames && frac >= cfg.min_voiced_fraction &&
        frac <= cfg.max_voiced_fraction)
      return plan;
  }
  throw std::runtime_error("make_plan: duration ranges cannot satisfy the frame budget");
}

double symbol_contour(int symbol_id, double u) {
  const double pi = std::numbers::pi;
  switch (symbol_id % 8) {
    case 0: return 0.0;
    case 1: return 0.8 * u - 0.4;
    case 2: return 0.4 - 0.8 * u;
    case 3: return 0.5 * std::sin(pi * u) - 0.2;
    case 4: return 0.2 - 0.5 * std::sin(pi * u);
    case 5: return 0.3;
    case 6: return -0.3;
    default: return 0.35 * std::sin(2 * pi * u);
  }
}

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  static Biquad bandpass(double fc, double q, double fs) {
    const double w0 = 2 * std::numbers::pi * fc / fs;
    const double alpha = std::sin(w0) / (2 * q);
    const double a0 = 1 + alpha;
    return {alpha / a0, 0.0, -alpha / a0, -2 * std::cos(w0) / a0, (1 - alpha) / a0};
  }
  double operator()(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

double noise_center_hz(int uv_index) { return 2000.0 + 1200.0 * (uv_index % 6); }

void normalize_rms(std::vector<double>& x, std::size_t lo, std::size_t hi, double target) {
  double e = 0;
  for (std::size_t i = lo; i < hi; ++i) e += x[i] * x[i];
  if (e <= 0) return;
  const double g = target / std::sqrt(e / static_cast<double>(hi - lo));
  for (std::size_t i = lo; i < hi; ++i) x[i] *= g;
}

void apply_fades(std::vector<double>& x, std::size_t lo, std::size_t hi, std::size_t len) {
  len = std::min(len, (hi - lo) / 2);
  for (std::size_t i = 0; i < len; ++i) {
    const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * (i + 0.5) / len);
    x[lo + i] *= g;
    x[hi - 1 - i] *= g;
  }
}

}  // namespace

SynthUtterance render_utterance(const UtterancePlan& plan, const StyleSpecimen& style, const CorpusConfig& cfg) {
  plan.validate();
  style.validate(cfg.pitch.fmin);
  const std::size_t hop = cfg.mel.hop_length;
  const double fs = cfg.mel.sample_rate;
  const auto T = static_cast<std::size_t>(plan.total_frames());
  const std::size_t N = T * hop - 1;

  std::mt19937_64 rng(plan.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double vib_phase = 2 * std::numbers::pi * unit(rng);

  std::vector<double> harm(N, 0.0), noise(N, 0.0), f0_at(N, 0.0);
  SynthUtterance out;
  out.style_id = plan.style_id;
  out.content_frames.reserve(T);

  // Harmonic amplitudes with unit-RMS normalization below Nyquist.
  std::vector<double> amp(8);
  for (int k = 1; k <= 8; ++k) amp[static_cast<std::size_t>(k - 1)] = std::pow(k, -(1.0 + style.energy_tilt));

  std::size_t frame = 0;
  for (const auto& seg : plan.segments) {
    const std::size_t f_begin = frame, f_end = frame + static_cast<std::size_t>(seg.n_frames);
    frame = f_end;
    for (std::size_t t = f_begin; t < f_end; ++t) out.content_frames.push_back(seg.symbol_id);
    // Frame t owns samples [t*hop - hop/2, t*hop + hop/2).
    const std::size_t lo = f_begin == 0 ? 0 : f_begin * hop - hop / 2;
    const std::size_t hi = f_end == T ? N : std::min(N, f_end * hop - hop / 2);
    if (seg.voiced) {
      double phase = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        const double u = static_cast<double>(i - lo) / static_cast<double>(std::max<std::size_t>(1, hi - lo - 1));
        const double f0 = style.f0_mean + style.f0_range * symbol_contour(seg.symbol_id, u) +
                          style.vibrato_depth * std::sin(2 * std::numbers::pi * style.vibrato_rate * i / fs + vib_phase);
        if (f0 < cfg.pitch.fmin || f0 > cfg.pitch.fmax) {
          throw std::invalid_argument("render_utterance: contour leaves the pitch range at " + std::to_string(f0) + " Hz");
        }
        f0_at[i] = f0;
        phase += 2 * std::numbers::pi * f0 / fs;
        double v = 0, power = 0;
        for (std::size_t k = 1; k <= 8; ++k) {
          if (k * f0 >= fs / 2) break;
          v += amp[k - 1] * std::sin(static_cast<double>(k) * phase);
          power += 0.5 * amp[k - 1] * amp[k - 1];
        }
        harm[i] = v * cfg.voiced_rms / std::sqrt(power);
      }
      apply_fades(harm, lo, hi, 64);
    } else {
      auto bp = Biquad::bandpass(noise_center_hz(seg.symbol_id - cfg.n_voiced_symbols), 1.2, fs);
      for (int w = 0; w < 256; ++w) bp(gauss(rng));
      for (std::size_t i = lo; i < hi; ++i) noise[i] = bp(gauss(rng));
      normalize_rms(noise, lo, hi, cfg.unvoiced_rms);
      apply_fades(noise, lo, hi, 64);
    }
  }

  out.waveform.sample_rate = cfg.mel.sample_rate;
  out.waveform.samples.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    // Rounded to float so a float32 WAV reproduces the waveform exactly.
    out.waveform.samples[i] = static_cast<float>(std::clamp(harm[i] + noise[i], -1.0, 1.0));
  }
  out.mel = signal::mel_spectrogram(out.waveform, cfg.mel);
  if (out.mel.length() != T) throw std::logic_error("render_utterance: frame count mismatch");

  // Ground truth: plan voicing, f0 at the frame centre, and the harmonic share
  // of energy under the analysis window.
  std::vector<double> hann(cfg.mel.win_length);
  for (std::size_t i = 0; i < hann.size(); ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / hann.size());
  out.pitch.f0_hz.assign(T, 0.0);
  out.pitch.vuv.assign(T, false);
  out.pitch.periodicity.assign(T, 0.0);
  frame = 0;
  for (const auto& seg : plan.segments) {
    for (int k = 0; k < seg.n_frames; ++k, ++frame) {
      if (!seg.voiced) continue;
      out.pitch.vuv[frame] = true;
      out.pitch.f0_hz[frame] = f0_at[std::min(N - 1, frame * hop)];
    }
  }
  const auto half = static_cast<std::ptrdiff_t>(hann.size() / 2);
  for (std::size_t t = 0; t < T; ++t) {
    double eh = 0, en = 0;
    for (std::size_t i = 0; i < hann.size(); ++i) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(t * hop) - half + static_cast<std::ptrdiff_t>(i);
      if (j < 0 || j >= static_cast<std::ptrdiff_t>(N)) continue;
      eh += hann[i] * harm[static_cast<std::size_t>(j)] * harm[static_cast<std::size_t>(j)];
      en += hann[i] * noise[static_cast<std::size_t>(j)] * noise[static_cast<std::size_t>(j)];
    }
    out.pitch.periodicity[t] = eh + en > 0 ? eh / (eh + en) : 0.0;
  }
  return out;
}

void save_content_csv(const fs::path& path, const std::vector<int>& symbols) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "frame,symbol_id\n";
  for (std::size_t t = 0; t < symbols.size(); ++t) out << t << ',' << symbols[t] << '\n';
}

std::vector<int> load_content_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("frame,symbol_id", 0) != 0) throw std::runtime_error(path.string() + ": expected header frame,symbol_id");
  std::vector<int> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error(path.string() + ": bad row '" + line + "'");
    out.push_back(std::stoi(line.substr(comma + 1)));
  }
  return out;
}

json Manifest::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"id", e.id},
                            {"wav_path", e.wav_path},
                            {"pitch_csv", e.pitch_csv},
                            {"content_csv", e.content_csv},
                            {"style_id", e.style_id},
                            {"sentence_id", e.sentence_id},
                            {"n_frames", e.n_frames},
                            {"split", e.split}});
  }
  return json{{"format", "spotkit-corpus"}, {"version", 1}, {"seed", seed}, {"config", config}, {"entries", entries_json}};
}

std::size_t Manifest::count(const std::string& split) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == split; }));
}

Manifest generate_corpus(const CorpusConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  fs::create_directories(out_dir / "pitch", ec);
  fs::create_directories(out_dir / "content", ec);
  if (ec || !fs::is_directory(out_dir / "content")) {
    throw std::runtime_error("generate_corpus: cannot create output directory " + out_dir.string());
  }

  Manifest m;
  m.root = out_dir;
  m.config = cfg;
  m.seed = seed;
  const int n = cfg.utterances_per_style;
  const int n_test = static_cast<int>(std::ceil(cfg.test_fraction * n - 1e-9));
  for (int s = 0; s < cfg.n_styles; ++s) {
    for (int j = 0; j < n; ++j) {
      std::ostringstream id;
      id << "s" << s << "_u" << std::setw(3) << std::setfill('0') << j;
      const int sentence = (j + s) % cfg.n_sentences;
      std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                         static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(j)};
      std::mt19937_64 seeder(sseq);
      const auto plan = make_plan(cfg, sentence, s, seeder());
      const auto utt = render_utterance(plan, cfg.styles[static_cast<std::size_t>(s)], cfg);

      ManifestEntry e;
      e.id = id.str();
      e.wav_path = "wav/" + e.id + ".wav";
      e.pitch_csv = "pitch/" + e.id + ".csv";
      e.content_csv = "content/" + e.id + ".csv";
      e.style_id = s;
      e.sentence_id = sentence;
      e.n_frames = static_cast<int>(utt.length());
      e.split = j >= n - n_test ? "test" : "train";
      signal::save_wav(out_dir / e.wav_path, utt.waveform, signal::WavFormat::float32);
      signal::save_pitch_csv(out_dir / e.pitch_csv, utt.pitch);
      save_content_csv(out_dir / e.content_csv, utt.content_frames);
      m.entries.push_back(std::move(e));
    }
  }
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw std::runtime_error("generate_corpus: cannot write manifest in " + out_dir.string());
  out << m.to_json().dump(2) << '\n';
  return m;
}

Manifest load_manifest(const fs::path& manifest_json) {
  std::ifstream in(manifest_json);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_json.string());
  const json j = json::parse(in);
  Manifest m;
  m.root = manifest_json.parent_path();
  m.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("config")) m.config = j["config"].get<CorpusConfig>();
  for (const auto& e : j.at("entries")) {
    ManifestEntry me;
    me.id = e.at("id").get<std::string>();
    me.wav_path = e.at("wav_path").get<std::string>();
    me.pitch_csv = e.at("pitch_csv").get<std::string>();
    me.content_csv = e.at("content_csv").get<std::string>();
    me.style_id = e.at("style_id").get<int>();
    me.sentence_id = e.value("sentence_id", 0);
    me.n_frames = e.value("n_frames", 0);
    me.split = e.at("split").get<std::string>();
    m.entries.push_back(std::move(me));
  }
  if (m.entries.empty()) throw std::runtime_error("empty corpus");
  return m;
}

std::uint64_t manifest_hash(const Manifest& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  feed(m.to_json().dump());
  for (const auto& e : m.entries) {
    for (const auto& rel : {e.wav_path, e.pitch_csv, e.content_csv}) {
      std::ifstream in(m.root / rel, std::ios::binary);
      if (!in) throw std::runtime_error("manifest_hash: missing " + (m.root / rel).string());
      feed(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
    }
  }
  return h;
}

SynthUtterance load_utterance(const Manifest& m, const ManifestEntry& e) {
  SynthUtterance u;
  u.waveform = signal::load_wav(m.root / e.wav_path);
  u.mel = signal::mel_spectrogram(u.waveform, m.config.mel);
  u.pitch = signal::load_pitch_csv(m.root / e.pitch_csv);
  u.content_frames = load_content_csv(m.root / e.content_csv);
  u.style_id = e.style_id;
  if (u.pitch.size() != u.mel.length() || u.content_frames.size() != u.mel.length()) {
    throw std::runtime_error(e.id + ": per-frame files disagree with the mel length");
  }
  return u;
}

}  // namespace spotkit::corpus
