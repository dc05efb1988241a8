#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "spotkit/signal/audio.hpp"
#include "spotkit/signal/mel.hpp"
#include "spotkit/signal/pitch.hpp"

namespace spotkit::corpus {

struct StyleSpecimen {
  int style_id = 0;
  double f0_mean = 200.0;
  double f0_range = 40.0;
  double vibrato_rate = 0.0;
  double vibrato_depth = 0.0;
  double energy_tilt = 0.0;  // extra harmonic decay: a_k = k^-(1 + tilt)

  void validate(double pitch_fmin) const;
};

/// The four separable styles used by default.
std::vector<StyleSpecimen> default_styles();

struct Segment {
  int symbol_id = 0;
  int n_frames = 0;
  bool voiced = false;
};

struct UtterancePlan {
  std::vector<Segment> segments;
  int style_id = 0;
  std::uint64_t seed = 0;

  int total_frames() const;
  int voiced_frames() const;
  void validate() const;
};

struct SynthUtterance {
  signal::Waveform waveform;
  signal::Mel mel;
  signal::PitchTrack pitch;  // ground truth from the renderer
  std::vector<int> content_frames;
  int style_id = 0;

  std::size_t length() const { return content_frames.size(); }
};

struct CorpusConfig {
  int n_styles = 4;
  int n_symbols = 12;
  int n_voiced_symbols = 8;  // symbols [0, n_voiced_symbols) are voiced
  int n_sentences = 4;
  int utterances_per_style = 50;
  double test_fraction = 0.1;
  int voiced_min_frames = 6, voiced_max_frames = 14;
  int unvoiced_min_frames = 3, unvoiced_max_frames = 8;
  int max_frames = 96;
  double min_voiced_fraction = 0.4, max_voiced_fraction = 0.9;
  double voiced_rms = 0.1;
  double unvoiced_rms = 0.07;
  signal::MelConfig mel;
  signal::PitchConfig pitch;
  std::vector<StyleSpecimen> styles = default_styles();

  void validate() const;
};

void to_json(nlohmann::json& j, const StyleSpecimen& s);
void from_json(const nlohmann::json& j, StyleSpecimen& s);
void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

/// Symbol sequence of a sentence template, alternating unvoiced/voiced.
std::vector<int> sentence_symbols(const CorpusConfig& cfg, int sentence_id);

/// Draws segment durations for a sentence until the frame budget and voiced
/// fraction constraints hold.
UtterancePlan make_plan(const CorpusConfig& cfg, int sentence_id, int style_id, std::uint64_t seed);

/// Normalized pitch contour of a voiced symbol at position u in [0, 1]; values in [-0.5, 0.5].
double symbol_contour(int symbol_id, double u);

/// Deterministic in (plan, style, plan.seed). Produces T frames from T * hop - 1 samples.
SynthUtterance render_utterance(const UtterancePlan& plan, const StyleSpecimen& style,
                                const CorpusConfig& cfg = {});

struct ManifestEntry {
  std::string id;
  std::string wav_path;  // relative to the manifest directory
  std::string pitch_csv;
  std::string content_csv;
  int style_id = 0;
  int sentence_id = 0;
  int n_frames = 0;
  std::string split;  // "train" or "test"
};

struct Manifest {
  std::filesystem::path root;
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  std::size_t count(const std::string& split) const;
};

/// Renders and writes the full corpus under out_dir (wav/, pitch/, content/,
/// manifest.json).
Manifest generate_corpus(const CorpusConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

Manifest load_manifest(const std::filesystem::path& manifest_json);

/// Reads one entry back: waveform, mel recomputed with the corpus config,
/// ground-truth pitch and content from the CSVs.
SynthUtterance load_utterance(const Manifest& m, const ManifestEntry& e);

/// FNV-1a of the manifest's canonical JSON text plus every referenced file.
std::uint64_t manifest_hash(const Manifest& m);

void save_content_csv(const std::filesystem::path& path, const std::vector<int>& symbols);
std::vector<int> load_content_csv(const std::filesystem::path& path);

}  // namespace spotkit::corpus
