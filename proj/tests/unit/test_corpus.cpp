#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "spotkit/corpus/corpus.hpp"

using namespace spotkit::corpus;
namespace fs = std::filesystem;
namespace sig = spotkit::signal;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("spotkit_corpus_" + name);
  fs::remove_all(p);
  return p;
}

UtterancePlan flat_plan() {
  UtterancePlan p;
  p.segments = {{8, 6, false}, {0, 30, true}, {9, 6, false}};
  p.style_id = 2;
  p.seed = 77;
  return p;
}

}  // namespace

TEST_CASE("flat contour without vibrato gives constant ground-truth f0") {
  StyleSpecimen st = default_styles()[2];
  st.vibrato_depth = 0;
  const auto u = render_utterance(flat_plan(), st);
  REQUIRE(u.length() == 42);
  CHECK(u.mel.length() == 42);
  CHECK(u.waveform.samples.size() == 42 * 256 - 1);
  for (std::size_t t = 0; t < u.length(); ++t) {
    const bool voiced = t >= 6 && t < 36;
    CHECK(u.pitch.vuv[t] == voiced);
    CHECK(u.pitch.f0_hz[t] == (voiced ? st.f0_mean : 0.0));
    CHECK(u.content_frames[t] == (t < 6 ? 8 : t < 36 ? 0 : 9));
  }
}

TEST_CASE("rendering is deterministic in plan, style and seed") {
  const auto st = default_styles()[1];
  const auto a = render_utterance(flat_plan(), st);
  const auto b = render_utterance(flat_plan(), st);
  CHECK(a.waveform.samples == b.waveform.samples);
  auto other = flat_plan();
  other.seed = 78;
  CHECK(render_utterance(other, st).waveform.samples != a.waveform.samples);
}

TEST_CASE("plan and style validation") {
  UtterancePlan p = flat_plan();
  p.segments[0].n_frames = 1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = flat_plan();
  p.segments = {{0, 40, true}};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  StyleSpecimen s{0, 80.0, 40.0, 0, 0, 0};
  CHECK_THROWS_AS(s.validate(70.0), std::invalid_argument);
  s = {0, 200.0, 40.0, 3.0, 50.0, 0};
  CHECK_THROWS_AS(s.validate(70.0), std::invalid_argument);
  // Contour pushed past the pitch ceiling.
  StyleSpecimen high{0, 480.0, 60.0, 0, 0, 0};
  UtterancePlan rising = flat_plan();
  rising.segments[1].symbol_id = 1;
  CHECK_THROWS_WITH_AS(render_utterance(rising, high), doctest::Contains("pitch range"), std::invalid_argument);
}

TEST_CASE("plans respect the frame budget and voiced fraction") {
  CorpusConfig cfg;
  for (int s = 0; s < cfg.n_sentences; ++s) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto p = make_plan(cfg, s, 0, seed);
      CHECK_NOTHROW(p.validate());
      const double frac = static_cast<double>(p.voiced_frames()) / p.total_frames();
      CHECK(frac >= 0.4);
      CHECK(frac <= 0.9);
      CHECK(p.total_frames() <= cfg.max_frames);
    }
  }
}

TEST_CASE("frontend recovers ground truth on rendered speech") {
  CorpusConfig cfg;
  std::size_t tp = 0, fp = 0, fn = 0, both = 0;
  double se = 0;
  for (int s = 0; s < 4; ++s) {
    for (int j = 0; j < 6; ++j) {
      const auto u = render_utterance(make_plan(cfg, j % 4, s, 1000 + 10 * s + j), cfg.styles[s], cfg);
      const auto est = sig::estimate_f0_vuv(u.waveform, cfg.pitch);
      REQUIRE(est.size() == u.length());
      for (std::size_t t = 0; t < u.length(); ++t) {
        const bool g = u.pitch.vuv[t], e = est.vuv[t];
        tp += g && e;
        fp += !g && e;
        fn += g && !e;
        if (g && e) {
          ++both;
          se += std::pow(est.f0_hz[t] - u.pitch.f0_hz[t], 2);
        }
      }
    }
  }
  const double f1 = 2.0 * tp / (2.0 * tp + fp + fn);
  const double rmse = std::sqrt(se / both);
  MESSAGE("F1 " << f1 << " RMSE " << rmse << " Hz");
  CHECK(f1 >= 0.95);
  CHECK(rmse <= 5.0);
}

TEST_CASE("styles are separable by ground-truth f0 statistics") {
  CorpusConfig cfg;
  std::map<int, std::vector<double>> means;
  for (int s = 0; s < 4; ++s) {
    for (int j = 0; j < 8; ++j) {
      const auto u = render_utterance(make_plan(cfg, j % 4, s, 50 + j), cfg.styles[s], cfg);
      double sum = 0;
      int n = 0;
      for (std::size_t t = 0; t < u.length(); ++t)
        if (u.pitch.vuv[t]) sum += u.pitch.f0_hz[t], ++n;
      means[s].push_back(sum / n);
    }
  }
  std::vector<double> centroid(4);
  for (int s = 0; s < 4; ++s)
    centroid[s] = std::accumulate(means[s].begin(), means[s].end(), 0.0) / means[s].size();
  for (int s = 0; s < 4; ++s) {
    for (double m : means[s]) {
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (std::abs(m - centroid[c]) < std::abs(m - centroid[best])) best = c;
      CHECK(best == s);
    }
  }
}

TEST_CASE("generate_corpus writes a deterministic manifest") {
  CorpusConfig cfg;
  cfg.utterances_per_style = 10;
  const auto a_dir = temp_dir("a"), b_dir = temp_dir("b");
  const auto a = generate_corpus(cfg, 5, a_dir);
  const auto b = generate_corpus(cfg, 5, b_dir);
  CHECK(a.entries.size() == 40);
  CHECK(a.count("train") == 36);
  CHECK(a.count("test") == 4);
  CHECK(manifest_hash(a) == manifest_hash(b));

  const auto loaded = load_manifest(a_dir / "manifest.json");
  CHECK(loaded.entries.size() == 40);
  CHECK(manifest_hash(loaded) == manifest_hash(a));
  CHECK(loaded.config.styles.size() == 4);

  const auto u = load_utterance(loaded, loaded.entries[3]);
  const auto plan = make_plan(cfg, loaded.entries[3].sentence_id, 0, 0);  // only for shape sanity
  CHECK(plan.total_frames() > 0);
  CHECK(u.length() == static_cast<std::size_t>(loaded.entries[3].n_frames));
  for (std::size_t t = 0; t < u.length(); ++t) CHECK(u.pitch.vuv[t] == (u.pitch.f0_hz[t] > 0));

  const auto c_dir = temp_dir("c");
  const auto c = generate_corpus(cfg, 6, c_dir);
  CHECK(manifest_hash(c) != manifest_hash(a));
  fs::remove_all(a_dir);
  fs::remove_all(b_dir);
  fs::remove_all(c_dir);
}

TEST_CASE("full-size corpus arithmetic") {
  CorpusConfig cfg;
  const auto dir = temp_dir("full");
  const auto m = generate_corpus(cfg, 1, dir);
  CHECK(m.entries.size() == 200);
  CHECK(m.count("train") == 180);
  CHECK(m.count("test") == 20);
  fs::remove_all(dir);
}

TEST_CASE("corpus errors") {
  CorpusConfig cfg;
  cfg.utterances_per_style = 0;
  CHECK_THROWS_WITH(generate_corpus(cfg, 1, temp_dir("empty")), doctest::Contains("empty corpus"));
  cfg = {};
  const auto blocker = fs::temp_directory_path() / "spotkit_corpus_blocker";
  { std::ofstream(blocker) << "x"; }
  CHECK_THROWS_AS(generate_corpus(cfg, 1, blocker / "sub"), std::runtime_error);
  fs::remove(blocker);
}
