#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "spotkit/diffcore/ops.hpp"
#include "spotkit/eval/gradcheck_suite.hpp"
#include "spotkit/eval/metrics.hpp"
#include "spotkit/eval/plot.hpp"
#include "spotkit/eval/probe.hpp"

using namespace spotkit::eval;
using spotkit::signal::PitchTrack;
namespace fs = std::filesystem;

namespace {

PitchTrack track(std::vector<double> f0, std::vector<bool> vuv, std::vector<double> per = {}) {
  PitchTrack t;
  t.f0_hz = std::move(f0);
  t.vuv = std::move(vuv);
  t.periodicity = per.empty() ? std::vector<double>(t.f0_hz.size(), 0.0) : std::move(per);
  return t;
}

PitchTrack random_track(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> hz(60, 400), u(0, 1);
  PitchTrack t;
  for (std::size_t i = 0; i < n; ++i) {
    const bool v = u(rng) < 0.6;
    t.vuv.push_back(v);
    t.f0_hz.push_back(v ? hz(rng) : 0.0);
    t.periodicity.push_back(u(rng));
  }
  return t;
}

// Straight from the definitions: collect the index sets, then apply the formulas.
double oracle_rmse_f0(const PitchTrack& p, const PitchTrack& g) {
  std::vector<std::size_t> both;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (p.vuv[i] && g.vuv[i]) both.push_back(i);
  double s = 0;
  for (auto i : both) s += std::pow(p.f0_hz[i] - g.f0_hz[i], 2);
  return std::sqrt(s / double(both.size()));
}

double oracle_rmse_p(const PitchTrack& p, const PitchTrack& g) {
  double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i) s += std::pow(p.periodicity[i] - g.periodicity[i], 2);
  return std::sqrt(s / double(g.size()));
}

double oracle_f1(const PitchTrack& p, const PitchTrack& g) {
  double tp = 0, pred_pos = 0, true_pos = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    tp += p.vuv[i] && g.vuv[i];
    pred_pos += p.vuv[i];
    true_pos += g.vuv[i];
  }
  if (tp == 0) return 0.0;
  const double precision = tp / pred_pos, recall = tp / true_pos;
  return 2 * precision * recall / (precision + recall);
}

}  // namespace

TEST_CASE("rmse_f0 examples") {
  const auto g = track({100, 0, 200, 300}, {true, false, true, true});
  CHECK(rmse_f0(g, g) == 0.0);
  auto p = g;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.vuv[i]) p.f0_hz[i] += 5;
  CHECK(rmse_f0(p, g) == doctest::Approx(5.0).epsilon(1e-15));
  // only frames voiced in both count
  p.vuv[0] = false;
  p.f0_hz[0] = 0;
  CHECK(rmse_f0(p, g) == doctest::Approx(5.0).epsilon(1e-15));

  const auto disjoint = track({0, 150, 0, 0}, {false, true, false, false});
  CHECK_THROWS_AS(rmse_f0(disjoint, g), std::domain_error);
  CHECK_THROWS_AS(rmse_f0(track({1}, {true}), g), std::invalid_argument);
}

TEST_CASE("rmse_periodicity examples") {
  const auto g = track({0, 0, 0, 0}, {false, false, false, false}, {0, 1, 0, 1});
  CHECK(rmse_periodicity(g, g) == 0.0);
  auto p = g;
  for (auto& v : p.periodicity) v += 0.1;
  CHECK(rmse_periodicity(p, g) == doctest::Approx(0.1).epsilon(1e-12));
  p.periodicity = {0.5, 0.5, 0.5, 0.5};
  CHECK(rmse_periodicity(p, g) == 0.5);
  CHECK_THROWS_AS(rmse_periodicity(track({0}, {false}), g), std::invalid_argument);
}

TEST_CASE("f1_vuv examples") {
  const auto g = track({1, 1, 0, 0}, {true, true, false, false});
  CHECK(f1_vuv(g, g) == 1.0);
  const auto all_v = track({1, 1, 1, 1}, {true, true, true, true});
  CHECK(f1_vuv(all_v, g) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  const auto none = track({0, 0, 0, 0}, {false, false, false, false});
  CHECK(f1_vuv(none, g) == 0.0);
  CHECK_THROWS_WITH(f1_vuv(g, none), doctest::Contains("recall"));
}

TEST_CASE("metrics match the formula definitions on random tracks") {
  std::mt19937_64 rng(11);
  double worst = 0;
  int compared = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = random_track(rng, 20), g = random_track(rng, 20);
    worst = std::max(worst, std::abs(rmse_periodicity(p, g) - oracle_rmse_p(p, g)));
    if (std::count(g.vuv.begin(), g.vuv.end(), true) > 0) worst = std::max(worst, std::abs(f1_vuv(p, g) - oracle_f1(p, g)));
    bool any = false;
    for (std::size_t i = 0; i < 20; ++i) any = any || (p.vuv[i] && g.vuv[i]);
    if (any) {
      worst = std::max(worst, std::abs(rmse_f0(p, g) - oracle_rmse_f0(p, g)) / std::max(1.0, oracle_rmse_f0(p, g)));
      ++compared;
    }
  }
  CHECK(compared > 900);
  CHECK(worst <= 1e-12);
}

TEST_CASE("report pools frames and round-trips through JSON") {
  std::mt19937_64 rng(3);
  std::vector<TrackPair> pairs;
  for (int i = 0; i < 5; ++i) pairs.push_back({"u" + std::to_string(i), random_track(rng, 30), random_track(rng, 30)});
  pairs.push_back({"silent", random_track(rng, 10), track(std::vector<double>(10, 0), std::vector<bool>(10, false),
                                                           std::vector<double>(10, 0.2))});
  const auto r = evaluate(pairs);
  REQUIRE(r.utterances.size() == 6);
  CHECK_FALSE(r.utterances.back().rmse_f0_hz.has_value());
  CHECK_FALSE(r.utterances.back().f1_vuv.has_value());
  CHECK(r.n_frames_total == 160);
  CHECK(r.n_frames_compared > 0);
  CHECK((r.f1_vuv >= 0 && r.f1_vuv <= 1));
  CHECK(r.note.find("stand") != std::string::npos);

  // pooled values equal the metric on concatenated tracks
  PitchTrack cp, cg;
  for (const auto& p : pairs) {
    cp.f0_hz.insert(cp.f0_hz.end(), p.pred.f0_hz.begin(), p.pred.f0_hz.end());
    cp.vuv.insert(cp.vuv.end(), p.pred.vuv.begin(), p.pred.vuv.end());
    cp.periodicity.insert(cp.periodicity.end(), p.pred.periodicity.begin(), p.pred.periodicity.end());
    cg.f0_hz.insert(cg.f0_hz.end(), p.gt.f0_hz.begin(), p.gt.f0_hz.end());
    cg.vuv.insert(cg.vuv.end(), p.gt.vuv.begin(), p.gt.vuv.end());
    cg.periodicity.insert(cg.periodicity.end(), p.gt.periodicity.begin(), p.gt.periodicity.end());
  }
  CHECK(r.rmse_f0_hz == doctest::Approx(rmse_f0(cp, cg)).epsilon(1e-14));
  CHECK(r.rmse_periodicity == doctest::Approx(rmse_periodicity(cp, cg)).epsilon(1e-14));
  CHECK(r.f1_vuv == doctest::Approx(f1_vuv(cp, cg)).epsilon(1e-14));

  const auto text = nlohmann::json(r).dump();
  const auto back = nlohmann::json::parse(text).get<MetricReport>();
  CHECK(back == r);
}

TEST_CASE("probe on one-hot labels is perfect") {
  std::vector<ProbeExample> ex;
  for (int split = 0; split < 2; ++split)
    for (int c = 0; c < 4; ++c)
      for (int k = 0; k < 6; ++k) {
        std::vector<double> x(4, 0.0);
        x[std::size_t(c)] = 1.0;
        ex.push_back({x, c, k % 3, split == 1});
      }
  const auto r = style_probe(ex);
  CHECK(r.style.accuracy == 1.0);
  CHECK(r.style.chance == 0.25);
  CHECK(r.n_train == 24);
  CHECK(r.n_test == 24);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::accumulate(r.style.confusion[i].begin(), r.style.confusion[i].end(), std::size_t{0}) == 6);
    CHECK(r.style.confusion[i][i] == 6);
  }
  // the same embeddings carry no content information
  CHECK(r.content.accuracy <= 0.5);

  const auto back = nlohmann::json::parse(nlohmann::json(r).dump()).get<ProbeReport>();
  CHECK(back == r);
}

TEST_CASE("probe on noise is near chance") {
  double mean = 0;
  const int seeds = 10;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> n(0, 1);
    std::vector<std::vector<double>> tx, ex;
    std::vector<int> ty, ey;
    for (int c = 0; c < 4; ++c)
      for (int k = 0; k < 20; ++k) {
        std::vector<double> a(8), b(8);
        for (auto& v : a) v = n(rng);
        for (auto& v : b) v = n(rng);
        tx.push_back(a);
        ty.push_back(c);
        ex.push_back(b);
        ey.push_back(c);
      }
    mean += linear_probe(tx, ty, ex, ey).accuracy / seeds;
  }
  CHECK(std::abs(mean - 0.25) <= 0.1);
}

TEST_CASE("probe separates shifted Gaussian classes") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::vector<std::vector<double>> tx, ex;
  std::vector<int> ty, ey;
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 30; ++k) {
      for (auto* xs : {&tx, &ex}) {
        std::vector<double> v(6);
        for (auto& x : v) x = n(rng);
        v[std::size_t(c)] += 6.0;
        xs->push_back(v);
      }
      ty.push_back(c);
      ey.push_back(c);
    }
  CHECK(linear_probe(tx, ty, ex, ey).accuracy >= 0.95);
}

TEST_CASE("probe contract") {
  std::vector<std::vector<double>> x(8, std::vector<double>{0.0});
  std::vector<int> y = {0, 0, 0, 0, 1, 1, 1, 1};
  CHECK_THROWS_WITH(linear_probe(x, y, x, y), doctest::Contains("at least 5"));
  std::vector<int> one(8, 0);
  CHECK_THROWS_WITH(linear_probe(x, one, x, one), doctest::Contains("2 classes"));
  CHECK_THROWS_AS(linear_probe(x, y, x, std::vector<int>{0}), std::invalid_argument);
}

TEST_CASE("svg plots and backing csv") {
  const auto dir = fs::temp_directory_path() / "spotkit_eval_plots";
  fs::remove_all(dir);
  PlotSpec spec{"loss & <curve>", "step", "loss"};
  std::vector<Series> s = {{"total", {1, 2, 3}, {3, 2, 1}}, {"fs2", {1, 2, 3}, {1, 1, 1}}};
  const auto svg = svg_lines(spec, s);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("&amp; &lt;curve&gt;") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 5);
  CHECK(svg.find("<polyline") != std::string::npos);

  write_line_plot(dir / "loss", spec, s);
  write_scatter_plot(dir / "f0", spec, s);
  write_histogram(dir / "usage", {"codes", "code", "count"}, {4, 0, 2}, {"a", "b", "c"});
  for (const char* f : {"loss.svg", "loss.csv", "f0.svg", "f0.csv", "usage.svg", "usage.csv"}) CHECK(fs::exists(dir / f));
  std::ifstream in(dir / "loss.csv");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 7);
  CHECK(svg_scatter(spec, s).find("<circle") != std::string::npos);
  CHECK(svg_histogram(spec, {1, 2}).find("<rect") != std::string::npos);
  CHECK_THROWS_AS(svg_lines(spec, {{"bad", {1, 2}, {1}}}), std::invalid_argument);
}

TEST_CASE("finite-difference suite") {
  for (int bits : {64, 32}) {
    FdSuiteOptions o;
    o.bits = bits;
    o.trials_per_op = 4;
    const auto results = run_fd_suite(o);
    CHECK(results.size() >= spotkit::diff::op_catalog().size() + 4);
    for (const auto& r : results) {
      INFO(bits << "-bit " << r.name << ": " << r.max_rel_error);
      CHECK(r.checks > 0);
      CHECK(r.passed());
    }
  }
  FdSuiteOptions bad;
  bad.bits = 16;
  CHECK_THROWS_AS(run_fd_suite(bad), std::invalid_argument);
}
