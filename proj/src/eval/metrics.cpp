#include "spotkit/eval/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace spotkit::eval {

namespace {

void check_track(const signal::PitchTrack& t, const char* what, const char* op) {
  if (t.vuv.size() != t.f0_hz.size() || t.periodicity.size() != t.f0_hz.size()) {
    throw std::invalid_argument(std::string(op) + ": " + what + " track has inconsistent array lengths");
  }
}

void check_pair(const signal::PitchTrack& pred, const signal::PitchTrack& gt, const char* op) {
  check_track(pred, "predicted", op);
  check_track(gt, "ground-truth", op);
  if (pred.size() != gt.size()) {
    throw std::invalid_argument(std::string(op) + ": length mismatch (" + std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()) + " frames)");
  }
}

struct Sums {
  double f0_sq = 0, per_sq = 0;
  std::size_t both = 0, frames = 0, tp = 0, fp = 0, fn = 0;

  void add(const signal::PitchTrack& pred, const signal::PitchTrack& gt) {
    for (std::size_t t = 0; t < gt.size(); ++t) {
      const bool p = pred.vuv[t], g = gt.vuv[t];
      if (p && g) {
        const double e = pred.f0_hz[t] - gt.f0_hz[t];
        f0_sq += e * e;
        ++both;
      }
      const double ep = pred.periodicity[t] - gt.periodicity[t];
      per_sq += ep * ep;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    frames += gt.size();
  }
  double f1() const { return 2.0 * double(tp) / double(2 * tp + fp + fn); }
};

}  // namespace

double rmse_f0(const signal::PitchTrack& pred, const signal::PitchTrack& gt) {
  check_pair(pred, gt, "rmse_f0");
  Sums s;
  s.add(pred, gt);
  if (s.both == 0) throw std::domain_error("rmse_f0: no frame is voiced in both tracks");
  return std::sqrt(s.f0_sq / double(s.both));
}

double rmse_periodicity(const signal::PitchTrack& pred, const signal::PitchTrack& gt) {
  check_pair(pred, gt, "rmse_periodicity");
  if (gt.size() == 0) throw std::domain_error("rmse_periodicity: empty tracks");
  Sums s;
  s.add(pred, gt);
  return std::sqrt(s.per_sq / double(s.frames));
}

double f1_vuv(const signal::PitchTrack& pred, const signal::PitchTrack& gt) {
  check_pair(pred, gt, "f1_vuv");
  Sums s;
  s.add(pred, gt);
  if (s.tp + s.fn == 0) throw std::domain_error("f1_vuv: ground truth has no voiced frame, recall is undefined");
  return s.f1();
}

MetricReport evaluate(const std::vector<TrackPair>& pairs) {
  MetricReport r;
  Sums total;
  for (const auto& p : pairs) {
    check_pair(p.pred, p.gt, ("evaluate(" + p.id + ")").c_str());
    Sums s;
    s.add(p.pred, p.gt);
    UtteranceMetrics u;
    u.id = p.id;
    u.n_frames = s.frames;
    u.n_voiced_both = s.both;
    if (s.both) u.rmse_f0_hz = std::sqrt(s.f0_sq / double(s.both));
    if (s.frames) u.rmse_periodicity = std::sqrt(s.per_sq / double(s.frames));
    if (s.tp + s.fn) u.f1_vuv = s.f1();
    r.utterances.push_back(std::move(u));
    total.add(p.pred, p.gt);
  }
  if (total.both == 0) throw std::domain_error("evaluate: no frame is voiced in both tracks of any utterance");
  if (total.tp + total.fn == 0) throw std::domain_error("evaluate: ground truth has no voiced frame");
  r.rmse_f0_hz = std::sqrt(total.f0_sq / double(total.both));
  r.rmse_periodicity = std::sqrt(total.per_sq / double(total.frames));
  r.f1_vuv = total.f1();
  r.n_frames_compared = total.both;
  r.n_frames_total = total.frames;
  return r;
}

void to_json(nlohmann::json& j, const UtteranceMetrics& m) {
  j = {{"id", m.id},
       {"rmse_f0_hz", m.rmse_f0_hz ? nlohmann::json(*m.rmse_f0_hz) : nlohmann::json(nullptr)},
       {"rmse_periodicity", m.rmse_periodicity},
       {"f1_vuv", m.f1_vuv ? nlohmann::json(*m.f1_vuv) : nlohmann::json(nullptr)},
       {"n_frames", m.n_frames},
       {"n_voiced_both", m.n_voiced_both}};
}

void from_json(const nlohmann::json& j, UtteranceMetrics& m) {
  m.id = j.at("id").get<std::string>();
  m.rmse_f0_hz = j.at("rmse_f0_hz").is_null() ? std::nullopt : std::optional(j.at("rmse_f0_hz").get<double>());
  m.rmse_periodicity = j.at("rmse_periodicity").get<double>();
  m.f1_vuv = j.at("f1_vuv").is_null() ? std::nullopt : std::optional(j.at("f1_vuv").get<double>());
  m.n_frames = j.at("n_frames").get<std::size_t>();
  m.n_voiced_both = j.at("n_voiced_both").get<std::size_t>();
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"note", r.note},
       {"rmse_f0_hz", r.rmse_f0_hz},
       {"rmse_periodicity", r.rmse_periodicity},
       {"f1_vuv", r.f1_vuv},
       {"n_frames_compared", r.n_frames_compared},
       {"n_frames_total", r.n_frames_total},
       {"utterances", r.utterances}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.note = j.value("note", std::string{});
  r.rmse_f0_hz = j.at("rmse_f0_hz").get<double>();
  r.rmse_periodicity = j.at("rmse_periodicity").get<double>();
  r.f1_vuv = j.at("f1_vuv").get<double>();
  r.n_frames_compared = j.at("n_frames_compared").get<std::size_t>();
  r.n_frames_total = j.value("n_frames_total", std::size_t{0});
  r.utterances = j.value("utterances", std::vector<UtteranceMetrics>{});
}

}  // namespace spotkit::eval
