#include "spotkit/signal/pitch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace spotkit::signal {

std::size_t PitchConfig::min_lag() const {
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::floor(sample_rate / fmax)));
}

std::size_t PitchConfig::max_lag() const {
  return static_cast<std::size_t>(std::ceil(sample_rate / fmin));
}

void PitchConfig::validate() const {
  if (sample_rate < 8000) throw std::invalid_argument("PitchConfig: sample_rate must be at least 8000 Hz");
  if (hop_length == 0 || window == 0) throw std::invalid_argument("PitchConfig: sizes must be positive");
  if (!(fmin > 0) || !(fmax > fmin) || fmax >= sample_rate / 2.0) {
    throw std::invalid_argument("PitchConfig: invalid search range [" + std::to_string(fmin) + ", " +
                                std::to_string(fmax) + "] Hz for Nyquist " +
                                std::to_string(sample_rate / 2.0) + " Hz");
  }
  if (max_lag() + 2 >= window) {
    throw std::invalid_argument("PitchConfig: fmin " + std::to_string(fmin) +
                                " Hz needs a lag longer than the analysis window");
  }
  if (max_lag() <= min_lag() + 1) throw std::invalid_argument("PitchConfig: search range too narrow");
}

std::size_t PitchTrack::voiced_count() const {
  return static_cast<std::size_t>(std::count(vuv.begin(), vuv.end(), true));
}

PitchTrack estimate_f0_vuv(const Waveform& wave, const PitchConfig& cfg) {
  cfg.validate();
  if (wave.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("estimate_f0_vuv: waveform rate " + std::to_string(wave.sample_rate) +
                                " Hz differs from config rate " + std::to_string(cfg.sample_rate) + " Hz");
  }
  const std::size_t n = wave.samples.size();
  const std::size_t T = 1 + n / cfg.hop_length;
  const std::size_t half = cfg.window / 2;
  const std::size_t tau_min = cfg.min_lag(), tau_max = cfg.max_lag();
  const std::size_t W = cfg.window - tau_max - 1;

  PitchTrack track;
  track.f0_hz.assign(T, 0.0);
  track.vuv.assign(T, false);
  track.periodicity.assign(T, 0.0);

  std::vector<double> buf(cfg.window);
  std::vector<double> d(tau_max + 2), dn(tau_max + 2);
  for (std::size_t t = 0; t < T; ++t) {
    const auto start = static_cast<std::ptrdiff_t>(t * cfg.hop_length) - static_cast<std::ptrdiff_t>(half);
    double energy = 0;
    for (std::size_t i = 0; i < cfg.window; ++i) {
      const std::ptrdiff_t j = start + static_cast<std::ptrdiff_t>(i);
      buf[i] = (j >= 0 && j < static_cast<std::ptrdiff_t>(n)) ? wave.samples[static_cast<std::size_t>(j)] : 0.0;
      energy += buf[i] * buf[i];
    }
    const double rms = std::sqrt(energy / cfg.window);

    // Both halves of the comparison straddle the frame centre, so the
    // estimate refers to the same instant for every lag.
    d[0] = 0;
    for (std::size_t tau = 1; tau <= tau_max + 1; ++tau) {
      const std::size_t a0 = (tau_max + 1 - tau) / 2;
      double s = 0;
      for (std::size_t j = 0; j < W; ++j) {
        const double diff = buf[a0 + j] - buf[a0 + j + tau];
        s += diff * diff;
      }
      d[tau] = s;
    }
    dn[0] = 1;
    double running = 0;
    for (std::size_t tau = 1; tau <= tau_max + 1; ++tau) {
      running += d[tau];
      dn[tau] = running > 0 ? d[tau] * static_cast<double>(tau) / running : 1.0;
    }

    // First dip under the threshold, followed down to its local minimum;
    // otherwise the global minimum of the search range.
    std::size_t best = 0;
    for (std::size_t tau = tau_min; tau <= tau_max; ++tau) {
      if (dn[tau] < cfg.yin_threshold) {
        while (tau + 1 <= tau_max && dn[tau + 1] < dn[tau]) ++tau;
        best = tau;
        break;
      }
    }
    if (best == 0) {
      best = tau_min;
      for (std::size_t tau = tau_min; tau <= tau_max; ++tau)
        if (dn[tau] < dn[best]) best = tau;
    }

    double lag = static_cast<double>(best);
    double dmin = dn[best];
    if (best > 1 && best + 1 <= tau_max + 1) {
      const double a = dn[best - 1], b = dn[best], c = dn[best + 1];
      const double denom = a - 2 * b + c;
      if (denom > 0) {
        const double shift = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
        lag += shift;
        dmin = b - 0.25 * (a - c) * shift;
      }
    }
    const double period = std::clamp(1.0 - dmin, 0.0, 1.0);
    track.periodicity[t] = period;
    const bool voiced = period >= cfg.voicing_threshold && rms >= cfg.energy_floor;
    track.vuv[t] = voiced;
    track.f0_hz[t] = voiced ? cfg.sample_rate / lag : 0.0;
  }
  return track;
}

void save_pitch_csv(const std::filesystem::path& path, const PitchTrack& track) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "frame,f0_hz,vuv,periodicity\n";
  out.precision(9);
  for (std::size_t t = 0; t < track.size(); ++t) {
    out << t << ',' << track.f0_hz[t] << ',' << (track.vuv[t] ? 1 : 0) << ',' << track.periodicity[t] << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

PitchTrack load_pitch_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "frame,f0_hz,vuv,periodicity")
    throw std::runtime_error(path.string() + ": expected header frame,f0_hz,vuv,periodicity");
  PitchTrack track;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    std::size_t frame = 0;
    double f0 = 0, per = 0;
    int v = 0;
    if (!(row >> frame >> f0 >> v >> per) || frame != track.size()) {
      throw std::runtime_error(path.string() + ": bad row at line " + std::to_string(lineno));
    }
    if ((v != 0) != (f0 > 0)) {
      throw std::runtime_error(path.string() + ": vuv disagrees with f0 at line " + std::to_string(lineno));
    }
    track.f0_hz.push_back(f0);
    track.vuv.push_back(v != 0);
    track.periodicity.push_back(std::clamp(per, 0.0, 1.0));
  }
  return track;
}

}  // namespace spotkit::signal
