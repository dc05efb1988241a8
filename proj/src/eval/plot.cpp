#include "spotkit/eval/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace spotkit::eval {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
constexpr double kLeft = 64, kRight = 16, kTop = 32, kBottom = 48;

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!(lo <= hi)) lo = 0, hi = 1;
    if (hi == lo) lo -= 0.5, hi += 0.5;
  }
};

struct Frame {
  PlotSpec spec;
  Range xr, yr;
  double px(double x) const { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * (spec.width - kLeft - kRight); }
  double py(double y) const { return spec.height - kBottom - (y - yr.lo) / (yr.hi - yr.lo) * (spec.height - kTop - kBottom); }
};

void open_svg(std::ostringstream& os, const Frame& f) {
  const auto& s = f.spec;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << s.width << "\" height=\"" << s.height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << s.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(s.title)
     << "</text>\n";
  const double x0 = kLeft, x1 = s.width - kRight, y0 = s.height - kBottom, y1 = kTop;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.xr.lo + (f.xr.hi - f.xr.lo) * i / 4, yv = f.yr.lo + (f.yr.hi - f.yr.lo) * i / 4;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << y0 + 14 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
    os << "<text x=\"" << x0 - 4 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
  }
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << s.height - 10 << "\" text-anchor=\"middle\">" << esc(s.xlabel)
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << (y0 + y1) / 2 << ")\">" << esc(s.ylabel) << "</text>\n";
}

void legend(std::ostringstream& os, const Frame& f, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 14.0 * double(i) + 6;
    const double x = f.spec.width - kRight - 120;
    os << "<rect x=\"" << x << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[i % 7]
       << "\"/>\n";
    os << "<text x=\"" << x + 14 << "\" y=\"" << y + 1 << "\">" << esc(series[i].name) << "</text>\n";
  }
}

Frame frame_for(const PlotSpec& spec, const std::vector<Series>& series) {
  Frame f{spec, {}, {}};
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("plot: series '" + s.name + "' has unequal x and y");
    for (double v : s.x) f.xr.add(v);
    for (double v : s.y) f.yr.add(v);
  }
  f.xr.finish();
  f.yr.finish();
  return f;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

std::string series_csv(const std::vector<Series>& series) {
  std::ostringstream os;
  os << "series,x,y\n";
  os.precision(17);
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) os << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
  return os.str();
}

std::filesystem::path with_ext(std::filesystem::path stem, const char* ext) { return stem += ext; }

}  // namespace

std::string svg_lines(const PlotSpec& spec, const std::vector<Series>& series) {
  const auto f = frame_for(spec, series);
  std::ostringstream os;
  open_svg(os, f);
  for (std::size_t i = 0; i < series.size(); ++i) {
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 7] << "\" stroke-width=\"1.5\" points=\"";
    const auto& s = series[i];
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      os << num(f.px(s.x[k])) << ',' << num(f.py(s.y[k])) << ' ';
    }
    os << "\"/>\n";
  }
  legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

std::string svg_scatter(const PlotSpec& spec, const std::vector<Series>& series) {
  const auto f = frame_for(spec, series);
  std::ostringstream os;
  open_svg(os, f);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      os << "<circle cx=\"" << num(f.px(s.x[k])) << "\" cy=\"" << num(f.py(s.y[k])) << "\" r=\"2.5\" fill=\""
         << kPalette[i % 7] << "\"/>\n";
    }
  }
  legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

std::string svg_histogram(const PlotSpec& spec, const std::vector<double>& counts, const std::vector<std::string>& labels) {
  if (!labels.empty() && labels.size() != counts.size()) throw std::invalid_argument("histogram: label count mismatch");
  Frame f{spec, {}, {}};
  f.xr.lo = 0;
  f.xr.hi = double(std::max<std::size_t>(counts.size(), 1));
  f.yr.lo = 0;
  f.yr.hi = 0;
  for (double c : counts) f.yr.add(c);
  f.yr.lo = 0;
  f.yr.finish();
  std::ostringstream os;
  open_svg(os, f);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double x0 = f.px(double(i) + 0.1), x1 = f.px(double(i) + 0.9);
    const double y = f.py(std::max(0.0, counts[i])), base = f.py(0);
    os << "<rect x=\"" << num(x0) << "\" y=\"" << num(y) << "\" width=\"" << num(x1 - x0) << "\" height=\""
       << num(base - y) << "\" fill=\"" << kPalette[0] << "\"><title>"
       << esc(labels.empty() ? std::to_string(i) : labels[i]) << ": " << num(counts[i]) << "</title></rect>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_line_plot(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<Series>& series) {
  write_text(with_ext(stem, ".svg"), svg_lines(spec, series));
  write_text(with_ext(stem, ".csv"), series_csv(series));
}

void write_scatter_plot(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<Series>& series) {
  write_text(with_ext(stem, ".svg"), svg_scatter(spec, series));
  write_text(with_ext(stem, ".csv"), series_csv(series));
}

void write_histogram(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<double>& counts,
                     const std::vector<std::string>& labels) {
  write_text(with_ext(stem, ".svg"), svg_histogram(spec, counts, labels));
  std::ostringstream os;
  os << "bin,count\n";
  os.precision(17);
  for (std::size_t i = 0; i < counts.size(); ++i) os << (labels.empty() ? std::to_string(i) : labels[i]) << ',' << counts[i] << '\n';
  write_text(with_ext(stem, ".csv"), os.str());
}

}  // namespace spotkit::eval
