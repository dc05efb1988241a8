#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace spotkit::eval {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct PlotSpec {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  double width = 640, height = 400;
};

std::string svg_lines(const PlotSpec& spec, const std::vector<Series>& series);
std::string svg_scatter(const PlotSpec& spec, const std::vector<Series>& series);
/// Bar chart of counts; labels may be empty (bars are then numbered).
std::string svg_histogram(const PlotSpec& spec, const std::vector<double>& counts,
                          const std::vector<std::string>& labels = {});

/// Each writer emits <stem>.svg and the backing data as <stem>.csv.
void write_line_plot(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<Series>& series);
void write_scatter_plot(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<Series>& series);
void write_histogram(const std::filesystem::path& stem, const PlotSpec& spec, const std::vector<double>& counts,
                     const std::vector<std::string>& labels = {});

}  // namespace spotkit::eval
