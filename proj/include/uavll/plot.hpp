#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uavll/common.hpp"

namespace uavll {

/// Header plus rows of a comma-separated file without quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ArgumentError("column '" + name + "' not found");
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("'" + path + "' is empty");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) throw ConfigError("ragged row in '" + path + "'");
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Groups rows by `group` (one series per distinct value, in first-seen order).
/// An empty `group` yields a single series.
inline std::vector<Series> table_series(const CsvTable& t, const std::string& x, const std::string& y,
                                        const std::string& group = "") {
  const int xi = t.column(x), yi = t.column(y);
  const int gi = group.empty() ? -1 : t.column(group);
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (const auto& row : t.rows) {
    const std::string key = gi < 0 ? y : row[static_cast<std::size_t>(gi)];
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({key, {}, {}});
    }
    try {
      out[it->second].x.push_back(std::stod(row[static_cast<std::size_t>(xi)]));
      out[it->second].y.push_back(std::stod(row[static_cast<std::size_t>(yi)]));
    } catch (const std::exception&) {
      throw ConfigError("non-numeric value in column '" + x + "' or '" + y + "'");
    }
  }
  return out;
}

enum class ChartKind { Line, Bar };

namespace detail {

inline std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  return colors[i % 7];
}

}  // namespace detail

/// Line chart (one polyline per series) or grouped bar chart (bars are the
/// per-series mean of y) as a standalone SVG document.
inline std::string render_svg(const std::vector<Series>& series, ChartKind kind, const std::string& title,
                              const std::string& x_label, const std::string& y_label) {
  if (series.empty()) throw ArgumentError("nothing to plot");
  const double w = 720, h = 440, left = 80, right = 170, top = 40, bottom = 60;
  const double pw = w - left - right, ph = h - top - bottom;

  std::vector<double> bar_values;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (kind == ChartKind::Bar) {
      double acc = 0.0;
      for (double v : s.y) acc += v;
      const double m = s.y.empty() ? 0.0 : acc / static_cast<double>(s.y.size());
      bar_values.push_back(m);
      ymin = std::min(ymin, m);
      ymax = std::max(ymax, m);
    } else {
      for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
      for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
    }
  }
  if (kind == ChartKind::Bar) {
    ymin = std::min(0.0, ymin);
    ymax = std::max(0.0, ymax);
  }
  if (!std::isfinite(ymin)) ymin = 0.0, ymax = 1.0;
  if (!std::isfinite(xmin)) xmin = 0.0, xmax = 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  if (xmax == xmin) xmax = xmin + 1.0;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << ' ' << h << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << detail::esc(title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << detail::num(yv) << "</text>\n";
    if (kind == ChartKind::Line) {
      const double xv = xmin + (xmax - xmin) * k / 4.0;
      o << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << detail::num(xv) << "</text>\n";
    }
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 16
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << detail::esc(x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\""
    << " transform=\"rotate(-90 18 " << top + ph / 2 << ")\">" << detail::esc(y_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    o << "<g class=\"series\" data-label=\"" << detail::esc(s.label) << "\">\n";
    if (kind == ChartKind::Line) {
      o << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << detail::palette(i) << "\" points=\"";
      for (std::size_t k = 0; k < s.x.size(); ++k) o << (k ? " " : "") << detail::num(px(s.x[k])) << ',' << detail::num(py(s.y[k]));
      o << "\"/>\n";
    } else {
      const double slot = pw / static_cast<double>(series.size());
      const double bx = left + slot * (static_cast<double>(i) + 0.15);
      const double y0 = py(0.0), y1 = py(bar_values[i]);
      o << "<rect x=\"" << detail::num(bx) << "\" y=\"" << detail::num(std::min(y0, y1)) << "\" width=\""
        << detail::num(slot * 0.7) << "\" height=\"" << detail::num(std::abs(y1 - y0)) << "\" fill=\""
        << detail::palette(i) << "\"/>\n";
      o << "<text x=\"" << detail::num(bx + slot * 0.35) << "\" y=\"" << top + ph + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << detail::esc(s.label)
        << "</text>\n";
    }
    o << "</g>\n";
    const double ly = top + 14 + 18 * static_cast<double>(i);
    o << "<rect x=\"" << left + pw + 14 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"12\" fill=\""
      << detail::palette(i) << "\"/>\n";
    o << "<text x=\"" << left + pw + 32 << "\" y=\"" << ly + 1 << "\" font-family=\"sans-serif\" font-size=\"12\">"
      << detail::esc(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace uavll
