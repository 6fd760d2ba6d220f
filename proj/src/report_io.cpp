#include "peap/faithfulness.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace peap {

void write_report_csv(std::ostream& os, const FaithfulnessReport& r) {
  os << "mean_size,F_S,F_H" << (r.with_correct_rate ? ",correct_rate" : "") << ",budget,abstract_size\n";
  for (const auto& p : r.points) {
    os << fmt::format("{},{},{}", p.mean_size, p.soft, p.hard);
    if (r.with_correct_rate) os << fmt::format(",{}", p.correct_rate);
    os << fmt::format(",{},{}\n", p.budget, p.abstract_size);
  }
}

void save_report_csv(const std::filesystem::path& path, const FaithfulnessReport& r) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  write_report_csv(os, r);
}

FaithfulnessReport load_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("cannot open {}", path.string()));
  FaithfulnessReport r;
  r.mode = path.stem().string();
  std::string line;
  std::getline(is, line);
  if (line.rfind("mean_size,F_S,F_H", 0) != 0) throw DataError(fmt::format("{}:1: not a faithfulness report", path.string()));
  r.with_correct_rate = line.find("correct_rate") != std::string::npos;
  int no = 1;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    const std::size_t want = r.with_correct_rate ? 6 : 5;
    if (f.size() != want) throw DataError(fmt::format("{}:{}: expected {} fields", path.string(), no, want));
    FaithfulnessPoint p;
    try {
      std::size_t k = 0;
      p.mean_size = std::stod(f[k++]);
      p.soft = std::stod(f[k++]);
      p.hard = std::stod(f[k++]);
      if (r.with_correct_rate) p.correct_rate = std::stod(f[k++]);
      p.budget = std::stoll(f[k++]);
      p.abstract_size = std::stoll(f[k++]);
    } catch (const std::logic_error&) {
      throw DataError(fmt::format("{}:{}: bad number", path.string(), no));
    }
    r.points.push_back(p);
  }
  return r;
}

void save_report_svg(const std::filesystem::path& path, const std::vector<FaithfulnessReport>& reports,
                     const std::string& title) {
  const double W = 640, H = 400, left = 60, right = 150, top = 40, bottom = 50;
  double lo = 1e300, hi = 0, ymin = 0, ymax = 1;
  for (const auto& r : reports)
    for (const auto& p : r.points) {
      if (p.mean_size <= 0) continue;
      lo = std::min(lo, p.mean_size);
      hi = std::max(hi, p.mean_size);
      if (std::isfinite(p.soft)) {
        ymin = std::min(ymin, p.soft);
        ymax = std::max(ymax, p.soft);
      }
    }
  if (hi <= 0) lo = 1, hi = 10;
  if (hi <= lo) hi = lo * 10;
  const double l0 = std::log10(lo), l1 = std::log10(hi);
  auto px = [&](double v) { return left + (std::log10(v) - l0) / (l1 - l0) * (W - left - right); };
  auto py = [&](double v) { return H - bottom - (v - ymin) / (ymax - ymin) * (H - top - bottom); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream os;
  os << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">)",
                    W, H)
     << '\n';
  os << fmt::format(R"(<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>)", (W - right + left) / 2, title)
     << '\n';
  os << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>)", left, top,
                    W - left - right, H - top - bottom)
     << '\n';
  for (int e = static_cast<int>(std::ceil(l0)); e <= static_cast<int>(std::floor(l1)); ++e) {
    const double x = px(std::pow(10.0, e));
    os << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#ddd"/>)", x, top, H - bottom) << '\n';
    os << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">1e{}</text>)", x, H - bottom + 16, e) << '\n';
  }
  for (double y = std::ceil(ymin * 4) / 4; y <= ymax + 1e-9; y += 0.25)
    os << fmt::format(R"(<text x="{}" y="{}" text-anchor="end">{:.2f}</text>)", left - 6, py(y) + 4, y) << '\n';
  os << fmt::format(R"(<text x="{}" y="{}" text-anchor="middle">mean grounded edges</text>)", (W - right + left) / 2,
                    H - 12)
     << '\n';
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto* colour = colours[k % 6];
    for (int which = 0; which < 2; ++which) {
      std::string pts;
      for (const auto& p : reports[k].points) {
        const double v = which == 0 ? p.soft : p.hard;
        if (p.mean_size <= 0 || !std::isfinite(v)) continue;
        pts += fmt::format("{:.1f},{:.1f} ", px(p.mean_size), py(v));
      }
      os << fmt::format(R"(<polyline fill="none" stroke="{}" stroke-width="2"{} points="{}"/>)", colour,
                        which ? R"( stroke-dasharray="5,4")" : "", pts)
         << '\n';
    }
    const double ly = top + 16 + 18.0 * static_cast<double>(k);
    os << fmt::format(R"(<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"/>)", W - right + 10, ly,
                      W - right + 30, ly, colour)
       << fmt::format(R"(<text x="{}" y="{}">{}</text>)", W - right + 36, ly + 4, reports[k].mode) << '\n';
  }
  os << fmt::format(R"(<text x="{}" y="{}">solid F_S, dashed F_H</text>)", W - right + 10,
                    top + 16 + 18.0 * static_cast<double>(reports.size()) + 8)
     << "\n</svg>\n";
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << os.str();
}

}  // namespace peap
