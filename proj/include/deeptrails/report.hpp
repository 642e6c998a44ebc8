#pragma once

// Tabular outputs (CSV) and static SVG plots. Numbers are printed with a
// fixed format so identical runs produce identical bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "deeptrails/errors.hpp"
#include "deeptrails/markov_baseline.hpp"
#include "deeptrails/trails_eval.hpp"

namespace deeptrails {

inline std::string fmt_num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number: '" + s + "'");
  }
}

// ---------------------------------------------------------------------------
// Tables

/// hypothesis,step,mean_loss,mean_rank,count
inline std::string rank_curves_csv(const std::vector<HypothesisResult>& results) {
  std::string out = "hypothesis,step,mean_loss,mean_rank,count\n";
  for (const auto& r : results) {
    for (std::size_t t = 0; t < r.stats.mean_rank.size(); ++t) {
      out += csv_field(r.name) + ',' + std::to_string(t) + ',' + fmt_num(r.stats.mean_loss[t]) + ',' +
             fmt_num(r.stats.mean_rank[t]) + ',' + std::to_string(r.stats.count[t]) + '\n';
    }
  }
  return out;
}

/// Rebuilds per-position curves from rank_curves_csv output.
inline std::vector<HypothesisResult> parse_rank_curves_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("hypothesis,step", 0) != 0) {
    throw FormatError("rank curve table: missing header");
  }
  std::vector<HypothesisResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = "rank curve table line " + std::to_string(lineno);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields");
    if (out.empty() || out.back().name != f[0]) out.push_back({f[0], {}});
    auto& s = out.back().stats;
    const auto step = static_cast<std::size_t>(parse_number(f[1], where));
    if (step != s.mean_rank.size()) throw FormatError(where + ": steps out of order");
    s.mean_loss.push_back(parse_number(f[2], where));
    s.mean_rank.push_back(parse_number(f[3], where));
    s.count.push_back(static_cast<std::size_t>(parse_number(f[4], where)));
  }
  for (auto& r : out) {
    double l = 0, k = 0, n = 0;
    for (std::size_t t = 0; t < r.stats.count.size(); ++t) {
      const auto c = static_cast<double>(r.stats.count[t]);
      l += r.stats.mean_loss[t] * c;
      k += r.stats.mean_rank[t] * c;
      n += c;
    }
    r.stats.overall_loss = n > 0 ? l / n : 0.0;
    r.stats.overall_rank = n > 0 ? k / n : 0.0;
  }
  return out;
}

/// hypothesis,mean_loss,mean_rank,position  (position 1 = lowest mean loss)
inline std::string hypothesis_summary_csv(const HypTrailsReport& report) {
  std::vector<std::size_t> position(report.results.size());
  for (std::size_t i = 0; i < report.ranking.size(); ++i) position[report.ranking[i]] = i + 1;
  std::string out = "hypothesis,mean_loss,mean_rank,position\n";
  for (std::size_t i = 0; i < report.results.size(); ++i) {
    const auto& r = report.results[i];
    out += csv_field(r.name) + ',' + fmt_num(r.stats.overall_loss) + ',' + fmt_num(r.stats.overall_rank) + ',' +
           std::to_string(position[i]) + '\n';
  }
  return out;
}

/// First column holds row labels; header holds column labels.
inline std::string loss_matrix_csv(const LossMatrix& m) {
  std::string out = "feature_set";
  for (const auto& c : m.col_labels) out += ',' + csv_field(c);
  out += '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out += csv_field(m.row_labels[r]);
    for (std::size_t c = 0; c < m.cols(); ++c) out += ',' + fmt_num(m.at(r, c));
    out += '\n';
  }
  return out;
}

inline LossMatrix parse_loss_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("loss matrix table: empty");
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "feature_set") throw FormatError("loss matrix table: missing header");
  LossMatrix m;
  m.col_labels.assign(header.begin() + 1, header.end());
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = "loss matrix line " + std::to_string(lineno);
    if (f.size() != m.col_labels.size() + 1) throw FormatError(where + ": wrong number of fields");
    m.row_labels.push_back(f[0]);
    for (std::size_t i = 1; i < f.size(); ++i) m.values.push_back(parse_number(f[i], where));
  }
  return m;
}

/// label,cluster,x,y
inline std::string clusters_csv(const std::vector<std::string>& labels, const ClusterResult& c) {
  std::string out = "label,cluster,x,y\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out += csv_field(labels[i]) + ',' + std::to_string(c.cluster[i]) + ',' + fmt_num(c.coords[i][0]) + ',' +
           fmt_num(c.coords[i][1]) + '\n';
  }
  return out;
}

struct ScatterPoint {
  std::string label;
  int group = 0;
  double x = 0.0;
  double y = 0.0;
};

inline std::vector<ScatterPoint> parse_clusters_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("label,", 0) != 0) throw FormatError("cluster table: missing header");
  std::vector<ScatterPoint> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = "cluster table line " + std::to_string(lineno);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    out.push_back({f[0], static_cast<int>(parse_number(f[1], where)), parse_number(f[2], where),
                   parse_number(f[3], where)});
  }
  return out;
}

/// hypothesis,kappa,evidence
inline std::string evidence_csv(const EvidenceTable& t) {
  std::string out = "hypothesis,kappa,evidence\n";
  for (std::size_t h = 0; h < t.hypotheses.size(); ++h) {
    for (std::size_t k = 0; k < t.kappas.size(); ++k) {
      out += csv_field(t.hypotheses[h]) + ',' + fmt_num(t.kappas[k]) + ',' + fmt_num(t.evidence[h][k]) + '\n';
    }
  }
  return out;
}

inline EvidenceTable parse_evidence_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("hypothesis,kappa", 0) != 0) {
    throw FormatError("evidence table: missing header");
  }
  EvidenceTable t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = "evidence table line " + std::to_string(lineno);
    if (f.size() != 3) throw FormatError(where + ": expected 3 fields");
    if (t.hypotheses.empty() || t.hypotheses.back() != f[0]) {
      t.hypotheses.push_back(f[0]);
      t.evidence.emplace_back();
    }
    const double k = parse_number(f[1], where);
    if (t.hypotheses.size() == 1) t.kappas.push_back(k);
    t.evidence.back().push_back(parse_number(f[2], where));
  }
  for (const auto& row : t.evidence) {
    if (row.size() != t.kappas.size()) throw FormatError("evidence table: ragged kappa grid");
  }
  return t;
}

// ---------------------------------------------------------------------------
// SVG

namespace svg {

inline std::string escape(const std::string& s) {
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

inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

inline const std::array<const char*, 10>& palette() {
  static const std::array<const char*, 10> p{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                             "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return p;
}

inline std::string header(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + ' ' + num(h) + "\" font-family=\"sans-serif\" font-size=\"11\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string text(double x, double y, const std::string& s, const char* anchor = "start") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\">" + escape(s) + "</text>\n";
}

/// Sequential blue-to-red ramp for t in [0, 1].
inline std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(49 + t * (215 - 49)));
  const int g = static_cast<int>(std::lround(54 + t * (48 - 54) + 120 * (1 - std::abs(2 * t - 1))));
  const int b = static_cast<int>(std::lround(149 + t * (39 - 149)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace svg

/// One polyline per hypothesis (x = decoding step, y = mean rank on [1, V]).
/// Hypotheses without data are skipped and reported in `warnings`.
inline std::string render_rank_curves(const std::vector<HypothesisResult>& results, int vocab_size,
                                      std::vector<std::string>* warnings = nullptr) {
  std::vector<const HypothesisResult*> shown;
  for (const auto& r : results) {
    const bool empty = r.stats.mean_rank.empty() ||
                       std::all_of(r.stats.count.begin(), r.stats.count.end(), [](std::size_t c) { return c == 0; });
    if (empty) {
      if (warnings) warnings->push_back("hypothesis '" + r.name + "' has no data and was left out of the plot");
    } else {
      shown.push_back(&r);
    }
  }
  if (shown.empty()) throw UsageError("no rank curves to plot");
  std::size_t steps = 0;
  for (const auto* r : shown) steps = std::max(steps, r->stats.mean_rank.size());

  const double W = 640, H = 400, L = 60, R = 190, T = 20, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const double ymin = 1.0, ymax = std::max(2.0, static_cast<double>(vocab_size));
  const double xmax = std::max<double>(1.0, static_cast<double>(steps - 1));
  auto X = [&](double s) { return L + s / xmax * pw; };
  auto Y = [&](double r) { return T + (1.0 - (r - ymin) / (ymax - ymin)) * ph; };

  std::string s = svg::header(W, H);
  s += "<rect x=\"" + svg::num(L) + "\" y=\"" + svg::num(T) + "\" width=\"" + svg::num(pw) + "\" height=\"" +
       svg::num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (std::size_t t = 0; t < steps; t += std::max<std::size_t>(1, steps / 10)) {
    s += svg::text(X(static_cast<double>(t)), T + ph + 15, std::to_string(t), "middle");
  }
  for (int k = 0; k <= 4; ++k) {
    const double r = ymin + (ymax - ymin) * k / 4.0;
    s += svg::text(L - 5, Y(r) + 4, fmt_num(std::round(r)), "end");
  }
  s += svg::text(L + pw / 2, H - 12, "decoding step", "middle");
  s += "<text x=\"15\" y=\"" + svg::num(T + ph / 2) + "\" transform=\"rotate(-90 15 " + svg::num(T + ph / 2) +
       ")\" text-anchor=\"middle\">mean target rank</text>\n";
  for (std::size_t i = 0; i < shown.size(); ++i) {
    const auto& st = shown[i]->stats;
    const char* color = svg::palette()[i % svg::palette().size()];
    s += "<polyline class=\"curve\" fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t t = 0; t < st.mean_rank.size(); ++t) {
      if (t) s += ' ';
      s += svg::num(X(static_cast<double>(t))) + ',' + svg::num(Y(st.mean_rank[t]));
    }
    s += "\"/>\n";
    const double ly = T + 15 + 16.0 * static_cast<double>(i);
    s += "<line x1=\"" + svg::num(W - R + 10) + "\" y1=\"" + svg::num(ly - 4) + "\" x2=\"" + svg::num(W - R + 30) +
         "\" y2=\"" + svg::num(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    char legend[64];
    std::snprintf(legend, sizeof legend, " (%.3f)", st.overall_loss);
    s += svg::text(W - R + 35, ly, shown[i]->name + legend);
  }
  return s + "</svg>\n";
}

/// Labeled color grid; the scale is annotated with the minimum and maximum loss.
inline std::string render_heatmap(const LossMatrix& m) {
  if (m.rows() == 0 || m.cols() == 0) throw UsageError("empty loss matrix");
  const double lo = *std::min_element(m.values.begin(), m.values.end());
  const double hi = *std::max_element(m.values.begin(), m.values.end());
  const double cell = 14, L = 110, T = 20, B = 90;
  const double W = L + cell * static_cast<double>(m.cols()) + 90;
  const double H = T + cell * static_cast<double>(m.rows()) + B;
  std::string s = svg::header(W, H);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double y = T + cell * static_cast<double>(r);
    s += svg::text(L - 4, y + cell * 0.75, m.row_labels[r], "end");
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double t = hi > lo ? (m.at(r, c) - lo) / (hi - lo) : 0.5;
      s += "<rect class=\"cell\" x=\"" + svg::num(L + cell * static_cast<double>(c)) + "\" y=\"" + svg::num(y) +
           "\" width=\"" + svg::num(cell) + "\" height=\"" + svg::num(cell) + "\" fill=\"" + svg::ramp(t) + "\"/>\n";
    }
  }
  const double ly = T + cell * static_cast<double>(m.rows()) + 6;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const double x = L + cell * (static_cast<double>(c) + 0.5);
    s += "<text x=\"" + svg::num(x) + "\" y=\"" + svg::num(ly) + "\" transform=\"rotate(90 " + svg::num(x) + ' ' +
         svg::num(ly) + ")\" font-size=\"9\">" + svg::escape(m.col_labels[c]) + "</text>\n";
  }
  const double sx = W - 70;
  for (int k = 0; k < 20; ++k) {
    s += "<rect x=\"" + svg::num(sx) + "\" y=\"" + svg::num(T + 20 + 6.0 * (19 - k)) +
         "\" width=\"12\" height=\"6\" fill=\"" + svg::ramp(k / 19.0) + "\"/>\n";
  }
  s += svg::text(sx, T + 14, "max " + fmt_num(hi));
  s += svg::text(sx, T + 20 + 6.0 * 20 + 12, "min " + fmt_num(lo));
  return s + "</svg>\n";
}

/// 2-D points colored by group id.
inline std::string render_scatter(const std::vector<ScatterPoint>& points, const std::string& title = "") {
  if (points.empty()) throw UsageError("scatter plot needs at least one point");
  double x0 = points[0].x, x1 = x0, y0 = points[0].y, y1 = y0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  if (x1 - x0 < 1e-12) { x0 -= 1; x1 += 1; }
  if (y1 - y0 < 1e-12) { y0 -= 1; y1 += 1; }
  const double W = 480, H = 480, M = 40;
  std::string s = svg::header(W, H);
  if (!title.empty()) s += svg::text(W / 2, 18, title, "middle");
  for (const auto& p : points) {
    const double cx = M + (p.x - x0) / (x1 - x0) * (W - 2 * M);
    const double cy = H - M - (p.y - y0) / (y1 - y0) * (H - 2 * M);
    const char* color = p.group < 0 ? "#000000" : svg::palette()[static_cast<std::size_t>(p.group) % svg::palette().size()];
    s += "<circle class=\"point\" cx=\"" + svg::num(cx) + "\" cy=\"" + svg::num(cy) + "\" r=\"4\" fill=\"" + color +
         "\"><title>" + svg::escape(p.label) + "</title></circle>\n";
  }
  return s + "</svg>\n";
}

/// Evidence per hypothesis against the concentration factor (log1p x axis).
inline std::string render_evidence(const EvidenceTable& t) {
  if (t.hypotheses.empty() || t.kappas.empty()) throw UsageError("empty evidence table");
  double lo = t.evidence[0][0], hi = lo, kmax = 0.0;
  for (const auto& row : t.evidence) {
    for (double e : row) {
      lo = std::min(lo, e);
      hi = std::max(hi, e);
    }
  }
  for (double k : t.kappas) kmax = std::max(kmax, k);
  if (hi - lo < 1e-12) { lo -= 1; hi += 1; }
  const double W = 640, H = 400, L = 90, R = 160, T = 20, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const double xmax = std::max(std::log1p(kmax), 1e-12);
  auto X = [&](double k) { return L + std::log1p(k) / xmax * pw; };
  auto Y = [&](double e) { return T + (1.0 - (e - lo) / (hi - lo)) * ph; };
  std::string s = svg::header(W, H);
  s += "<rect x=\"" + svg::num(L) + "\" y=\"" + svg::num(T) + "\" width=\"" + svg::num(pw) + "\" height=\"" +
       svg::num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double k : t.kappas) s += svg::text(X(k), T + ph + 15, fmt_num(k), "middle");
  s += svg::text(L + pw / 2, H - 12, "concentration factor", "middle");
  s += svg::text(L - 5, T + 10, fmt_num(hi), "end");
  s += svg::text(L - 5, T + ph, fmt_num(lo), "end");
  for (std::size_t h = 0; h < t.hypotheses.size(); ++h) {
    const char* color = svg::palette()[h % svg::palette().size()];
    s += "<polyline class=\"curve\" fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < t.kappas.size(); ++k) {
      if (k) s += ' ';
      s += svg::num(X(t.kappas[k])) + ',' + svg::num(Y(t.evidence[h][k]));
    }
    s += "\"/>\n";
    s += svg::text(W - R + 10, T + 15 + 16.0 * static_cast<double>(h), t.hypotheses[h]);
  }
  return s + "</svg>\n";
}

inline std::vector<ScatterPoint> scatter_points(const std::vector<std::string>& labels, const ClusterResult& c) {
  std::vector<ScatterPoint> out;
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back({labels[i], c.cluster[i], c.coords[i][0], c.coords[i][1]});
  return out;
}

}  // namespace deeptrails
