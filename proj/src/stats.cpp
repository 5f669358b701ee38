#include "tsce/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include "json.hpp"

namespace tsce {

namespace {

std::vector<std::vector<double>> value_rows(const AccuracyTable& table) {
  table.validate();
  std::vector<std::vector<double>> rows(table.classifiers.size());
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t d = 0; d < table.datasets.size(); ++d) rows[c].push_back(table.at(c, d).value);
  return rows;
}

// Average ranks of `values` in ascending order (rank 1 = smallest).
std::vector<double> rank_ascending(const std::vector<double>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return values[x] < values[y]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double normal_upper_tail(double z) { return 0.5 * boost::math::erfc(z / std::sqrt(2.0)); }

}  // namespace

std::vector<double> rank_descending(const std::vector<double>& values) {
  std::vector<double> neg(values.size());
  std::transform(values.begin(), values.end(), neg.begin(), [](double v) { return -v; });
  return rank_ascending(neg);
}

RankTable average_ranks(const AccuracyTable& table) {
  const auto rows = value_rows(table);
  const std::size_t k = rows.size(), n = table.datasets.size();
  if (k < 2) throw SpecError("ranking needs at least 2 classifiers");
  if (n < 1) throw SpecError("ranking needs at least 1 dataset");
  RankTable r;
  r.classifiers = table.classifiers;
  r.datasets = table.datasets;
  r.ranks.assign(k, std::vector<double>(n));
  r.average.assign(k, 0.0);
  r.wins.assign(k, 0);
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> col(k);
    for (std::size_t c = 0; c < k; ++c) col[c] = rows[c][d];
    const auto ranks = rank_descending(col);
    const double best = *std::max_element(col.begin(), col.end());
    const auto n_best = std::count(col.begin(), col.end(), best);
    for (std::size_t c = 0; c < k; ++c) {
      r.ranks[c][d] = ranks[c];
      r.average[c] += ranks[c];
      if (n_best == 1 && col[c] == best) ++r.wins[c];
    }
    if (n_best > 1) ++r.shared_top;
  }
  for (auto& a : r.average) a /= double(n);
  return r;
}

FriedmanResult friedman_test(const AccuracyTable& table) {
  const auto rows = value_rows(table);
  const std::size_t k = rows.size(), n = table.datasets.size();
  if (k < 3) throw SpecError("the Friedman test needs at least 3 classifiers");
  if (n < 2) throw SpecError("the Friedman test needs at least 2 datasets");
  const RankTable r = average_ranks(table);

  double tie_sum = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> col(k);
    for (std::size_t c = 0; c < k; ++c) col[c] = r.ranks[c][d];
    std::sort(col.begin(), col.end());
    for (std::size_t i = 0; i < k;) {
      std::size_t j = i;
      while (j + 1 < k && col[j + 1] == col[i]) ++j;
      const double t = double(j - i + 1);
      tie_sum += t * t * t - t;
      i = j + 1;
    }
  }
  const double kd = double(k), nd = double(n);
  const double correction = 1.0 - tie_sum / (nd * (kd * kd * kd - kd));
  FriedmanResult out;
  out.degrees_of_freedom = int(k) - 1;
  if (correction <= 1e-12) return out;  // every dataset fully tied

  double ss = 0.0;
  for (double a : r.average) ss += (a - (kd + 1.0) / 2.0) * (a - (kd + 1.0) / 2.0);
  out.statistic = 12.0 * nd / (kd * (kd + 1.0)) * ss / correction;
  out.p_value = boost::math::gamma_q(out.degrees_of_freedom / 2.0, out.statistic / 2.0);
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw SpecError("wilcoxon: paired samples differ in length");
  if (a.empty()) throw SpecError("wilcoxon: no pairs");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) diff.push_back(a[i] - b[i]);

  WilcoxonResult out;
  out.n_used = int(diff.size());
  if (diff.empty()) {
    out.degenerate = true;
    out.exact = true;
    return out;
  }
  std::vector<double> mags(diff.size());
  std::transform(diff.begin(), diff.end(), mags.begin(), [](double d) { return std::abs(d); });
  const auto ranks = rank_ascending(mags);
  for (std::size_t i = 0; i < diff.size(); ++i) (diff[i] > 0 ? out.w_plus : out.w_minus) += ranks[i];
  out.statistic = std::min(out.w_plus, out.w_minus);
  const std::size_t n = diff.size();

  if (int(n) <= kWilcoxonExactLimit) {
    // Null distribution of the doubled positive rank sum (integer even with
    // half ranks): each rank enters with probability 1/2.
    std::vector<int> doubled(n);
    int total = 0;
    for (std::size_t i = 0; i < n; ++i) total += doubled[i] = int(std::lround(2.0 * ranks[i]));
    std::vector<double> count(std::size_t(total) + 1, 0.0);
    count[0] = 1.0;
    for (int r : doubled)
      for (int s = total; s >= r; --s) count[std::size_t(s)] += count[std::size_t(s - r)];
    const int t = int(std::lround(2.0 * out.statistic));
    double le = 0.0;
    for (int s = 0; s <= t; ++s) le += count[std::size_t(s)];
    out.p_value = std::min(1.0, 2.0 * le / std::ldexp(1.0, int(n)));
    out.exact = true;
    return out;
  }

  const double nd = double(n);
  double tie_sum = 0.0;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = double(j - i + 1);
    tie_sum += t * t * t - t;
    i = j + 1;
  }
  const double mean = nd * (nd + 1.0) / 4.0;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_sum / 48.0;
  const double z = std::max(0.0, std::abs(out.w_plus - mean) - 0.5) / std::sqrt(var);
  out.p_value = std::min(1.0, 2.0 * normal_upper_tail(z));
  return out;
}

std::vector<bool> holm_correction(const std::vector<double>& p_values, double alpha) {
  for (double p : p_values)
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("holm: p-values must lie in [0, 1]");
  const std::size_t m = p_values.size();
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return p_values[x] < p_values[y]; });
  std::vector<bool> out(m, false);
  for (std::size_t i = 0; i < m; ++i) {
    if (p_values[idx[i]] > alpha / double(m - i)) break;
    out[idx[i]] = true;
  }
  return out;
}

std::vector<PairwiseTestResult> pairwise_tests(const AccuracyTable& table, double alpha) {
  const auto rows = value_rows(table);
  std::vector<PairwiseTestResult> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      out.push_back({i, j, wilcoxon_signed_rank(rows[i], rows[j]), false});
  std::vector<double> p;
  for (const auto& r : out) p.push_back(r.test.p_value);
  const auto decisions = holm_correction(p, alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].significant = decisions[i];
  return out;
}

CDDiagram form_cliques(const RankTable& ranks, const std::vector<PairwiseTestResult>& pairwise) {
  const std::size_t k = ranks.classifiers.size();
  std::vector<std::vector<int>> seen(k, std::vector<int>(k, 0));
  std::vector<std::vector<bool>> linked(k, std::vector<bool>(k, false));
  for (const auto& p : pairwise) {
    if (p.a >= k || p.b >= k || p.a == p.b) throw SpecError("pairwise result names an unknown pair");
    ++seen[p.a][p.b];
    ++seen[p.b][p.a];
    linked[p.a][p.b] = linked[p.b][p.a] = !p.significant;
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j)
      if (seen[i][j] != 1)
        throw SpecError("pairwise results must cover every classifier pair exactly once (" +
                        ranks.classifiers[i] + ", " + ranks.classifiers[j] + ")");

  CDDiagram d;
  d.classifiers = ranks.classifiers;
  d.average_ranks = ranks.average;
  d.order.resize(k);
  std::iota(d.order.begin(), d.order.end(), 0);
  std::stable_sort(d.order.begin(), d.order.end(),
                   [&](auto x, auto y) { return ranks.average[x] < ranks.average[y]; });
  std::vector<std::size_t> position(k);
  for (std::size_t i = 0; i < k; ++i) position[d.order[i]] = i;

  // Bron-Kerbosch with pivoting over the "not significantly different" graph.
  std::vector<std::vector<std::size_t>> found;
  auto bk = [&](auto&& self, std::vector<std::size_t> r, std::vector<std::size_t> p,
                std::vector<std::size_t> x) -> void {
    if (p.empty() && x.empty()) {
      if (r.size() >= 2) found.push_back(r);
      return;
    }
    std::size_t pivot = p.empty() ? x.front() : p.front();
    std::vector<std::size_t> candidates;
    for (auto v : p)
      if (!linked[pivot][v]) candidates.push_back(v);
    for (auto v : candidates) {
      std::vector<std::size_t> r2 = r, p2, x2;
      r2.push_back(v);
      for (auto u : p)
        if (linked[v][u]) p2.push_back(u);
      for (auto u : x)
        if (linked[v][u]) x2.push_back(u);
      self(self, std::move(r2), std::move(p2), std::move(x2));
      p.erase(std::find(p.begin(), p.end(), v));
      x.push_back(v);
    }
  };
  std::vector<std::size_t> all(k);
  std::iota(all.begin(), all.end(), 0);
  bk(bk, {}, all, {});

  for (auto& c : found)
    std::sort(c.begin(), c.end(), [&](auto x, auto y) { return position[x] < position[y]; });
  std::sort(found.begin(), found.end(), [&](const auto& x, const auto& y) {
    if (position[x.front()] != position[y.front()]) return position[x.front()] < position[y.front()];
    return position[x.back()] < position[y.back()];
  });
  d.cliques = std::move(found);
  return d;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

constexpr double kWidth = 800.0;
constexpr double kAxisLeft = 160.0;
constexpr double kAxisRight = 640.0;
constexpr double kAxisY = 60.0;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
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

}  // namespace

double cd_axis_position(double rank, std::size_t k) {
  if (k < 2) return (kAxisLeft + kAxisRight) / 2.0;
  return kAxisLeft + (rank - 1.0) / double(k - 1) * (kAxisRight - kAxisLeft);
}

std::string render_cd_svg(const CDDiagram& d) {
  const std::size_t k = d.classifiers.size();
  const std::size_t left_count = (k + 1) / 2;
  const double clique_top = kAxisY + 20.0;
  const double label_top = clique_top + 12.0 * double(d.cliques.size()) + 20.0;
  const double height = label_top + 22.0 * double(std::max(left_count, k - left_count)) + 20.0;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
    << num(height) << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << num(kAxisLeft) << "\" y1=\"" << num(kAxisY) << "\" x2=\"" << num(kAxisRight)
    << "\" y2=\"" << num(kAxisY) << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  for (std::size_t r = 1; r <= std::max<std::size_t>(k, 1); ++r) {
    const double x = cd_axis_position(double(r), k);
    s << "<line x1=\"" << num(x) << "\" y1=\"" << num(kAxisY - 6) << "\" x2=\"" << num(x)
      << "\" y2=\"" << num(kAxisY) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << num(x) << "\" y=\"" << num(kAxisY - 10)
      << "\" text-anchor=\"middle\">" << r << "</text>\n";
  }
  for (std::size_t c = 0; c < d.cliques.size(); ++c) {
    const auto& q = d.cliques[c];
    const double x1 = cd_axis_position(d.average_ranks[q.front()], k) - 4.0;
    const double x2 = cd_axis_position(d.average_ranks[q.back()], k) + 4.0;
    const double y = clique_top + 12.0 * double(c);
    s << "<line class=\"clique\" x1=\"" << num(x1) << "\" y1=\"" << num(y) << "\" x2=\"" << num(x2)
      << "\" y2=\"" << num(y) << "\" stroke=\"black\" stroke-width=\"5\"/>\n";
  }
  for (std::size_t i = 0; i < d.order.size(); ++i) {
    const std::size_t c = d.order[i];
    const bool left = i < left_count;
    const std::size_t slot = left ? i : k - 1 - i;
    const double x = cd_axis_position(d.average_ranks[c], k);
    const double y = label_top + 22.0 * double(slot);
    const double tx = left ? kAxisLeft - 10.0 : kAxisRight + 10.0;
    s << "<polyline points=\"" << num(x) << "," << num(kAxisY) << " " << num(x) << "," << num(y)
      << " " << num(tx) << "," << num(y) << "\" fill=\"none\" stroke=\"black\"/>\n";
    s << "<text class=\"label\" x=\"" << num(left ? tx - 4.0 : tx + 4.0) << "\" y=\"" << num(y + 4.0)
      << "\" text-anchor=\"" << (left ? "end" : "start") << "\">"
      << xml_escape(d.classifiers[c]) << " (" << num(d.average_ranks[c]) << ")</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string render_cd_text(const CDDiagram& d) {
  const std::size_t k = d.classifiers.size();
  constexpr int kCols = 61;
  auto col = [&](double rank) {
    if (k < 2) return kCols / 2;
    return int(std::lround((rank - 1.0) / double(k - 1) * (kCols - 1)));
  };
  std::size_t name_width = 0;
  for (const auto& c : d.classifiers) name_width = std::max(name_width, c.size());

  std::ostringstream s;
  std::string axis(kCols, '-');
  for (std::size_t r = 1; r <= k; ++r) axis[std::size_t(col(double(r)))] = '+';
  s << std::string(name_width + 9, ' ') << "1" << std::string(kCols - 2, ' ') << k << '\n';
  s << std::string(name_width + 9, ' ') << axis << '\n';
  for (std::size_t c : d.order) {
    std::string line(kCols, ' ');
    line[std::size_t(col(d.average_ranks[c]))] = '*';
    s << d.classifiers[c] << std::string(name_width - d.classifiers[c].size(), ' ') << "  "
      << num(d.average_ranks[c]) << "  " << line << '\n';
  }
  if (d.cliques.empty()) {
    s << "no cliques: every pair differs significantly\n";
  } else {
    s << "cliques (not significantly different):\n";
    for (const auto& q : d.cliques) {
      std::string line(kCols, ' ');
      for (int x = col(d.average_ranks[q.front()]); x <= col(d.average_ranks[q.back()]); ++x)
        line[std::size_t(x)] = '=';
      std::string names;
      for (std::size_t i = 0; i < q.size(); ++i) names += (i ? ", " : "") + d.classifiers[q[i]];
      s << std::string(name_width + 9, ' ') << line << "  " << names << '\n';
    }
  }
  return s.str();
}

void render_cd_diagram(const CDDiagram& diagram, const std::filesystem::path& svg_path) {
  write_file_atomic(svg_path, render_cd_svg(diagram));
  auto txt = svg_path;
  txt.replace_extension(".txt");
  write_file_atomic(txt, render_cd_text(diagram));
}

// ---------------------------------------------------------------------------

ComparisonReport compare_classifiers(const AccuracyTable& table, double alpha) {
  ComparisonReport r;
  r.alpha = alpha;
  r.ranks = average_ranks(table);
  if (table.classifiers.size() >= 3 && table.datasets.size() >= 2) r.friedman = friedman_test(table);
  r.pairwise = pairwise_tests(table, alpha);
  r.diagram = form_cliques(r.ranks, r.pairwise);
  return r;
}

std::string report_json(const ComparisonReport& r) {
  using nlohmann::ordered_json;
  ordered_json j;
  const auto& names = r.ranks.classifiers;
  j["classifiers"] = names;
  j["datasets"] = r.ranks.datasets.size();
  ordered_json avg = ordered_json::object(), wins = ordered_json::object();
  for (std::size_t c = 0; c < names.size(); ++c) {
    avg[names[c]] = r.ranks.average[c];
    wins[names[c]] = r.ranks.wins[c];
  }
  j["average_ranks"] = avg;
  j["wins"] = wins;
  j["shared_top"] = r.ranks.shared_top;
  if (r.friedman)
    j["friedman"] = {{"statistic", r.friedman->statistic},
                     {"p_value", r.friedman->p_value},
                     {"df", r.friedman->degrees_of_freedom}};
  else
    j["friedman"] = nullptr;
  j["alpha"] = r.alpha;
  ordered_json pairs = ordered_json::array();
  for (const auto& p : r.pairwise)
    pairs.push_back({{"a", names[p.a]},
                     {"b", names[p.b]},
                     {"w_plus", p.test.w_plus},
                     {"w_minus", p.test.w_minus},
                     {"statistic", p.test.statistic},
                     {"n", p.test.n_used},
                     {"p_value", p.test.p_value},
                     {"exact", p.test.exact},
                     {"degenerate", p.test.degenerate},
                     {"significant", p.significant}});
  j["pairwise"] = pairs;
  ordered_json cliques = ordered_json::array();
  for (const auto& q : r.diagram.cliques) {
    ordered_json c = ordered_json::array();
    for (auto i : q) c.push_back(names[i]);
    cliques.push_back(c);
  }
  j["cliques"] = cliques;
  return j.dump(2) + "\n";
}

}  // namespace tsce
