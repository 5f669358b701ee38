#include "tsce/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace tsce {

namespace fs = std::filesystem;

namespace {

std::mutex g_observer_mutex;
IoObserver g_observer;

void notify_open(const fs::path& path) {
  std::lock_guard lock(g_observer_mutex);
  if (g_observer) g_observer(path);
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(trim(cell));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_number(const std::string& cell, std::size_t line_no, const fs::path& path) {
  double v = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, v);
  if (cell.empty() || ec != std::errc() || ptr != end)
    throw ParseError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell +
                     "'");
  return v;
}

struct RawRow {
  double label;
  std::vector<double> values;
};

std::vector<RawRow> read_ucr_file(const fs::path& path) {
  notify_open(path);
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());

  std::vector<RawRow> rows;
  std::string line;
  std::size_t line_no = 0;
  char sep = 0;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (sep == 0) sep = line.find('\t') != std::string::npos ? '\t' : ',';
    const auto cells = split(trim(line), sep);
    if (cells.size() < 3)
      throw FormatError(path.string() + ": row needs a label and at least two values", line_no);
    if (expected == 0) expected = cells.size();
    if (cells.size() != expected)
      throw FormatError(path.string() + ": ragged row with " + std::to_string(cells.size() - 1) +
                            " values, expected " + std::to_string(expected - 1),
                        line_no);
    RawRow row;
    row.label = parse_number(cells[0], line_no, path);
    row.values.reserve(cells.size() - 1);
    for (std::size_t i = 1; i < cells.size(); ++i) {
      const double v = parse_number(cells[i], line_no, path);
      if (!std::isfinite(v))
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": non-finite value");
      row.values.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": no series");
  return rows;
}

std::vector<TimeSeries> to_series(const std::vector<RawRow>& rows,
                                  const std::vector<double>& raw_labels, bool normalize,
                                  const fs::path& path) {
  std::vector<TimeSeries> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    const auto it = std::lower_bound(raw_labels.begin(), raw_labels.end(), r.label);
    if (it == raw_labels.end() || *it != r.label) {
      std::ostringstream os;
      os << path.string() << ": label " << r.label << " does not occur in the train split";
      throw LabelError(os.str());
    }
    TimeSeries s;
    s.values = Eigen::Map<const Eigen::VectorXd>(r.values.data(), Index(r.values.size()));
    s.label = int(it - raw_labels.begin());
    if (normalize) s.values = z_normalize(s.values);
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_decimal(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void set_io_observer(IoObserver observer) {
  std::lock_guard lock(g_observer_mutex);
  g_observer = std::move(observer);
}

void TimeSeriesDataset::validate() const {
  if (n_classes < 1) throw FormatError("dataset '" + name + "' has no classes");
  if (series_length < 2) throw FormatError("dataset '" + name + "': series length must be >= 2");
  if (train.empty()) throw FormatError("dataset '" + name + "': empty train split");
  std::vector<bool> seen(std::size_t(n_classes), false);
  auto check = [&](const std::vector<TimeSeries>& split, bool is_train) {
    for (const auto& s : split) {
      if (s.values.size() != series_length)
        throw FormatError("dataset '" + name + "': series of length " +
                          std::to_string(s.values.size()) + ", expected " +
                          std::to_string(series_length));
      if (s.label < 0 || s.label >= n_classes)
        throw LabelError("dataset '" + name + "': label out of range");
      if (!s.values.allFinite()) throw ParseError("dataset '" + name + "': non-finite value");
      if (is_train) seen[std::size_t(s.label)] = true;
    }
  };
  check(train, true);
  check(test, false);
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw LabelError("dataset '" + name + "': a class is missing from the train split");
}

TimeSeriesDataset load_ucr_train(const fs::path& train_path, LoadOptions options) {
  const auto rows = read_ucr_file(train_path);
  TimeSeriesDataset ds;
  std::string stem = train_path.stem().string();
  if (const auto pos = stem.rfind("_TRAIN"); pos != std::string::npos) stem = stem.substr(0, pos);
  ds.name = stem;
  std::set<double> labels;
  for (const auto& r : rows) labels.insert(r.label);
  ds.raw_labels.assign(labels.begin(), labels.end());
  ds.n_classes = int(ds.raw_labels.size());
  ds.series_length = Index(rows.front().values.size());
  ds.train = to_series(rows, ds.raw_labels, options.z_normalize, train_path);
  ds.validate();
  return ds;
}

TimeSeriesDataset load_ucr_dataset(const fs::path& train_path, const fs::path& test_path,
                                   LoadOptions options) {
  TimeSeriesDataset ds = load_ucr_train(train_path, options);
  const auto rows = read_ucr_file(test_path);
  if (Index(rows.front().values.size()) != ds.series_length)
    throw FormatError(test_path.string() + ": series length " +
                      std::to_string(rows.front().values.size()) + " differs from train length " +
                      std::to_string(ds.series_length), 1);
  ds.test = to_series(rows, ds.raw_labels, options.z_normalize, test_path);
  ds.validate();
  if (ds.test.empty()) throw FormatError("dataset '" + ds.name + "': empty test split");
  return ds;
}

DatasetFiles find_dataset_files(const fs::path& dir, const std::string& name) {
  for (const fs::path& base : {dir / name, dir}) {
    for (const char* ext : {".tsv", ".csv", ".txt"}) {
      const fs::path train = base / (name + "_TRAIN" + ext);
      const fs::path test = base / (name + "_TEST" + ext);
      if (fs::exists(train) && fs::exists(test)) return {train, test};
    }
  }
  throw FormatError("dataset '" + name + "' not found under " + dir.string());
}

Eigen::VectorXd z_normalize(const Eigen::VectorXd& values) {
  if (values.size() == 0) return values;
  const double mean = values.mean();
  const double stddev = std::sqrt((values.array() - mean).square().mean());
  if (stddev < 1e-8) return Eigen::VectorXd::Zero(values.size());
  return (values.array() - mean) / stddev;
}

TimeSeries z_normalize(const TimeSeries& series) {
  return {z_normalize(series.values), series.label};
}

Tensor to_batch(const std::vector<TimeSeries>& series, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("to_batch: no series");
  const Index length = series[rows[0]].values.size();
  Tensor t({Index(rows.size()), 1, length});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = series[rows[i]].values;
    if (v.size() != length) throw ShapeError("to_batch: series lengths differ");
    for (Index j = 0; j < length; ++j) t(Index(i), 0, j) = v[j];
  }
  return t;
}

Tensor to_batch(const std::vector<TimeSeries>& series) {
  std::vector<std::size_t> rows(series.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return to_batch(series, rows);
}

std::vector<int> labels_of(const std::vector<TimeSeries>& series) {
  std::vector<int> out;
  out.reserve(series.size());
  for (const auto& s : series) out.push_back(s.label);
  return out;
}

void save_ucr_split(const std::vector<TimeSeries>& split, const std::vector<double>& raw_labels,
                    const fs::path& path) {
  std::ostringstream os;
  for (const auto& s : split) {
    os << format_decimal(raw_labels.at(std::size_t(s.label)));
    for (Index i = 0; i < s.values.size(); ++i) os << '\t' << format_decimal(s.values[i]);
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

// ---------------------------------------------------------------------------

Accuracy Accuracy::from_value(double v) { return {v, format_decimal(v)}; }

Accuracy Accuracy::from_text(const std::string& text) {
  return {parse_number(text, 0, "accuracy"), text};
}

bool AccuracyTable::complete() const {
  for (const auto& row : cells)
    for (const auto& c : row)
      if (!c) return false;
  return true;
}

void AccuracyTable::validate() const {
  if (cells.size() != classifiers.size()) throw FormatError("accuracy table: row count mismatch");
  for (const auto& row : cells) {
    if (row.size() != datasets.size()) throw FormatError("accuracy table: not rectangular");
    for (const auto& c : row) {
      if (!c) throw FormatError("accuracy table: missing cell");
      if (!(c->value >= 0.0 && c->value <= 1.0))
        throw FormatError("accuracy table: accuracy " + c->text + " outside [0, 1]");
    }
  }
}

const Accuracy& AccuracyTable::at(std::size_t classifier, std::size_t dataset) const {
  const auto& c = cells.at(classifier).at(dataset);
  if (!c) throw FormatError("accuracy table: missing cell for " + classifiers[classifier] + "/" +
                            datasets[dataset]);
  return *c;
}

std::size_t AccuracyTable::classifier_index(const std::string& name) const {
  const auto it = std::find(classifiers.begin(), classifiers.end(), name);
  if (it == classifiers.end()) throw SpecError("no classifier named '" + name + "'");
  return std::size_t(it - classifiers.begin());
}

std::vector<Accuracy> AccuracyTable::row(const std::string& classifier) const {
  const auto i = classifier_index(classifier);
  std::vector<Accuracy> out;
  for (std::size_t j = 0; j < datasets.size(); ++j) out.push_back(at(i, j));
  return out;
}

void AccuracyTable::upsert(const std::string& classifier, const std::string& dataset,
                           Accuracy value) {
  auto ci = std::find(classifiers.begin(), classifiers.end(), classifier);
  if (ci == classifiers.end()) {
    classifiers.push_back(classifier);
    cells.emplace_back(datasets.size());
    ci = classifiers.end() - 1;
  }
  auto di = std::find(datasets.begin(), datasets.end(), dataset);
  if (di == datasets.end()) {
    datasets.push_back(dataset);
    for (auto& row : cells) row.emplace_back();
    di = datasets.end() - 1;
  }
  cells[std::size_t(ci - classifiers.begin())][std::size_t(di - datasets.begin())] =
      std::move(value);
}

void save_accuracy_table(const AccuracyTable& table, const fs::path& path) {
  if (table.cells.size() != table.classifiers.size())
    throw FormatError("accuracy table: row count mismatch");
  std::ostringstream os;
  os << "classifier_name";
  for (const auto& d : table.datasets) os << ',' << d;
  os << '\n';
  for (std::size_t i = 0; i < table.classifiers.size(); ++i) {
    os << table.classifiers[i];
    for (const auto& c : table.cells[i]) os << ',' << (c ? c->text : "");
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

AccuracyTable load_accuracy_table(const fs::path& path, bool allow_missing) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  AccuracyTable t;
  std::string line;
  std::size_t line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (header) {
      if (cells.empty() || cells[0] != "classifier_name")
        throw FormatError("header must start with 'classifier_name'", line_no);
      t.datasets.assign(cells.begin() + 1, cells.end());
      if (t.datasets.empty()) throw FormatError("header names no datasets", line_no);
      header = false;
      continue;
    }
    if (cells.size() != t.datasets.size() + 1)
      throw FormatError("expected " + std::to_string(t.datasets.size() + 1) + " cells, got " +
                            std::to_string(cells.size()),
                        line_no);
    t.classifiers.push_back(cells[0]);
    auto& row = t.cells.emplace_back();
    for (std::size_t j = 1; j < cells.size(); ++j) {
      if (cells[j].empty()) {
        if (!allow_missing) throw FormatError("missing cell for dataset " + t.datasets[j - 1], line_no);
        row.emplace_back();
        continue;
      }
      try {
        row.push_back(Accuracy::from_text(cells[j]));
      } catch (const ParseError&) {
        throw FormatError("not a number: '" + cells[j] + "'", line_no);
      }
      if (!(row.back()->value >= 0.0 && row.back()->value <= 1.0))
        throw FormatError("accuracy " + cells[j] + " outside [0, 1]", line_no);
    }
  }
  if (header) throw FormatError("empty accuracy table", line_no);
  if (t.classifiers.empty()) throw FormatError("accuracy table has no classifier rows", line_no);
  return t;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace tsce
