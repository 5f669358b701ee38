#include "tsce/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "tsce/parallel.hpp"

namespace tsce {

namespace fs = std::filesystem;

void EnsembleSpec::validate() const {
  if (members.empty()) throw SpecError("ensemble '" + name + "' has no members");
  const auto& first = members.front()->graph;
  std::ostringstream bad;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const auto& g = members[i]->graph;
    if (g.n_classes != first.n_classes || g.input_length != first.input_length)
      bad << "\n  member " << i << " (" << display_name(g.kind) << ", seed "
          << members[i]->model_seed << "): " << g.n_classes << " classes, length "
          << g.input_length;
  }
  if (!bad.str().empty())
    throw SpecError("ensemble '" + name + "': members disagree with member 0 (" +
                    std::to_string(first.n_classes) + " classes, length " +
                    std::to_string(first.input_length) + "):" + bad.str());
}

Eigen::MatrixXd average_probabilities(std::span<const Eigen::MatrixXd> member_outputs) {
  if (member_outputs.empty()) throw SpecError("average_probabilities: no members");
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(member_outputs[0].rows(), member_outputs[0].cols());
  for (const auto& m : member_outputs) {
    if (m.rows() != sum.rows() || m.cols() != sum.cols())
      throw SpecError("average_probabilities: member outputs have different shapes");
    sum += m;
  }
  return sum / double(member_outputs.size());
}

namespace {

Eigen::MatrixXd member_output(const EnsembleSpec& spec, const TrainedModel& m,
                              const std::vector<TimeSeries>& split) {
  Eigen::MatrixXd p = predict_proba(m.graph, split);
  if (spec.normalize_members && m.graph.output_kind == OutputKind::per_class_sigmoid)
    for (Index i = 0; i < p.rows(); ++i) {
      const double s = p.row(i).sum();
      if (s > 0.0) p.row(i) /= s;
    }
  return p;
}

}  // namespace

Eigen::MatrixXd ensemble_proba(const EnsembleSpec& spec, const std::vector<TimeSeries>& split) {
  spec.validate();
  for (const auto& s : split)
    if (s.values.size() != spec.members.front()->graph.input_length)
      throw ShapeError("ensemble: series length does not match the members");
  std::vector<Eigen::MatrixXd> outputs;
  outputs.reserve(spec.members.size());
  for (const auto& m : spec.members) outputs.push_back(member_output(spec, *m, split));
  return average_probabilities(outputs);
}

EnsemblePrediction ensemble_predict(const EnsembleSpec& spec, const TimeSeries& x) {
  const Eigen::MatrixXd p = ensemble_proba(spec, {x});
  EnsemblePrediction out;
  out.probabilities = p.row(0).transpose();
  out.predicted_class = argmax(out.probabilities);
  return out;
}

Evaluation evaluate_ensemble(const EnsembleSpec& spec, const std::vector<TimeSeries>& split) {
  if (split.empty()) throw DomainError("evaluate_ensemble: empty split");
  const Eigen::MatrixXd p = ensemble_proba(spec, split);
  Evaluation e;
  std::size_t correct = 0;
  double ce = 0.0;
  bool distributions = true;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto row = p.row(Index(i)).transpose();
    if (argmax(row) == split[i].label) ++correct;
    if (std::abs(row.sum() - 1.0) > 1e-6) distributions = false;
    ce -= std::log(std::max(row[split[i].label], std::numeric_limits<double>::min()));
  }
  e.accuracy = double(correct) / double(split.size());
  e.mean_loss = distributions ? ce / double(split.size()) : std::numeric_limits<double>::quiet_NaN();
  return e;
}

// ---------------------------------------------------------------------------

std::string member_checkpoint_name(const std::string& dataset, ArchKind kind, std::uint64_t seed) {
  return dataset + "_" + std::string(to_string(kind)) + "_seed" + std::to_string(seed) + ".tsce";
}

EnsembleBuild build_ensemble(std::span<const ArchKind> kinds, const TimeSeriesDataset& dataset,
                             std::vector<std::uint64_t> seeds, const EnsembleConfig& config,
                             const std::string& name) {
  if (kinds.empty() || seeds.empty()) throw SpecError("ensemble needs architectures and seeds");
  std::sort(seeds.begin(), seeds.end());
  if (std::adjacent_find(seeds.begin(), seeds.end()) != seeds.end())
    throw SpecError("ensemble seeds must be distinct");

  struct Task {
    ArchKind kind;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (ArchKind k : kinds)
    for (auto s : seeds) tasks.push_back({k, s});

  std::vector<std::shared_ptr<const TrainedModel>> results(tasks.size());
  std::vector<std::string> errors(tasks.size());
  parallel_for(tasks.size(), config.jobs, [&](std::size_t i) {
    const auto [kind, seed] = tasks[i];
    try {
      const ModelGraph g =
          build_model(kind, dataset.series_length, dataset.n_classes, seed, config.hp);
      TrainConfig tc = config.base;
      tc.epochs = config.epochs.value_or(config.hp.epochs(kind));
      tc.seed = seed;
      auto trained = std::make_shared<TrainedModel>(train(g, dataset, tc, seed));
      if (config.checkpoint_dir) {
        const fs::path path = *config.checkpoint_dir / member_checkpoint_name(dataset.name, kind, seed);
        save_checkpoint(*trained, path);
        trained = std::make_shared<TrainedModel>(load_checkpoint(path));
      }
      results[i] = std::move(trained);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  EnsembleBuild out;
  out.spec.name = name;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (results[i]) out.spec.members.push_back(results[i]);
    else out.failures.push_back({tasks[i].kind, tasks[i].seed, dataset.name, errors[i]});
  }
  if (out.spec.members.empty())
    throw Error("ensemble '" + name + "': every member failed; first error: " + errors.front());
  return out;
}

EnsembleBuild build_seed_ensemble(ArchKind kind, const TimeSeriesDataset& dataset,
                                  std::vector<std::uint64_t> seeds, const EnsembleConfig& config) {
  const ArchKind kinds[] = {kind};
  return build_ensemble(kinds, dataset, std::move(seeds), config,
                        std::string(display_name(kind)) + "-ens");
}

namespace {

std::vector<std::uint64_t> seed_range(int n) {
  if (n < 1) throw SpecError("seeds_per_arch must be >= 1");
  std::vector<std::uint64_t> s(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) s[std::size_t(i)] = std::uint64_t(i);
  return s;
}

}  // namespace

EnsembleBuild build_full_ensemble(const TimeSeriesDataset& dataset, int seeds_per_arch,
                                  const EnsembleConfig& config) {
  return build_ensemble(kAllArchitectures, dataset, seed_range(seeds_per_arch), config, "ALL");
}

EnsembleBuild build_nne(const TimeSeriesDataset& dataset, int seeds_per_arch,
                        const EnsembleConfig& config) {
  const ArchKind kinds[] = {ArchKind::resnet, ArchKind::fcn, ArchKind::encoder};
  return build_ensemble(kinds, dataset, seed_range(seeds_per_arch), config, "NNE");
}

// ---------------------------------------------------------------------------

EnsembleManifest parse_ensemble_manifest(const std::string& text, const fs::path& base_dir) {
  EnsembleManifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("expected key = value", line_no);
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key == "name") {
      m.name = value;
    } else if (key == "checkpoint") {
      fs::path p(value);
      m.checkpoints.push_back(p.is_relative() && !base_dir.empty() ? base_dir / p : p);
    } else {
      throw FormatError("unknown key '" + key + "'", line_no);
    }
  }
  if (m.name.empty()) throw FormatError("ensemble manifest needs a name");
  return m;
}

EnsembleManifest load_ensemble_manifest(const fs::path& path) {
  return parse_ensemble_manifest(read_file(path), path.parent_path());
}

void save_ensemble_manifest(const EnsembleManifest& manifest, const fs::path& path) {
  std::ostringstream os;
  os << "name = " << manifest.name << '\n';
  for (const auto& c : manifest.checkpoints) os << "checkpoint = " << c.string() << '\n';
  write_file_atomic(path, os.str());
}

EnsembleSpec load_ensemble(const EnsembleManifest& manifest) {
  if (manifest.checkpoints.empty())
    throw SpecError("ensemble manifest '" + manifest.name + "' lists no checkpoints");
  EnsembleSpec spec;
  spec.name = manifest.name;
  for (const auto& p : manifest.checkpoints)
    spec.members.push_back(std::make_shared<TrainedModel>(load_checkpoint(p)));
  try {
    spec.validate();
  } catch (const SpecError& e) {
    std::string msg = e.what();
    msg += "\n  members:";
    for (const auto& p : manifest.checkpoints) msg += "\n    " + p.string();
    throw SpecError(msg);
  }
  return spec;
}

// ---------------------------------------------------------------------------

WinTieLoss pairwise_record(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw SpecError("pairwise_record: dataset counts differ");
  WinTieLoss r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++r.wins;
    else if (a[i] < b[i]) ++r.losses;
    else ++r.ties;
  }
  return r;
}

WinTieLoss pairwise_record(std::span<const Accuracy> a, std::span<const Accuracy> b) {
  std::vector<double> va, vb;
  for (const auto& x : a) va.push_back(x.value);
  for (const auto& x : b) vb.push_back(x.value);
  return pairwise_record(std::span<const double>(va), std::span<const double>(vb));
}

WinTieLoss pairwise_record(const AccuracyTable& table_a, const std::string& a,
                           const AccuracyTable& table_b, const std::string& b) {
  if (table_a.datasets != table_b.datasets)
    throw SpecError("pairwise_record: the tables cover different datasets");
  const auto ra = table_a.row(a);
  const auto rb = table_b.row(b);
  return pairwise_record(std::span<const Accuracy>(ra), std::span<const Accuracy>(rb));
}

}  // namespace tsce
