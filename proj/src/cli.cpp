#include "tsce/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsce/ensemble.hpp"
#include "tsce/stats.hpp"
#include "tsce/synthetic.hpp"
#include "tsce/transfer.hpp"

namespace tsce {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct UsageError : Error {
  using Error::Error;
};

std::string file_digest(const fs::path& path) { return hex64(fnv1a64(read_file(path))); }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string abs_text(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

// Collects what one invocation read and wrote, then writes the run manifest.
class Run {
 public:
  explicit Run(std::string command)
      : command_(std::move(command)), started_(std::chrono::steady_clock::now()),
        started_at_(utc_now()) {
    args.push_back(command_);
  }

  std::vector<std::string> args;
  ordered_json config = ordered_json::object();
  ordered_json seeds = ordered_json::object();

  void arg(const std::string& flag, const std::string& value) {
    args.push_back(flag);
    args.push_back(value);
  }
  void flag(const std::string& flag) { args.push_back(flag); }
  void input(const fs::path& p) { inputs_.push_back({{"path", abs_text(p)}, {"fnv1a64", file_digest(p)}}); }
  void output(const fs::path& p) {
    outputs_.push_back({{"path", abs_text(p)}, {"fnv1a64", file_digest(p)}});
  }
  void row(const fs::path& table, const std::string& classifier, const std::string& dataset,
           const Accuracy& acc) {
    rows_.push_back({{"table", abs_text(table)},
                     {"classifier", classifier},
                     {"dataset", dataset},
                     {"accuracy", acc.text}});
  }

  void write(const fs::path& path) const {
    ordered_json j;
    j["schema"] = kManifestSchema;
    j["command"] = command_;
    j["args"] = args;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["rows"] = rows_;
    j["started_at"] = started_at_;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    j["versions"] = {{"tsce", kToolVersion},
                     {"checkpoint_format", kCheckpointVersion},
                     {"hyperparameters", HyperparameterManifest{}.version}};
    write_file_atomic(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point started_;
  std::string started_at_;
  ordered_json inputs_ = ordered_json::array();
  ordered_json outputs_ = ordered_json::array();
  ordered_json rows_ = ordered_json::array();
};

// Options shared by every subcommand.
struct Common {
  bool desk = false;
  int jobs = 1;
  std::string hyper;
  std::string manifest;

  HyperparameterManifest hyperparameters(Run& run) const {
    HyperparameterManifest hp =
        hyper.empty() ? HyperparameterManifest::defaults() : HyperparameterManifest::load(hyper);
    run.config["hyperparameters"] = hp.serialize();
    run.config["desk"] = desk;
    if (!hyper.empty()) {
      run.arg("--hyper", abs_text(hyper));
      run.input(hyper);
    }
    if (desk) run.flag("--desk");
    return desk ? hp.desk_scaled() : hp;
  }
};

struct DataRef {
  std::string dataset;
  std::string data_dir;

  fs::path dir() const {
    if (!data_dir.empty()) return data_dir;
    if (const char* env = std::getenv(kDataDirEnv); env && *env) return env;
    return ".";
  }
  void record(Run& run) const {
    run.arg("--dataset", dataset);
    run.arg("--data-dir", abs_text(dir()));
  }
  // Train split only: used by every code path that trains or selects models.
  TimeSeriesDataset load_train(Run& run) const {
    const auto files = find_dataset_files(dir(), dataset);
    run.input(files.train);
    auto ds = load_ucr_train(files.train);
    ds.name = dataset;
    return ds;
  }
  TimeSeriesDataset load_full(Run& run) const {
    const auto files = find_dataset_files(dir(), dataset);
    run.input(files.train);
    run.input(files.test);
    auto ds = load_ucr_dataset(files.train, files.test);
    ds.name = dataset;
    return ds;
  }
};

void add_data_options(CLI::App* cmd, DataRef& d) {
  cmd->add_option("--dataset", d.dataset, "Dataset name (files <name>_TRAIN/_TEST)")->required();
  cmd->add_option("--data-dir", d.data_dir,
                  std::string("Dataset directory (default: $") + kDataDirEnv + " or .)");
}

std::string arch_check(const std::string& s) {
  try {
    arch_from_string(s);
    return {};
  } catch (const Error&) {
    return "unknown architecture '" + s + "' (mlp, fcn, resnet, encoder, mcdcnn, time_cnn)";
  }
}

void record_row(Run& run, const fs::path& table_path, const std::string& classifier,
                const std::string& dataset, const Accuracy& acc) {
  AccuracyTable table;
  if (fs::exists(table_path)) table = load_accuracy_table(table_path, true);
  table.upsert(classifier, dataset, acc);
  save_accuracy_table(table, table_path);
  run.row(table_path, classifier, dataset, acc);
}

fs::path manifest_path(const Common& common, const fs::path& fallback) {
  return common.manifest.empty() ? fallback : fs::path(common.manifest);
}

// ---------------------------------------------------------------------------
// Subcommands

struct TrainOptions {
  DataRef data;
  std::string arch;
  std::uint64_t seed = 0;
  int epochs = 0;
  int batch_size = 0;
  std::string policy = "best_train_loss";
  std::string out;
};

int cmd_train(const TrainOptions& o, const Common& common, std::ostream& out) {
  Run run("train");
  const ArchKind kind = arch_from_string(o.arch);
  const HyperparameterManifest hp = common.hyperparameters(run);
  o.data.record(run);
  run.arg("--arch", std::string(to_string(kind)));
  run.arg("--seed", std::to_string(o.seed));

  TrainConfig config = default_train_config(kind, hp);
  if (o.epochs > 0) config.epochs = o.epochs;
  config.batch_size = o.batch_size;
  config.seed = o.seed;
  config.checkpoint = checkpoint_policy_from_string(o.policy);
  run.arg("--epochs", std::to_string(config.epochs));
  run.arg("--batch-size", std::to_string(config.batch_size));
  run.arg("--checkpoint-policy", std::string(to_string(config.checkpoint)));
  run.config["train"] = config.canonical_text();
  run.seeds["model"] = o.seed;
  run.seeds["train"] = o.seed;

  const TimeSeriesDataset ds = o.data.load_train(run);
  const ModelGraph model = build_model(kind, ds.series_length, ds.n_classes, o.seed, hp);
  const TrainedModel trained = train(model, ds, config, o.seed);

  const fs::path out_path =
      o.out.empty() ? fs::path(member_checkpoint_name(ds.name, kind, o.seed)) : fs::path(o.out);
  run.arg("--out", abs_text(out_path));
  save_checkpoint(trained, out_path);
  run.output(out_path);
  run.write(manifest_path(common, out_path.string() + ".manifest.json"));

  const auto& last = trained.history.back();
  out << display_name(kind) << " on " << ds.name << ": " << config.epochs
      << " epochs, final train loss " << last.loss << ", train accuracy " << last.accuracy
      << ", kept epoch " << trained.selected_epoch + 1 << "\n"
      << "checkpoint: " << out_path.string() << "\n";
  return kExitOk;
}

struct EvaluateOptions {
  DataRef data;
  std::string checkpoint;
  std::string table;
  std::string classifier;
};

int cmd_evaluate(const EvaluateOptions& o, const Common& common, std::ostream& out) {
  Run run("evaluate");
  o.data.record(run);
  run.arg("--checkpoint", abs_text(o.checkpoint));
  const TrainedModel model = load_checkpoint(o.checkpoint);
  run.input(o.checkpoint);
  const TimeSeriesDataset ds = o.data.load_full(run);
  const Evaluation e = evaluate(model, ds.test);
  const Accuracy acc = Accuracy::from_value(e.accuracy);
  const std::string classifier =
      o.classifier.empty() ? std::string(display_name(model.graph.kind)) : o.classifier;
  run.arg("--classifier", classifier);
  if (!o.table.empty()) {
    run.arg("--table", abs_text(o.table));
    record_row(run, o.table, classifier, ds.name, acc);
  }
  run.write(manifest_path(common, o.checkpoint + "." + ds.name + ".eval.manifest.json"));
  out << classifier << " on " << ds.name << ": test accuracy " << acc.text << ", mean loss "
      << e.mean_loss << "\n";
  return kExitOk;
}

struct EnsembleOptions {
  DataRef data;
  std::string members;
  std::string arch;
  int seeds = 0;
  int epochs = 0;  // 0: per-architecture budget from the manifest
  std::string checkpoint_dir;
  std::string table;
  std::string name;
};

int cmd_ensemble(const EnsembleOptions& o, const Common& common, std::ostream& out,
                 std::ostream& err) {
  Run run("ensemble");
  o.data.record(run);
  EnsembleSpec spec;
  fs::path default_manifest;

  if (!o.members.empty()) {
    if (!o.arch.empty() || o.seeds > 0)
      throw UsageError("--members cannot be combined with --arch/--seeds");
    run.arg("--members", abs_text(o.members));
    EnsembleManifest m;
    try {
      m = load_ensemble_manifest(o.members);
    } catch (const FormatError& e) {
      throw UsageError(o.members + ": " + e.what());
    }
    if (m.checkpoints.empty()) throw UsageError(o.members + ": ensemble manifest lists no checkpoints");
    run.input(o.members);
    spec = load_ensemble(m);
    for (const auto& c : m.checkpoints) run.input(c);
    default_manifest = o.members + "." + o.data.dataset + ".manifest.json";
  } else {
    if (o.arch.empty() || o.seeds < 1 || o.checkpoint_dir.empty())
      throw UsageError("give --members FILE, or --arch, --seeds and --checkpoint-dir to train one");
    const HyperparameterManifest hp = common.hyperparameters(run);
    run.arg("--arch", o.arch);
    run.arg("--seeds", std::to_string(o.seeds));
    run.arg("--checkpoint-dir", abs_text(o.checkpoint_dir));
    run.arg("--jobs", std::to_string(common.jobs));
    if (o.epochs > 0) run.arg("--epochs", std::to_string(o.epochs));
    fs::create_directories(o.checkpoint_dir);

    EnsembleConfig config;
    config.hp = hp;
    config.jobs = common.jobs;
    config.checkpoint_dir = fs::path(o.checkpoint_dir);
    if (o.epochs > 0) config.epochs = o.epochs;
    run.config["epochs"] = ordered_json::object();
    for (ArchKind k : kAllArchitectures)
      run.config["epochs"][std::string(to_string(k))] = o.epochs > 0 ? o.epochs : hp.epochs(k);
    run.seeds["members"] = "0.." + std::to_string(o.seeds - 1);

    const TimeSeriesDataset train_only = o.data.load_train(run);
    EnsembleBuild build;
    std::string lowered = o.arch;
    std::transform(lowered.begin(), lowered.end(), lowered.begin(), ::tolower);
    if (lowered == "nne") build = build_nne(train_only, o.seeds, config);
    else if (lowered == "all") build = build_full_ensemble(train_only, o.seeds, config);
    else {
      std::vector<std::uint64_t> seeds;
      for (int s = 0; s < o.seeds; ++s) seeds.push_back(std::uint64_t(s));
      build = build_seed_ensemble(arch_from_string(o.arch), train_only, seeds, config);
    }
    for (const auto& f : build.failures)
      err << "warning: member " << display_name(f.kind) << " seed " << f.seed
          << " failed: " << f.message << "\n";
    spec = std::move(build.spec);

    EnsembleManifest members;
    members.name = o.name.empty() ? spec.name : o.name;
    for (const auto& m : spec.members) {
      const fs::path p = fs::path(o.checkpoint_dir) /
                         member_checkpoint_name(train_only.name, m->graph.kind, m->model_seed);
      members.checkpoints.push_back(p);
      run.output(p);
    }
    const fs::path members_path = fs::path(o.checkpoint_dir) / (members.name + ".members");
    save_ensemble_manifest(members, members_path);
    run.output(members_path);
    default_manifest = members_path.string() + "." + o.data.dataset + ".manifest.json";
  }
  if (!o.name.empty()) spec.name = o.name;
  run.arg("--name", spec.name);

  const TimeSeriesDataset ds = o.data.load_full(run);
  const Evaluation e = evaluate_ensemble(spec, ds.test);
  const Accuracy acc = Accuracy::from_value(e.accuracy);
  if (!o.table.empty()) {
    run.arg("--table", abs_text(o.table));
    record_row(run, o.table, spec.name, ds.name, acc);
  }
  run.write(manifest_path(common, default_manifest));
  out << spec.name << " (" << spec.size() << " members) on " << ds.name << ": test accuracy "
      << acc.text << "\n";
  return kExitOk;
}

struct TransferOptions {
  DataRef data;
  std::string sources;
  std::vector<std::string> allow{"fcn"};
  int epochs = 0;
  std::uint64_t head_seed = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;
  std::string table;
  std::string name;
};

int cmd_transfer(const TransferOptions& o, const Common& common, std::ostream& out,
                 std::ostream& err) {
  Run run("transfer");
  o.data.record(run);
  if (!fs::is_directory(o.sources)) throw UsageError("source directory not found: " + o.sources);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.sources))
    if (e.is_regular_file() && e.path().extension() == ".tsce") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no .tsce checkpoints in " + o.sources);

  std::set<ArchKind> allowed;
  for (const auto& a : o.allow) allowed.insert(arch_from_string(a));
  const HyperparameterManifest hp = common.hyperparameters(run);
  run.arg("--sources", abs_text(o.sources));
  std::string allow_list;
  for (ArchKind k : allowed) allow_list += (allow_list.empty() ? "" : ",") + std::string(to_string(k));
  run.arg("--allow", allow_list);
  run.arg("--head-seed", std::to_string(o.head_seed));
  run.arg("--seed", std::to_string(o.seed));
  run.arg("--jobs", std::to_string(common.jobs));
  run.seeds["head"] = o.head_seed;
  run.seeds["train"] = o.seed;

  const TimeSeriesDataset train_only = o.data.load_train(run);
  std::vector<std::shared_ptr<const TrainedModel>> sources;
  for (const auto& f : files) {
    std::shared_ptr<TrainedModel> m;
    try {
      m = std::make_shared<TrainedModel>(load_checkpoint(f));
    } catch (const Error& e) {
      err << "warning: skipping " << f.filename().string() << ": " << e.what() << "\n";
      continue;
    }
    const ArchKind kind = m->graph.kind;
    if (kind == ArchKind::time_cnn) {
      err << "warning: skipping " << f.filename().string()
          << ": Time-CNN has no softmax head to replace\n";
    } else if (!allowed.count(kind)) {
      err << "warning: skipping " << f.filename().string() << ": " << display_name(kind)
          << " sources not enabled (see --allow)\n";
    } else if (m->source_dataset == train_only.name) {
      err << "note: skipping " << f.filename().string() << ": trained on the target dataset\n";
    } else if (m->graph.input_length != train_only.series_length && !is_length_invariant(kind)) {
      err << "warning: skipping " << f.filename().string() << ": " << display_name(kind)
          << " depends on the series length\n";
    } else {
      run.input(f);
      sources.push_back(std::move(m));
    }
  }
  if (sources.empty()) throw UsageError("no adaptable source checkpoints in " + o.sources);

  TransferConfig config;
  config.hp = hp;
  config.desk = common.desk;
  config.head_seed = o.head_seed;
  config.jobs = common.jobs;
  config.base.seed = o.seed;
  if (o.epochs > 0) config.epochs = o.epochs;
  if (o.epochs > 0) run.arg("--epochs", std::to_string(o.epochs));
  run.config["fine_tune_epochs"] = ordered_json::object();
  for (ArchKind k : allowed)
    run.config["fine_tune_epochs"][std::string(to_string(k))] = config.for_source(k).epochs;

  std::string name = o.name;
  if (name.empty())
    name = allowed.size() == 1 ? std::string(display_name(*allowed.begin())) + "-transfer-ens"
                               : "transfer-ens";
  run.arg("--name", name);
  EnsembleBuild build = build_transfer_ensemble(sources, train_only, config, name);
  for (const auto& f : build.failures)
    err << "warning: fine-tuning from " << f.source << " failed: " << f.message << "\n";

  if (!o.checkpoint_dir.empty()) {
    run.arg("--checkpoint-dir", abs_text(o.checkpoint_dir));
    fs::create_directories(o.checkpoint_dir);
    for (const auto& m : build.spec.members) {
      const fs::path p = fs::path(o.checkpoint_dir) /
                         (train_only.name + "_from_" + m->transfer_source + "_" +
                          std::string(to_string(m->graph.kind)) + ".tsce");
      save_checkpoint(*m, p);
      run.output(p);
    }
  }

  const TimeSeriesDataset ds = o.data.load_full(run);
  const Evaluation e = evaluate_ensemble(build.spec, ds.test);
  const Accuracy acc = Accuracy::from_value(e.accuracy);
  if (!o.table.empty()) {
    run.arg("--table", abs_text(o.table));
    record_row(run, o.table, name, ds.name, acc);
  }
  run.write(manifest_path(common, fs::path(o.sources) / (name + "." + ds.name + ".manifest.json")));
  out << name << " (" << build.spec.size() << " members, " << build.failures.size()
      << " failed) on " << ds.name << ": test accuracy " << acc.text << "\n";
  return kExitOk;
}

AccuracyTable load_table_for_stats(const std::string& path) {
  AccuracyTable table;
  try {
    table = load_accuracy_table(path);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  } catch (const ParseError& e) {
    throw UsageError(e.what());
  }
  if (table.classifiers.size() < 2)
    throw UsageError(path + ": comparison needs at least 2 classifiers");
  return table;
}

struct CompareOptions {
  std::string table;
  double alpha = 0.05;
  std::string out_dir = ".";
};

int cmd_compare(const CompareOptions& o, const Common& common, std::ostream& out) {
  Run run("compare");
  if (!(o.alpha > 0.0 && o.alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");
  const AccuracyTable table = load_table_for_stats(o.table);
  run.arg("--table", abs_text(o.table));
  run.input(o.table);
  std::ostringstream alpha_text;
  alpha_text << std::setprecision(17) << o.alpha;
  run.arg("--alpha", alpha_text.str());
  run.arg("--out", abs_text(o.out_dir));

  const ComparisonReport report = compare_classifiers(table, o.alpha);
  fs::create_directories(o.out_dir);
  const fs::path dir(o.out_dir);
  write_file_atomic(dir / "report.json", report_json(report));
  render_cd_diagram(report.diagram, dir / "cd.svg");
  for (const char* f : {"report.json", "cd.svg", "cd.txt"}) run.output(dir / f);
  run.write(manifest_path(common, dir / "compare.manifest.json"));

  out << "classifiers: " << table.classifiers.size() << ", datasets: " << table.datasets.size()
      << "\n";
  out << "average ranks:\n";
  for (std::size_t c : report.diagram.order)
    out << "  " << std::left << std::setw(24) << table.classifiers[c] << std::fixed
        << std::setprecision(3) << report.ranks.average[c] << "  wins " << report.ranks.wins[c]
        << "\n";
  out.unsetf(std::ios::floatfield);
  if (report.friedman)
    out << "Friedman: statistic " << report.friedman->statistic << ", p "
        << report.friedman->p_value << " (df " << report.friedman->degrees_of_freedom << ")\n";
  else
    out << "Friedman test skipped: it needs at least 3 classifiers and 2 datasets\n";
  for (const auto& p : report.pairwise)
    out << "  " << table.classifiers[p.a] << " vs " << table.classifiers[p.b] << ": p "
        << p.test.p_value << (p.significant ? " (significant)" : "")
        << (p.test.degenerate ? " (all ties)" : "") << "\n";
  out << render_cd_text(report.diagram);
  return kExitOk;
}

struct CdOptions {
  std::string table;
  double alpha = 0.05;
  std::string out = "cd.svg";
};

int cmd_cd_diagram(const CdOptions& o, const Common& common, std::ostream& out) {
  Run run("cd-diagram");
  if (!(o.alpha > 0.0 && o.alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");
  const AccuracyTable table = load_table_for_stats(o.table);
  run.arg("--table", abs_text(o.table));
  run.input(o.table);
  std::ostringstream alpha_text;
  alpha_text << std::setprecision(17) << o.alpha;
  run.arg("--alpha", alpha_text.str());
  run.arg("--out", abs_text(o.out));
  const RankTable ranks = average_ranks(table);
  const CDDiagram d = form_cliques(ranks, pairwise_tests(table, o.alpha));
  fs::path svg(o.out);
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  render_cd_diagram(d, svg);
  run.output(svg);
  run.output(fs::path(svg).replace_extension(".txt"));
  run.write(manifest_path(common, svg.string() + ".manifest.json"));
  out << render_cd_text(d);
  return kExitOk;
}

struct SynthCliOptions {
  SynthOptions s;
  std::string variant = "sine_bump";
  std::string out_dir;
};

int cmd_synth(const SynthCliOptions& o, const Common& common, std::ostream& out) {
  Run run("synth");
  SynthOptions s = o.s;
  s.variant = synth_variant_from_string(o.variant);
  s.normalize = false;  // the loader z-normalises
  if (s.name.empty()) s.name = std::string(to_string(s.variant));
  fs::path dir = o.out_dir;
  if (dir.empty()) {
    const char* env = std::getenv(kDataDirEnv);
    dir = env && *env ? fs::path(env) : fs::path(".");
  }
  auto real = [](double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  };
  run.arg("--variant", o.variant);
  run.arg("--name", s.name);
  run.arg("--seed", std::to_string(s.seed));
  run.arg("--length", std::to_string(s.length));
  run.arg("--train", std::to_string(s.n_train));
  run.arg("--test", std::to_string(s.n_test));
  run.arg("--noise", real(s.noise));
  run.arg("--label-noise", real(s.label_noise));
  run.arg("--out", abs_text(dir));
  run.seeds["data"] = s.seed;

  const TimeSeriesDataset ds = make_synthetic(s);
  const fs::path target = dir / s.name;
  fs::create_directories(target);
  const fs::path train_path = target / (s.name + "_TRAIN.tsv");
  const fs::path test_path = target / (s.name + "_TEST.tsv");
  save_ucr_split(ds.train, ds.raw_labels, train_path);
  save_ucr_split(ds.test, ds.raw_labels, test_path);
  run.output(train_path);
  run.output(test_path);
  run.write(manifest_path(common, target / (s.name + ".manifest.json")));
  out << "wrote " << s.name << " (" << ds.train.size() << " train, " << ds.test.size()
      << " test, length " << ds.series_length << ") to " << target.string() << "\n";
  return kExitOk;
}

struct ReplayOptions {
  std::string manifest;
  std::string out_manifest;
};

int cmd_replay(const ReplayOptions& o, std::ostream& out, std::ostream& err) {
  ordered_json m;
  try {
    m = ordered_json::parse(read_file(o.manifest));
  } catch (const ordered_json::exception& e) {
    throw UsageError(o.manifest + ": not a run manifest: " + e.what());
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
  if (!m.is_object() || m.value("schema", "") != kManifestSchema || !m.contains("args"))
    throw UsageError(o.manifest + ": not a run manifest");
  std::vector<std::string> args = m["args"].get<std::vector<std::string>>();
  if (args.empty() || args.front() == "replay") throw UsageError(o.manifest + ": nothing to replay");

  // Hyperparameters are replayed from the embedded text, not the original file.
  const auto hyper = std::find(args.begin(), args.end(), "--hyper");
  if (hyper != args.end() && std::next(hyper) != args.end()) {
    const std::string text = m["config"].value("hyperparameters", "");
    const fs::path tmp = fs::temp_directory_path() /
                         ("tsce-replay-" + hex64(fnv1a64(text)) + ".ini");
    write_file_atomic(tmp, text);
    *std::next(hyper) = tmp.string();
  }
  const std::string replay_manifest =
      o.out_manifest.empty() ? fs::path(o.manifest).replace_extension(".replay.json").string()
                             : o.out_manifest;
  args.push_back("--manifest");
  args.push_back(replay_manifest);

  const int code = run_cli(args, out, err);
  if (code != kExitOk) return code;

  int mismatches = 0, checked = 0;
  for (const auto& f : m["outputs"]) {
    const fs::path p = f["path"].get<std::string>();
    ++checked;
    const std::string now = fs::exists(p) ? file_digest(p) : "missing";
    if (now != f["fnv1a64"].get<std::string>()) {
      ++mismatches;
      err << "replay: " << p.string() << " differs (" << now << " vs recorded "
          << f["fnv1a64"].get<std::string>() << ")\n";
    }
  }
  for (const auto& r : m["rows"]) {
    ++checked;
    const AccuracyTable t = load_accuracy_table(r["table"].get<std::string>(), true);
    const auto c = t.classifier_index(r["classifier"].get<std::string>());
    const auto d = std::find(t.datasets.begin(), t.datasets.end(), r["dataset"].get<std::string>());
    const auto& cell = t.cells.at(c).at(std::size_t(d - t.datasets.begin()));
    if (!cell || cell->text != r["accuracy"].get<std::string>()) {
      ++mismatches;
      err << "replay: accuracy of " << r["classifier"].get<std::string>() << " on "
          << r["dataset"].get<std::string>() << " differs from the recorded "
          << r["accuracy"].get<std::string>() << "\n";
    }
  }
  if (mismatches) {
    err << "replay: " << mismatches << " of " << checked << " recorded results differ\n";
    return kExitFailure;
  }
  out << "replay: " << checked << " recorded results reproduced exactly\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep-learning time series classification: train, ensemble, transfer, compare"};
  app.name("tsce");
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common common;
  auto add_common = [&](CLI::App* cmd, bool training) {
    if (training) {
      cmd->add_flag("--desk", common.desk, "Desk profile: narrower layers, capped epochs");
      cmd->add_option("--hyper", common.hyper, "Hyperparameter manifest (INI)")
          ->check(CLI::ExistingFile);
    }
    cmd->add_option("--manifest", common.manifest, "Where to write the run manifest");
  };

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "Train one model on a dataset's train split");
  add_data_options(train_cmd, train_o.data);
  train_cmd->add_option("--arch", train_o.arch, "Architecture")->required()->check(arch_check);
  train_cmd->add_option("--seed", train_o.seed, "Initialisation and shuffling seed");
  train_cmd->add_option("--epochs", train_o.epochs, "Epoch budget (default from the manifest)")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", train_o.batch_size, "Mini-batch size (0: automatic)")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--checkpoint-policy", train_o.policy, "best_train_loss or final")
      ->check(CLI::IsMember({"best_train_loss", "best", "final"}));
  train_cmd->add_option("--out", train_o.out, "Checkpoint path");
  add_common(train_cmd, true);

  EvaluateOptions eval_o;
  auto* eval_cmd = app.add_subcommand("evaluate", "Test accuracy of one checkpoint");
  add_data_options(eval_cmd, eval_o.data);
  eval_cmd->add_option("--checkpoint", eval_o.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--table", eval_o.table, "Accuracy table to update");
  eval_cmd->add_option("--classifier", eval_o.classifier, "Row name (default: architecture)");
  add_common(eval_cmd, false);

  EnsembleOptions ens_o;
  auto* ens_cmd = app.add_subcommand(
      "ensemble", "Evaluate an averaged ensemble from a member list, or train one first");
  add_data_options(ens_cmd, ens_o.data);
  ens_cmd->add_option("--members", ens_o.members, "Ensemble member list")->check(CLI::ExistingFile);
  ens_cmd->add_option("--arch", ens_o.arch, "Architecture to train, or nne / all");
  ens_cmd->add_option("--seeds", ens_o.seeds, "Seeds per architecture when training");
  ens_cmd->add_option("--epochs", ens_o.epochs, "Epoch budget per member (default from the manifest)")
      ->check(CLI::PositiveNumber);
  ens_cmd->add_option("--checkpoint-dir", ens_o.checkpoint_dir, "Where trained members go");
  ens_cmd->add_option("--table", ens_o.table, "Accuracy table to update");
  ens_cmd->add_option("--name", ens_o.name, "Ensemble name (row in the table)");
  ens_cmd->add_option("--jobs", common.jobs, "Concurrent trainings")->check(CLI::PositiveNumber);
  add_common(ens_cmd, true);

  TransferOptions tr_o;
  auto* tr_cmd = app.add_subcommand("transfer", "Fine-tune source checkpoints and ensemble them");
  add_data_options(tr_cmd, tr_o.data);
  tr_cmd->add_option("--sources", tr_o.sources, "Directory of source checkpoints")->required();
  tr_cmd->add_option("--allow", tr_o.allow, "Source architectures to use (default fcn)")
      ->delimiter(',')
      ->check(arch_check);
  tr_cmd->add_option("--epochs", tr_o.epochs, "Fine-tune epochs")->check(CLI::PositiveNumber);
  tr_cmd->add_option("--head-seed", tr_o.head_seed, "Seed of the new output layer");
  tr_cmd->add_option("--seed", tr_o.seed, "Shuffling seed");
  tr_cmd->add_option("--checkpoint-dir", tr_o.checkpoint_dir, "Save fine-tuned members here");
  tr_cmd->add_option("--table", tr_o.table, "Accuracy table to update");
  tr_cmd->add_option("--name", tr_o.name, "Ensemble name (row in the table)");
  tr_cmd->add_option("--jobs", common.jobs, "Concurrent fine-tunings")->check(CLI::PositiveNumber);
  add_common(tr_cmd, true);

  CompareOptions cmp_o;
  auto* cmp_cmd = app.add_subcommand("compare", "Ranks, Friedman, pairwise Wilcoxon-Holm, CD diagram");
  cmp_cmd->add_option("--table", cmp_o.table, "Accuracy table CSV")->required();
  cmp_cmd->add_option("--alpha", cmp_o.alpha, "Family-wise significance level");
  cmp_cmd->add_option("--out", cmp_o.out_dir, "Output directory");
  add_common(cmp_cmd, false);

  CdOptions cd_o;
  auto* cd_cmd = app.add_subcommand("cd-diagram", "Critical difference diagram (SVG and text)");
  cd_cmd->add_option("--table", cd_o.table, "Accuracy table CSV")->required();
  cd_cmd->add_option("--alpha", cd_o.alpha, "Family-wise significance level");
  cd_cmd->add_option("--out", cd_o.out, "SVG path (text goes next to it)");
  add_common(cd_cmd, false);

  SynthCliOptions syn_o;
  auto* syn_cmd = app.add_subcommand("synth", "Write a built-in synthetic dataset");
  syn_cmd->add_option("--variant", syn_o.variant, "sine_bump or sine_two_bumps")
      ->check(CLI::IsMember({"sine_bump", "sine_two_bumps"}));
  syn_cmd->add_option("--name", syn_o.s.name, "Dataset name (default: the variant)");
  syn_cmd->add_option("--seed", syn_o.s.seed);
  syn_cmd->add_option("--length", syn_o.s.length)->check(CLI::Range(2, 1 << 20));
  syn_cmd->add_option("--train", syn_o.s.n_train)->check(CLI::Range(2, 1 << 20));
  syn_cmd->add_option("--test", syn_o.s.n_test)->check(CLI::Range(1, 1 << 20));
  syn_cmd->add_option("--noise", syn_o.s.noise)->check(CLI::NonNegativeNumber);
  syn_cmd->add_option("--label-noise", syn_o.s.label_noise, "Train-label flip probability")
      ->check(CLI::Range(0.0, 1.0));
  syn_cmd->add_option("--out", syn_o.out_dir, "Data directory");
  add_common(syn_cmd, false);

  ReplayOptions rp_o;
  auto* rp_cmd = app.add_subcommand("replay", "Re-run a command from its manifest and verify outputs");
  rp_cmd->add_option("--manifest", rp_o.manifest, "Run manifest")->required()->check(CLI::ExistingFile);
  rp_cmd->add_option("--out-manifest", rp_o.out_manifest, "Manifest of the replayed run");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_o, common, out);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_o, common, out);
    if (ens_cmd->parsed()) return cmd_ensemble(ens_o, common, out, err);
    if (tr_cmd->parsed()) return cmd_transfer(tr_o, common, out, err);
    if (cmp_cmd->parsed()) return cmd_compare(cmp_o, common, out);
    if (cd_cmd->parsed()) return cmd_cd_diagram(cd_o, common, out);
    if (syn_cmd->parsed()) return cmd_synth(syn_o, common, out);
    if (rp_cmd->parsed()) return cmd_replay(rp_o, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace tsce
