#include "tsce/transfer.hpp"

#include <cmath>

#include "tsce/parallel.hpp"

namespace tsce {

void TransferJob::validate() const {
  if (!source_model) throw SpecError("transfer: no source model");
  if (target == nullptr) throw SpecError("transfer: no target dataset");
  const auto& g = source_model->graph;
  if (g.input_length != target->series_length && !is_length_invariant(g.kind))
    throw SpecError("transfer: " + std::string(display_name(g.kind)) +
                    " depends on the series length (source " + std::to_string(g.input_length) +
                    ", target " + std::to_string(target->series_length) + ")");
}

ModelGraph adapt_head(const TrainedModel& source, int n_classes_target, std::uint64_t seed) {
  const ModelGraph& src = source.graph;
  if (src.kind == ArchKind::time_cnn || src.output_kind != OutputKind::softmax_distribution)
    throw UnsupportedError("transfer: " + std::string(display_name(src.kind)) +
                           " has no softmax head to replace");
  if (n_classes_target < 2) throw DomainError("transfer: target needs at least 2 classes");

  ModelGraph g = src;
  const std::size_t head = g.head_index();
  Layer& dense = g.nodes[head].layer;
  const Index in_features = dense.hyper.in_features;
  Rng rng(seed);
  dense = make_dense(in_features, n_classes_target, rng);
  g.n_classes = n_classes_target;
  for (std::size_t i = head + 1; i < g.nodes.size(); ++i) g.nodes[i].layer.touch();
  g.validate();
  return g;
}

int fine_tune_epochs(ArchKind kind, const HyperparameterManifest& hp, bool desk) {
  if (desk) return hp.desk.transfer_epochs;
  return std::max(1, int(std::lround(hp.transfer_epoch_fraction * hp.epochs(kind))));
}

TrainedModel fine_tune(const TransferJob& job) {
  job.validate();
  const TrainedModel& source = *job.source_model;
  ModelGraph g = adapt_head(source, job.target->n_classes, job.head_seed);
  if (g.input_length != job.target->series_length) set_input_length(g, job.target->series_length);
  if (job.reset_batch_norm_statistics)
    for (auto& n : g.nodes)
      if (n.layer.kind == LayerKind::batch_norm) {
        n.layer.buffers.at(0).values().setZero();
        n.layer.buffers.at(1).values().setOnes();
        n.layer.touch();
      }

  TrainedModel out;
  if (job.config.epochs == 0) {
    out.graph = std::move(g);
    out.model_seed = job.head_seed;
    out.train_seed = job.config.seed;
    out.config_digest = job.config.digest();
    out.source_dataset = job.target->name;
  } else {
    out = train(g, *job.target, job.config, job.head_seed);
  }
  out.transfer_source = source.source_dataset.empty() ? "unknown" : source.source_dataset;
  return out;
}

TrainConfig TransferConfig::for_source(ArchKind kind) const {
  TrainConfig c = base;
  c.epochs = epochs.value_or(fine_tune_epochs(kind, hp, desk));
  return c;
}

EnsembleBuild build_transfer_ensemble(std::span<const std::shared_ptr<const TrainedModel>> sources,
                                      const TimeSeriesDataset& target, const TransferConfig& config,
                                      const std::string& name) {
  if (sources.empty()) throw SpecError("transfer ensemble needs at least one source");
  std::vector<std::shared_ptr<const TrainedModel>> members(sources.size());
  std::vector<std::string> errors(sources.size());
  parallel_for(sources.size(), config.jobs, [&](std::size_t i) {
    try {
      if (!sources[i]) throw SpecError("transfer: missing source model");
      TransferJob job;
      job.source_model = sources[i];
      job.target = &target;
      job.config = config.for_source(sources[i]->graph.kind);
      job.head_seed = config.head_seed;
      members[i] = std::make_shared<TrainedModel>(fine_tune(job));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  EnsembleBuild out;
  out.spec.name = name;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (members[i]) {
      out.spec.members.push_back(members[i]);
    } else {
      const auto* s = sources[i].get();
      out.failures.push_back({s ? s->graph.kind : ArchKind::fcn, config.head_seed,
                              s ? s->source_dataset : std::string(), errors[i]});
    }
  }
  if (out.spec.members.empty())
    throw Error("transfer ensemble: every source failed; first error: " + errors.front());
  return out;
}

}  // namespace tsce
