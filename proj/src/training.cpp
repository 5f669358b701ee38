#include "tsce/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace tsce {

namespace {

std::string real_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view to_string(CheckpointPolicy policy) {
  return policy == CheckpointPolicy::best_train_loss ? "best_train_loss" : "final";
}

CheckpointPolicy checkpoint_policy_from_string(std::string_view name) {
  if (name == "best_train_loss" || name == "best") return CheckpointPolicy::best_train_loss;
  if (name == "final") return CheckpointPolicy::final;
  throw ParseError("unknown checkpoint policy '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw DomainError("epochs must be >= 1");
  if (batch_size < 0) throw DomainError("batch size must be >= 1 (or 0 for automatic)");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw DomainError("plateau factor must lie in (0, 1)");
  if (plateau_patience < 1) throw DomainError("plateau patience must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw DomainError("learning rate must be positive");
  if (min_learning_rate < 0.0) throw DomainError("min learning rate must be >= 0");
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  os << "epochs=" << epochs << ";batch_size=" << batch_size
     << ";lr=" << real_text(optimizer.learning_rate) << ";beta1=" << real_text(optimizer.beta1)
     << ";beta2=" << real_text(optimizer.beta2) << ";eps=" << real_text(optimizer.epsilon)
     << ";plateau_factor=" << real_text(plateau_factor) << ";plateau_patience=" << plateau_patience
     << ";min_lr=" << real_text(min_learning_rate) << ";seed=" << seed
     << ";checkpoint=" << to_string(checkpoint);
  return os.str();
}

std::uint64_t TrainConfig::digest() const { return fnv1a64(canonical_text()); }

TrainConfig default_train_config(ArchKind kind, const HyperparameterManifest& hp) {
  TrainConfig c;
  c.epochs = hp.epochs(kind);
  return c;
}

int effective_batch_size(const TrainConfig& config, std::size_t n_train) {
  if (config.batch_size > 0) return config.batch_size;
  const int tenth = int((n_train + 9) / 10);
  return std::max(1, std::min(16, tenth));
}

int argmax(const Eigen::Ref<const Eigen::VectorXd>& row) {
  int best = 0;
  for (Index i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = int(i);
  return best;
}

TrainedModel train(const ModelGraph& model, const TimeSeriesDataset& dataset,
                   const TrainConfig& config, std::uint64_t model_seed) {
  return train(model, dataset.train, dataset.name, config, model_seed);
}

TrainedModel train(const ModelGraph& model, const std::vector<TimeSeries>& train_split,
                   const std::string& dataset_name, const TrainConfig& config,
                   std::uint64_t model_seed) {
  config.validate();
  if (train_split.empty()) throw DomainError("train: empty train split");
  for (const auto& s : train_split) {
    if (s.values.size() != model.input_length)
      throw ShapeError("train: series length " + std::to_string(s.values.size()) +
                       " does not match model input length " +
                       std::to_string(model.input_length));
    if (s.label < 0 || s.label >= model.n_classes) throw LabelError("train: label out of range");
  }

  ModelGraph g = model;
  Rng rng(config.seed);
  AdamState state = make_adam_state(g.parameters(), config.optimizer);
  const std::size_t n = train_split.size();
  const std::size_t batch_size = std::size_t(effective_batch_size(config, n));

  TrainedModel out;
  out.model_seed = model_seed;
  out.train_seed = config.seed;
  out.config_digest = config.digest();
  out.source_dataset = dataset_name;

  double best_loss = std::numeric_limits<double>::infinity();
  double plateau_best = std::numeric_limits<double>::infinity();
  int plateau_wait = 0;
  std::optional<ModelGraph> best;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t stop = std::min(n, start + batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      const Tensor x = to_batch(train_split, rows);
      std::vector<int> y;
      for (std::size_t r : rows) y.push_back(train_split[r].label);

      const ForwardTrace trace = forward_trace(g, x, Mode::train, rng);
      const LossResult l = loss(g.loss_kind, trace.output(), y);
      if (!std::isfinite(l.value)) throw NumericsError("train: non-finite loss", epoch);
      const ModelGradients grads = model_backward(g, trace, l.grad);
      apply_running_statistics(g, trace);
      try {
        adam_step(g.parameters(), grads.params, state);
      } catch (const NumericsError& e) {
        throw NumericsError(e.what(), epoch);
      }
      g.touch_all();

      loss_sum += l.value * double(rows.size());
      const auto probs = as_matrix(trace.output(), Index(rows.size()), g.n_classes);
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (argmax(probs.row(Index(i)).transpose()) == y[i]) ++correct;
    }
    const double epoch_loss = loss_sum / double(n);
    out.history.push_back({epoch_loss, double(correct) / double(n), state.hyper.learning_rate});

    if (config.checkpoint == CheckpointPolicy::best_train_loss && epoch_loss < best_loss) {
      best_loss = epoch_loss;
      best = g;
      out.selected_epoch = epoch;
    }
    if (epoch_loss < plateau_best) {
      plateau_best = epoch_loss;
      plateau_wait = 0;
    } else if (++plateau_wait >= config.plateau_patience) {
      state.hyper.learning_rate =
          std::max(state.hyper.learning_rate * config.plateau_factor, config.min_learning_rate);
      plateau_wait = 0;
    }
  }

  if (config.checkpoint == CheckpointPolicy::final || !best) {
    out.graph = std::move(g);
    out.selected_epoch = config.epochs - 1;
  } else {
    out.graph = std::move(*best);
  }
  return out;
}

Eigen::MatrixXd predict_proba(const ModelGraph& model, const std::vector<TimeSeries>& split,
                              std::size_t batch_size) {
  if (split.empty()) throw DomainError("predict: empty split");
  batch_size = std::max<std::size_t>(1, batch_size);
  Eigen::MatrixXd out(Index(split.size()), model.n_classes);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) rows.push_back(i);
    const Tensor y = model_forward(model, to_batch(split, rows));
    out.middleRows(Index(start), Index(rows.size())) =
        as_matrix(y, Index(rows.size()), model.n_classes);
  }
  return out;
}

Evaluation evaluate(const ModelGraph& model, const std::vector<TimeSeries>& split) {
  if (split.empty()) throw DomainError("evaluate: empty split");
  const Eigen::MatrixXd probs = predict_proba(model, split);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (argmax(probs.row(Index(i)).transpose()) == split[i].label) ++correct;

  Tensor out({probs.rows(), probs.cols(), 1});
  as_matrix(out, probs.rows(), probs.cols()) = probs;
  const auto labels = labels_of(split);
  Evaluation e;
  e.accuracy = double(correct) / double(split.size());
  e.mean_loss = loss(model.loss_kind, out, labels).value;
  return e;
}

Evaluation evaluate(const TrainedModel& model, const std::vector<TimeSeries>& split) {
  return evaluate(model.graph, split);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace tsce
