#include <cmath>
#include <cstring>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "tsce/synthetic.hpp"
#include "tsce/training.hpp"

using namespace tsce;
using tsce::testing::TempDir;

namespace {

HyperparameterManifest desk() { return HyperparameterManifest::defaults().desk_scaled(); }

HyperparameterManifest tiny() {
  HyperparameterManifest hp;
  hp.desk.width_scale = 0.05;
  hp.desk.min_width = 4;
  return hp.desk_scaled();
}

TimeSeriesDataset small_set(std::uint64_t seed, std::size_t n = 20, Index length = 32) {
  SynthOptions o;
  o.seed = seed;
  o.n_train = n;
  o.n_test = n;
  o.length = length;
  return make_synthetic(o);
}

// Two-class linear model on the first sample: class 1 iff x[0] > 0, exactly
// uniform when x[0] == 0.
ModelGraph sign_model(Index length) {
  Rng rng(0);
  ModelGraph g;
  g.input_length = length;
  g.n_classes = 2;
  Layer d = make_dense(length, 2, rng);
  d.params[0].values().setZero();
  d.params[1].values().setZero();
  d.params[0].data()[length] = 1.0;  // weight (out, in): row 1, column 0
  g.nodes.push_back({"dense", d, {-1}});
  g.nodes.push_back({"softmax", make_simple(LayerKind::softmax), {0}});
  g.validate();
  return g;
}

TimeSeries series(std::initializer_list<double> v, int label) {
  TimeSeries s;
  s.values.resize(Index(v.size()));
  Index i = 0;
  for (double x : v) s.values[i++] = x;
  s.label = label;
  return s;
}

bool same_parameters(const ModelGraph& a, const ModelGraph& b) {
  if (a.nodes.size() != b.nodes.size()) return false;
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const auto &la = a.nodes[i].layer, &lb = b.nodes[i].layer;
    for (std::size_t p = 0; p < la.params.size(); ++p)
      if (la.params[p].values().matrix() != lb.params[p].values().matrix()) return false;
    for (std::size_t p = 0; p < la.buffers.size(); ++p)
      if (la.buffers[p].values().matrix() != lb.buffers[p].values().matrix()) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = {};
    c.batch_size = -1;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = {};
    c.plateau_factor = 1.0;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c.plateau_factor = 0.0;
    CHECK_THROWS_AS(c.validate(), DomainError);

    const auto ds = small_set(1);
    TrainConfig zero;
    zero.epochs = 0;
    CHECK_THROWS_AS(train(build_model(ArchKind::fcn, 32, 2, 0, tiny()), ds, zero), DomainError);
  }

  TEST_CASE("defaults") {
    const TrainConfig c;
    CHECK(c.optimizer.learning_rate == 1e-3);
    CHECK(c.optimizer.beta1 == 0.9);
    CHECK(c.optimizer.beta2 == 0.999);
    CHECK(c.optimizer.epsilon == 1e-8);
    CHECK(c.plateau_factor == 0.5);
    CHECK(c.plateau_patience == 50);
    CHECK(c.min_learning_rate == 1e-4);
    CHECK(c.checkpoint == CheckpointPolicy::best_train_loss);
    const auto hp = HyperparameterManifest::defaults();
    CHECK(default_train_config(ArchKind::fcn, hp).epochs == 1500);
    CHECK(default_train_config(ArchKind::encoder, hp).epochs == 1500);
    CHECK(default_train_config(ArchKind::resnet, hp).epochs == 750);
    CHECK(default_train_config(ArchKind::mlp, hp).epochs == 2000);
    CHECK(default_train_config(ArchKind::mcdcnn, hp).epochs == 120);
    CHECK(default_train_config(ArchKind::time_cnn, hp).epochs == 2000);
    for (ArchKind k : kAllArchitectures) CHECK(default_train_config(k, desk()).epochs <= 200);
  }

  TEST_CASE("batch size rule") {
    const TrainConfig c;
    for (std::size_t n : {1, 5, 10, 11, 50, 159, 160, 161, 1000}) {
      const int expected = std::min(16, int(std::ceil(double(n) / 10.0)));
      CHECK(effective_batch_size(c, n) == expected);
    }
    TrainConfig fixed;
    fixed.batch_size = 7;
    CHECK(effective_batch_size(fixed, 1000) == 7);
  }

  TEST_CASE("policy names") {
    CHECK(checkpoint_policy_from_string("final") == CheckpointPolicy::final);
    CHECK(checkpoint_policy_from_string(to_string(CheckpointPolicy::best_train_loss)) ==
          CheckpointPolicy::best_train_loss);
    CHECK_THROWS_AS(checkpoint_policy_from_string("best-test"), ParseError);
  }

  TEST_CASE("config digest identifies the configuration") {
    TrainConfig a, b;
    CHECK(a.digest() == b.digest());
    b.seed = 1;
    CHECK(a.digest() != b.digest());
    b = a;
    b.optimizer.learning_rate = 2e-3;
    CHECK(a.digest() != b.digest());
  }

  TEST_CASE("FCN separates the synthetic set") {
    SynthOptions o;
    o.seed = 1;
    const auto ds = make_synthetic(o);
    REQUIRE(one_nn_accuracy(ds.train, ds.test) == 1.0);  // separable before we train
    TrainConfig c = default_train_config(ArchKind::fcn, desk());
    c.epochs = 100;
    c.seed = 1;
    const auto m = train(build_model(ArchKind::fcn, ds.series_length, 2, 1, desk()), ds, c, 1);
    CHECK(m.history.size() == 100);
    CHECK(evaluate(m, ds.train).accuracy == 1.0);
    bool reached = false;
    for (const auto& e : m.history) reached = reached || e.accuracy == 1.0;
    CHECK(reached);
  }

  TEST_CASE("determinism") {
    const auto ds = small_set(2);
    for (ArchKind k : kAllArchitectures) {
      CAPTURE(display_name(k));
      TrainConfig c;
      c.epochs = 3;
      c.seed = 9;
      const auto a = train(build_model(k, 32, 2, 4, tiny()), ds, c, 4);
      const auto b = train(build_model(k, 32, 2, 4, tiny()), ds, c, 4);
      CHECK(same_parameters(a.graph, b.graph));
      CHECK(a.history.size() == 3);
      for (std::size_t e = 0; e < a.history.size(); ++e) CHECK(a.history[e].loss == b.history[e].loss);
      c.seed = 10;
      const auto d = train(build_model(k, 32, 2, 4, tiny()), ds, c, 4);
      CHECK_FALSE(same_parameters(a.graph, d.graph));
    }
  }

  TEST_CASE("checkpoint policy selects the lowest-loss epoch") {
    const auto ds = small_set(3);
    TrainConfig c;
    c.epochs = 12;
    c.seed = 1;
    c.optimizer.learning_rate = 0.05;  // noisy enough that the last epoch is rarely best
    const auto model = build_model(ArchKind::mlp, 32, 2, 2, tiny());
    const auto best = train(model, ds, c, 2);
    int argmin = 0;
    for (std::size_t e = 1; e < best.history.size(); ++e)
      if (best.history[e].loss < best.history[std::size_t(argmin)].loss) argmin = int(e);
    CHECK(best.selected_epoch == argmin);

    c.checkpoint = CheckpointPolicy::final;
    const auto last = train(model, ds, c, 2);
    CHECK(last.selected_epoch == 11);
    // Same trajectory, so the final run's history matches.
    CHECK(last.history.back().loss == best.history.back().loss);

    // Best weights are a snapshot of the selected epoch: retraining for
    // exactly that many epochs with the final policy reproduces them.
    TrainConfig prefix = c;
    prefix.epochs = argmin + 1;
    CHECK(same_parameters(train(model, ds, prefix, 2).graph, best.graph));
  }

  TEST_CASE("plateau schedule") {
    const auto ds = small_set(4);
    TrainConfig c;
    c.epochs = 30;
    c.plateau_patience = 1;
    c.optimizer.learning_rate = 0.5;  // diverging loss triggers reductions
    c.min_learning_rate = 0.1;
    const auto m = train(build_model(ArchKind::mlp, 32, 2, 0, tiny()), ds, c);
    double previous = 0.5;
    for (const auto& e : m.history) {
      CHECK(e.learning_rate <= previous);
      CHECK(e.learning_rate >= 0.1);
      previous = e.learning_rate;
    }
  }

  TEST_CASE("non-finite loss reports the epoch") {
    const auto ds = small_set(5);
    TrainConfig c;
    c.epochs = 50;
    c.optimizer.learning_rate = 1e300;
    try {
      train(build_model(ArchKind::mlp, 32, 2, 0, tiny()), ds, c);
      FAIL("expected NumericsError");
    } catch (const NumericsError& e) {
      CHECK(e.epoch() >= 0);
      CHECK(e.epoch() < 50);
    }
  }

  TEST_CASE("train input validation") {
    const auto ds = small_set(6);
    TrainConfig c;
    c.epochs = 1;
    CHECK_THROWS_AS(train(build_model(ArchKind::fcn, 40, 2, 0, tiny()), ds, c), ShapeError);
    auto bad = ds.train;
    bad[0].label = 5;
    CHECK_THROWS_AS(train(build_model(ArchKind::fcn, 32, 2, 0, tiny()), bad, "x", c), LabelError);
    CHECK_THROWS_AS(train(build_model(ArchKind::fcn, 32, 2, 0, tiny()), std::vector<TimeSeries>{}, "x", c),
                    DomainError);
  }

  TEST_CASE("a small Adam step decreases the batch loss") {
    Rng rng(77);
    int checked = 0;
    for (ArchKind k : kAllArchitectures) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        CAPTURE(display_name(k));
        ModelGraph g = build_model(k, 24, 3, seed, tiny());
        const Tensor x = oracle::random_tensor({6, 1, 24}, rng, -2.0, 2.0);
        const std::vector<int> y{0, 1, 2, 0, 1, 2};
        const Rng fixed(seed + 100);
        auto batch_loss = [&](const ModelGraph& m) {
          Rng r = fixed;
          const auto trace = forward_trace(m, x, Mode::train, r);
          return std::pair{loss(m.loss_kind, trace.output(), y), trace};
        };
        const auto [before, trace] = batch_loss(g);
        const auto grads = model_backward(g, trace, before.grad);
        AdamHyper h;
        h.learning_rate = 1e-5;
        AdamState state = make_adam_state(g.parameters(), h);
        adam_step(g.parameters(), grads.params, state);
        g.touch_all();
        CHECK(batch_loss(g).first.value < before.value);
        ++checked;
      }
    }
    CHECK(checked == 18);
  }

  TEST_CASE("evaluate") {
    const ModelGraph g = sign_model(3);
    SUBCASE("all correct") {
      const std::vector<TimeSeries> s{series({1, 0, 0}, 1), series({-1, 0, 0}, 0)};
      CHECK(evaluate(g, s).accuracy == 1.0);
    }
    SUBCASE("uniform output breaks ties to the lowest class") {
      const std::vector<TimeSeries> s{series({0, 1, 2}, 1), series({0, 5, 1}, 1)};
      const auto p = predict_proba(g, s);
      CHECK(p(0, 0) == p(0, 1));
      CHECK(evaluate(g, s).accuracy == 0.0);
    }
    SUBCASE("counting") {
      const std::vector<TimeSeries> s{series({1, 0, 0}, 1), series({2, 0, 0}, 0),
                                      series({-1, 0, 0}, 0), series({-3, 0, 0}, 1),
                                      series({4, 0, 0}, 1)};
      // Predictions 1,1,0,0,1 against labels 1,0,0,1,1: two mistakes.
      CHECK(evaluate(g, s).accuracy == doctest::Approx(1.0 - 2.0 / 5.0));
    }
    CHECK_THROWS_AS(evaluate(g, {}), DomainError);
    CHECK(argmax(Eigen::Vector3d(0.2, 0.4, 0.4)) == 1);
  }

  TEST_CASE("prediction does not depend on the batch size") {
    const auto ds = small_set(7, 23);
    const auto g = build_model(ArchKind::resnet, 32, 2, 3, tiny());
    const auto a = predict_proba(g, ds.test, 64);
    const auto b = predict_proba(g, ds.test, 5);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("checkpoint round trip") {
    TempDir dir;
    const auto ds = small_set(8);
    for (ArchKind k : kAllArchitectures) {
      CAPTURE(display_name(k));
      TrainConfig c;
      c.epochs = 2;
      c.seed = 21;
      auto m = train(build_model(k, 32, 2, 13, tiny()), ds, c, 13);
      m.transfer_source = "Other";
      const auto path = dir / (std::string(to_string(k)) + ".tsce");
      save_checkpoint(m, path);
      const auto back = load_checkpoint(path);
      CHECK(same_parameters(back.graph, m.graph));
      CHECK(back.model_seed == 13);
      CHECK(back.train_seed == 21);
      CHECK(back.config_digest == c.digest());
      CHECK(back.source_dataset == ds.name);
      CHECK(back.transfer_source == "Other");
      CHECK(back.selected_epoch == m.selected_epoch);
      REQUIRE(back.history.size() == m.history.size());
      for (std::size_t e = 0; e < m.history.size(); ++e) {
        CHECK(back.history[e].loss == m.history[e].loss);
        CHECK(back.history[e].accuracy == m.history[e].accuracy);
      }
      CHECK(back.graph.output_kind == m.graph.output_kind);
      const auto pa = predict_proba(m.graph, ds.test), pb = predict_proba(back.graph, ds.test);
      CHECK(std::memcmp(pa.data(), pb.data(), sizeof(double) * std::size_t(pa.size())) == 0);
      CHECK(evaluate(back, ds.test).accuracy == evaluate(m, ds.test).accuracy);
      CHECK(serialize_checkpoint(back) == serialize_checkpoint(m));
    }
  }

  TEST_CASE("checkpoint byte layout") {
    const auto m = train(build_model(ArchKind::fcn, 32, 2, 1, tiny()), small_set(9), [] {
      TrainConfig c;
      c.epochs = 1;
      return c;
    }());
    const std::string bytes = serialize_checkpoint(m);
    auto u64_at = [&](std::size_t off) {
      std::uint64_t v = 0;
      for (int i = 7; i >= 0; --i) v = v << 8 | static_cast<unsigned char>(bytes[off + std::size_t(i)]);
      return v;
    };
    CHECK(bytes.substr(0, 4) == "TSCE");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    const std::uint64_t meta = u64_at(8);
    const std::string text = bytes.substr(16, meta);
    CHECK(text.find("arch=fcn") != std::string::npos);
    CHECK(text.find("model_seed=") != std::string::npos);
    const std::size_t payload = 16 + meta;
    const std::uint64_t count = u64_at(payload);
    // Trained parameters plus the running mean and variance of each batch norm.
    std::uint64_t bn_channels = 0;
    for (const auto& n : m.graph.nodes)
      if (n.layer.kind == LayerKind::batch_norm) bn_channels += std::uint64_t(n.layer.hyper.in_channels);
    CHECK(count == std::uint64_t(count_parameters(m.graph)) + 2 * bn_channels);
    // First payload double is the first conv weight.
    double first = 0.0;
    const std::uint64_t raw = u64_at(payload + 8);
    std::memcpy(&first, &raw, sizeof first);
    CHECK(first == m.graph.nodes[0].layer.params[0].data()[0]);
    CHECK(bytes.size() == payload + 8 + count * 8 + 8);
    CHECK(u64_at(bytes.size() - 8) == fnv1a64(std::string_view(bytes).substr(0, bytes.size() - 8)));
  }

  TEST_CASE("damaged checkpoints") {
    const auto m = train(build_model(ArchKind::mlp, 32, 2, 1, tiny()), small_set(10), [] {
      TrainConfig c;
      c.epochs = 1;
      return c;
    }());
    const std::string bytes = serialize_checkpoint(m);
    for (std::size_t cut : {std::size_t(0), std::size_t(3), std::size_t(10), bytes.size() / 2,
                            bytes.size() - 1})
      CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, cut)), FormatError);
    std::string version = bytes;
    version[4] = 2;
    CHECK_THROWS_AS(deserialize_checkpoint(version), FormatError);
    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(magic), FormatError);
    std::string flipped = bytes;
    flipped[bytes.size() - 20] ^= 0x10;
    CHECK_THROWS_AS(deserialize_checkpoint(flipped), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), FormatError);
    TempDir dir;
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.tsce"), FormatError);
  }
}
