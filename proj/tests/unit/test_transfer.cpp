#include <set>

#include "doctest.h"
#include "temp_dir.hpp"
#include "tsce/synthetic.hpp"
#include "tsce/transfer.hpp"

using namespace tsce;
using tsce::testing::TempDir;

namespace {

HyperparameterManifest tiny() {
  HyperparameterManifest hp;
  hp.desk.width_scale = 0.05;
  hp.desk.min_width = 4;
  return hp.desk_scaled();
}

TimeSeriesDataset synth(SynthVariant v, std::uint64_t seed, const std::string& name,
                        Index length = 32, std::size_t n = 16) {
  SynthOptions o;
  o.variant = v;
  o.seed = seed;
  o.length = length;
  o.n_train = n;
  o.n_test = n;
  o.name = name;
  return make_synthetic(o);
}

std::shared_ptr<const TrainedModel> source(ArchKind k, const TimeSeriesDataset& ds, int classes,
                                           std::uint64_t seed, int epochs = 2,
                                           const HyperparameterManifest& hp = tiny()) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  auto split = ds.train;
  // Spread labels over `classes` so the source head has that width.
  for (std::size_t i = 0; i < split.size(); ++i) split[i].label = int(i % std::size_t(classes));
  return std::make_shared<TrainedModel>(
      train(build_model(k, ds.series_length, classes, seed, hp), split, ds.name, c, seed));
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && (a.values() == b.values()).all();
}

}  // namespace

TEST_SUITE("transfer") {
  TEST_CASE("head replacement keeps the body bitwise") {
    const auto ds = synth(SynthVariant::sine_bump, 1, "Src");
    for (ArchKind k : {ArchKind::mlp, ArchKind::fcn, ArchKind::resnet, ArchKind::encoder,
                       ArchKind::mcdcnn}) {
      CAPTURE(display_name(k));
      const auto src = source(k, ds, 5, 3);
      const ModelGraph g = adapt_head(*src, 2, 7);
      CHECK(g.n_classes == 2);
      const int head = g.head_index();
      CHECK(g.nodes[std::size_t(head)].layer.hyper.out_features == 2);
      REQUIRE(g.nodes.size() == src->graph.nodes.size());
      for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        if (int(i) == head) continue;
        const auto &a = g.nodes[i].layer, &b = src->graph.nodes[i].layer;
        for (std::size_t p = 0; p < a.params.size(); ++p) CHECK(tensors_equal(a.params[p], b.params[p]));
        for (std::size_t p = 0; p < a.buffers.size(); ++p) CHECK(tensors_equal(a.buffers[p], b.buffers[p]));
      }
      Tensor x({1, 1, 32});
      CHECK(model_forward(g, x).shape() == Shape{1, 2, 1});
    }
  }

  TEST_CASE("the head is replaced even when the class count matches") {
    const auto ds = synth(SynthVariant::sine_bump, 2, "Src");
    const auto src = source(ArchKind::fcn, ds, 2, 1);
    const ModelGraph g = adapt_head(*src, 2, 1);
    const int head = g.head_index();
    CHECK_FALSE(tensors_equal(g.nodes[std::size_t(head)].layer.params[0],
                              src->graph.nodes[std::size_t(head)].layer.params[0]));
    // Fresh head: zero bias.
    CHECK(g.nodes[std::size_t(head)].layer.params[1].values().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("head seed only affects the head") {
    const auto ds = synth(SynthVariant::sine_bump, 3, "Src");
    const auto src = source(ArchKind::resnet, ds, 3, 2);
    const auto a = adapt_head(*src, 4, 10), b = adapt_head(*src, 4, 11), c = adapt_head(*src, 4, 10);
    const int head = a.head_index();
    for (std::size_t i = 0; i < a.nodes.size(); ++i)
      for (std::size_t p = 0; p < a.nodes[i].layer.params.size(); ++p) {
        CHECK(tensors_equal(a.nodes[i].layer.params[p], c.nodes[i].layer.params[p]));
        const bool same = tensors_equal(a.nodes[i].layer.params[p], b.nodes[i].layer.params[p]);
        if (int(i) == head && p == 0) CHECK_FALSE(same);
        else CHECK(same);
      }
  }

  TEST_CASE("Time-CNN has no head to replace") {
    const auto ds = synth(SynthVariant::sine_bump, 4, "Src");
    const auto src = source(ArchKind::time_cnn, ds, 2, 1);
    CHECK_THROWS_AS(adapt_head(*src, 2, 0), UnsupportedError);
    TransferJob job;
    job.source_model = src;
    job.target = &ds;
    CHECK_THROWS_AS(fine_tune(job), UnsupportedError);
  }

  TEST_CASE("zero-epoch fine-tune on the source data changes only the head") {
    const auto ds = synth(SynthVariant::sine_bump, 5, "Src");
    const auto src = source(ArchKind::fcn, ds, 2, 4, 5);
    TransferJob job;
    job.source_model = src;
    job.target = &ds;
    job.config.epochs = 0;
    job.head_seed = 9;
    const TrainedModel tuned = fine_tune(job);
    // Put the new head into the source graph: outputs must then agree exactly.
    ModelGraph patched = src->graph;
    const auto head = std::size_t(patched.head_index());
    patched.nodes[head].layer.params = tuned.graph.nodes[head].layer.params;
    patched.nodes[head].layer.touch();
    CHECK(predict_proba(patched, ds.test) == predict_proba(tuned.graph, ds.test));
    CHECK(predict_proba(src->graph, ds.test) != predict_proba(tuned.graph, ds.test));

    // Pure function of (source, seed).
    const TrainedModel again = fine_tune(job);
    CHECK(predict_proba(again.graph, ds.test) == predict_proba(tuned.graph, ds.test));
  }

  TEST_CASE("batch-norm statistics reset option") {
    const auto ds = synth(SynthVariant::sine_bump, 6, "Src");
    const auto src = source(ArchKind::fcn, ds, 2, 1, 3);
    TransferJob job;
    job.source_model = src;
    job.target = &ds;
    job.config.epochs = 0;
    const auto kept = fine_tune(job);
    job.reset_batch_norm_statistics = true;
    const auto reset = fine_tune(job);
    for (std::size_t i = 0; i < src->graph.nodes.size(); ++i) {
      if (src->graph.nodes[i].layer.kind != LayerKind::batch_norm) continue;
      CHECK(tensors_equal(kept.graph.nodes[i].layer.buffers[0], src->graph.nodes[i].layer.buffers[0]));
      CHECK(reset.graph.nodes[i].layer.buffers[0].values().abs().maxCoeff() == 0.0);
      CHECK((reset.graph.nodes[i].layer.buffers[1].values() == 1.0).all());
    }
  }

  TEST_CASE("provenance") {
    TempDir dir;
    const auto src_ds = synth(SynthVariant::sine_bump, 7, "Source");
    const auto tgt = synth(SynthVariant::sine_two_bumps, 8, "Target");
    TransferJob job;
    job.source_model = source(ArchKind::fcn, src_ds, 3, 1);
    job.target = &tgt;
    job.config.epochs = 2;
    const auto tuned = fine_tune(job);
    CHECK(tuned.source_dataset == "Target");
    CHECK(tuned.transfer_source == "Source");
    CHECK(tuned.history.size() == 2);
    save_checkpoint(tuned, dir / "t.tsce");
    const auto back = load_checkpoint(dir / "t.tsce");
    CHECK(back.source_dataset == "Target");
    CHECK(back.transfer_source == "Source");
  }

  TEST_CASE("series length") {
    const auto src_ds = synth(SynthVariant::sine_bump, 9, "Src", 48);
    const auto tgt = synth(SynthVariant::sine_two_bumps, 10, "Tgt", 32);
    TransferJob job;
    job.target = &tgt;
    job.config.epochs = 1;
    for (ArchKind k : {ArchKind::fcn, ArchKind::resnet, ArchKind::encoder}) {
      job.source_model = source(k, src_ds, 2, 1);
      const auto tuned = fine_tune(job);
      CHECK(tuned.graph.input_length == 32);
      CHECK(evaluate(tuned, tgt.test).accuracy >= 0.0);
    }
    for (ArchKind k : {ArchKind::mlp, ArchKind::mcdcnn}) {
      job.source_model = source(k, src_ds, 2, 1);
      CHECK_THROWS_AS(job.validate(), SpecError);
      CHECK_THROWS_AS(fine_tune(job), SpecError);
    }
  }

  TEST_CASE("epoch budgets") {
    const auto hp = HyperparameterManifest::defaults();
    CHECK(fine_tune_epochs(ArchKind::fcn, hp, false) == 750);
    CHECK(fine_tune_epochs(ArchKind::resnet, hp, false) == 375);
    CHECK(fine_tune_epochs(ArchKind::fcn, hp, true) == 100);
    TransferConfig c;
    c.hp = hp;
    c.desk = true;
    CHECK(c.for_source(ArchKind::encoder).epochs == 100);
    c.epochs = 7;
    CHECK(c.for_source(ArchKind::encoder).epochs == 7);
  }

  TEST_CASE("fine-tuning does not fit worse than training from scratch") {
    const auto hp = HyperparameterManifest::defaults().desk_scaled();
    SynthOptions so;
    so.seed = 11;
    so.name = "SineBump";
    const auto src_ds = make_synthetic(so);
    so.variant = SynthVariant::sine_two_bumps;
    so.seed = 12;
    so.name = "SineTwoBumps";
    const auto tgt = make_synthetic(so);

    const int epochs = 30;
    const auto src = source(ArchKind::fcn, src_ds, 2, 1, 60, hp);
    TransferJob job;
    job.source_model = src;
    job.target = &tgt;
    job.config.epochs = epochs;
    job.config.seed = 2;
    job.head_seed = 2;
    const auto tuned = fine_tune(job);

    TrainConfig scratch_cfg;
    scratch_cfg.epochs = epochs;
    scratch_cfg.seed = 2;
    const auto scratch = train(build_model(ArchKind::fcn, tgt.series_length, 2, 2, hp), tgt, scratch_cfg, 2);
    const double tuned_acc = evaluate(tuned, tgt.train).accuracy;
    const double scratch_acc = evaluate(scratch, tgt.train).accuracy;
    MESSAGE("train accuracy: fine-tuned " << tuned_acc << ", scratch " << scratch_acc);
    CHECK(tuned_acc >= scratch_acc);
  }

  TEST_CASE("transfer ensembles") {
    const auto tgt = synth(SynthVariant::sine_two_bumps, 13, "Target");
    std::vector<std::shared_ptr<const TrainedModel>> sources;
    for (int i = 0; i < 3; ++i)
      sources.push_back(source(ArchKind::fcn, synth(SynthVariant::sine_bump, 20 + i, "S" + std::to_string(i)),
                               2 + i, std::uint64_t(i)));
    TransferConfig c;
    c.hp = tiny();
    c.epochs = 2;
    const auto e = build_transfer_ensemble(sources, tgt, c);
    CHECK(e.spec.size() == 3);
    CHECK(e.failures.empty());
    std::set<std::string> provenance;
    for (const auto& m : e.spec.members) {
      provenance.insert(m->transfer_source);
      CHECK(m->graph.n_classes == 2);
    }
    CHECK(provenance == std::set<std::string>{"S0", "S1", "S2"});

    const auto one = build_transfer_ensemble(std::span(sources).first(1), tgt, c);
    CHECK(one.spec.size() == 1);
    CHECK(ensemble_proba(one.spec, tgt.test) == predict_proba(one.spec.members[0]->graph, tgt.test));

    // A Time-CNN source fails; survivors still form the ensemble.
    auto mixed = sources;
    mixed.push_back(source(ArchKind::time_cnn, synth(SynthVariant::sine_bump, 30, "T"), 2, 0));
    const auto partial = build_transfer_ensemble(mixed, tgt, c);
    CHECK(partial.spec.size() == 3);
    REQUIRE(partial.failures.size() == 1);
    CHECK(partial.failures[0].kind == ArchKind::time_cnn);
    CHECK(partial.failures[0].source == "T");

    // Parallel fine-tuning gives the same members.
    c.jobs = 3;
    const auto par = build_transfer_ensemble(sources, tgt, c);
    CHECK(ensemble_proba(par.spec, tgt.test) == ensemble_proba(e.spec, tgt.test));

    CHECK_THROWS_AS(build_transfer_ensemble({}, tgt, c), SpecError);
    const std::vector<std::shared_ptr<const TrainedModel>> only_bad{mixed.back()};
    CHECK_THROWS_AS(build_transfer_ensemble(only_bad, tgt, c), Error);
  }
}
