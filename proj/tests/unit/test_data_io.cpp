#include <cmath>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"
#include "tsce/data_io.hpp"
#include "tsce/synthetic.hpp"

using namespace tsce;
using tsce::testing::TempDir;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(Index(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST_SUITE("data_io") {
  TEST_CASE("two-row file") {
    TempDir dir;
    const auto train = dir.write("Tiny_TRAIN.csv", "1,0.0,1.0\n2,1.0,0.0");
    const auto test = dir.write("Tiny_TEST.csv", "1,0.0,1.0\n2,1.0,0.0");
    const auto ds = load_ucr_dataset(train, test, {.z_normalize = false});
    CHECK(ds.name == "Tiny");
    CHECK(ds.n_classes == 2);
    CHECK(ds.series_length == 2);
    CHECK(ds.train[0].label == 0);
    CHECK(ds.train[1].label == 1);
    CHECK(ds.train[1].values[0] == 1.0);
    CHECK(ds.test.size() == 2);
  }

  TEST_CASE("labels map to contiguous indices in raw order") {
    TempDir dir;
    const auto train = dir.write("L_TRAIN.tsv", "1\t0\t1\t2\n-1\t3\t4\t5\n7\t1\t1\t2\n-1\t0\t0\t1\n");
    const auto test = dir.write("L_TEST.tsv", "7\t0\t0\t1\n-1\t0\t1\t1\n");
    const auto ds = load_ucr_dataset(train, test);
    CHECK(ds.raw_labels == std::vector<double>{-1, 1, 7});
    CHECK(labels_of(ds.train) == std::vector<int>{1, 0, 2, 0});
    CHECK(labels_of(ds.test) == std::vector<int>{2, 0});
    // Bijection: each raw label has exactly one index.
    const auto labels = labels_of(ds.train);
    const std::set<int> indices(labels.begin(), labels.end());
    CHECK(indices.size() == ds.raw_labels.size());
  }

  TEST_CASE("loader errors") {
    TempDir dir;
    const auto good = dir.write("G_TEST.csv", "1,0,1,2,3\n2,1,0,2,3\n");
    SUBCASE("ragged row") {
      const auto bad = dir.write("R_TRAIN.csv", "1,0,1,2,3\n2,1,0,2\n");
      CHECK_THROWS_AS(load_ucr_dataset(bad, good), FormatError);
    }
    SUBCASE("non-numeric cell") {
      const auto bad = dir.write("P_TRAIN.csv", "1,0,1,x,3\n2,1,0,2,3\n");
      CHECK_THROWS_AS(load_ucr_dataset(bad, good), ParseError);
    }
    SUBCASE("non-finite value") {
      const auto bad = dir.write("N_TRAIN.csv", "1,0,1,nan,3\n2,1,0,2,3\n");
      CHECK_THROWS_AS(load_ucr_dataset(bad, good), ParseError);
    }
    SUBCASE("test label absent from train") {
      const auto train = dir.write("U_TRAIN.csv", "1,0,1,2,3\n2,1,0,2,3\n");
      const auto test = dir.write("U_TEST.csv", "3,0,1,2,3\n");
      CHECK_THROWS_AS(load_ucr_dataset(train, test), LabelError);
    }
    SUBCASE("test length differs") {
      const auto train = dir.write("V_TRAIN.csv", "1,0,1,2,3\n2,1,0,2,3\n");
      const auto test = dir.write("V_TEST.csv", "1,0,1,2\n");
      CHECK_THROWS_AS(load_ucr_dataset(train, test), FormatError);
    }
    SUBCASE("empty file") {
      const auto train = dir.write("E_TRAIN.csv", "\n\n");
      CHECK_THROWS_AS(load_ucr_dataset(train, good), FormatError);
    }
    SUBCASE("missing file") {
      CHECK_THROWS_AS(load_ucr_dataset(dir / "nope_TRAIN.csv", good), FormatError);
    }
  }

  TEST_CASE("dataset file discovery") {
    TempDir dir;
    dir.write("A/A_TRAIN.tsv", "1\t0\t1\n");
    dir.write("A/A_TEST.tsv", "1\t0\t1\n");
    dir.write("B_TRAIN.csv", "1,0,1\n");
    dir.write("B_TEST.csv", "1,0,1\n");
    CHECK(find_dataset_files(dir.path(), "A").train == dir / "A/A_TRAIN.tsv");
    CHECK(find_dataset_files(dir.path(), "B").test == dir / "B_TEST.csv");
    CHECK_THROWS_AS(find_dataset_files(dir.path(), "C"), FormatError);
  }

  TEST_CASE("z-normalisation") {
    const Eigen::VectorXd z = z_normalize(vec({1, 2, 3}));
    // (x - 2) / sqrt(2/3)
    const double s = std::sqrt(2.0 / 3.0);
    CHECK(z[0] == doctest::Approx(-1.0 / s).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(0.0));
    CHECK(z[2] == doctest::Approx(1.2247).epsilon(1e-3));
    CHECK(z_normalize(vec({5, 5, 5})) == Eigen::VectorXd::Zero(3));

    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const Index n = 2 + Index(rng.below(60));
      Eigen::VectorXd x(n);
      for (Index i = 0; i < n; ++i) x[i] = rng.uniform(-50, 50) * (1 + trial);
      const Eigen::VectorXd once = z_normalize(x);
      CHECK(std::abs(once.mean()) < 1e-9);
      CHECK(std::abs(std::sqrt(once.array().square().mean()) - 1.0) < 1e-9);
      CHECK((z_normalize(once) - once).cwiseAbs().maxCoeff() < 1e-9);
    }
    TimeSeries series{vec({0, 2}), 1};
    const TimeSeries zs = z_normalize(series);
    CHECK(zs.label == 1);
    CHECK(zs.values[0] == doctest::Approx(-1.0));
  }

  TEST_CASE("loading normalises by default") {
    TempDir dir;
    const auto train = dir.write("Z_TRAIN.csv", "1,1,2,3\n2,10,10,10\n");
    const auto test = dir.write("Z_TEST.csv", "1,4,4,6\n");
    const auto ds = load_ucr_dataset(train, test);
    CHECK(ds.train[0].values[2] == doctest::Approx(1.2247).epsilon(1e-3));
    CHECK(ds.train[1].values.cwiseAbs().maxCoeff() == 0.0);
    const auto raw = load_ucr_dataset(train, test, {.z_normalize = false});
    CHECK(raw.train[0].values[2] == 3.0);
  }

  TEST_CASE("dataset invariants") {
    TimeSeriesDataset ds;
    ds.name = "x";
    ds.n_classes = 2;
    ds.series_length = 3;
    ds.train = {{vec({0, 1, 2}), 0}, {vec({1, 1, 2}), 1}};
    ds.test = {{vec({0, 1, 2}), 1}};
    CHECK_NOTHROW(ds.validate());
    auto missing = ds;
    missing.train[1].label = 0;
    CHECK_THROWS_AS(missing.validate(), LabelError);
    auto out_of_range = ds;
    out_of_range.test[0].label = 2;
    CHECK_THROWS_AS(out_of_range.validate(), LabelError);
    auto wrong_length = ds;
    wrong_length.test[0].values = vec({1, 2});
    CHECK_THROWS_AS(wrong_length.validate(), FormatError);
  }

  TEST_CASE("batches") {
    const std::vector<TimeSeries> s{{vec({1, 2, 3}), 0}, {vec({4, 5, 6}), 1}};
    const Tensor b = to_batch(s);
    CHECK(b.shape() == Shape{2, 1, 3});
    CHECK(b(1, 0, 2) == 6.0);
    const std::size_t rows[] = {1};
    CHECK(to_batch(s, rows)(0, 0, 0) == 4.0);
    const std::vector<TimeSeries> ragged{{vec({1, 2, 3}), 0}, {vec({4, 5}), 1}};
    CHECK_THROWS_AS(to_batch(ragged), ShapeError);
  }

  TEST_CASE("UCR split round trip") {
    TempDir dir;
    SynthOptions o;
    o.normalize = false;
    o.n_train = 6;
    o.n_test = 4;
    o.seed = 3;
    const auto ds = make_synthetic(o);
    save_ucr_split(ds.train, ds.raw_labels, dir / "S_TRAIN.tsv");
    save_ucr_split(ds.test, ds.raw_labels, dir / "S_TEST.tsv");
    const auto back = load_ucr_dataset(dir / "S_TRAIN.tsv", dir / "S_TEST.tsv", {.z_normalize = false});
    REQUIRE(back.train.size() == ds.train.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      CHECK(back.train[i].label == ds.train[i].label);
      CHECK(back.train[i].values == ds.train[i].values);  // shortest round-trip text
    }
  }

  TEST_CASE("accuracy table round trip") {
    TempDir dir;
    AccuracyTable t;
    t.upsert("ResNet", "Coffee", Accuracy::from_text("1.0"));
    t.upsert("ResNet", "Wine", Accuracy::from_text("0.915"));
    t.upsert("FCN", "Coffee", Accuracy::from_value(0.1 + 0.2));
    t.upsert("FCN", "Wine", Accuracy::from_text("0.5"));
    CHECK_NOTHROW(t.validate());
    save_accuracy_table(t, dir / "acc.csv");
    const auto back = load_accuracy_table(dir / "acc.csv");
    CHECK(back == t);
    CHECK(back.at(0, 1).text == "0.915");
    CHECK(back.at(0, 1).value == 0.915);
    CHECK(back.at(1, 0).value == 0.1 + 0.2);
    CHECK(read_file(dir / "acc.csv").find('\r') == std::string::npos);

    // Random tables.
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      AccuracyTable r;
      const int nc = 1 + int(rng.below(5)), nd = 1 + int(rng.below(8));
      for (int c = 0; c < nc; ++c)
        for (int d = 0; d < nd; ++d)
          r.upsert("c" + std::to_string(c), "d" + std::to_string(d),
                   Accuracy::from_value(double(rng.below(1001)) / 1000.0));
      save_accuracy_table(r, dir / "r.csv");
      CHECK(load_accuracy_table(dir / "r.csv") == r);
    }
  }

  TEST_CASE("accuracy table errors") {
    TempDir dir;
    CHECK_THROWS_AS(load_accuracy_table(dir.write("h.csv", "classifier_name,A,B\n")), FormatError);
    CHECK_THROWS_AS(load_accuracy_table(dir.write("m.csv", "classifier_name,A,B\nX,0.5,\n")),
                    FormatError);
    CHECK_THROWS_AS(load_accuracy_table(dir.write("r.csv", "classifier_name,A,B\nX,0.5\n")),
                    FormatError);
    CHECK_THROWS_AS(load_accuracy_table(dir.write("o.csv", "classifier_name,A\nX,1.5\n")),
                    FormatError);
    CHECK_THROWS_AS(load_accuracy_table(dir.write("n.csv", "classifier_name,A\nX,abc\n")),
                    FormatError);
    CHECK_THROWS_AS(load_accuracy_table(dir.write("w.csv", "name,A\nX,0.1\n")), FormatError);
    const auto partial = load_accuracy_table(dir / "m.csv", true);
    CHECK_FALSE(partial.complete());
    CHECK_THROWS_AS(partial.validate(), FormatError);
    CHECK_THROWS_AS(partial.at(0, 1), FormatError);
    CHECK_THROWS_AS(partial.classifier_index("Y"), SpecError);
  }

  TEST_CASE("io observer sees dataset opens") {
    TempDir dir;
    const auto train = dir.write("O_TRAIN.csv", "1,0,1\n2,1,0\n");
    const auto test = dir.write("O_TEST.csv", "1,0,1\n");
    std::vector<std::filesystem::path> seen;
    set_io_observer([&](const std::filesystem::path& p) { seen.push_back(p); });
    load_ucr_train(train);
    CHECK(seen == std::vector<std::filesystem::path>{train});
    load_ucr_dataset(train, test);
    set_io_observer(nullptr);
    CHECK(seen.size() == 3);
    CHECK(seen.back() == test);
  }
}
