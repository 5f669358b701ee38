#include "tsce/synthetic.hpp"

#include <cmath>
#include <limits>

#include "tsce/random.hpp"

namespace tsce {

std::string_view to_string(SynthVariant v) {
  return v == SynthVariant::sine_bump ? "sine_bump" : "sine_two_bumps";
}

SynthVariant synth_variant_from_string(std::string_view name) {
  if (name == "sine_bump") return SynthVariant::sine_bump;
  if (name == "sine_two_bumps") return SynthVariant::sine_two_bumps;
  throw ParseError("unknown synthetic variant '" + std::string(name) + "'");
}

namespace {

TimeSeries draw(const SynthOptions& o, int label, Rng& rng) {
  const double phase = rng.uniform(-o.phase_spread, o.phase_spread);
  TimeSeries s;
  s.label = label;
  s.values.resize(o.length);
  const double len = double(o.length);
  for (Index t = 0; t < o.length; ++t)
    s.values[t] = std::sin(2.0 * M_PI * o.frequency * double(t) / len + phase) + rng.normal(0.0, o.noise);
  if (label == 1) {
    std::vector<double> centres;
    if (o.variant == SynthVariant::sine_bump) centres = {len / 2.0};
    else centres = {len / 3.0, 2.0 * len / 3.0};
    for (double c : centres) {
      const double centre = c + rng.uniform(-o.bump_jitter, o.bump_jitter);
      for (Index t = 0; t < o.length; ++t) {
        const double d = (double(t) - centre) / o.bump_width;
        s.values[t] += o.bump_height * std::exp(-0.5 * d * d);
      }
    }
  }
  return s;
}

}  // namespace

TimeSeriesDataset make_synthetic(const SynthOptions& o) {
  if (o.length < 2) throw DomainError("synthetic series need length >= 2");
  if (o.n_train < 2 || o.n_test < 1) throw DomainError("synthetic splits too small");
  if (!(o.label_noise >= 0.0 && o.label_noise <= 1.0)) throw DomainError("label noise outside [0, 1]");
  Rng rng(o.seed);
  TimeSeriesDataset ds;
  ds.name = o.name.empty() ? std::string(to_string(o.variant)) : o.name;
  ds.n_classes = 2;
  ds.series_length = o.length;
  ds.raw_labels = {0.0, 1.0};
  for (std::size_t i = 0; i < o.n_train; ++i) ds.train.push_back(draw(o, int(i % 2), rng));
  for (std::size_t i = 0; i < o.n_test; ++i) ds.test.push_back(draw(o, int(i % 2), rng));
  if (o.label_noise > 0.0)
    for (auto& s : ds.train)
      if (rng.uniform() < o.label_noise) s.label = 1 - s.label;
  if (o.normalize) {
    for (auto& s : ds.train) s = z_normalize(s);
    for (auto& s : ds.test) s = z_normalize(s);
  }
  ds.validate();
  return ds;
}

double one_nn_accuracy(const std::vector<TimeSeries>& train, const std::vector<TimeSeries>& test) {
  if (train.empty() || test.empty()) throw DomainError("one_nn_accuracy: empty split");
  std::size_t correct = 0;
  for (const auto& q : test) {
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (const auto& r : train) {
      const double d = (q.values - r.values).squaredNorm();
      if (d < best) best = d, label = r.label;
    }
    if (label == q.label) ++correct;
  }
  return double(correct) / double(test.size());
}

}  // namespace tsce
