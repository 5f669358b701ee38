#pragma once

#include <cstdint>
#include <string>

#include "tsce/data_io.hpp"

namespace tsce {

/// Built-in two-class datasets. Every series is a sine with jittered phase plus
/// Gaussian noise; class 1 additionally carries Gaussian bumps:
///   sine_bump       one bump near the centre
///   sine_two_bumps  bumps near one and two thirds of the length
/// Labels alternate 0,1,0,1... so both splits are balanced.
enum class SynthVariant { sine_bump, sine_two_bumps };

std::string_view to_string(SynthVariant v);
SynthVariant synth_variant_from_string(std::string_view name);

struct SynthOptions {
  SynthVariant variant = SynthVariant::sine_bump;
  Index length = 64;
  std::size_t n_train = 50;
  std::size_t n_test = 50;
  double frequency = 3.0;        // sine periods per series
  double phase_spread = 1.0;     // phase drawn uniformly in +/- this (radians)
  double noise = 0.1;            // additive Gaussian noise deviation
  double bump_height = 2.0;
  double bump_width = 3.0;       // Gaussian sigma, in samples
  double bump_jitter = 3.0;      // uniform +/- shift of each bump centre
  double label_noise = 0.0;      // probability of flipping a train label
  bool normalize = true;         // z-normalise like the file loader
  std::uint64_t seed = 0;
  std::string name;              // defaults to the variant name
};

TimeSeriesDataset make_synthetic(const SynthOptions& options);

/// Fraction of `test` whose Euclidean 1-nearest-neighbour in `train` has the
/// same label.
double one_nn_accuracy(const std::vector<TimeSeries>& train, const std::vector<TimeSeries>& test);

}  // namespace tsce
