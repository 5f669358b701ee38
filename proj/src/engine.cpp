#include "tsce/engine.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>

namespace tsce {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 14> kLayerNames{{
    {LayerKind::conv1d, "conv1d"},
    {LayerKind::batch_norm, "batch_norm"},
    {LayerKind::dense, "dense"},
    {LayerKind::relu, "relu"},
    {LayerKind::sigmoid, "sigmoid"},
    {LayerKind::prelu, "prelu"},
    {LayerKind::dropout, "dropout"},
    {LayerKind::max_pool, "max_pool"},
    {LayerKind::avg_pool, "avg_pool"},
    {LayerKind::global_avg_pool, "global_avg_pool"},
    {LayerKind::softmax, "softmax"},
    {LayerKind::add, "add"},
    {LayerKind::attention_fuse, "attention_fuse"},
    {LayerKind::concat, "concat"},
}};

using Matrix = Eigen::MatrixXd;

void require_rank3(const Shape& s, std::string_view who) {
  if (s.size() != 3) throw ShapeError(std::string(who) + " expects a rank-3 input, got " + shape_string(s));
}

void require_inputs(std::span<const Shape> shapes, std::size_t n, std::string_view who) {
  if (shapes.size() != n)
    throw ShapeError(std::string(who) + " expects " + std::to_string(n) + " input(s), got " +
                     std::to_string(shapes.size()));
  for (const auto& s : shapes) require_rank3(s, who);
}

struct ConvGeometry {
  Index out_time = 0;
  Index pad_left = 0;
};

ConvGeometry conv_geometry(const LayerHyper& h, Index time) {
  ConvGeometry g;
  if (h.padding == Padding::same) {
    g.out_time = (time + h.stride - 1) / h.stride;
    const Index total = std::max<Index>((g.out_time - 1) * h.stride + h.kernel - time, 0);
    g.pad_left = total / 2;  // extra cell, if any, goes on the right
  } else {
    if (time < h.kernel)
      throw ShapeError("conv1d: input length " + std::to_string(time) + " shorter than kernel " +
                       std::to_string(h.kernel));
    g.out_time = (time - h.kernel) / h.stride + 1;
  }
  return g;
}

Tensor from_matrix(const Matrix& m) {
  Tensor t({m.rows(), m.cols()});
  as_matrix(t, m.rows(), m.cols()) = m;
  return t;
}

// ---- conv1d ---------------------------------------------------------------

ForwardResult conv_forward(const Layer& layer, const Tensor& x) {
  const auto& h = layer.hyper;
  const Index batch = x.batch(), cin = x.channels(), time = x.time();
  const Index k = h.kernel;
  const auto geo = conv_geometry(h, time);
  const Index tout = geo.out_time;

  Matrix col = Matrix::Zero(cin * k, batch * tout);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < cin; ++c)
      for (Index j = 0; j < k; ++j)
        for (Index o = 0; o < tout; ++o) {
          const Index t = o * h.stride + j - geo.pad_left;
          if (t >= 0 && t < time) col(c * k + j, b * tout + o) = x(b, c, t);
        }

  const auto weight = as_matrix(layer.params[0], h.out_channels, cin * k);
  Matrix out = weight * col;
  out.colwise() += layer.params[1].values().matrix();

  ForwardResult r;
  r.output = Tensor({batch, h.out_channels, tout});
  for (Index b = 0; b < batch; ++b)
    sample_matrix(r.output, b) = out.middleCols(b * tout, tout);
  r.cache.saved.push_back(from_matrix(col));
  return r;
}

BackwardResult conv_backward(const Layer& layer, const LayerCache& cache, const Tensor& g) {
  const auto& h = layer.hyper;
  const Shape& in = cache.input_shapes[0];
  const Index batch = in[0], cin = in[1], time = in[2];
  const Index k = h.kernel;
  const auto geo = conv_geometry(h, time);
  const Index tout = geo.out_time;
  const Tensor& col_t = cache.saved[0];
  const auto col = as_matrix(col_t, cin * k, batch * tout);

  Matrix grad(h.out_channels, batch * tout);
  for (Index b = 0; b < batch; ++b) grad.middleCols(b * tout, tout) = sample_matrix(g, b);

  const auto weight = as_matrix(layer.params[0], h.out_channels, cin * k);
  BackwardResult r;
  Tensor dw(layer.params[0].shape());
  as_matrix(dw, h.out_channels, cin * k).noalias() = grad * col.transpose();
  Tensor db(layer.params[1].shape());
  db.values() = grad.rowwise().sum().array();
  r.grad_params = {std::move(dw), std::move(db)};

  const Matrix dcol = weight.transpose() * grad;
  Tensor dx(in);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < cin; ++c)
      for (Index j = 0; j < k; ++j)
        for (Index o = 0; o < tout; ++o) {
          const Index t = o * h.stride + j - geo.pad_left;
          if (t >= 0 && t < time) dx(b, c, t) += dcol(c * k + j, b * tout + o);
        }
  r.grad_inputs.push_back(std::move(dx));
  return r;
}

// ---- batch_norm -----------------------------------------------------------

ForwardResult batch_norm_forward(const Layer& layer, const Tensor& x, Mode mode) {
  const Index batch = x.batch(), channels = x.channels(), time = x.time();
  const auto& gamma = layer.params[0].values();
  const auto& beta = layer.params[1].values();
  const double eps = layer.hyper.epsilon;
  const double n = double(batch * time);

  Tensor mean({channels}), var({channels});
  if (mode == Mode::train) {
    for (Index c = 0; c < channels; ++c) {
      double s = 0.0;
      for (Index b = 0; b < batch; ++b)
        for (Index t = 0; t < time; ++t) s += x(b, c, t);
      const double mu = s / n;
      double ss = 0.0;
      for (Index b = 0; b < batch; ++b)
        for (Index t = 0; t < time; ++t) ss += (x(b, c, t) - mu) * (x(b, c, t) - mu);
      mean[c] = mu;
      var[c] = ss / n;
    }
  } else {
    mean = layer.buffers[0];
    var = layer.buffers[1];
  }

  Tensor inv_std({channels});
  inv_std.values() = (var.values() + eps).rsqrt();

  ForwardResult r;
  r.output = Tensor(x.shape());
  Tensor xhat(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      for (Index t = 0; t < time; ++t) {
        const double v = (x(b, c, t) - mean[c]) * inv_std[c];
        xhat(b, c, t) = v;
        r.output(b, c, t) = gamma[c] * v + beta[c];
      }
  r.cache.saved = {std::move(xhat), std::move(inv_std), std::move(mean), std::move(var)};
  return r;
}

BackwardResult batch_norm_backward(const Layer& layer, const LayerCache& cache, const Tensor& g) {
  const Shape& in = cache.input_shapes[0];
  const Index batch = in[0], channels = in[1], time = in[2];
  const Tensor& xhat = cache.saved[0];
  const Tensor& inv_std = cache.saved[1];
  const auto& gamma = layer.params[0].values();
  const double n = double(batch * time);

  Tensor dgamma({channels}), dbeta({channels});
  for (Index c = 0; c < channels; ++c) {
    double sg = 0.0, sgx = 0.0;
    for (Index b = 0; b < batch; ++b)
      for (Index t = 0; t < time; ++t) {
        sg += g(b, c, t);
        sgx += g(b, c, t) * xhat(b, c, t);
      }
    dbeta[c] = sg;
    dgamma[c] = sgx;
  }

  Tensor dx(in);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      for (Index t = 0; t < time; ++t) {
        if (cache.mode == Mode::train) {
          dx(b, c, t) = gamma[c] * inv_std[c] / n *
                        (n * g(b, c, t) - dbeta[c] - xhat(b, c, t) * dgamma[c]);
        } else {
          dx(b, c, t) = gamma[c] * inv_std[c] * g(b, c, t);
        }
      }
  BackwardResult r;
  r.grad_inputs.push_back(std::move(dx));
  r.grad_params = {std::move(dgamma), std::move(dbeta)};
  return r;
}

// ---- dense ----------------------------------------------------------------

ForwardResult dense_forward(const Layer& layer, const Tensor& x) {
  const auto& h = layer.hyper;
  const Index batch = x.batch();
  const auto in = as_matrix(x, batch, h.in_features);
  const auto weight = as_matrix(layer.params[0], h.out_features, h.in_features);
  ForwardResult r;
  r.output = Tensor({batch, h.out_features, 1});
  auto out = as_matrix(r.output, batch, h.out_features);
  out.noalias() = in * weight.transpose();
  out.rowwise() += layer.params[1].values().matrix().transpose();
  r.cache.saved.push_back(x);
  return r;
}

BackwardResult dense_backward(const Layer& layer, const LayerCache& cache, const Tensor& g) {
  const auto& h = layer.hyper;
  const Index batch = cache.input_shapes[0][0];
  const auto in = as_matrix(cache.saved[0], batch, h.in_features);
  const auto grad = as_matrix(g, batch, h.out_features);
  const auto weight = as_matrix(layer.params[0], h.out_features, h.in_features);

  BackwardResult r;
  Tensor dw(layer.params[0].shape());
  as_matrix(dw, h.out_features, h.in_features).noalias() = grad.transpose() * in;
  Tensor db(layer.params[1].shape());
  db.values() = grad.colwise().sum().transpose().array();
  r.grad_params = {std::move(dw), std::move(db)};

  Tensor dx(cache.input_shapes[0]);
  as_matrix(dx, batch, h.in_features).noalias() = grad * weight;
  r.grad_inputs.push_back(std::move(dx));
  return r;
}

// ---- elementwise activations ---------------------------------------------

ForwardResult prelu_forward(const Layer& layer, const Tensor& x) {
  const auto& alpha = layer.params[0].values();
  ForwardResult r;
  r.output = Tensor(x.shape());
  for (Index b = 0; b < x.batch(); ++b)
    for (Index c = 0; c < x.channels(); ++c)
      for (Index t = 0; t < x.time(); ++t) {
        const double v = x(b, c, t);
        r.output(b, c, t) = v > 0.0 ? v : alpha[c] * v;
      }
  r.cache.saved.push_back(x);
  return r;
}

BackwardResult prelu_backward(const Layer& layer, const LayerCache& cache, const Tensor& g) {
  const Tensor& x = cache.saved[0];
  const auto& alpha = layer.params[0].values();
  BackwardResult r;
  Tensor dx(x.shape());
  Tensor dalpha(layer.params[0].shape());
  for (Index b = 0; b < x.batch(); ++b)
    for (Index c = 0; c < x.channels(); ++c)
      for (Index t = 0; t < x.time(); ++t) {
        const double v = x(b, c, t);
        if (v > 0.0) {
          dx(b, c, t) = g(b, c, t);
        } else {
          dx(b, c, t) = alpha[c] * g(b, c, t);
          dalpha[c] += v * g(b, c, t);
        }
      }
  r.grad_inputs.push_back(std::move(dx));
  r.grad_params.push_back(std::move(dalpha));
  return r;
}

// ---- pooling --------------------------------------------------------------

ForwardResult pool_forward(const Layer& layer, const Tensor& x) {
  const Index pool = layer.hyper.pool;
  const Index tout = x.time() / pool;
  ForwardResult r;
  r.output = Tensor({x.batch(), x.channels(), tout});
  const bool is_max = layer.kind == LayerKind::max_pool;
  if (is_max) r.cache.indices.resize(std::size_t(r.output.size()));
  Index flat = 0;
  for (Index b = 0; b < x.batch(); ++b)
    for (Index c = 0; c < x.channels(); ++c)
      for (Index o = 0; o < tout; ++o, ++flat) {
        if (is_max) {
          Index best = o * pool;
          for (Index t = o * pool + 1; t < (o + 1) * pool; ++t)
            if (x(b, c, t) > x(b, c, best)) best = t;
          r.output(b, c, o) = x(b, c, best);
          r.cache.indices[std::size_t(flat)] = best;
        } else {
          double s = 0.0;
          for (Index t = o * pool; t < (o + 1) * pool; ++t) s += x(b, c, t);
          r.output(b, c, o) = s / double(pool);
        }
      }
  return r;
}

BackwardResult pool_backward(const Layer& layer, const LayerCache& cache, const Tensor& g) {
  const Index pool = layer.hyper.pool;
  Tensor dx(cache.input_shapes[0]);
  const Index tout = g.time();
  Index flat = 0;
  for (Index b = 0; b < g.batch(); ++b)
    for (Index c = 0; c < g.channels(); ++c)
      for (Index o = 0; o < tout; ++o, ++flat) {
        if (layer.kind == LayerKind::max_pool) {
          dx(b, c, cache.indices[std::size_t(flat)]) += g(b, c, o);
        } else {
          for (Index t = o * pool; t < (o + 1) * pool; ++t) dx(b, c, t) += g(b, c, o) / double(pool);
        }
      }
  BackwardResult r;
  r.grad_inputs.push_back(std::move(dx));
  return r;
}

// ---- softmax over channels -------------------------------------------------

ForwardResult softmax_forward(const Tensor& x) {
  ForwardResult r;
  r.output = Tensor(x.shape());
  for (Index b = 0; b < x.batch(); ++b)
    for (Index t = 0; t < x.time(); ++t) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < x.channels(); ++c) m = std::max(m, x(b, c, t));
      double z = 0.0;
      for (Index c = 0; c < x.channels(); ++c) {
        const double e = std::exp(x(b, c, t) - m);
        r.output(b, c, t) = e;
        z += e;
      }
      for (Index c = 0; c < x.channels(); ++c) r.output(b, c, t) /= z;
    }
  r.cache.saved.push_back(r.output);
  return r;
}

BackwardResult softmax_backward(const LayerCache& cache, const Tensor& g) {
  const Tensor& p = cache.saved[0];
  Tensor dx(p.shape());
  for (Index b = 0; b < p.batch(); ++b)
    for (Index t = 0; t < p.time(); ++t) {
      double dot = 0.0;
      for (Index c = 0; c < p.channels(); ++c) dot += g(b, c, t) * p(b, c, t);
      for (Index c = 0; c < p.channels(); ++c) dx(b, c, t) = p(b, c, t) * (g(b, c, t) - dot);
    }
  BackwardResult r;
  r.grad_inputs.push_back(std::move(dx));
  return r;
}

// ---- attention fusion ------------------------------------------------------
// Input (B, 2H, T). Channels [0, H) carry data, channels [H, 2H) carry scores;
// scores are softmax-normalised over time and weight the data, which is then
// summed over time to give (B, H, 1).

ForwardResult attention_forward(const Tensor& x) {
  const Index batch = x.batch(), half = x.channels() / 2, time = x.time();
  ForwardResult r;
  r.output = Tensor({batch, half, 1});
  Tensor weights({batch, half, time});
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < half; ++h) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index t = 0; t < time; ++t) m = std::max(m, x(b, half + h, t));
      double z = 0.0;
      for (Index t = 0; t < time; ++t) {
        weights(b, h, t) = std::exp(x(b, half + h, t) - m);
        z += weights(b, h, t);
      }
      double acc = 0.0;
      for (Index t = 0; t < time; ++t) {
        weights(b, h, t) /= z;
        acc += weights(b, h, t) * x(b, h, t);
      }
      r.output(b, h, 0) = acc;
    }
  r.cache.saved = {x, std::move(weights)};
  return r;
}

BackwardResult attention_backward(const LayerCache& cache, const Tensor& g) {
  const Tensor& x = cache.saved[0];
  const Tensor& a = cache.saved[1];
  const Index batch = x.batch(), half = x.channels() / 2, time = x.time();
  Tensor dx(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < half; ++h) {
      const double go = g(b, h, 0);
      double dot = 0.0;
      for (Index t = 0; t < time; ++t) dot += go * x(b, h, t) * a(b, h, t);
      for (Index t = 0; t < time; ++t) {
        dx(b, h, t) = go * a(b, h, t);
        dx(b, half + h, t) = a(b, h, t) * (go * x(b, h, t) - dot);
      }
    }
  BackwardResult r;
  r.grad_inputs.push_back(std::move(dx));
  return r;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kLayerNames)
    if (k == kind) return name;
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kLayerNames)
    if (n == name) return k;
  throw ParseError("unknown layer kind '" + std::string(name) + "'");
}

std::uint64_t next_layer_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Index Layer::parameter_count() const {
  Index n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

Tensor glorot_uniform(Index fan_in, Index fan_out, const Shape& shape, Rng& rng) {
  if (fan_in < 1 || fan_out < 1) throw DomainError("glorot_uniform: fans must be >= 1");
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = limit * (2.0 * rng.uniform() - 1.0);
  return t;
}

Tensor glorot_uniform(Index fan_in, Index fan_out, const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return glorot_uniform(fan_in, fan_out, shape, rng);
}

Layer make_conv1d(Index in_channels, Index out_channels, Index kernel, Padding padding, Rng& rng,
                  Index stride) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1)
    throw DomainError("conv1d: channels, kernel and stride must be positive");
  Layer l;
  l.kind = LayerKind::conv1d;
  l.hyper.in_channels = in_channels;
  l.hyper.out_channels = out_channels;
  l.hyper.kernel = kernel;
  l.hyper.stride = stride;
  l.hyper.padding = padding;
  l.params.push_back(glorot_uniform(in_channels * kernel, out_channels * kernel,
                                    {out_channels, in_channels, kernel}, rng));
  l.params.push_back(Tensor({out_channels}));
  l.id = next_layer_id();
  return l;
}

Layer make_dense(Index in_features, Index out_features, Rng& rng) {
  if (in_features < 1 || out_features < 1) throw DomainError("dense: widths must be positive");
  Layer l;
  l.kind = LayerKind::dense;
  l.hyper.in_features = in_features;
  l.hyper.out_features = out_features;
  l.params.push_back(glorot_uniform(in_features, out_features, {out_features, in_features}, rng));
  l.params.push_back(Tensor({out_features}));
  l.id = next_layer_id();
  return l;
}

Layer make_batch_norm(Index channels, double momentum, double epsilon) {
  if (channels < 1) throw DomainError("batch_norm: channels must be positive");
  Layer l;
  l.kind = LayerKind::batch_norm;
  l.hyper.in_channels = channels;
  l.hyper.momentum = momentum;
  l.hyper.epsilon = epsilon;
  l.params = {Tensor({channels}, 1.0), Tensor({channels}, 0.0)};
  l.buffers = {Tensor({channels}, 0.0), Tensor({channels}, 1.0)};
  l.id = next_layer_id();
  return l;
}

Layer make_prelu(Index channels, double initial_alpha) {
  Layer l;
  l.kind = LayerKind::prelu;
  l.hyper.in_channels = channels;
  l.params.push_back(Tensor({channels}, initial_alpha));
  l.id = next_layer_id();
  return l;
}

Layer make_dropout(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout rate must lie in [0, 1)");
  Layer l;
  l.kind = LayerKind::dropout;
  l.hyper.rate = rate;
  l.id = next_layer_id();
  return l;
}

Layer make_pool(LayerKind kind, Index pool) {
  if (kind != LayerKind::max_pool && kind != LayerKind::avg_pool)
    throw DomainError("make_pool: not a pooling kind");
  if (pool < 1) throw DomainError("pool width must be positive");
  Layer l;
  l.kind = kind;
  l.hyper.pool = pool;
  l.id = next_layer_id();
  return l;
}

Layer make_simple(LayerKind kind) {
  switch (kind) {
    case LayerKind::relu:
    case LayerKind::sigmoid:
    case LayerKind::global_avg_pool:
    case LayerKind::softmax:
    case LayerKind::add:
    case LayerKind::attention_fuse:
    case LayerKind::concat:
      break;
    default:
      throw DomainError("make_simple: layer kind '" + std::string(to_string(kind)) +
                        "' needs hyperparameters");
  }
  Layer l;
  l.kind = kind;
  l.id = next_layer_id();
  return l;
}

Shape layer_output_shape(const Layer& layer, std::span<const Shape> in) {
  const auto& h = layer.hyper;
  const auto name = to_string(layer.kind);
  switch (layer.kind) {
    case LayerKind::conv1d: {
      require_inputs(in, 1, name);
      if (in[0][1] != h.in_channels)
        throw ShapeError("conv1d: expected " + std::to_string(h.in_channels) + " channels, got " +
                         std::to_string(in[0][1]));
      return {in[0][0], h.out_channels, conv_geometry(h, in[0][2]).out_time};
    }
    case LayerKind::batch_norm:
    case LayerKind::prelu:
      require_inputs(in, 1, name);
      if (in[0][1] != h.in_channels)
        throw ShapeError(std::string(name) + ": expected " + std::to_string(h.in_channels) +
                         " channels, got " + std::to_string(in[0][1]));
      return in[0];
    case LayerKind::dense:
      require_inputs(in, 1, name);
      if (in[0][1] * in[0][2] != h.in_features)
        throw ShapeError("dense: expected " + std::to_string(h.in_features) +
                         " input features, got " + std::to_string(in[0][1] * in[0][2]));
      return {in[0][0], h.out_features, 1};
    case LayerKind::relu:
    case LayerKind::sigmoid:
    case LayerKind::dropout:
    case LayerKind::softmax:
      require_inputs(in, 1, name);
      return in[0];
    case LayerKind::max_pool:
    case LayerKind::avg_pool: {
      require_inputs(in, 1, name);
      const Index tout = in[0][2] / h.pool;
      if (tout < 1)
        throw ShapeError(std::string(name) + ": input length " + std::to_string(in[0][2]) +
                         " shorter than pool width " + std::to_string(h.pool));
      return {in[0][0], in[0][1], tout};
    }
    case LayerKind::global_avg_pool:
      require_inputs(in, 1, name);
      return {in[0][0], in[0][1], 1};
    case LayerKind::attention_fuse:
      require_inputs(in, 1, name);
      if (in[0][1] < 2 || in[0][1] % 2 != 0)
        throw ShapeError("attention_fuse: needs an even channel count");
      return {in[0][0], in[0][1] / 2, 1};
    case LayerKind::add: {
      if (in.size() < 2) throw ShapeError("add: needs at least two inputs");
      for (const auto& s : in) {
        require_rank3(s, name);
        if (s != in[0]) throw ShapeError("add: input shapes differ");
      }
      return in[0];
    }
    case LayerKind::concat: {
      if (in.empty()) throw ShapeError("concat: needs inputs");
      Index channels = 0;
      for (const auto& s : in) {
        require_rank3(s, name);
        if (s[0] != in[0][0] || s[2] != in[0][2]) throw ShapeError("concat: batch/time differ");
        channels += s[1];
      }
      return {in[0][0], channels, in[0][2]};
    }
  }
  throw ShapeError("unhandled layer kind");
}

ForwardResult layer_forward(const Layer& layer, std::span<const Tensor* const> inputs, Mode mode,
                            Rng& rng) {
  std::vector<Shape> shapes;
  shapes.reserve(inputs.size());
  for (const Tensor* t : inputs) shapes.push_back(t->shape());
  Shape out_shape = layer_output_shape(layer, shapes);
  const Tensor& x = *inputs[0];

  ForwardResult r;
  switch (layer.kind) {
    case LayerKind::conv1d:
      r = conv_forward(layer, x);
      break;
    case LayerKind::batch_norm:
      r = batch_norm_forward(layer, x, mode);
      break;
    case LayerKind::dense:
      r = dense_forward(layer, x);
      break;
    case LayerKind::relu:
      r.output = x;
      r.output.values() = x.values().max(0.0);
      r.cache.saved.push_back(x);
      break;
    case LayerKind::sigmoid:
      r.output = x;
      r.output.values() = 1.0 / (1.0 + (-x.values()).exp());
      r.cache.saved.push_back(r.output);
      break;
    case LayerKind::prelu:
      r = prelu_forward(layer, x);
      break;
    case LayerKind::dropout:
      r.output = x;
      if (mode == Mode::train && layer.hyper.rate > 0.0) {
        const double keep = 1.0 - layer.hyper.rate;
        Tensor mask(x.shape());
        for (Index i = 0; i < mask.size(); ++i)
          mask[i] = rng.uniform() >= layer.hyper.rate ? 1.0 / keep : 0.0;
        r.output.values() *= mask.values();
        r.cache.saved.push_back(std::move(mask));
      }
      break;
    case LayerKind::max_pool:
    case LayerKind::avg_pool:
      r = pool_forward(layer, x);
      break;
    case LayerKind::global_avg_pool: {
      r.output = Tensor(out_shape);
      for (Index b = 0; b < x.batch(); ++b)
        as_matrix(r.output, x.batch(), x.channels()).row(b) =
            sample_matrix(x, b).rowwise().mean().transpose();
      break;
    }
    case LayerKind::softmax:
      r = softmax_forward(x);
      break;
    case LayerKind::add:
      r.output = x;
      for (std::size_t i = 1; i < inputs.size(); ++i) r.output.values() += inputs[i]->values();
      break;
    case LayerKind::attention_fuse:
      r = attention_forward(x);
      break;
    case LayerKind::concat: {
      r.output = Tensor(out_shape);
      for (Index b = 0; b < x.batch(); ++b) {
        Index offset = 0;
        for (const Tensor* t : inputs) {
          sample_matrix(r.output, b).middleRows(offset, t->channels()) = sample_matrix(*t, b);
          offset += t->channels();
        }
      }
      break;
    }
  }
  r.cache.kind = layer.kind;
  r.cache.layer_id = layer.id;
  r.cache.revision = layer.revision;
  r.cache.mode = mode;
  r.cache.input_shapes = std::move(shapes);
  r.cache.output_shape = std::move(out_shape);
  return r;
}

ForwardResult layer_forward(const Layer& layer, const Tensor& input, Mode mode, Rng& rng) {
  const Tensor* inputs[] = {&input};
  return layer_forward(layer, inputs, mode, rng);
}

BackwardResult layer_backward(const Layer& layer, const LayerCache& cache,
                              const Tensor& grad_output) {
  if (cache.kind != layer.kind || cache.layer_id != layer.id || cache.revision != layer.revision)
    throw StateError("layer_backward: cache does not belong to this layer state");
  if (grad_output.shape() != cache.output_shape)
    throw ShapeError("layer_backward: gradient shape " + shape_string(grad_output.shape()) +
                     " does not match output " + shape_string(cache.output_shape));
  const Tensor& g = grad_output;

  BackwardResult r;
  switch (layer.kind) {
    case LayerKind::conv1d:
      return conv_backward(layer, cache, g);
    case LayerKind::batch_norm:
      return batch_norm_backward(layer, cache, g);
    case LayerKind::dense:
      return dense_backward(layer, cache, g);
    case LayerKind::relu: {
      Tensor dx = g;
      dx.values() *= (cache.saved[0].values() > 0.0).cast<double>();
      r.grad_inputs.push_back(std::move(dx));
      return r;
    }
    case LayerKind::sigmoid: {
      const auto& y = cache.saved[0].values();
      Tensor dx = g;
      dx.values() *= y * (1.0 - y);
      r.grad_inputs.push_back(std::move(dx));
      return r;
    }
    case LayerKind::prelu:
      return prelu_backward(layer, cache, g);
    case LayerKind::dropout: {
      Tensor dx = g;
      if (!cache.saved.empty()) dx.values() *= cache.saved[0].values();
      r.grad_inputs.push_back(std::move(dx));
      return r;
    }
    case LayerKind::max_pool:
    case LayerKind::avg_pool:
      return pool_backward(layer, cache, g);
    case LayerKind::global_avg_pool: {
      const Shape& in = cache.input_shapes[0];
      Tensor dx(in);
      for (Index b = 0; b < in[0]; ++b)
        for (Index c = 0; c < in[1]; ++c)
          for (Index t = 0; t < in[2]; ++t) dx(b, c, t) = g(b, c, 0) / double(in[2]);
      r.grad_inputs.push_back(std::move(dx));
      return r;
    }
    case LayerKind::softmax:
      return softmax_backward(cache, g);
    case LayerKind::add:
      r.grad_inputs.assign(cache.input_shapes.size(), g);
      return r;
    case LayerKind::attention_fuse:
      return attention_backward(cache, g);
    case LayerKind::concat: {
      Index offset = 0;
      for (const auto& s : cache.input_shapes) {
        Tensor dx(s);
        for (Index b = 0; b < s[0]; ++b)
          sample_matrix(dx, b) = sample_matrix(g, b).middleRows(offset, s[1]);
        offset += s[1];
        r.grad_inputs.push_back(std::move(dx));
      }
      return r;
    }
  }
  throw StateError("unhandled layer kind");
}

void update_running_statistics(Layer& layer, const LayerCache& cache) {
  if (layer.kind != LayerKind::batch_norm || cache.mode != Mode::train) return;
  if (cache.layer_id != layer.id) throw StateError("running statistics from another layer");
  const double m = layer.hyper.momentum;
  layer.buffers[0].values() = m * layer.buffers[0].values() + (1.0 - m) * cache.saved[2].values();
  layer.buffers[1].values() = m * layer.buffers[1].values() + (1.0 - m) * cache.saved[3].values();
}

// ---------------------------------------------------------------------------

std::string_view to_string(LossKind kind) {
  return kind == LossKind::cross_entropy ? "cross_entropy" : "mse";
}

LossResult loss(LossKind kind, const Tensor& output, std::span<const int> labels) {
  if (output.rank() != 3 || output.time() != 1)
    throw ShapeError("loss: expected (batch, classes, 1) output, got " + shape_string(output.shape()));
  const Index batch = output.batch(), classes = output.channels();
  if (Index(labels.size()) != batch) throw ShapeError("loss: label count does not match batch");
  for (int y : labels)
    if (y < 0 || y >= classes) throw DomainError("loss: label out of range");

  LossResult r;
  r.grad = Tensor(output.shape());
  const double inv_batch = 1.0 / double(batch);
  if (kind == LossKind::cross_entropy) {
    for (Index b = 0; b < batch; ++b) {
      double row = 0.0;
      for (Index c = 0; c < classes; ++c) {
        if (output(b, c, 0) < 0.0) throw DomainError("cross_entropy: negative probability");
        row += output(b, c, 0);
      }
      if (std::abs(row - 1.0) > 1e-6)
        throw DomainError("cross_entropy: probability row sums to " + std::to_string(row));
      const double p = std::max(output(b, labels[std::size_t(b)], 0),
                                std::numeric_limits<double>::min());
      r.value -= std::log(p) * inv_batch;
      r.grad(b, labels[std::size_t(b)], 0) = -inv_batch / p;
    }
  } else {
    const double scale = 1.0 / double(batch * classes);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < classes; ++c) {
        const double target = c == labels[std::size_t(b)] ? 1.0 : 0.0;
        const double d = output(b, c, 0) - target;
        r.value += d * d * scale;
        r.grad(b, c, 0) = 2.0 * d * scale;
      }
  }
  return r;
}

// ---------------------------------------------------------------------------

AdamState make_adam_state(std::span<const Tensor* const> params, AdamHyper hyper) {
  AdamState s;
  s.hyper = hyper;
  for (const Tensor* p : params) {
    s.first_moment.emplace_back(p->shape());
    s.second_moment.emplace_back(p->shape());
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.first_moment[i].shape())
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    if (!grads[i].all_finite()) throw NumericsError("adam_step: non-finite gradient");
  }
  const auto& h = state.hyper;
  ++state.step;
  const double correction1 = 1.0 - std::pow(h.beta1, double(state.step));
  const double correction2 = 1.0 - std::pow(h.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i].values();
    auto& v = state.second_moment[i].values();
    const auto& g = grads[i].values();
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g.square();
    params[i]->values() -=
        h.learning_rate * (m / correction1) / ((v / correction2).sqrt() + h.epsilon);
  }
}

}  // namespace tsce
