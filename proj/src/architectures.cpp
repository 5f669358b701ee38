#include "tsce/architectures.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tsce/data_io.hpp"

namespace tsce {

namespace {

// ---- manifest parsing ------------------------------------------------------

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_scalar(const std::string& text, std::size_t line) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw FormatError("bad value '" + text + "'", line);
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, std::size_t line) {
  std::vector<T> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_scalar<T>(trim(item), line));
  if (out.empty()) throw FormatError("empty list", line);
  return out;
}

// Shortest text that parses back to the same double.
std::string real(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + real(v[i]);
  return out;
}

Index scale_width(Index w, const DeskProfile& d) {
  const Index scaled = Index(std::lround(double(w) * d.width_scale));
  return std::max(std::min(w, d.min_width), scaled);
}

void scale_all(std::vector<Index>& v, const DeskProfile& d) {
  for (auto& w : v) w = scale_width(w, d);
}

// ---- graph construction ----------------------------------------------------

class GraphBuilder {
 public:
  GraphBuilder(ModelGraph& graph, Rng& rng) : graph_(graph), rng_(rng) {}

  int add(std::string name, Layer layer, std::vector<int> inputs) {
    std::vector<Shape> in;
    for (int src : inputs) in.push_back(src < 0 ? Shape{1, 1, graph_.input_length} : shapes_[std::size_t(src)]);
    try {
      shapes_.push_back(layer_output_shape(layer, in));
    } catch (const ShapeError& e) {
      throw DomainError(std::string(display_name(graph_.kind)) + ": series length " +
                        std::to_string(graph_.input_length) + " too short (" + e.what() + ")");
    }
    graph_.nodes.push_back({std::move(name), std::move(layer), std::move(inputs)});
    return int(graph_.nodes.size()) - 1;
  }

  int add(std::string name, Layer layer, int input) {
    return add(std::move(name), std::move(layer), std::vector<int>{input});
  }

  const Shape& shape(int node) const { return shapes_.at(std::size_t(node)); }
  Index channels(int node) const { return node < 0 ? 1 : shape(node)[1]; }
  Index features(int node) const {
    return node < 0 ? graph_.input_length : shape(node)[1] * shape(node)[2];
  }

  int conv(const std::string& name, int input, Index filters, Index kernel, Padding padding) {
    return add(name, make_conv1d(channels(input), filters, kernel, padding, rng_), input);
  }
  int dense(const std::string& name, int input, Index width) {
    return add(name, make_dense(features(input), width, rng_), input);
  }

 private:
  ModelGraph& graph_;
  Rng& rng_;
  std::vector<Shape> shapes_;
};

void build_mlp(GraphBuilder& b, const MlpHyper& h, int classes) {
  if (h.dropout.size() != h.hidden.size() + 1)
    throw DomainError("mlp: need one more dropout rate than hidden layers");
  int x = -1;
  for (std::size_t i = 0; i < h.hidden.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    x = b.add("dropout" + tag, make_dropout(h.dropout[i]), x);
    x = b.dense("dense" + tag, x, h.hidden[i]);
    x = b.add("relu" + tag, make_simple(LayerKind::relu), x);
  }
  x = b.add("dropout_head", make_dropout(h.dropout.back()), x);
  x = b.dense("head", x, classes);
  b.add("softmax", make_simple(LayerKind::softmax), x);
}

void build_fcn(GraphBuilder& b, const FcnHyper& h, int classes) {
  if (h.filters.size() != h.kernels.size()) throw DomainError("fcn: filters/kernels length mismatch");
  int x = -1;
  for (std::size_t i = 0; i < h.filters.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    x = b.conv("conv" + tag, x, h.filters[i], h.kernels[i], Padding::same);
    x = b.add("bn" + tag, make_batch_norm(h.filters[i]), x);
    x = b.add("relu" + tag, make_simple(LayerKind::relu), x);
  }
  x = b.add("gap", make_simple(LayerKind::global_avg_pool), x);
  x = b.dense("head", x, classes);
  b.add("softmax", make_simple(LayerKind::softmax), x);
}

void build_resnet(GraphBuilder& b, const ResNetHyper& h, int classes) {
  int x = -1;
  for (std::size_t blk = 0; blk < h.filters.size(); ++blk) {
    const auto prefix = "block" + std::to_string(blk + 1) + "_";
    const Index filters = h.filters[blk];
    int y = x;
    for (std::size_t c = 0; c < h.kernels.size(); ++c) {
      const auto tag = prefix + std::to_string(c + 1);
      y = b.conv("conv" + tag, y, filters, h.kernels[c], Padding::same);
      y = b.add("bn" + tag, make_batch_norm(filters), y);
      if (c + 1 < h.kernels.size()) y = b.add("relu" + tag, make_simple(LayerKind::relu), y);
    }
    int shortcut = x;
    if (b.channels(x) != filters) {
      shortcut = b.conv(prefix + "shortcut_conv", x, filters, 1, Padding::same);
      shortcut = b.add(prefix + "shortcut_bn", make_batch_norm(filters), shortcut);
    }
    x = b.add(prefix + "add", make_simple(LayerKind::add), std::vector<int>{y, shortcut});
    x = b.add(prefix + "relu", make_simple(LayerKind::relu), x);
  }
  x = b.add("gap", make_simple(LayerKind::global_avg_pool), x);
  x = b.dense("head", x, classes);
  b.add("softmax", make_simple(LayerKind::softmax), x);
}

void build_encoder(GraphBuilder& b, const EncoderHyper& h, int classes) {
  if (h.filters.size() != h.kernels.size())
    throw DomainError("encoder: filters/kernels length mismatch");
  if (h.filters.back() % 2 != 0) throw DomainError("encoder: last filter count must be even");
  int x = -1;
  for (std::size_t i = 0; i < h.filters.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    x = b.conv("conv" + tag, x, h.filters[i], h.kernels[i], Padding::same);
    x = b.add("bn" + tag, make_batch_norm(h.filters[i]), x);
    x = b.add("prelu" + tag, make_prelu(h.filters[i]), x);
    x = b.add("dropout" + tag, make_dropout(h.dropout), x);
    x = b.add("pool" + tag, make_pool(LayerKind::max_pool, h.pool), x);
  }
  x = b.add("attention", make_simple(LayerKind::attention_fuse), x);
  x = b.dense("head", x, classes);
  b.add("softmax", make_simple(LayerKind::softmax), x);
}

void build_mcdcnn(GraphBuilder& b, const McdcnnHyper& h, int classes) {
  int x = -1;
  for (std::size_t i = 0; i < h.filters.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    x = b.conv("conv" + tag, x, h.filters[i], h.kernel, Padding::same);
    x = b.add("relu" + tag, make_simple(LayerKind::relu), x);
    x = b.add("pool" + tag, make_pool(LayerKind::max_pool, h.pool), x);
  }
  x = b.dense("dense", x, h.dense);
  x = b.add("relu_dense", make_simple(LayerKind::relu), x);
  x = b.dense("head", x, classes);
  b.add("softmax", make_simple(LayerKind::softmax), x);
}

void build_time_cnn(GraphBuilder& b, const TimeCnnHyper& h, int classes) {
  int x = -1;
  for (std::size_t i = 0; i < h.filters.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    x = b.conv("conv" + tag, x, h.filters[i], h.kernel, Padding::same);
    x = b.add("sigmoid" + tag, make_simple(LayerKind::sigmoid), x);
    x = b.add("pool" + tag, make_pool(LayerKind::avg_pool, h.pool), x);
  }
  x = b.dense("head", x, classes);
  b.add("sigmoid_head", make_simple(LayerKind::sigmoid), x);
}

}  // namespace

// ---------------------------------------------------------------------------

HyperparameterManifest HyperparameterManifest::parse(const std::string& text) {
  HyperparameterManifest m;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError("unterminated section header", line_no);
      section = trim(line.substr(1, line.size() - 2));
      static constexpr std::string_view known[] = {"mlp",    "fcn",      "resnet", "encoder",
                                                    "mcdcnn", "time_cnn", "desk",   "transfer"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        throw FormatError("unknown section [" + section + "]", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("expected key = value", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto ints = [&] { return parse_list<Index>(value, line_no); };
    auto reals = [&] { return parse_list<double>(value, line_no); };
    auto integer = [&] { return parse_scalar<Index>(value, line_no); };
    auto real = [&] { return parse_scalar<double>(value, line_no); };
    auto unknown = [&] {
      throw FormatError("unknown key '" + key + "' in section [" + section + "]", line_no);
    };

    if (section.empty()) {
      if (key == "version") {
        m.version = int(integer());
        if (m.version != 1) throw FormatError("unsupported manifest version", line_no);
      } else unknown();
    } else if (section == "mlp") {
      if (key == "hidden") m.mlp.hidden = ints();
      else if (key == "dropout") m.mlp.dropout = reals();
      else if (key == "epochs") m.mlp.epochs = int(integer());
      else unknown();
    } else if (section == "fcn") {
      if (key == "filters") m.fcn.filters = ints();
      else if (key == "kernels") m.fcn.kernels = ints();
      else if (key == "epochs") m.fcn.epochs = int(integer());
      else unknown();
    } else if (section == "resnet") {
      if (key == "filters") m.resnet.filters = ints();
      else if (key == "kernels") m.resnet.kernels = ints();
      else if (key == "epochs") m.resnet.epochs = int(integer());
      else unknown();
    } else if (section == "encoder") {
      if (key == "filters") m.encoder.filters = ints();
      else if (key == "kernels") m.encoder.kernels = ints();
      else if (key == "dropout") m.encoder.dropout = real();
      else if (key == "pool") m.encoder.pool = integer();
      else if (key == "epochs") m.encoder.epochs = int(integer());
      else unknown();
    } else if (section == "mcdcnn") {
      if (key == "filters") m.mcdcnn.filters = ints();
      else if (key == "kernel") m.mcdcnn.kernel = integer();
      else if (key == "pool") m.mcdcnn.pool = integer();
      else if (key == "dense") m.mcdcnn.dense = integer();
      else if (key == "epochs") m.mcdcnn.epochs = int(integer());
      else unknown();
    } else if (section == "time_cnn") {
      if (key == "filters") m.time_cnn.filters = ints();
      else if (key == "kernel") m.time_cnn.kernel = integer();
      else if (key == "pool") m.time_cnn.pool = integer();
      else if (key == "epochs") m.time_cnn.epochs = int(integer());
      else unknown();
    } else if (section == "desk") {
      if (key == "max_epochs") m.desk.max_epochs = int(integer());
      else if (key == "width_scale") m.desk.width_scale = real();
      else if (key == "min_width") m.desk.min_width = integer();
      else if (key == "transfer_epochs") m.desk.transfer_epochs = int(integer());
      else unknown();
    } else if (section == "transfer") {
      if (key == "epoch_fraction") m.transfer_epoch_fraction = real();
      else unknown();
    } else {
      throw FormatError("unknown section [" + section + "]", line_no);
    }
  }
  return m;
}

HyperparameterManifest HyperparameterManifest::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

std::string HyperparameterManifest::serialize() const {
  std::ostringstream os;
  os << "version = " << version << "\n\n";
  os << "[mlp]\nhidden = " << join(mlp.hidden) << "\ndropout = " << join(mlp.dropout)
     << "\nepochs = " << mlp.epochs << "\n\n";
  os << "[fcn]\nfilters = " << join(fcn.filters) << "\nkernels = " << join(fcn.kernels)
     << "\nepochs = " << fcn.epochs << "\n\n";
  os << "[resnet]\nfilters = " << join(resnet.filters) << "\nkernels = " << join(resnet.kernels)
     << "\nepochs = " << resnet.epochs << "\n\n";
  os << "[encoder]\nfilters = " << join(encoder.filters) << "\nkernels = " << join(encoder.kernels)
     << "\ndropout = " << real(encoder.dropout) << "\npool = " << encoder.pool
     << "\nepochs = " << encoder.epochs << "\n\n";
  os << "[mcdcnn]\nfilters = " << join(mcdcnn.filters) << "\nkernel = " << mcdcnn.kernel
     << "\npool = " << mcdcnn.pool << "\ndense = " << mcdcnn.dense
     << "\nepochs = " << mcdcnn.epochs << "\n\n";
  os << "[time_cnn]\nfilters = " << join(time_cnn.filters) << "\nkernel = " << time_cnn.kernel
     << "\npool = " << time_cnn.pool << "\nepochs = " << time_cnn.epochs << "\n\n";
  os << "[desk]\nmax_epochs = " << desk.max_epochs << "\nwidth_scale = " << real(desk.width_scale)
     << "\nmin_width = " << desk.min_width << "\ntransfer_epochs = " << desk.transfer_epochs
     << "\n\n";
  os << "[transfer]\nepoch_fraction = " << real(transfer_epoch_fraction) << "\n";
  return os.str();
}

HyperparameterManifest HyperparameterManifest::desk_scaled() const {
  HyperparameterManifest m = *this;
  scale_all(m.mlp.hidden, desk);
  scale_all(m.fcn.filters, desk);
  scale_all(m.resnet.filters, desk);
  scale_all(m.encoder.filters, desk);
  if (m.encoder.filters.back() % 2 != 0) ++m.encoder.filters.back();
  scale_all(m.mcdcnn.filters, desk);
  m.mcdcnn.dense = scale_width(m.mcdcnn.dense, desk);
  scale_all(m.time_cnn.filters, desk);
  for (int* e : {&m.mlp.epochs, &m.fcn.epochs, &m.resnet.epochs, &m.encoder.epochs,
                 &m.mcdcnn.epochs, &m.time_cnn.epochs})
    *e = std::min(*e, desk.max_epochs);
  return m;
}

int HyperparameterManifest::epochs(ArchKind kind) const {
  switch (kind) {
    case ArchKind::mlp: return mlp.epochs;
    case ArchKind::fcn: return fcn.epochs;
    case ArchKind::resnet: return resnet.epochs;
    case ArchKind::encoder: return encoder.epochs;
    case ArchKind::mcdcnn: return mcdcnn.epochs;
    case ArchKind::time_cnn: return time_cnn.epochs;
  }
  return 1;
}

Index minimum_input_length(ArchKind kind, const HyperparameterManifest& hp) {
  auto power = [](Index base, std::size_t n) {
    Index p = 1;
    for (std::size_t i = 0; i < n; ++i) p *= base;
    return p;
  };
  Index chain = 1;
  switch (kind) {
    case ArchKind::encoder: chain = power(hp.encoder.pool, hp.encoder.filters.size()); break;
    case ArchKind::mcdcnn: chain = power(hp.mcdcnn.pool, hp.mcdcnn.filters.size()); break;
    case ArchKind::time_cnn: chain = power(hp.time_cnn.pool, hp.time_cnn.filters.size()); break;
    default: break;
  }
  return std::max<Index>(8, chain);
}

bool is_length_invariant(ArchKind kind) {
  return kind == ArchKind::fcn || kind == ArchKind::resnet || kind == ArchKind::encoder;
}

ModelGraph build_model(ArchKind kind, Index input_length, int n_classes, std::uint64_t seed,
                       const HyperparameterManifest& hp) {
  if (n_classes < 2) throw DomainError("build_model: need at least two classes");
  const Index min_length = minimum_input_length(kind, hp);
  if (input_length < min_length)
    throw DomainError(std::string(display_name(kind)) + " needs series of length >= " +
                      std::to_string(min_length) + ", got " + std::to_string(input_length));
  ModelGraph g;
  g.kind = kind;
  g.input_length = input_length;
  g.n_classes = n_classes;
  if (kind == ArchKind::time_cnn) {
    g.output_kind = OutputKind::per_class_sigmoid;
    g.loss_kind = LossKind::mse;
  }
  Rng rng(seed);
  GraphBuilder b(g, rng);
  switch (kind) {
    case ArchKind::mlp: build_mlp(b, hp.mlp, n_classes); break;
    case ArchKind::fcn: build_fcn(b, hp.fcn, n_classes); break;
    case ArchKind::resnet: build_resnet(b, hp.resnet, n_classes); break;
    case ArchKind::encoder: build_encoder(b, hp.encoder, n_classes); break;
    case ArchKind::mcdcnn: build_mcdcnn(b, hp.mcdcnn, n_classes); break;
    case ArchKind::time_cnn: build_time_cnn(b, hp.time_cnn, n_classes); break;
  }
  g.validate();
  return g;
}

void set_input_length(ModelGraph& model, Index input_length) {
  if (input_length == model.input_length) return;
  if (!is_length_invariant(model.kind))
    throw UnsupportedError(std::string(display_name(model.kind)) +
                           " weights depend on the series length");
  const Index old = model.input_length;
  model.input_length = input_length;
  try {
    model.validate();
  } catch (const ShapeError& e) {
    model.input_length = old;
    throw DomainError(std::string("series length ") + std::to_string(input_length) +
                      " not supported: " + e.what());
  }
}

}  // namespace tsce
