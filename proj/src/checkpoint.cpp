#include <bit>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "tsce/training.hpp"

namespace tsce {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'S', 'C', 'E'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string real_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_real(const std::string& s) {
  std::istringstream is(s);
  is.imbue(std::locale::classic());
  double v;
  is >> v;
  if (is.fail()) throw FormatError("checkpoint: bad number '" + s + "'");
  return v;
}

long long parse_int(const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw FormatError("checkpoint: bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint: bad integer '" + s + "'");
  }
}

std::uint64_t parse_u64(const std::string& s) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw FormatError("checkpoint: bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint: bad integer '" + s + "'");
  }
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string shapes_text(const std::vector<Tensor>& tensors) {
  std::string out;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (i) out += ';';
    const auto& s = tensors[i].shape();
    for (std::size_t d = 0; d < s.size(); ++d) out += (d ? "x" : "") + std::to_string(s[d]);
  }
  return out;
}

std::vector<Shape> parse_shapes(const std::string& text) {
  std::vector<Shape> out;
  if (text.empty()) return out;
  for (const auto& item : split(text, ';')) {
    Shape s;
    for (const auto& d : split(item, 'x')) s.push_back(Index(parse_int(d)));
    out.push_back(std::move(s));
  }
  return out;
}

// node=name|kind|inputs|in_ch,out_ch,kernel,stride,padding,pool,in_f,out_f,rate,momentum,eps|params|buffers
std::string node_text(const Node& n) {
  const auto& h = n.layer.hyper;
  std::string inputs;
  for (std::size_t i = 0; i < n.inputs.size(); ++i)
    inputs += (i ? "," : "") + std::to_string(n.inputs[i]);
  std::ostringstream os;
  os << n.name << '|' << to_string(n.layer.kind) << '|' << inputs << '|' << h.in_channels << ','
     << h.out_channels << ',' << h.kernel << ',' << h.stride << ','
     << (h.padding == Padding::same ? "same" : "valid") << ',' << h.pool << ',' << h.in_features
     << ',' << h.out_features << ',' << real_text(h.rate) << ',' << real_text(h.momentum) << ','
     << real_text(h.epsilon) << '|' << shapes_text(n.layer.params) << '|'
     << shapes_text(n.layer.buffers);
  return os.str();
}

Node parse_node(const std::string& text) {
  const auto f = split(text, '|');
  if (f.size() != 6) throw FormatError("checkpoint: malformed node record");
  Node n;
  n.name = f[0];
  n.layer.kind = layer_kind_from_string(f[1]);
  if (!f[2].empty())
    for (const auto& i : split(f[2], ',')) n.inputs.push_back(int(parse_int(i)));
  const auto h = split(f[3], ',');
  if (h.size() != 11) throw FormatError("checkpoint: malformed layer hyperparameters");
  auto& hy = n.layer.hyper;
  hy.in_channels = Index(parse_int(h[0]));
  hy.out_channels = Index(parse_int(h[1]));
  hy.kernel = Index(parse_int(h[2]));
  hy.stride = Index(parse_int(h[3]));
  if (h[4] != "same" && h[4] != "valid") throw FormatError("checkpoint: bad padding");
  hy.padding = h[4] == "same" ? Padding::same : Padding::valid;
  hy.pool = Index(parse_int(h[5]));
  hy.in_features = Index(parse_int(h[6]));
  hy.out_features = Index(parse_int(h[7]));
  hy.rate = parse_real(h[8]);
  hy.momentum = parse_real(h[9]);
  hy.epsilon = parse_real(h[10]);
  for (auto& s : parse_shapes(f[4])) n.layer.params.emplace_back(std::move(s));
  for (auto& s : parse_shapes(f[5])) n.layer.buffers.emplace_back(std::move(s));
  n.layer.id = next_layer_id();
  return n;
}

}  // namespace

std::string serialize_checkpoint(const TrainedModel& model) {
  const ModelGraph& g = model.graph;
  std::ostringstream meta;
  meta << "arch=" << to_string(g.kind) << '\n'
       << "input_length=" << g.input_length << '\n'
       << "n_classes=" << g.n_classes << '\n'
       << "output_kind="
       << (g.output_kind == OutputKind::softmax_distribution ? "softmax" : "sigmoid") << '\n'
       << "loss=" << to_string(g.loss_kind) << '\n'
       << "model_seed=" << model.model_seed << '\n'
       << "train_seed=" << model.train_seed << '\n'
       << "config_digest=" << hex64(model.config_digest) << '\n'
       << "source_dataset=" << model.source_dataset << '\n'
       << "transfer_source=" << model.transfer_source << '\n'
       << "selected_epoch=" << model.selected_epoch << '\n';
  for (const auto& e : model.history)
    meta << "history=" << real_text(e.loss) << ',' << real_text(e.accuracy) << ','
         << real_text(e.learning_rate) << '\n';
  for (const auto& n : g.nodes) meta << "node=" << node_text(n) << '\n';
  const std::string text = meta.str();

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  std::uint64_t count = 0;
  for (const auto& n : g.nodes) {
    for (const auto& p : n.layer.params) count += std::uint64_t(p.size());
    for (const auto& b : n.layer.buffers) count += std::uint64_t(b.size());
  }
  put<std::uint64_t>(out, count);
  for (const auto& n : g.nodes) {
    for (const auto& p : n.layer.params)
      out.append(reinterpret_cast<const char*>(p.data()), std::size_t(p.size()) * sizeof(double));
    for (const auto& b : n.layer.buffers)
      out.append(reinterpret_cast<const char*>(b.data()), std::size_t(b.size()) * sizeof(double));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

TrainedModel deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.get_bytes(4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) + " not supported");
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > r.remaining()) throw FormatError("checkpoint truncated");
  const std::string text = r.get_bytes(std::size_t(meta_len));

  TrainedModel m;
  ModelGraph& g = m.graph;
  std::istringstream in(text);
  std::string line;
  bool have_arch = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed metadata line");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "arch") g.kind = arch_from_string(value), have_arch = true;
      else if (key == "input_length") g.input_length = Index(parse_int(value));
      else if (key == "n_classes") g.n_classes = int(parse_int(value));
      else if (key == "output_kind")
        g.output_kind = value == "sigmoid" ? OutputKind::per_class_sigmoid
                                           : OutputKind::softmax_distribution;
      else if (key == "loss") g.loss_kind = value == "mse" ? LossKind::mse : LossKind::cross_entropy;
      else if (key == "model_seed") m.model_seed = parse_u64(value);
      else if (key == "train_seed") m.train_seed = parse_u64(value);
      else if (key == "config_digest") m.config_digest = std::stoull(value, nullptr, 16);
      else if (key == "source_dataset") m.source_dataset = value;
      else if (key == "transfer_source") m.transfer_source = value;
      else if (key == "selected_epoch") m.selected_epoch = int(parse_int(value));
      else if (key == "history") {
        const auto f = split(value, ',');
        if (f.size() != 3) throw FormatError("checkpoint: malformed history");
        m.history.push_back({parse_real(f[0]), parse_real(f[1]), parse_real(f[2])});
      } else if (key == "node") g.nodes.push_back(parse_node(value));
      else throw FormatError("checkpoint: unknown metadata key '" + key + "'");
    } catch (const ParseError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: bad metadata value for '" + key + "'");
    }
  }
  if (!have_arch || g.nodes.empty()) throw FormatError("checkpoint: incomplete metadata");

  const auto count = r.get<std::uint64_t>();
  std::uint64_t expected = 0;
  for (const auto& n : g.nodes) {
    for (const auto& p : n.layer.params) expected += std::uint64_t(p.size());
    for (const auto& b : n.layer.buffers) expected += std::uint64_t(b.size());
  }
  if (count != expected) throw FormatError("checkpoint: payload size does not match layer shapes");
  if (r.remaining() < count * sizeof(double) + sizeof(std::uint64_t))
    throw FormatError("checkpoint truncated");
  for (auto& n : g.nodes) {
    auto fill = [&](Tensor& t) {
      const std::string raw = r.get_bytes(std::size_t(t.size()) * sizeof(double));
      std::memcpy(t.data(), raw.data(), raw.size());
    };
    for (auto& p : n.layer.params) fill(p);
    for (auto& b : n.layer.buffers) fill(b);
  }
  const std::size_t body = r.position();
  const auto digest = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  if (digest != fnv1a64(std::string_view(bytes).substr(0, body)))
    throw FormatError("checkpoint: digest mismatch (corrupted file)");
  try {
    g.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: inconsistent graph: ") + e.what());
  }
  return m;
}

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace tsce
