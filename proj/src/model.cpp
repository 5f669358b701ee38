#include "tsce/model.hpp"

#include <array>
#include <cctype>

namespace tsce {

namespace {

struct ArchName {
  ArchKind kind;
  std::string_view id;
  std::string_view display;
};

constexpr std::array<ArchName, 6> kArchNames{{
    {ArchKind::mlp, "mlp", "MLP"},
    {ArchKind::fcn, "fcn", "FCN"},
    {ArchKind::resnet, "resnet", "ResNet"},
    {ArchKind::encoder, "encoder", "Encoder"},
    {ArchKind::mcdcnn, "mcdcnn", "MCDCNN"},
    {ArchKind::time_cnn, "time_cnn", "Time-CNN"},
}};

std::string canonical(std::string_view name) {
  std::string out;
  for (char c : name)
    if (std::isalnum(static_cast<unsigned char>(c)))
      out.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  return out;
}

}  // namespace

std::string_view to_string(ArchKind kind) {
  for (const auto& a : kArchNames)
    if (a.kind == kind) return a.id;
  return "unknown";
}

std::string_view display_name(ArchKind kind) {
  for (const auto& a : kArchNames)
    if (a.kind == kind) return a.display;
  return "unknown";
}

ArchKind arch_from_string(std::string_view name) {
  const auto key = canonical(name);
  for (const auto& a : kArchNames)
    if (canonical(a.id) == key) return a.kind;
  throw ParseError("unknown architecture '" + std::string(name) + "'");
}

std::vector<Tensor*> ModelGraph::parameters() {
  std::vector<Tensor*> out;
  for (auto& n : nodes)
    for (auto& p : n.layer.params) out.push_back(&p);
  return out;
}

std::vector<const Tensor*> ModelGraph::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& n : nodes)
    for (const auto& p : n.layer.params) out.push_back(&p);
  return out;
}

void ModelGraph::touch_all() {
  for (auto& n : nodes) n.layer.touch();
}

int ModelGraph::head_index() const {
  for (int i = int(nodes.size()) - 1; i >= 0; --i)
    if (nodes[std::size_t(i)].layer.kind == LayerKind::dense) return i;
  return -1;
}

void ModelGraph::validate() const {
  if (nodes.empty()) throw ShapeError("model has no layers");
  if (n_classes < 1) throw DomainError("model needs at least one class");
  std::vector<Shape> shapes;
  shapes.reserve(nodes.size());
  const Shape input{1, 1, input_length};
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    std::vector<Shape> in;
    for (int src : n.inputs) {
      if (src >= int(i) || src < -1) throw ShapeError("node '" + n.name + "' has a forward edge");
      in.push_back(src < 0 ? input : shapes[std::size_t(src)]);
    }
    try {
      shapes.push_back(layer_output_shape(n.layer, in));
    } catch (const ShapeError& e) {
      throw ShapeError("node '" + n.name + "': " + e.what());
    }
  }
  if (shapes.back() != Shape{1, n_classes, 1})
    throw ShapeError("model output " + shape_string(shapes.back()) + " is not (1, " +
                     std::to_string(n_classes) + ", 1)");
}

Index count_parameters(const ModelGraph& model) {
  Index n = 0;
  for (const auto& node : model.nodes) n += node.layer.parameter_count();
  return n;
}

ForwardTrace forward_trace(const ModelGraph& model, const Tensor& batch, Mode mode, Rng& rng) {
  if (batch.rank() != 3 || batch.channels() != 1 || batch.time() != model.input_length)
    throw ShapeError("model expects (batch, 1, " + std::to_string(model.input_length) +
                     ") input, got " + shape_string(batch.shape()));
  ForwardTrace trace;
  trace.outputs.reserve(model.nodes.size());
  trace.caches.reserve(model.nodes.size());
  std::vector<const Tensor*> inputs;
  for (const auto& node : model.nodes) {
    inputs.clear();
    for (int src : node.inputs)
      inputs.push_back(src < 0 ? &batch : &trace.outputs[std::size_t(src)]);
    auto r = layer_forward(node.layer, inputs, mode, rng);
    trace.outputs.push_back(std::move(r.output));
    trace.caches.push_back(std::move(r.cache));
  }
  return trace;
}

Tensor model_forward(const ModelGraph& model, const Tensor& batch, Mode mode, Rng& rng) {
  auto trace = forward_trace(model, batch, mode, rng);
  return std::move(trace.outputs.back());
}

Tensor model_forward(const ModelGraph& model, const Tensor& batch) {
  Rng unused(0);
  return model_forward(model, batch, Mode::eval, unused);
}

ModelGradients model_backward(const ModelGraph& model, const ForwardTrace& trace,
                              const Tensor& grad_output) {
  if (trace.caches.size() != model.nodes.size())
    throw StateError("model_backward: trace does not match model");
  const std::size_t n = model.nodes.size();
  std::vector<Tensor> grads(n);
  std::vector<bool> has(n, false);
  grads[n - 1] = grad_output;
  has[n - 1] = true;

  std::vector<std::vector<Tensor>> param_grads(n);
  ModelGradients out;
  out.input = Tensor({trace.output().batch(), 1, model.input_length});

  for (std::size_t k = n; k-- > 0;) {
    const auto& node = model.nodes[k];
    if (!has[k]) grads[k] = Tensor(trace.outputs[k].shape());
    auto r = layer_backward(node.layer, trace.caches[k], grads[k]);
    param_grads[k] = std::move(r.grad_params);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const int src = node.inputs[j];
      Tensor& g = r.grad_inputs[j];
      if (src < 0) {
        out.input.values() += g.values();
      } else if (!has[std::size_t(src)]) {
        grads[std::size_t(src)] = std::move(g);
        has[std::size_t(src)] = true;
      } else {
        grads[std::size_t(src)].values() += g.values();
      }
    }
    grads[k] = Tensor();  // release
  }
  for (auto& pg : param_grads)
    for (auto& g : pg) out.params.push_back(std::move(g));
  return out;
}

void apply_running_statistics(ModelGraph& model, const ForwardTrace& trace) {
  for (std::size_t k = 0; k < model.nodes.size(); ++k)
    update_running_statistics(model.nodes[k].layer, trace.caches[k]);
}

}  // namespace tsce
