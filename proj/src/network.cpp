#include "rinn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "rinn/errors.hpp"
#include "rinn/filter_rotation.hpp"
#include "rinn/rng.hpp"

namespace rinn {

namespace {

std::string layer_label(std::size_t index, LayerKind kind) {
  return "layer " + std::to_string(index) + " (" + layer_kind_name(kind) + ")";
}

// [H, W, a, b] -> [H, W, b, a]
Tensor swap_last_axes(const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), a = x.dim(2), b = x.dim(3);
  Tensor y({h, w, b, a});
  for (std::size_t px = 0; px < h * w; ++px) {
    const double* src = x.raw() + px * a * b;
    double* dst = y.raw() + px * a * b;
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) dst[j * a + i] = src[i * b + j];
  }
  return y;
}

bool applies_relu(const Model& model, std::size_t index) {
  return index + 1 < model.layers.size() && model.layers[index].kind() != LayerKind::maxpool;
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// The 1x1 conv applied per fiber of a [H, W, p, C] volume.
Tensor conv_on_fibers(const Tensor& x, const Conv2DLayer& conv) {
  if (conv.kernel_h() != 1 || conv.kernel_w() != 1) {
    throw DimensionError("only 1x1 convolutions may follow the cyclic layer");
  }
  const std::size_t h = x.dim(0), w = x.dim(1), p = x.dim(2);
  Tensor y = conv2d_forward(x.reshaped({h, w * p, x.dim(3)}), conv);
  y.reshape({h, w, p, conv.out_channels()});
  return y;
}

Tensor apply_layer(const Layer& layer, const Tensor& x, std::vector<std::size_t>* argmax) {
  return std::visit(
      [&](const auto& params) -> Tensor {
        using T = std::decay_t<decltype(params)>;
        if constexpr (std::is_same_v<T, Conv2DLayer>) {
          return x.rank() == 4 ? conv_on_fibers(x, params) : conv2d_forward(x, params);
        } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
          PoolResult r = maxpool2_forward(x);
          if (argmax) *argmax = std::move(r.argmax);
          return std::move(r.y);
        } else if constexpr (std::is_same_v<T, CyclicConvLayer>) {
          return swap_last_axes(cyclic_conv_forward(x, params));
        } else {
          return dense_forward(x, params);
        }
      },
      layer.params);
}

// Returns dx (empty when not requested) and fills `grad`.
Tensor backprop_layer(const Layer& layer, const Tensor& x, const Tensor& dy, const std::vector<std::size_t>& argmax,
                      ParamGrad* grad, bool need_dx) {
  return std::visit(
      [&](const auto& params) -> Tensor {
        using T = std::decay_t<decltype(params)>;
        if constexpr (std::is_same_v<T, Conv2DLayer>) {
          if (x.rank() == 4) {
            const std::size_t h = x.dim(0), w = x.dim(1), p = x.dim(2);
            auto g = conv2d_backward(x.reshaped({h, w * p, x.dim(3)}), params,
                                     dy.reshaped({h, w * p, dy.dim(3)}), need_dx);
            if (grad) *grad = {std::move(g.dweights), std::move(g.dbias)};
            if (need_dx) g.dx.reshape(x.shape());
            return std::move(g.dx);
          }
          auto g = conv2d_backward(x, params, dy, need_dx);
          if (grad) *grad = {std::move(g.dweights), std::move(g.dbias)};
          return std::move(g.dx);
        } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
          return need_dx ? maxpool2_backward(argmax, x.shape(), dy) : Tensor();
        } else if constexpr (std::is_same_v<T, CyclicConvLayer>) {
          auto g = cyclic_conv_backward(x, params, swap_last_axes(dy), need_dx);
          if (grad) *grad = {std::move(g.dkernels), std::move(g.dbias)};
          return std::move(g.dx);
        } else {
          auto g = dense_backward(x, params, dy, need_dx);
          if (grad) *grad = {std::move(g.dweights), std::move(g.dbias)};
          return std::move(g.dx);
        }
      },
      layer.params);
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_array(std::string& out, const Storage& values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_number(values[i]);
  }
  out += ']';
}

void write_shape(std::string& out, const Shape& shape) {
  out += '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(shape[i]);
  }
  out += ']';
}

LayerKind parse_kind(const std::string& name) {
  if (name == "conv") return LayerKind::conv;
  if (name == "maxpool") return LayerKind::maxpool;
  if (name == "cyclic") return LayerKind::cyclic;
  if (name == "dense") return LayerKind::dense;
  throw MalformedError("unknown layer kind '" + name + "'");
}

Tensor read_tensor(const nlohmann::json& values, const Shape& shape, const std::string& what) {
  std::vector<double> data = values.get<std::vector<double>>();
  if (data.size() != shape_size(shape)) {
    throw ShapeError(what + " has " + std::to_string(data.size()) + " values, shape " + shape_string(shape) +
                     " needs " + std::to_string(shape_size(shape)));
  }
  return Tensor(shape, std::move(data));
}

Layer read_layer(const nlohmann::json& j, std::size_t index) {
  const LayerKind kind = parse_kind(j.at("kind").get<std::string>());
  const std::string label = layer_label(index, kind);
  Shape shape = j.at("shape").get<Shape>();
  for (std::size_t d : shape)
    if (d == 0) throw ShapeError(label + " has a zero extent");
  Layer layer;
  layer.layout = {j.at("layout").at("m").get<int>(), j.at("layout").at("p").get<int>()};
  layer.frozen = j.at("frozen").get<bool>();
  const auto& weights = j.at("weights");
  const auto& bias = j.at("bias");
  auto bias_shape = [&]() -> Shape { return {shape.back()}; };
  switch (kind) {
    case LayerKind::maxpool:
      if (shape != Shape{2, 2} || !weights.empty() || !bias.empty()) throw ShapeError(label + " must be a bare 2x2 pool");
      layer.params = MaxPoolLayer{};
      break;
    case LayerKind::conv:
    case LayerKind::cyclic:
    case LayerKind::dense: {
      if (kind == LayerKind::dense ? shape.size() != 2 : shape.size() != 4) {
        throw ShapeError(label + (kind == LayerKind::dense ? " needs a rank-2 shape" : " needs a rank-4 shape"));
      }
      // Built as locals first: GCC leaks aggregate members when a later
      // initializer throws.
      Tensor w = read_tensor(weights, shape, label + " weights");
      Tensor b = read_tensor(bias, bias_shape(), label + " bias");
      if (kind == LayerKind::conv) {
        layer.params = Conv2DLayer{std::move(w), std::move(b)};
      } else if (kind == LayerKind::cyclic) {
        layer.params = CyclicConvLayer{std::move(w), std::move(b), layer.layout};
      } else {
        layer.params = DenseLayer{std::move(w), std::move(b)};
      }
      break;
    }
  }
  return layer;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
      return "conv";
    case LayerKind::maxpool:
      return "maxpool";
    case LayerKind::cyclic:
      return "cyclic";
    case LayerKind::dense:
      return "dense";
  }
  return "?";
}

LayerKind Layer::kind() const { return static_cast<LayerKind>(params.index()); }

ModelSpec ModelSpec::standard() {
  ModelSpec spec;
  spec.layers = {{LayerKind::conv, 7, 1}, {LayerKind::maxpool, 2, 0}, {LayerKind::conv, 14, 36},
                 {LayerKind::dense, 1, 24}, {LayerKind::dense, 1, 15}};
  return spec;
}

void ModelSpec::validate() const {
  if (class_count < 1) throw ConfigError("class_count must be positive");
  if (n < 1) throw ConfigError("orientation resolution n must be positive");
  if (layers.empty() || layers.back().kind != LayerKind::dense || layers.back().outputs != static_cast<std::size_t>(class_count)) {
    throw DimensionError("the last layer must be dense with class_count outputs");
  }
  std::size_t size = input_size;
  bool head = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& d = layers[i];
    const std::string label = layer_label(i, d.kind);
    switch (d.kind) {
      case LayerKind::conv:
        if (head) throw DimensionError(label + " follows the dense head");
        if (d.kernel == 0 || d.outputs == 0) throw DimensionError(label + " needs a kernel and outputs");
        if (size < d.kernel) {
          throw DimensionError(label + ": " + std::to_string(size) + "x" + std::to_string(size) + " input is smaller than its " +
                               std::to_string(d.kernel) + "x" + std::to_string(d.kernel) + " kernel");
        }
        size = size - d.kernel + 1;
        break;
      case LayerKind::maxpool:
        if (head) throw DimensionError(label + " follows the dense head");
        if (size % 2 != 0) throw DimensionError(label + ": odd input extent " + std::to_string(size));
        size /= 2;
        break;
      case LayerKind::cyclic:
        throw ConfigError(label + ": the cyclic layer is inserted by insert_cyclic_head, not declared");
      case LayerKind::dense:
        if (d.outputs == 0) throw DimensionError(label + " needs outputs");
        if (!head && size != 1) {
          throw DimensionError(label + ": spatial map is " + std::to_string(size) + "x" + std::to_string(size) + ", not 1x1");
        }
        head = true;
        break;
    }
  }
}

std::optional<std::size_t> Model::cyclic_index() const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind() == LayerKind::cyclic) return i;
  return std::nullopt;
}

std::vector<std::size_t> Model::spatial_conv_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerKind k = layers[i].kind();
    if (k == LayerKind::cyclic || k == LayerKind::dense) break;
    if (k == LayerKind::conv) out.push_back(i);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const Layer& layer : layers) {
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, CyclicConvLayer>) {
            total += p.kernels.size() + p.bias.size();
          } else if constexpr (!std::is_same_v<T, MaxPoolLayer>) {
            total += p.weights.size() + p.bias.size();
          }
        },
        layer.params);
  }
  return total;
}

void Model::validate() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  std::size_t channels = 1;
  bool fibers = false;  // after the cyclic layer
  std::size_t cyclic_count = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    const std::string label = layer_label(i, layer.kind());
    auto expect_in = [&](std::size_t got) {
      if (got != channels) {
        throw ShapeError(label + " expects " + std::to_string(got) + " input channels, previous layer gives " +
                         std::to_string(channels));
      }
    };
    try {
      std::visit(
          [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, Conv2DLayer>) {
              p.validate();
              expect_in(p.in_channels());
              if (fibers && (p.kernel_h() != 1 || p.kernel_w() != 1)) throw ShapeError(label + " after the cyclic layer must be 1x1");
              layer.layout.validate(p.out_channels());
              channels = p.out_channels();
            } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
              if (fibers) throw ShapeError(label + " follows the cyclic layer");
            } else if constexpr (std::is_same_v<T, CyclicConvLayer>) {
              p.validate();
              expect_in(p.kernels.dim(2));
              if (!(p.layout == layer.layout)) throw ShapeError(label + " layout disagrees with its kernels");
              channels = p.out_kernels();
              fibers = true;
              ++cyclic_count;
            } else {
              p.validate();
              if (fibers) throw ShapeError(label + ": dense layers cannot follow the cyclic layer");
              expect_in(p.in_features());
              channels = p.out_features();
            }
          },
          layer.params);
    } catch (const ShapeError&) {
      throw;
    } catch (const Error& e) {
      throw ShapeError(label + ": " + e.what());
    }
  }
  if (cyclic_count > 1) throw ShapeError("model has more than one cyclic layer");
  if (channels != static_cast<std::size_t>(class_count)) {
    throw ShapeError("model emits " + std::to_string(channels) + " classes, header says " + std::to_string(class_count));
  }
}

long PoseGrid::nearest_cell(double coord) const { return std::lround((coord - offset) / stride); }

PoseGrid pose_grid(const Model& model) {
  PoseGrid grid;
  for (const Layer& layer : model.layers) {
    if (const auto* conv = std::get_if<Conv2DLayer>(&layer.params)) {
      grid.offset += grid.stride * (static_cast<double>(conv->kernel_h()) - 1.0) / 2.0;
    } else if (std::holds_alternative<MaxPoolLayer>(layer.params)) {
      grid.offset += grid.stride * 0.5;
      grid.stride *= 2.0;
    } else if (const auto* cyc = std::get_if<CyclicConvLayer>(&layer.params)) {
      grid.offset += grid.stride * (static_cast<double>(cyc->kernel_h()) - 1.0) / 2.0;
    }
  }
  return grid;
}

Model build_base_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  Model model;
  model.n = spec.n;
  model.class_count = spec.class_count;
  std::size_t channels = 1;
  for (const LayerDesc& d : spec.layers) {
    Layer layer;
    switch (d.kind) {
      case LayerKind::conv: {
        const std::size_t fan_in = d.kernel * d.kernel * channels;
        layer.params = Conv2DLayer{he_normal({d.kernel, d.kernel, channels, d.outputs}, fan_in, rng), Tensor({d.outputs})};
        layer.layout = {static_cast<int>(d.outputs), 1};
        channels = d.outputs;
        break;
      }
      case LayerKind::maxpool:
        layer.params = MaxPoolLayer{};
        break;
      case LayerKind::cyclic:
        break;
      case LayerKind::dense:
        layer.params = DenseLayer{he_normal({channels, d.outputs}, channels, rng), Tensor({d.outputs})};
        channels = d.outputs;
        break;
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

Conv2DLayer fc_to_1x1(const DenseLayer& layer) {
  layer.validate();
  return {layer.weights.reshaped({1, 1, layer.in_features(), layer.out_features()}), layer.bias};
}

DenseLayer conv1x1_to_fc(const Conv2DLayer& layer) {
  layer.validate();
  if (layer.kernel_h() != 1 || layer.kernel_w() != 1) throw DimensionError("conv1x1_to_fc needs a 1x1 kernel");
  return {layer.weights.reshaped({layer.in_channels(), layer.out_channels()}), layer.bias};
}

bool is_rotated(const Model& model, std::size_t layer_index) {
  const Layer& layer = model.layers.at(layer_index);
  return layer.kind() == LayerKind::conv && layer.frozen;
}

void rotate_layer(Model& model, std::size_t layer_index, int n, int p, Widening widening) {
  if (model.cyclic_index()) throw StageOrderError("cannot rotate a layer after the cyclic head is inserted");
  const auto spatial = model.spatial_conv_indices();
  if (std::find(spatial.begin(), spatial.end(), layer_index) == spatial.end()) {
    throw ConfigError("layer " + std::to_string(layer_index) + " is not a spatial convolution");
  }
  GroupLayout in_layout{1, 1};
  for (std::size_t idx : spatial) {
    if (idx == layer_index) break;
    if (!is_rotated(model, idx)) {
      throw StageOrderError("layer " + std::to_string(idx) + " must be rotated before layer " + std::to_string(layer_index));
    }
    in_layout = model.layers[idx].layout;
  }
  Layer& layer = model.layers[layer_index];
  if (is_rotated(model, layer_index)) throw StageOrderError("layer " + std::to_string(layer_index) + " is already rotated");

  auto& conv = std::get<Conv2DLayer>(layer.params);
  const std::size_t m = conv.out_channels();
  const RotatedBank bank = expand_bank({conv.weights, in_layout}, n, p);
  const std::size_t up = static_cast<std::size_t>(p);
  Tensor bias({m * up});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < up; ++j) bias[i * up + j] = conv.bias[i];
  conv = {bank.kernels, std::move(bias)};
  layer.layout = bank.layout();
  layer.frozen = true;
  model.n = n;

  for (std::size_t k = layer_index + 1; k < model.layers.size(); ++k) {
    Layer& next = model.layers[k];
    if (auto* c = std::get_if<Conv2DLayer>(&next.params)) {
      const Tensor& w = c->weights;
      const std::size_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
      Tensor wide({kh, kw, m * up, cout});
      const double scale = widening == Widening::replicate ? 1.0 / static_cast<double>(p) : 1.0;
      for (std::size_t e = 0; e < kh * kw; ++e)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < up; ++j) {
            if (widening == Widening::orientation_zero && j != 0) continue;
            for (std::size_t co = 0; co < cout; ++co)
              wide[(e * m * up + i * up + j) * cout + co] = scale * w[(e * m + i) * cout + co];
          }
      c->weights = std::move(wide);
      return;
    }
    if (auto* d = std::get_if<DenseLayer>(&next.params)) {
      const std::size_t dout = d->out_features();
      Tensor wide({m * up, dout});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < dout; ++o) wide[(i * up) * dout + o] = d->weights[i * dout + o];
      d->weights = std::move(wide);
      return;
    }
  }
}

void insert_cyclic_head(Model& model) {
  if (model.cyclic_index()) throw StageOrderError("the cyclic head is already inserted");
  const auto spatial = model.spatial_conv_indices();
  if (spatial.empty()) throw StageOrderError("model has no convolution to rotate");
  for (std::size_t idx : spatial)
    if (!is_rotated(model, idx)) throw StageOrderError("layer " + std::to_string(idx) + " is not rotated yet");
  const GroupLayout layout = model.layers[spatial.back()].layout;
  std::size_t head = spatial.back() + 1;
  while (head < model.layers.size() && model.layers[head].kind() == LayerKind::maxpool) ++head;
  if (head >= model.layers.size() || model.layers[head].kind() != LayerKind::dense) {
    throw ShapeError("expected a dense head after the last convolution");
  }

  // The first dense layer reads the orientation-0 slice of each group.
  const auto& first = std::get<DenseLayer>(model.layers[head].params);
  if (first.in_features() != layout.channels()) throw DimensionError("dense head does not match the rotated channel count");
  const std::size_t m = static_cast<std::size_t>(layout.groups), p = static_cast<std::size_t>(layout.period);
  const std::size_t dout = first.out_features();
  Tensor w({1, 1, m, dout});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < dout; ++o) w[i * dout + o] = first.weights[(i * p) * dout + o];
  model.layers[head] = Layer{Conv2DLayer{std::move(w), first.bias}, {static_cast<int>(dout), 1}, false};
  for (std::size_t k = head + 1; k < model.layers.size(); ++k) {
    const auto& d = std::get<DenseLayer>(model.layers[k].params);
    model.layers[k] = Layer{fc_to_1x1(d), {static_cast<int>(d.out_features()), 1}, false};
  }
  CyclicConvLayer cyc = identity_init(layout);
  model.layers.insert(model.layers.begin() + static_cast<std::ptrdiff_t>(head), Layer{std::move(cyc), layout, false});
}

Model build_pose_model(const Model& base, int n, const std::vector<int>& periods) {
  Model model = base;
  const auto spatial = model.spatial_conv_indices();
  if (periods.size() != spatial.size()) {
    throw ConfigError("need " + std::to_string(spatial.size()) + " periods, got " + std::to_string(periods.size()));
  }
  for (std::size_t i = 0; i < spatial.size(); ++i) rotate_layer(model, spatial[i], n, periods[i], Widening::orientation_zero);
  insert_cyclic_head(model);
  return model;
}

Tensor forward(const Model& model, const Tensor& input, ForwardTrace* trace, std::size_t first, std::size_t last) {
  last = std::min(last, model.layers.size());
  if (trace) {
    *trace = ForwardTrace{};
    trace->first = first;
  }
  Tensor x = input;
  for (std::size_t i = first; i < last; ++i) {
    std::vector<std::size_t> argmax;
    Tensor y;
    try {
      y = apply_layer(model.layers[i], x, trace ? &argmax : nullptr);
    } catch (const DimensionError& e) {
      throw DimensionError(layer_label(i, model.layers[i].kind()) + ": " + e.what());
    }
    Tensor next = applies_relu(model, i) ? relu(y) : y;
    if (trace) {
      trace->inputs.push_back(std::move(x));
      trace->outputs.push_back(std::move(y));
      trace->argmax.push_back(std::move(argmax));
    }
    x = std::move(next);
  }
  return x;
}

Gradients backward(const Model& model, const ForwardTrace& trace, const Tensor& doutput) {
  Gradients grads(model.layers.size());
  const std::size_t count = trace.inputs.size();
  if (count == 0) return grads;
  std::size_t lowest = trace.first + count;
  for (std::size_t i = trace.first; i < trace.first + count; ++i) {
    if (model.layers[i].has_parameters() && !model.layers[i].frozen) {
      lowest = i;
      break;
    }
  }
  Tensor d = doutput;
  for (std::size_t k = count; k-- > 0;) {
    const std::size_t i = trace.first + k;
    if (i < lowest) break;
    const Layer& layer = model.layers[i];
    if (applies_relu(model, i)) d = relu_backward(trace.outputs[k], d);
    ParamGrad* g = layer.has_parameters() && !layer.frozen ? &grads[i] : nullptr;
    d = backprop_layer(layer, trace.inputs[k], d, trace.argmax[k], g, i > lowest);
  }
  return grads;
}

Tensor as_input(const Tensor& image) {
  if (image.rank() == 2) return image.reshaped({image.dim(0), image.dim(1), 1});
  if (image.rank() == 3 && image.dim(2) == 1) return image;
  throw DimensionError("expected a grayscale image [H, W] or [H, W, 1], got " + shape_string(image.shape()));
}

Tensor pose_logits(const Model& model, const Tensor& image) {
  if (!model.cyclic_index()) throw StageOrderError("model has no cyclic head; it is not a pose model");
  return forward(model, as_input(image));
}

PoseMap logits_to_pose_map(const Tensor& logits) {
  if (logits.rank() != 4) throw DimensionError("pose logits must be [rows, cols, orientations, classes]");
  PoseMap pm{Tensor(logits.shape())};
  const std::size_t c = logits.dim(3);
  for (std::size_t f = 0; f < logits.size() / c; ++f) {
    const std::span<const double> fiber(logits.raw() + f * c, c);
    const double lse = log_sum_exp(fiber);
    for (std::size_t k = 0; k < c; ++k) pm.scores[f * c + k] = std::exp(fiber[k] - lse);
  }
  return pm;
}

PoseMap forward_pose(const Model& model, const Tensor& image) { return logits_to_pose_map(pose_logits(model, image)); }

Tensor pose_features(const Model& model, const Tensor& image) {
  if (!model.cyclic_index()) throw StageOrderError("model has no cyclic head; it is not a pose model");
  return forward(model, as_input(image), nullptr, 0, model.layers.size() - 1);
}

Tensor classify_window(const Model& model, const Tensor& image) {
  if (model.cyclic_index()) throw StageOrderError("classify_window needs a model with a dense head");
  return forward(model, as_input(image));
}

std::string model_to_text(const Model& model) {
  std::string out = "{\"format\":\"rinn-1\",\"n\":" + std::to_string(model.n) +
                    ",\"class_count\":" + std::to_string(model.class_count) + ",\"layers\":[";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    if (i) out += ',';
    out += "{\"kind\":\"";
    out += layer_kind_name(layer.kind());
    out += "\",\"shape\":";
    const Tensor* weights = nullptr;
    const Tensor* bias = nullptr;
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, CyclicConvLayer>) {
            weights = &p.kernels;
            bias = &p.bias;
          } else if constexpr (!std::is_same_v<T, MaxPoolLayer>) {
            weights = &p.weights;
            bias = &p.bias;
          }
        },
        layer.params);
    write_shape(out, weights ? weights->shape() : Shape{2, 2});
    out += ",\"layout\":{\"m\":" + std::to_string(layer.layout.groups) + ",\"p\":" + std::to_string(layer.layout.period) + "}";
    out += layer.frozen ? ",\"frozen\":true" : ",\"frozen\":false";
    out += ",\"weights\":";
    write_array(out, weights ? weights->values() : Storage{});
    out += ",\"bias\":";
    write_array(out, bias ? bias->values() : Storage{});
    out += '}';
  }
  out += "]}\n";
  return out;
}

Model model_from_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedError(std::string("model file is not valid: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format") || !doc["format"].is_string()) {
    throw MalformedError("model file has no format field");
  }
  const std::string format = doc["format"].get<std::string>();
  if (format != "rinn-1") {
    if (format.rfind("rinn-", 0) == 0) throw VersionError("unsupported model format version '" + format + "'");
    throw MalformedError("unknown model format '" + format + "'");
  }
  Model model;
  try {
    model.n = doc.at("n").get<int>();
    model.class_count = doc.at("class_count").get<int>();
    const auto& layers = doc.at("layers");
    if (!layers.is_array()) throw MalformedError("layers must be an array");
    for (std::size_t i = 0; i < layers.size(); ++i) model.layers.push_back(read_layer(layers[i], i));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedError(std::string("model file field error: ") + e.what());
  }
  model.validate();
  return model;
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << model_to_text(model);
  if (!out) throw Error("failed writing '" + path + "'");
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open model file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return model_from_text(ss.str());
}

std::vector<PoseMap> forward_pose_all(const Model& model, const std::vector<Tensor>& images, std::size_t threads) {
  if (threads == 0) throw ConfigError("threads must be at least 1");
  std::vector<PoseMap> out(images.size());
  threads = std::min(threads, std::max<std::size_t>(images.size(), 1));
  if (threads == 1) {
    for (std::size_t k = 0; k < images.size(); ++k) out[k] = forward_pose(model, images[k]);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w)
    workers.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < images.size(); k += threads) out[k] = forward_pose(model, images[k]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace rinn
