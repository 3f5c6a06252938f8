#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rinn/cyclic_conv.hpp"
#include "rinn/layers.hpp"
#include "rinn/tensor.hpp"

namespace rinn {

enum class LayerKind { conv, maxpool, cyclic, dense };

const char* layer_kind_name(LayerKind kind);

struct MaxPoolLayer {};

using LayerParams = std::variant<Conv2DLayer, MaxPoolLayer, CyclicConvLayer, DenseLayer>;

struct Layer {
  LayerParams params;
  // Output channel layout for conv layers, input layout for the cyclic layer,
  // (1, 1) elsewhere.
  GroupLayout layout;
  bool frozen = false;

  LayerKind kind() const;
  bool has_parameters() const { return kind() != LayerKind::maxpool; }
};

struct LayerDesc {
  LayerKind kind = LayerKind::conv;
  std::size_t kernel = 1;   // spatial extent (conv) or ignored
  std::size_t outputs = 0;  // output channels / features
};

// Architecture of the base classifier. Rotation settings live in the
// training configuration; `n` is recorded on the model.
struct ModelSpec {
  std::size_t input_size = 34;
  int class_count = 15;
  int n = 12;
  std::vector<LayerDesc> layers;

  // conv 7x7 (1 base filter), maxpool 2, conv 14x14 (36), dense 24, dense 15.
  static ModelSpec standard();
  // Throws DimensionError naming the first layer whose shapes do not compose.
  void validate() const;
};

struct Model {
  int n = 12;
  int class_count = 15;
  std::vector<Layer> layers;

  std::optional<std::size_t> cyclic_index() const;
  // Indices of the spatial convolutions (those ahead of the cyclic or dense head).
  std::vector<std::size_t> spatial_conv_indices() const;
  std::size_t parameter_count() const;
  // Checks channel chaining and per-layer parameter shapes.
  void validate() const;
};

// Per-fiber class probabilities over [rows, cols, orientations, classes].
struct PoseMap {
  Tensor scores;

  std::size_t rows() const { return scores.dim(0); }
  std::size_t cols() const { return scores.dim(1); }
  std::size_t orientations() const { return scores.dim(2); }
  std::size_t classes() const { return scores.dim(3); }
  double at(std::size_t i, std::size_t j, std::size_t t, std::size_t c) const {
    return scores[((i * cols() + j) * orientations() + t) * classes() + c];
  }
};

// Maps pose-grid cells to scene pixel centers: center = offset + stride * cell.
struct PoseGrid {
  double offset = 0.0;
  double stride = 1.0;

  double center(std::size_t cell) const { return offset + stride * static_cast<double>(cell); }
  long nearest_cell(double coord) const;
};

PoseGrid pose_grid(const Model& model);

Model build_base_model(const ModelSpec& spec, std::uint64_t seed);

DenseLayer conv1x1_to_fc(const Conv2DLayer& layer);
Conv2DLayer fc_to_1x1(const DenseLayer& layer);

enum class Widening {
  replicate,         // copy weights to every orientation channel, scaled by 1/p
  orientation_zero,  // weights on orientation 0, zeros elsewhere
};

// Replaces spatial conv `layer_index` by its rotated bank (p orientations at
// 360/n spacing), freezes it, and widens the next parametric layer to the new
// channel count. A spatial consumer is widened per `widening`; a dense head
// always reads the orientation-0 slice, the same slice the identity cyclic
// layer later hands it, so canonical-pose predictions are unchanged.
// Throws StageOrderError if an earlier spatial conv is still unrotated, the
// layer is already rotated, or the cyclic head exists.
void rotate_layer(Model& model, std::size_t layer_index, int n, int p, Widening widening = Widening::replicate);

// A spatial conv counts as rotated once frozen.
bool is_rotated(const Model& model, std::size_t layer_index);

// Inserts an identity-initialized cyclic layer after the last spatial conv
// and converts the dense head to 1x1 convolutions.
void insert_cyclic_head(Model& model);

// Expands every spatial conv with the given periods (orientation-zero
// widening) and inserts the cyclic head, without any training. Each fiber at
// t = 0 then reproduces the base model on the matching window.
Model build_pose_model(const Model& base, int n, const std::vector<int>& periods);

struct ForwardTrace {
  std::vector<Tensor> inputs;   // input of each evaluated layer
  std::vector<Tensor> outputs;  // pre-activation output of each evaluated layer
  std::vector<std::vector<std::size_t>> argmax;
  std::size_t first = 0;
};

struct ParamGrad {
  Tensor dweights;
  Tensor dbias;
};

// Gradients for every layer; entries for frozen or parameterless layers are
// left empty.
using Gradients = std::vector<ParamGrad>;

// Runs layers [first, last) on `input`. Every layer except max pooling and
// the final layer is followed by ReLU. Outputs after the cyclic layer use the
// fiber-major order [rows, cols, orientations, channels].
Tensor forward(const Model& model, const Tensor& input, ForwardTrace* trace = nullptr, std::size_t first = 0,
               std::size_t last = static_cast<std::size_t>(-1));

// Backpropagates `doutput` through the layers recorded in `trace`, stopping
// below the lowest unfrozen layer.
Gradients backward(const Model& model, const ForwardTrace& trace, const Tensor& doutput);

// Image as [H, W] or [H, W, 1].
Tensor as_input(const Tensor& image);

Tensor pose_logits(const Model& model, const Tensor& image);
PoseMap forward_pose(const Model& model, const Tensor& image);
PoseMap logits_to_pose_map(const Tensor& logits);
// forward_pose over many images on `threads` workers; output order follows
// the input and values do not depend on the thread count.
std::vector<PoseMap> forward_pose_all(const Model& model, const std::vector<Tensor>& images, std::size_t threads = 1);
// Output of the layer before the logits, as [rows, cols, orientations, features].
Tensor pose_features(const Model& model, const Tensor& image);

// Logits of a base-form model (dense head) on a single window.
Tensor classify_window(const Model& model, const Tensor& image);

std::string model_to_text(const Model& model);
Model model_from_text(const std::string& text);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace rinn
