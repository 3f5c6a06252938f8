#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rinn/dataset.hpp"
#include "rinn/network.hpp"

namespace rinn {

struct TrainConfig {
  double learning_rate = 0.01;
  int epochs = 60;  // base and rotate stages
  int batch_size = 8;
  std::uint64_t seed = 42;
  double background_fraction = 0.1;  // [0, 0.3]
  int n = 12;
  std::vector<int> periods = {6, 12};  // one per spatial conv

  // Stage example synthesis.
  int augment_copies = 8;   // jittered positives per class
  double jitter_deg = 15.0;  // half a 30 degree bin
  double jitter_px = 1.0;    // half a pose-grid cell
  int shift_negatives = 4;   // translated zero-label copies per class
  bool rotated_negatives = true;  // zero-label copies at stage angles two or more bins away
  double weight_decay = 0.0;
  // Zero-label examples whose top class probability is already below this
  // stop flattening the class scores. They still lower the head bias.
  double depress_until = 0.5;

  // Pose-form fine-tuning.
  int finetune_epochs = 100;
  int finetune_scenes = 500;
  double finetune_learning_rate = 0.02;
  int heldout_scenes = 20;

  // Throws ConfigError naming the first bad field.
  void validate() const;
};

// Sets one field from its text form; unknown keys and unparsable values
// raise ConfigError naming the key.
void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value);
// Flat "key = value" lines; '#' starts a comment.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
std::string config_to_text(const TrainConfig& config);

struct StageReport {
  std::string stage;
  std::vector<double> epoch_losses;
  std::vector<double> heldout_losses;
  double train_accuracy = 0.0;  // canonical training samples
  // Worst per-angle accuracy over the n stage angles; pose models only.
  std::optional<double> stage_angle_accuracy;
  bool loss_decreasing_start = true;  // strictly decreasing over the first 3 epochs
  double wall_seconds = 0.0;          // console only, never serialized

  // One JSON record, without wall time so logs are reproducible.
  std::string to_json() const;
};

struct TrainingExample {
  Tensor image;  // [H, W]
  Tensor label;  // [classes]; all zero for background
};

// p' = p - lr * g for every unfrozen layer; frozen layers are untouched.
void sgd_step(Model& model, const Gradients& grads, double lr);

// Half all-zero canvases, half uniform noise in [0, 0.1], all-zero labels.
std::vector<TrainingExample> make_background_batch(std::size_t count, std::size_t canvas, std::uint64_t seed,
                                                   int class_count = kClassCount);

// Jittered canonical positives, rotated and translated zero-label negatives,
// and background_fraction background canvases, on 34x34 canvases.
std::vector<TrainingExample> make_stage_examples(const std::vector<Sample>& train, const TrainConfig& config,
                                                 std::uint64_t seed);

// The 32x32 glyph inside a 34x34 training sample.
Tensor glyph_from_sample(const Sample& sample);

std::pair<Model, StageReport> train_base(const std::vector<Sample>& train, const TrainConfig& config);

// Rotates spatial conv `layer_index`, freezes it, widens its consumer by
// replication and, when another spatial conv follows, retrains the unfrozen
// layers. The last conv feeds the dense head through its orientation-0
// slice and needs no retraining.
std::pair<Model, StageReport> greedy_rotate_stage(const Model& model, std::size_t layer_index, int n, int p,
                                                  const std::vector<Sample>& train, const TrainConfig& config);

// Per-fiber training of the cyclic layer and head on 64x64 scenes. The
// ground-truth fiber gets a one-hot label, fibers within one cell and one
// bin of it are ignored, and other fibers get all-zero labels: every fiber
// within four cells plus a background_fraction sample of the rest.
std::pair<Model, StageReport> finetune(const Model& model, const std::vector<Sample>& train, const TrainConfig& config);

enum class Stage { base, rotate1, rotate2, head, finetune };

const char* stage_name(Stage stage);
Stage parse_stage(const std::string& name);

// Runs one pipeline stage. `input` must be empty for the base stage and hold
// the previous stage's model otherwise; wrong order raises StageOrderError.
std::pair<Model, StageReport> run_stage(Stage stage, const std::optional<Model>& input, const std::vector<Sample>& train,
                                        const TrainConfig& config);

void append_run_log(const StageReport& report, const std::string& path);

// Fraction of samples whose argmax class is right. Dense models classify the
// window; pose models take the global argmax over fibers.
double canonical_accuracy(const Model& model, const std::vector<Sample>& train);
double stage_angle_accuracy(const Model& model, const std::vector<Sample>& train);
double mean_head_bias(const Model& model);

}  // namespace rinn
