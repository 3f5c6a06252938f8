#include "rinn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "rinn/errors.hpp"
#include "rinn/filter_rotation.hpp"
#include "rinn/rng.hpp"

namespace rinn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t class_count_of(const std::vector<Sample>& train) {
  if (train.empty()) throw ConfigError("training set is empty");
  int top = 0;
  for (const Sample& s : train) {
    if (s.record.class_id < 0) throw ConfigError("negative class id in training set");
    top = std::max(top, s.record.class_id);
  }
  return static_cast<std::size_t>(top) + 1;
}

Tensor one_hot(std::size_t classes, int cls) {
  Tensor t({classes});
  t[static_cast<std::size_t>(cls)] = 1.0;
  return t;
}

std::size_t background_count(double fraction, std::size_t others) {
  return static_cast<std::size_t>(std::lround(fraction / (1.0 - fraction) * static_cast<double>(others)));
}

int circular_distance(long a, long b, long period) {
  const long d = std::labs(a - b) % period;
  return static_cast<int>(std::min(d, period - d));
}

void accumulate(Gradients& acc, const Gradients& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].dweights.empty()) continue;
    if (acc[i].dweights.empty()) {
      acc[i] = g[i];
      continue;
    }
    for (std::size_t k = 0; k < g[i].dweights.size(); ++k) acc[i].dweights[k] += g[i].dweights[k];
    for (std::size_t k = 0; k < g[i].dbias.size(); ++k) acc[i].dbias[k] += g[i].dbias[k];
  }
}

void scale(Gradients& g, double s) {
  for (ParamGrad& p : g) {
    for (double& v : p.dweights.values()) v *= s;
    for (double& v : p.dbias.values()) v *= s;
  }
}

bool parameters_finite(const Model& model) {
  for (const Layer& layer : model.layers) {
    bool ok = true;
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, CyclicConvLayer>) {
            ok = p.kernels.all_finite() && p.bias.all_finite();
          } else if constexpr (!std::is_same_v<T, MaxPoolLayer>) {
            ok = p.weights.all_finite() && p.bias.all_finite();
          }
        },
        layer.params);
    if (!ok) return false;
  }
  return true;
}

// The first spatial conv is held to the symmetry its bank period implies.
int first_layer_symmetry(const TrainConfig& config) { return config.n / config.periods.front(); }

void project_first_conv(Model& model, int order) {
  if (order == 1) return;
  const auto spatial = model.spatial_conv_indices();
  if (spatial.empty()) return;
  Layer& layer = model.layers[spatial.front()];
  if (layer.frozen) return;
  auto& conv = std::get<Conv2DLayer>(layer.params);
  for (std::size_t o = 0; o < conv.out_channels(); ++o) set_kernel_slice(conv.weights, o, symmetrize_kernel(kernel_slice(conv.weights, o), order));
}

// g += decay * w on the weights of every layer with a gradient.
void add_weight_decay(const Model& model, Gradients& grads, double decay) {
  if (decay == 0.0) return;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].dweights.empty()) continue;
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          const Tensor* w = nullptr;
          if constexpr (std::is_same_v<T, CyclicConvLayer>) w = &p.kernels;
          else if constexpr (!std::is_same_v<T, MaxPoolLayer>) w = &p.weights;
          if (w)
            for (std::size_t k = 0; k < w->size(); ++k) grads[i].dweights[k] += decay * (*w)[k];
        },
        model.layers[i].params);
  }
}

// For an all-zero label dlogits is the softmax itself. Background that is
// already flat below the threshold stops pulling the logits down.
bool depressed_enough(const Tensor& softmax, double threshold) {
  return *std::max_element(softmax.values().begin(), softmax.values().end()) < threshold;
}

// The class-mean part of a zero-label gradient only lowers every logit
// together. It goes to the head bias alone; the layers below get the
// centered remainder, which is bounded and flattens the class scores.
Tensor center_background_gradient(const Tensor& softmax) {
  Tensor out = softmax;
  const double mean = out.sum() / static_cast<double>(out.size());
  for (double& v : out.values()) v -= mean;
  return out;
}

void shift_head_bias(Gradients& grads, double shift) {
  if (grads.empty() || grads.back().dbias.empty()) return;
  for (double& v : grads.back().dbias.values()) v += shift;
}

// Losses this large mean logits far beyond anything a softmax resolves; the
// run has blown up even if the numbers are still finite.
constexpr double kDivergedLoss = 1e6;

void check_loss(double loss, const std::string& stage, int epoch) {
  if (!std::isfinite(loss) || std::fabs(loss) > kDivergedLoss) {
    throw DivergenceError("loss diverged in stage " + stage + ", epoch " + std::to_string(epoch + 1));
  }
}

// SGD over single-window examples on a model with a dense head.
void train_windows(Model& model, std::vector<TrainingExample>& examples, const TrainConfig& config, Rng& rng,
                   StageReport& report, int symmetry) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      Gradients acc;
      for (std::size_t k = start; k < stop; ++k) {
        const TrainingExample& ex = examples[order[k]];
        ForwardTrace trace;
        const Tensor logits = forward(model, as_input(ex.image), &trace);
        if (!logits.all_finite()) check_loss(NAN, report.stage, epoch);
        const LossResult lr = softmax_loss(logits, ex.label);
        check_loss(lr.loss, report.stage, epoch);
        total += lr.loss;
        if (ex.label.sum() > 0.0) {
          accumulate(acc, backward(model, trace, lr.dlogits));
        } else {
          const double shift = 1.0 / static_cast<double>(logits.size());
          Gradients g = backward(model, trace,
                                 depressed_enough(lr.dlogits, config.depress_until)
                                     ? Tensor(logits.shape())
                                     : center_background_gradient(lr.dlogits));
          shift_head_bias(g, shift);
          accumulate(acc, g);
        }
      }
      if (acc.empty()) continue;
      scale(acc, 1.0 / static_cast<double>(stop - start));
      add_weight_decay(model, acc, config.weight_decay);
      sgd_step(model, acc, config.learning_rate);
      project_first_conv(model, symmetry);
      if (!parameters_finite(model)) check_loss(NAN, report.stage, epoch);
    }
    report.epoch_losses.push_back(total / static_cast<double>(examples.size()));
  }
  const auto& l = report.epoch_losses;
  report.loss_decreasing_start = l.size() < 3 || (l[0] > l[1] && l[1] > l[2]);
}

// Scene with its ground-truth placement; `truth` is empty for background.
struct PoseExample {
  Tensor features;  // cached output of the frozen prefix
  std::optional<SampleRecord> truth;
};

struct FiberGeometry {
  std::size_t rows, cols, orientations, classes;
  PoseGrid grid;
};

// Fiber index = (i * cols + j) * orientations + t.
struct FiberTargets {
  long positive = -1;
  int positive_class = 0;
  std::vector<std::size_t> negatives;
};

FiberTargets select_fibers(const FiberGeometry& g, const std::optional<SampleRecord>& truth, double keep, Rng* rng) {
  FiberTargets out;
  long ti = -100, tj = -100, tb = 0;
  const long p = static_cast<long>(g.orientations);
  if (truth) {
    ti = std::clamp(g.grid.nearest_cell(truth->cy), 0L, static_cast<long>(g.rows) - 1);
    tj = std::clamp(g.grid.nearest_cell(truth->cx), 0L, static_cast<long>(g.cols) - 1);
    tb = positive_mod(std::lround(truth->angle_deg / (360.0 / static_cast<double>(p))), p);
    out.positive = (ti * static_cast<long>(g.cols) + tj) * p + tb;
    out.positive_class = truth->class_id;
  }
  for (long i = 0; i < static_cast<long>(g.rows); ++i)
    for (long j = 0; j < static_cast<long>(g.cols); ++j) {
      const long cheb = std::max(std::labs(i - ti), std::labs(j - tj));
      for (long t = 0; t < p; ++t) {
        const long f = (i * static_cast<long>(g.cols) + j) * p + t;
        if (f == out.positive) continue;
        if (cheb <= 1 && circular_distance(t, tb, p) <= 1) continue;
        if (cheb <= 4 || (rng ? rng->uniform() < keep : true)) out.negatives.push_back(static_cast<std::size_t>(f));
      }
    }
  return out;
}

// Loss = L_pos + mean(L_neg); fills the matching logit gradient.
// `bias_shift` receives the head-bias share of the background gradient.
double pose_loss(const Tensor& logits, const FiberTargets& targets, std::size_t classes, double depress_until, Tensor* dlogits,
                 double* bias_shift) {
  if (dlogits) *dlogits = Tensor(logits.shape());
  if (bias_shift) *bias_shift = 0.0;
  double loss = 0.0;
  auto fiber = [&](std::size_t f, const Tensor& label, double weight) {
    const Tensor z({classes}, std::vector<double>(logits.raw() + f * classes, logits.raw() + (f + 1) * classes));
    const LossResult r = softmax_loss(z, label);
    loss += weight * r.loss;
    if (!dlogits) return;
    Tensor d = r.dlogits;
    if (label.sum() == 0.0) {
      if (bias_shift) *bias_shift += weight / static_cast<double>(classes);
      if (depressed_enough(d, depress_until)) return;
      d = center_background_gradient(d);
    }
    for (std::size_t c = 0; c < classes; ++c) (*dlogits)[f * classes + c] = weight * d[c];
  };
  if (targets.positive >= 0) fiber(static_cast<std::size_t>(targets.positive), one_hot(classes, targets.positive_class), 1.0);
  if (!targets.negatives.empty()) {
    const Tensor zero({classes});
    const double w = 1.0 / static_cast<double>(targets.negatives.size());
    for (std::size_t f : targets.negatives) fiber(f, zero, w);
  }
  return loss;
}

Tensor render_scene(const Tensor& glyph, std::size_t canvas, const SampleRecord& rec) {
  Tensor img({canvas, canvas});
  paste_glyph(img, glyph, rec.cy, rec.cx, rec.angle_deg);
  return img;
}

std::vector<std::pair<Tensor, std::optional<SampleRecord>>> make_scenes(const std::vector<Tensor>& glyphs, std::size_t count,
                                                                        double background_fraction, std::uint64_t seed) {
  constexpr std::size_t canvas = 64;
  const CenterRange range = center_range(canvas);
  Rng rng(seed);
  std::vector<std::pair<Tensor, std::optional<SampleRecord>>> out;
  for (std::size_t i = 0; i < count; ++i) {
    SampleRecord rec{"", static_cast<int>(i % glyphs.size()), 0, 0, 0};
    rec.angle_deg = rng.uniform(0.0, 360.0);
    rec.cy = rng.uniform(range.lo, range.hi);
    rec.cx = rng.uniform(range.lo, range.hi);
    out.emplace_back(render_scene(glyphs[static_cast<std::size_t>(rec.class_id)], canvas, rec), rec);
  }
  for (TrainingExample& bg : make_background_batch(background_count(background_fraction, count), canvas, rng.next(),
                                                   static_cast<int>(glyphs.size())))
    out.emplace_back(std::move(bg.image), std::nullopt);
  return out;
}

std::size_t lowest_trainable(const Model& model) {
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (model.layers[i].has_parameters() && !model.layers[i].frozen) return i;
  throw ConfigError("model has no trainable layer");
}

Model fresh_base(const TrainConfig& config, std::size_t classes) {
  ModelSpec spec = ModelSpec::standard();
  spec.n = config.n;
  spec.class_count = static_cast<int>(classes);
  spec.layers.back().outputs = classes;
  Model model = build_base_model(spec, config.seed);
  project_first_conv(model, first_layer_symmetry(config));
  return model;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(finetune_learning_rate > 0.0) || !std::isfinite(finetune_learning_rate)) fail("finetune_learning_rate must be positive");
  if (epochs < 0) fail("epochs must be non-negative");
  if (finetune_epochs < 0) fail("finetune_epochs must be non-negative");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(background_fraction >= 0.0 && background_fraction <= 0.3)) fail("background_fraction must lie in [0, 0.3]");
  if (n < 1) fail("n must be positive");
  if (periods.empty()) fail("periods must name one period per convolution");
  for (std::size_t i = 0; i < periods.size(); ++i) {
    if (periods[i] < 1 || n % periods[i] != 0) fail("period " + std::to_string(periods[i]) + " does not divide n");
    if (i == 0 && n / periods[i] > 2) fail("the first period must be n or n/2");
    if (i > 0 && periods[i] != n) fail("periods after the first must equal n");
  }
  if (augment_copies < 1) fail("augment_copies must be at least 1");
  if (jitter_deg < 0.0 || jitter_px < 0.0) fail("jitter must be non-negative");
  if (shift_negatives < 0) fail("shift_negatives must be non-negative");
  if (finetune_scenes < 1) fail("finetune_scenes must be at least 1");
  if (heldout_scenes < 0) fail("heldout_scenes must be non-negative");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

long long parse_integer(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace

void apply_config_value(TrainConfig& c, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key), v = trim(raw_value);
  auto integer = [&] { return static_cast<int>(parse_integer(key, v)); };
  if (key == "learning_rate") c.learning_rate = parse_real(key, v);
  else if (key == "epochs") c.epochs = integer();
  else if (key == "batch_size") c.batch_size = integer();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_integer(key, v));
  else if (key == "background_fraction") c.background_fraction = parse_real(key, v);
  else if (key == "n") c.n = integer();
  else if (key == "periods") {
    c.periods.clear();
    std::size_t start = 0;
    while (start <= v.size()) {
      const std::size_t comma = std::min(v.find(',', start), v.size());
      c.periods.push_back(static_cast<int>(parse_integer(key, trim(v.substr(start, comma - start)))));
      start = comma + 1;
    }
  } else if (key == "augment_copies") c.augment_copies = integer();
  else if (key == "jitter_deg") c.jitter_deg = parse_real(key, v);
  else if (key == "jitter_px") c.jitter_px = parse_real(key, v);
  else if (key == "shift_negatives") c.shift_negatives = integer();
  else if (key == "rotated_negatives") c.rotated_negatives = parse_bool(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
  else if (key == "depress_until") c.depress_until = parse_real(key, v);
  else if (key == "finetune_epochs") c.finetune_epochs = integer();
  else if (key == "finetune_scenes") c.finetune_scenes = integer();
  else if (key == "finetune_learning_rate") c.finetune_learning_rate = parse_real(key, v);
  else if (key == "heldout_scenes") c.heldout_scenes = integer();
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + " is not key=value");
    apply_config_value(base, line.substr(0, eq), line.substr(eq + 1));
  }
  return base;
}

std::string config_to_text(const TrainConfig& c) {
  std::string periods;
  for (std::size_t i = 0; i < c.periods.size(); ++i) periods += (i ? "," : "") + std::to_string(c.periods[i]);
  auto line = [](const char* k, const std::string& v) { return std::string(k) + " = " + v + "\n"; };
  return line("learning_rate", format_number(c.learning_rate)) + line("epochs", std::to_string(c.epochs)) +
         line("batch_size", std::to_string(c.batch_size)) + line("seed", std::to_string(c.seed)) +
         line("background_fraction", format_number(c.background_fraction)) + line("n", std::to_string(c.n)) +
         line("periods", periods) + line("augment_copies", std::to_string(c.augment_copies)) +
         line("jitter_deg", format_number(c.jitter_deg)) + line("jitter_px", format_number(c.jitter_px)) +
         line("shift_negatives", std::to_string(c.shift_negatives)) +
         line("rotated_negatives", c.rotated_negatives ? "true" : "false") +
         line("weight_decay", format_number(c.weight_decay)) + line("depress_until", format_number(c.depress_until)) +
         line("finetune_epochs", std::to_string(c.finetune_epochs)) +
         line("finetune_scenes", std::to_string(c.finetune_scenes)) +
         line("finetune_learning_rate", format_number(c.finetune_learning_rate)) +
         line("heldout_scenes", std::to_string(c.heldout_scenes));
}

std::string StageReport::to_json() const {
  std::string out = "{\"stage\":\"" + stage + "\",\"epoch_losses\":[";
  for (std::size_t i = 0; i < epoch_losses.size(); ++i) out += (i ? "," : "") + format_number(epoch_losses[i]);
  out += "],\"heldout_losses\":[";
  for (std::size_t i = 0; i < heldout_losses.size(); ++i) out += (i ? "," : "") + format_number(heldout_losses[i]);
  out += "],\"train_accuracy\":" + format_number(train_accuracy);
  out += ",\"stage_angle_accuracy\":" + (stage_angle_accuracy ? format_number(*stage_angle_accuracy) : std::string("null"));
  out += std::string(",\"loss_decreasing_start\":") + (loss_decreasing_start ? "true" : "false") + "}";
  return out;
}

void sgd_step(Model& model, const Gradients& grads, double lr) {
  if (grads.size() != model.layers.size()) throw DimensionError("gradient list does not match the model");
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    Layer& layer = model.layers[i];
    if (layer.frozen || !layer.has_parameters() || grads[i].dweights.empty()) continue;
    std::visit(
        [&](auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (!std::is_same_v<T, MaxPoolLayer>) {
            Tensor* w;
            if constexpr (std::is_same_v<T, CyclicConvLayer>) {
              w = &p.kernels;
            } else {
              w = &p.weights;
            }
            if (w->shape() != grads[i].dweights.shape() || p.bias.shape() != grads[i].dbias.shape()) {
              throw DimensionError("gradient shape mismatch at layer " + std::to_string(i));
            }
            for (std::size_t k = 0; k < w->size(); ++k) (*w)[k] -= lr * grads[i].dweights[k];
            for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] -= lr * grads[i].dbias[k];
          }
        },
        layer.params);
  }
}

std::vector<TrainingExample> make_background_batch(std::size_t count, std::size_t canvas, std::uint64_t seed, int class_count) {
  Rng rng(derive_seed(seed, "background"));
  std::vector<TrainingExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor img({canvas, canvas});
    if (i % 2 == 1)
      for (double& v : img.values()) v = 0.1 * rng.uniform();
    out.push_back({std::move(img), Tensor({static_cast<std::size_t>(class_count)})});
  }
  return out;
}

Tensor glyph_from_sample(const Sample& sample) {
  const Tensor& img = sample.image;
  if (img.rank() != 2 || img.dim(0) < kGlyphSize || img.dim(1) < kGlyphSize) {
    throw DimensionError("training sample is smaller than a glyph plane");
  }
  const std::size_t top = (img.dim(0) - kGlyphSize) / 2, left = (img.dim(1) - kGlyphSize) / 2;
  Tensor g({kGlyphSize, kGlyphSize});
  for (std::size_t r = 0; r < kGlyphSize; ++r)
    for (std::size_t c = 0; c < kGlyphSize; ++c) g.at({r, c}) = img.at({top + r, left + c});
  return g;
}

std::vector<TrainingExample> make_stage_examples(const std::vector<Sample>& train, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t classes = class_count_of(train);
  Rng rng(seed);
  const double center = (static_cast<double>(kTrainCanvas) - 1.0) / 2.0;
  auto place = [&](const Tensor& glyph, double cy, double cx, double angle) {
    Tensor img({kTrainCanvas, kTrainCanvas});
    paste_glyph(img, glyph, cy, cx, angle);
    return img;
  };
  auto jitter = [&](double half) { return rng.uniform(-half, half); };
  std::vector<TrainingExample> out;
  const Tensor zero({classes});
  for (const Sample& s : train) {
    const Tensor glyph = glyph_from_sample(s);
    const Tensor label = one_hot(classes, s.record.class_id);
    out.push_back({s.image, label});
    for (int k = 1; k < config.augment_copies; ++k) {
      const double angle = jitter(config.jitter_deg);
      out.push_back({place(glyph, center + jitter(config.jitter_px), center + jitter(config.jitter_px), angle), label});
    }
    for (int k = 0; k < config.n && config.rotated_negatives; ++k) {
      if (circular_distance(k, 0, config.n) < 2) continue;
      const double angle = 360.0 * k / config.n + jitter(config.jitter_deg);
      out.push_back({place(glyph, center + jitter(config.jitter_px), center + jitter(config.jitter_px), angle), zero});
    }
    for (int k = 0; k < config.shift_negatives; ++k) {
      const double dir = rng.uniform(0.0, 2.0 * M_PI), dist = rng.uniform(5.0, 8.0);
      const double angle = jitter(config.jitter_deg);
      out.push_back({place(glyph, center + dist * std::sin(dir), center + dist * std::cos(dir), angle), zero});
    }
  }
  for (TrainingExample& bg : make_background_batch(background_count(config.background_fraction, out.size()), kTrainCanvas,
                                                   rng.next(), static_cast<int>(classes)))
    out.push_back(std::move(bg));
  return out;
}

std::pair<Model, StageReport> train_base(const std::vector<Sample>& train, const TrainConfig& config) {
  config.validate();
  const auto start = Clock::now();
  StageReport report;
  report.stage = "base";
  Model model = fresh_base(config, class_count_of(train));
  TrainConfig positives_only = config;
  positives_only.rotated_negatives = false;
  positives_only.shift_negatives = 0;
  std::vector<TrainingExample> examples = make_stage_examples(train, positives_only, derive_seed(config.seed, "base-examples"));
  Rng rng(derive_seed(config.seed, "base"));
  train_windows(model, examples, config, rng, report, first_layer_symmetry(config));
  report.train_accuracy = canonical_accuracy(model, train);
  report.wall_seconds = seconds_since(start);
  return {std::move(model), std::move(report)};
}

std::pair<Model, StageReport> greedy_rotate_stage(const Model& input, std::size_t layer_index, int n, int p,
                                                  const std::vector<Sample>& train, const TrainConfig& config) {
  config.validate();
  const auto start = Clock::now();
  Model model = input;
  const auto spatial = model.spatial_conv_indices();
  const auto pos = std::find(spatial.begin(), spatial.end(), layer_index);
  StageReport report;
  report.stage = "rotate" + std::to_string(pos - spatial.begin() + 1);
  rotate_layer(model, layer_index, n, p, Widening::replicate);
  if (pos != spatial.end() && pos + 1 != spatial.end()) {
    const std::string tag = report.stage;
    std::vector<TrainingExample> examples = make_stage_examples(train, config, derive_seed(config.seed, tag + "-examples"));
    Rng rng(derive_seed(config.seed, tag));
    train_windows(model, examples, config, rng, report, 1);
  }
  report.train_accuracy = canonical_accuracy(model, train);
  report.wall_seconds = seconds_since(start);
  return {std::move(model), std::move(report)};
}

std::pair<Model, StageReport> finetune(const Model& input, const std::vector<Sample>& train, const TrainConfig& config) {
  config.validate();
  const auto start = Clock::now();
  if (!input.cyclic_index()) throw StageOrderError("finetune needs the cyclic head; run the head stage first");
  Model model = input;
  StageReport report;
  report.stage = "finetune";
  const std::size_t classes = class_count_of(train);
  std::vector<Tensor> glyphs(classes);
  for (const Sample& s : train) glyphs[static_cast<std::size_t>(s.record.class_id)] = glyph_from_sample(s);

  const std::size_t first = lowest_trainable(model);
  auto cache = [&](std::vector<std::pair<Tensor, std::optional<SampleRecord>>> scenes) {
    std::vector<PoseExample> out;
    out.reserve(scenes.size());
    for (auto& [img, truth] : scenes) out.push_back({forward(model, as_input(img), nullptr, 0, first), truth});
    return out;
  };
  const std::vector<PoseExample> examples = cache(make_scenes(
      glyphs, static_cast<std::size_t>(config.finetune_scenes), config.background_fraction, derive_seed(config.seed, "finetune-scenes")));
  const std::vector<PoseExample> heldout = cache(make_scenes(
      glyphs, static_cast<std::size_t>(config.heldout_scenes), 0.0, derive_seed(config.seed, "finetune-heldout")));

  const Tensor probe = forward(model, examples.front().features, nullptr, first);
  const FiberGeometry geom{probe.dim(0), probe.dim(1), probe.dim(2), probe.dim(3), pose_grid(model)};
  auto heldout_loss = [&] {
    double total = 0.0;
    for (const PoseExample& ex : heldout)
      total += pose_loss(forward(model, ex.features, nullptr, first), select_fibers(geom, ex.truth, 1.0, nullptr), classes, 0.0, nullptr, nullptr);
    return heldout.empty() ? 0.0 : total / static_cast<double>(heldout.size());
  };

  Rng rng(derive_seed(config.seed, "finetune"));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.finetune_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      const std::size_t stop = std::min(order.size(), s + batch);
      Gradients acc;
      for (std::size_t k = s; k < stop; ++k) {
        const PoseExample& ex = examples[order[k]];
        ForwardTrace trace;
        const Tensor logits = forward(model, ex.features, &trace, first);
        if (!logits.all_finite()) check_loss(NAN, report.stage, epoch);
        Tensor dlogits;
        double shift = 0.0;
        const double loss = pose_loss(logits, select_fibers(geom, ex.truth, config.background_fraction, &rng), classes,
                                      config.depress_until, &dlogits, &shift);
        check_loss(loss, report.stage, epoch);
        total += loss;
        Gradients g = backward(model, trace, dlogits);
        shift_head_bias(g, shift);
        accumulate(acc, g);
      }
      if (acc.empty()) continue;
      scale(acc, 1.0 / static_cast<double>(stop - s));
      add_weight_decay(model, acc, config.weight_decay);
      sgd_step(model, acc, config.finetune_learning_rate);
      if (!parameters_finite(model)) check_loss(NAN, report.stage, epoch);
    }
    report.epoch_losses.push_back(total / static_cast<double>(examples.size()));
    report.heldout_losses.push_back(heldout_loss());
  }
  const auto& l = report.epoch_losses;
  report.loss_decreasing_start = l.size() < 3 || (l[0] > l[1] && l[1] > l[2]);
  report.train_accuracy = canonical_accuracy(model, train);
  report.stage_angle_accuracy = stage_angle_accuracy(model, train);
  report.wall_seconds = seconds_since(start);
  return {std::move(model), std::move(report)};
}

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::base:
      return "base";
    case Stage::rotate1:
      return "rotate1";
    case Stage::rotate2:
      return "rotate2";
    case Stage::head:
      return "head";
    case Stage::finetune:
      return "finetune";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::base, Stage::rotate1, Stage::rotate2, Stage::head, Stage::finetune})
    if (name == stage_name(s)) return s;
  throw ConfigError("unknown stage '" + name + "'");
}

std::pair<Model, StageReport> run_stage(Stage stage, const std::optional<Model>& input, const std::vector<Sample>& train,
                                        const TrainConfig& config) {
  config.validate();
  if (stage == Stage::base) {
    if (input) throw StageOrderError("the base stage starts from scratch and takes no input model");
    return train_base(train, config);
  }
  if (!input) throw StageOrderError(std::string("stage ") + stage_name(stage) + " needs the previous stage's model");
  const Model& model = *input;
  const auto spatial = model.spatial_conv_indices();
  if (config.periods.size() != spatial.size()) {
    throw ConfigError("config lists " + std::to_string(config.periods.size()) + " periods for " + std::to_string(spatial.size()) +
                      " convolutions");
  }
  switch (stage) {
    case Stage::rotate1:
    case Stage::rotate2: {
      const std::size_t k = stage == Stage::rotate1 ? 0 : 1;
      if (k >= spatial.size()) throw ConfigError("model has no convolution for stage " + std::string(stage_name(stage)));
      return greedy_rotate_stage(model, spatial[k], config.n, config.periods[k], train, config);
    }
    case Stage::head: {
      const auto start = Clock::now();
      Model out = model;
      insert_cyclic_head(out);
      StageReport report;
      report.stage = "head";
      report.train_accuracy = canonical_accuracy(out, train);
      report.stage_angle_accuracy = stage_angle_accuracy(out, train);
      report.wall_seconds = seconds_since(start);
      return {std::move(out), std::move(report)};
    }
    case Stage::finetune:
      return finetune(model, train, config);
    case Stage::base:
      break;
  }
  throw StageOrderError("unreachable stage");
}

void append_run_log(const StageReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot open run log '" + path + "'");
  out << report.to_json() << "\n";
}

namespace {

int argmax_class(const Tensor& scores, std::size_t classes) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return static_cast<int>(best % classes);
}

}  // namespace

double canonical_accuracy(const Model& model, const std::vector<Sample>& train) {
  if (train.empty()) return 0.0;
  const std::size_t classes = static_cast<std::size_t>(model.class_count);
  std::size_t correct = 0;
  for (const Sample& s : train) {
    const Tensor out = model.cyclic_index() ? pose_logits(model, s.image) : classify_window(model, s.image);
    correct += argmax_class(out, classes) == s.record.class_id;
  }
  return static_cast<double>(correct) / static_cast<double>(train.size());
}

double stage_angle_accuracy(const Model& model, const std::vector<Sample>& train) {
  if (!model.cyclic_index()) throw StageOrderError("stage-angle accuracy needs a pose model");
  const std::size_t classes = static_cast<std::size_t>(model.class_count);
  const double center = (static_cast<double>(kTrainCanvas) - 1.0) / 2.0;
  double worst = 1.0;
  for (int k = 0; k < model.n; ++k) {
    std::size_t correct = 0;
    for (const Sample& s : train) {
      Tensor img({kTrainCanvas, kTrainCanvas});
      paste_glyph(img, glyph_from_sample(s), center, center, 360.0 * k / model.n);
      correct += argmax_class(pose_logits(model, img), classes) == s.record.class_id;
    }
    worst = std::min(worst, static_cast<double>(correct) / static_cast<double>(train.size()));
  }
  return worst;
}

double mean_head_bias(const Model& model) {
  const Layer& last = model.layers.back();
  const Tensor* bias = nullptr;
  if (const auto* c = std::get_if<Conv2DLayer>(&last.params)) bias = &c->bias;
  if (const auto* d = std::get_if<DenseLayer>(&last.params)) bias = &d->bias;
  if (!bias) throw ShapeError("last layer has no bias");
  return bias->sum() / static_cast<double>(bias->size());
}

}  // namespace rinn
