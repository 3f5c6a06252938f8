#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rinn/dataset.hpp"
#include "rinn/network.hpp"

namespace rinn {

struct Detection {
  int class_id = 0;
  double score = 0.0;
  std::size_t i = 0;  // pose-grid row
  std::size_t j = 0;  // pose-grid column
  std::size_t t = 0;  // orientation bin
  double cy = 0.0;    // scene pixel center
  double cx = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

// Orientation bin of an angle: round(angle / (360 / p)) mod p.
int angle_bin(double angle_deg, int p);
// Circular distance between two bins.
int bin_distance(int a, int b, int p);

// Global argmax over fibers and classes. Ties go to the lowest
// (class, i, j, t).
Detection classify(const PoseMap& pm, const PoseGrid& grid);

struct AccuracyReport {
  std::size_t samples = 0;
  double class_accuracy = 0.0;
  double orientation_accuracy = 0.0;  // bin within +-1
  double pose_accuracy = 0.0;         // class right, cell within 1, bin within +-1

  std::string to_text() const;
};

AccuracyReport accuracy(const Model& model, const std::vector<Sample>& test, std::size_t threads = 1);
AccuracyReport score_predictions(const std::vector<Detection>& predictions, const std::vector<SampleRecord>& truth,
                                 const PoseGrid& grid, int p);

// Fibers scoring >= threshold, accepted greedily by descending score; any
// candidate within `suppression_radius` cells (Chebyshev) of an accepted
// detection is dropped, whatever its class or orientation.
std::vector<Detection> detect(const PoseMap& pm, const PoseGrid& grid, double threshold, int suppression_radius = 3);

struct ScoredScene {
  PoseMap map;
  std::vector<SampleRecord> truth;
};

struct MatchCounts {
  std::size_t true_positives = 0;
  std::size_t detections = 0;
  std::size_t truths = 0;
};

// One-to-one greedy matching in descending score: same class, center within
// 4 px, bin within +-1.
MatchCounts match_detections(const std::vector<Detection>& detections, const std::vector<SampleRecord>& truth, int p);

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;  // 0/0 counts as 1
  double recall = 0.0;

  double f1() const;
};

std::vector<PrPoint> pr_curve(const std::vector<ScoredScene>& scenes, const PoseGrid& grid, std::vector<double> thresholds,
                              int suppression_radius = 3);
// lo, lo + step, ... up to hi inclusive (within 1e-9).
std::vector<double> threshold_sweep(double lo, double hi, double step);
std::string pr_csv(const std::vector<PrPoint>& curve);
// Minimal precision-recall plot: axes, ticks, one polyline.
std::string pr_svg(const std::vector<PrPoint>& curve);

// Rows are classes, columns orientations; each tile is the class's
// probability map at that orientation. Tiles are separated by 1 px of zero
// and the winning tile is framed with 1.0.
Tensor pose_montage(const PoseMap& pm);

struct LinearProbe {
  Tensor weights;  // [features]
  double bias = 0.0;

  double score(const double* fiber) const;
};

struct ProbeOptions {
  double ridge = 1e-3;  // L2 penalty on the weights; keeps separable supports bounded
  int max_iterations = 100;
  double tolerance = 1e-12;  // stop once half the squared Newton decrement falls below this
};

struct ProbeHit {
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t t = 0;
  double score = 0.0;
};

// Logistic regression on penultimate features. The positive is the fiber at
// the support's pose; negatives are fibers more than 2 cells or more than 1
// bin away. Both sides carry equal total weight. Solved by damped Newton
// steps. Throws RangeError when the pose falls outside the grid.
LinearProbe oneshot_train(const Model& model, const Sample& support, const ProbeOptions& options = {});
LinearProbe oneshot_train_features(const Tensor& features, std::size_t i, std::size_t j, std::size_t t,
                                   const ProbeOptions& options = {});
// Argmax of the probe over every fiber; ties go to the lowest (i, j, t).
ProbeHit oneshot_predict(const LinearProbe& probe, const Model& model, const Tensor& image);
ProbeHit probe_argmax(const LinearProbe& probe, const Tensor& features);

// Hit within one cell and one bin of the recorded pose.
bool pose_recovered(const ProbeHit& hit, const SampleRecord& truth, const PoseGrid& grid, int p);

struct OneshotReport {
  std::size_t trials = 0;
  std::size_t recovered = 0;

  double rate() const { return trials == 0 ? 0.0 : static_cast<double>(recovered) / static_cast<double>(trials); }
  std::string to_text() const;
};

OneshotReport oneshot_evaluate(const LinearProbe& probe, const Model& model, const std::vector<Sample>& trials);

std::string probe_to_text(const LinearProbe& probe);
LinearProbe probe_from_text(const std::string& text);
void save_probe(const LinearProbe& probe, const std::string& path);
LinearProbe load_probe(const std::string& path);

}  // namespace rinn
