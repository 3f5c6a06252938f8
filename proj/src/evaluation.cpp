#include "rinn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>

#include <Eigen/Dense>

#include "rinn/errors.hpp"

#include "json.hpp"

namespace rinn {

namespace {

constexpr double kMatchPixels = 4.0;

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string number17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Detection make_detection(const PoseMap& pm, const PoseGrid& grid, std::size_t flat) {
  const std::size_t c = pm.classes(), p = pm.orientations(), w = pm.cols();
  Detection d;
  d.class_id = static_cast<int>(flat % c);
  std::size_t rest = flat / c;
  d.t = rest % p;
  rest /= p;
  d.j = rest % w;
  d.i = rest / w;
  d.score = pm.scores[flat];
  d.cy = grid.center(d.i);
  d.cx = grid.center(d.j);
  return d;
}

// Lexicographic (class, i, j, t) order of a flat PoseMap index.
std::tuple<std::size_t, std::size_t> tie_key(const PoseMap& pm, std::size_t flat) {
  return {flat % pm.classes(), flat / pm.classes()};
}

// Candidates at or above `threshold`, best first.
std::vector<std::size_t> ranked_candidates(const PoseMap& pm, double threshold) {
  std::vector<std::size_t> idx;
  for (std::size_t f = 0; f < pm.scores.size(); ++f)
    if (pm.scores[f] >= threshold) idx.push_back(f);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (pm.scores[a] != pm.scores[b]) return pm.scores[a] > pm.scores[b];
    return tie_key(pm, a) < tie_key(pm, b);
  });
  return idx;
}

std::vector<Detection> suppress(const PoseMap& pm, const PoseGrid& grid, const std::vector<std::size_t>& ranked, double threshold,
                                int radius) {
  std::vector<Detection> out;
  const long rows = static_cast<long>(pm.rows()), cols = static_cast<long>(pm.cols());
  std::vector<char> blocked(pm.rows() * pm.cols(), 0);
  for (std::size_t f : ranked) {
    if (pm.scores[f] < threshold) break;
    const Detection d = make_detection(pm, grid, f);
    if (blocked[d.i * pm.cols() + d.j]) continue;
    out.push_back(d);
    const long i = static_cast<long>(d.i), j = static_cast<long>(d.j);
    for (long a = std::max(0L, i - radius); a <= std::min(rows - 1, i + radius); ++a)
      for (long b = std::max(0L, j - radius); b <= std::min(cols - 1, j + radius); ++b)
        blocked[static_cast<std::size_t>(a * cols + b)] = 1;
  }
  return out;
}

std::string read_text_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(std::string("cannot open ") + what + " '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

int angle_bin(double angle_deg, int p) { return positive_mod(std::lround(angle_deg / (360.0 / p)), p); }

int bin_distance(int a, int b, int p) {
  const int d = positive_mod(a - b, p);
  return std::min(d, p - d);
}

Detection classify(const PoseMap& pm, const PoseGrid& grid) {
  if (pm.scores.empty()) throw DimensionError("empty pose map");
  std::size_t best = 0;
  for (std::size_t f = 1; f < pm.scores.size(); ++f) {
    if (pm.scores[f] > pm.scores[best] || (pm.scores[f] == pm.scores[best] && tie_key(pm, f) < tie_key(pm, best))) best = f;
  }
  return make_detection(pm, grid, best);
}

std::string AccuracyReport::to_text() const {
  return "samples " + std::to_string(samples) + "\nclass_accuracy " + fixed6(class_accuracy) + "\norientation_accuracy " +
         fixed6(orientation_accuracy) + "\npose_accuracy " + fixed6(pose_accuracy) + "\n";
}

AccuracyReport score_predictions(const std::vector<Detection>& predictions, const std::vector<SampleRecord>& truth,
                                 const PoseGrid& grid, int p) {
  if (truth.empty()) throw ValidationError("accuracy needs at least one test sample");
  if (predictions.size() != truth.size()) throw DimensionError("one prediction per test sample expected");
  AccuracyReport r;
  r.samples = truth.size();
  std::size_t cls = 0, ori = 0, pose = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const Detection& d = predictions[k];
    const SampleRecord& s = truth[k];
    const bool class_ok = d.class_id == s.class_id;
    const bool bin_ok = bin_distance(static_cast<int>(d.t), angle_bin(s.angle_deg, p), p) <= 1;
    const bool cell_ok = std::labs(static_cast<long>(d.i) - grid.nearest_cell(s.cy)) <= 1 &&
                         std::labs(static_cast<long>(d.j) - grid.nearest_cell(s.cx)) <= 1;
    cls += class_ok;
    ori += bin_ok;
    pose += class_ok && bin_ok && cell_ok;
  }
  const double n = static_cast<double>(truth.size());
  r.class_accuracy = static_cast<double>(cls) / n;
  r.orientation_accuracy = static_cast<double>(ori) / n;
  r.pose_accuracy = static_cast<double>(pose) / n;
  return r;
}

AccuracyReport accuracy(const Model& model, const std::vector<Sample>& test, std::size_t threads) {
  if (test.empty()) throw ValidationError("accuracy needs at least one test sample");
  const PoseGrid grid = pose_grid(model);
  std::vector<Tensor> images;
  std::vector<SampleRecord> truth;
  for (const Sample& s : test) {
    images.push_back(s.image);
    truth.push_back(s.record);
  }
  std::vector<Detection> predictions;
  int p = model.n;
  for (const PoseMap& pm : forward_pose_all(model, images, threads)) {
    p = static_cast<int>(pm.orientations());
    predictions.push_back(classify(pm, grid));
  }
  return score_predictions(predictions, truth, grid, p);
}

std::vector<Detection> detect(const PoseMap& pm, const PoseGrid& grid, double threshold, int suppression_radius) {
  return suppress(pm, grid, ranked_candidates(pm, threshold), threshold, suppression_radius);
}

MatchCounts match_detections(const std::vector<Detection>& detections, const std::vector<SampleRecord>& truth, int p) {
  MatchCounts m;
  m.detections = detections.size();
  m.truths = truth.size();
  std::vector<const Detection*> order;
  for (const Detection& d : detections) order.push_back(&d);
  std::stable_sort(order.begin(), order.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
  std::vector<bool> used(truth.size(), false);
  for (const Detection* d : order) {
    long best = -1;
    double best_dist = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
      if (used[k] || truth[k].class_id != d->class_id) continue;
      if (bin_distance(static_cast<int>(d->t), angle_bin(truth[k].angle_deg, p), p) > 1) continue;
      const double dist = std::hypot(d->cy - truth[k].cy, d->cx - truth[k].cx);
      if (dist <= kMatchPixels && (best < 0 || dist < best_dist)) {
        best = static_cast<long>(k);
        best_dist = dist;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      ++m.true_positives;
    }
  }
  return m;
}

double PrPoint::f1() const { return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0; }

std::vector<PrPoint> pr_curve(const std::vector<ScoredScene>& scenes, const PoseGrid& grid, std::vector<double> thresholds,
                              int suppression_radius) {
  if (thresholds.empty()) throw ValidationError("pr_curve needs at least one threshold");
  if (scenes.empty()) throw ValidationError("pr_curve needs at least one scene");
  std::sort(thresholds.begin(), thresholds.end());
  std::vector<std::vector<std::size_t>> ranked;
  for (const ScoredScene& s : scenes) ranked.push_back(ranked_candidates(s.map, thresholds.front()));
  std::vector<PrPoint> out;
  for (double th : thresholds) {
    std::size_t tp = 0, dets = 0, truths = 0;
    for (std::size_t k = 0; k < scenes.size(); ++k) {
      const auto found = suppress(scenes[k].map, grid, ranked[k], th, suppression_radius);
      const MatchCounts m = match_detections(found, scenes[k].truth, static_cast<int>(scenes[k].map.orientations()));
      tp += m.true_positives;
      dets += m.detections;
      truths += m.truths;
    }
    PrPoint pt;
    pt.threshold = th;
    pt.precision = dets == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(dets);
    pt.recall = truths == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(truths);
    out.push_back(pt);
  }
  return out;
}

std::vector<double> threshold_sweep(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo)) throw ValidationError("sweep needs lo <= hi and a positive step");
  std::vector<double> out;
  for (long k = 0;; ++k) {
    const double v = lo + step * static_cast<double>(k);
    if (v > hi + 1e-9) break;
    out.push_back(std::min(v, hi));
  }
  return out;
}

std::string pr_csv(const std::vector<PrPoint>& curve) {
  std::string out = "threshold,precision,recall\n";
  for (const PrPoint& p : curve) out += fixed6(p.threshold) + "," + fixed6(p.precision) + "," + fixed6(p.recall) + "\n";
  return out;
}

std::string pr_svg(const std::vector<PrPoint>& curve) {
  constexpr double size = 400, margin = 50;
  auto px = [&](double recall) { return margin + recall * size; };
  auto py = [&](double precision) { return margin + (1.0 - precision) * size; };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\" viewBox=\"0 0 500 500\">\n";
  s += "<rect width=\"500\" height=\"500\" fill=\"white\"/>\n";
  s += "<line x1=\"50\" y1=\"450\" x2=\"450\" y2=\"450\" stroke=\"black\"/>\n";
  s += "<line x1=\"50\" y1=\"50\" x2=\"50\" y2=\"450\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 10; ++k) {
    const double v = k / 10.0;
    const std::string label = fixed6(v).substr(0, 3);
    s += "<line x1=\"" + fixed6(px(v)) + "\" y1=\"450\" x2=\"" + fixed6(px(v)) + "\" y2=\"456\" stroke=\"black\"/>";
    s += "<text x=\"" + fixed6(px(v)) + "\" y=\"470\" font-size=\"10\" text-anchor=\"middle\">" + label + "</text>\n";
    s += "<line x1=\"44\" y1=\"" + fixed6(py(v)) + "\" x2=\"50\" y2=\"" + fixed6(py(v)) + "\" stroke=\"black\"/>";
    s += "<text x=\"40\" y=\"" + fixed6(py(v) + 3) + "\" font-size=\"10\" text-anchor=\"end\">" + label + "</text>\n";
  }
  s += "<text x=\"250\" y=\"492\" font-size=\"12\" text-anchor=\"middle\">recall</text>\n";
  s += "<text x=\"14\" y=\"250\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 250)\">precision</text>\n";
  s += "<polyline fill=\"none\" stroke=\"#c00\" stroke-width=\"2\" points=\"";
  for (std::size_t k = 0; k < curve.size(); ++k) s += (k ? " " : "") + fixed6(px(curve[k].recall)) + "," + fixed6(py(curve[k].precision));
  s += "\"/>\n</svg>\n";
  return s;
}

Tensor pose_montage(const PoseMap& pm) {
  const std::size_t h = pm.rows(), w = pm.cols(), p = pm.orientations(), c = pm.classes();
  Tensor out({c * (h + 1) + 1, p * (w + 1) + 1});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at({k * (h + 1) + 1 + i, t * (w + 1) + 1 + j}) = pm.at(i, j, t, k);
  const Detection best = classify(pm, PoseGrid{});
  const std::size_t top = static_cast<std::size_t>(best.class_id) * (h + 1), left = best.t * (w + 1);
  for (std::size_t r = top; r <= top + h + 1; ++r) {
    out.at({r, left}) = 1.0;
    out.at({r, left + w + 1}) = 1.0;
  }
  for (std::size_t q = left; q <= left + w + 1; ++q) {
    out.at({top, q}) = 1.0;
    out.at({top + h + 1, q}) = 1.0;
  }
  return out;
}

double LinearProbe::score(const double* fiber) const {
  double s = bias;
  for (std::size_t k = 0; k < weights.size(); ++k) s += weights[k] * fiber[k];
  return s;
}

LinearProbe oneshot_train_features(const Tensor& features, std::size_t i, std::size_t j, std::size_t t, const ProbeOptions& options) {
  if (features.rank() != 4) throw DimensionError("probe features must be [rows, cols, orientations, features]");
  const std::size_t rows = features.dim(0), cols = features.dim(1), p = features.dim(2), dim = features.dim(3);
  if (i >= rows || j >= cols || t >= p) throw RangeError("support pose lies outside the pose grid");
  const std::size_t fibers = rows * cols * p;
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(features.raw(),
                                                                                                    static_cast<Eigen::Index>(fibers),
                                                                                                    static_cast<Eigen::Index>(dim));
  const std::size_t pos = (i * cols + j) * p + t;
  std::vector<Eigen::Index> neg;
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t b = 0; b < cols; ++b) {
      const long cheb = std::max(std::labs(static_cast<long>(a) - static_cast<long>(i)), std::labs(static_cast<long>(b) - static_cast<long>(j)));
      for (std::size_t u = 0; u < p; ++u)
        if (cheb > 2 || bin_distance(static_cast<int>(u), static_cast<int>(t), static_cast<int>(p)) > 1)
          neg.push_back(static_cast<Eigen::Index>((a * cols + b) * p + u));
    }
  Eigen::MatrixXd xn(static_cast<Eigen::Index>(neg.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t k = 0; k < neg.size(); ++k) xn.row(static_cast<Eigen::Index>(k)) = x.row(neg[k]);
  const Eigen::VectorXd xp = x.row(static_cast<Eigen::Index>(pos)).transpose();
  const double wn = neg.empty() ? 0.0 : 1.0 / static_cast<double>(neg.size());

  // Damped Newton on the ridge-regularized loss over (w, b); b carries no ridge.
  const Eigen::Index d = static_cast<Eigen::Index>(dim);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  auto loss_at = [&](const Eigen::VectorXd& th) {
    const Eigen::VectorXd w = th.head(d);
    const Eigen::VectorXd sn = xn * w + Eigen::VectorXd::Constant(xn.rows(), th[d]);
    double l = softplus(-(xp.dot(w) + th[d])) + 0.5 * options.ridge * w.squaredNorm();
    for (Eigen::Index k = 0; k < sn.size(); ++k) l += wn * softplus(sn[k]);
    return l;
  };
  double loss = loss_at(theta);
  for (int it = 0; it < options.max_iterations; ++it) {
    const Eigen::VectorXd w = theta.head(d);
    const double b = theta[d];
    const double sp = xp.dot(w) + b;
    const Eigen::VectorXd sn = xn * w + Eigen::VectorXd::Constant(xn.rows(), b);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d + 1);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(d + 1, d + 1);
    Eigen::VectorXd xpa(d + 1);
    xpa << xp, 1.0;
    grad -= sigmoid(-sp) * xpa;
    hess += sigmoid(sp) * sigmoid(-sp) * xpa * xpa.transpose();
    Eigen::MatrixXd xna(xn.rows(), d + 1);
    xna << xn, Eigen::VectorXd::Ones(xn.rows());
    Eigen::VectorXd gn(sn.size()), hn(sn.size());
    for (Eigen::Index k = 0; k < sn.size(); ++k) {
      gn[k] = wn * sigmoid(sn[k]);
      hn[k] = wn * sigmoid(sn[k]) * sigmoid(-sn[k]);
    }
    grad += xna.transpose() * gn;
    hess += xna.transpose() * hn.asDiagonal() * xna;
    grad.head(d) += options.ridge * w;
    hess.topLeftCorner(d, d) += options.ridge * Eigen::MatrixXd::Identity(d, d);
    const Eigen::VectorXd dir = hess.ldlt().solve(grad);
    const double decrement = grad.dot(dir);
    if (!(decrement > 2.0 * options.tolerance)) break;
    double scale = 1.0;
    Eigen::VectorXd next = theta - dir;
    double next_loss = loss_at(next);
    while (next_loss > loss - 0.25 * scale * decrement && scale > 1e-10) {
      scale *= 0.5;
      next = theta - scale * dir;
      next_loss = loss_at(next);
    }
    theta = next;
    loss = next_loss;
  }
  const Eigen::VectorXd w = theta.head(d);
  const double b = theta[d];
  LinearProbe probe;
  probe.weights = Tensor({dim}, std::vector<double>(w.data(), w.data() + w.size()));
  probe.bias = b;
  return probe;
}

LinearProbe oneshot_train(const Model& model, const Sample& support, const ProbeOptions& options) {
  const PoseGrid grid = pose_grid(model);
  const Tensor features = pose_features(model, support.image);
  const long i = grid.nearest_cell(support.record.cy), j = grid.nearest_cell(support.record.cx);
  if (i < 0 || j < 0 || i >= static_cast<long>(features.dim(0)) || j >= static_cast<long>(features.dim(1))) {
    throw RangeError("support pose lies outside the pose grid");
  }
  const int t = angle_bin(support.record.angle_deg, static_cast<int>(features.dim(2)));
  return oneshot_train_features(features, static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(t), options);
}

ProbeHit probe_argmax(const LinearProbe& probe, const Tensor& features) {
  if (features.rank() != 4 || features.dim(3) != probe.weights.size()) {
    throw DimensionError("probe expects " + std::to_string(probe.weights.size()) + " features per fiber, got " +
                         shape_string(features.shape()));
  }
  const std::size_t cols = features.dim(1), p = features.dim(2), dim = features.dim(3);
  const std::size_t fibers = features.size() / dim;
  ProbeHit hit;
  std::size_t best = 0;
  double best_score = probe.score(features.raw());
  for (std::size_t f = 1; f < fibers; ++f) {
    const double s = probe.score(features.raw() + f * dim);
    if (s > best_score) {
      best_score = s;
      best = f;
    }
  }
  hit.t = best % p;
  hit.j = (best / p) % cols;
  hit.i = best / (p * cols);
  hit.score = best_score;
  return hit;
}

ProbeHit oneshot_predict(const LinearProbe& probe, const Model& model, const Tensor& image) {
  return probe_argmax(probe, pose_features(model, image));
}

bool pose_recovered(const ProbeHit& hit, const SampleRecord& truth, const PoseGrid& grid, int p) {
  return std::labs(static_cast<long>(hit.i) - grid.nearest_cell(truth.cy)) <= 1 &&
         std::labs(static_cast<long>(hit.j) - grid.nearest_cell(truth.cx)) <= 1 &&
         bin_distance(static_cast<int>(hit.t), angle_bin(truth.angle_deg, p), p) <= 1;
}

std::string OneshotReport::to_text() const {
  return "trials " + std::to_string(trials) + "\nrecovered " + std::to_string(recovered) + "\nrecovery_rate " +
         fixed6(rate()) + "\n";
}

OneshotReport oneshot_evaluate(const LinearProbe& probe, const Model& model, const std::vector<Sample>& trials) {
  const PoseGrid grid = pose_grid(model);
  OneshotReport r;
  for (const Sample& s : trials) {
    const Tensor features = pose_features(model, s.image);
    const ProbeHit hit = probe_argmax(probe, features);
    r.recovered += pose_recovered(hit, s.record, grid, static_cast<int>(features.dim(2)));
    ++r.trials;
  }
  return r;
}

std::string probe_to_text(const LinearProbe& probe) {
  std::string out = "{\"format\":\"rinn-probe-1\",\"bias\":" + number17(probe.bias) + ",\"weights\":[";
  for (std::size_t k = 0; k < probe.weights.size(); ++k) out += (k ? "," : "") + number17(probe.weights[k]);
  return out + "]}\n";
}

LinearProbe probe_from_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedError(std::string("probe file is not valid: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format") || !doc["format"].is_string()) throw MalformedError("probe file has no format field");
  const std::string format = doc["format"].get<std::string>();
  if (format != "rinn-probe-1") {
    if (format.rfind("rinn-probe-", 0) == 0) throw VersionError("unsupported probe format version '" + format + "'");
    throw MalformedError("unknown probe format '" + format + "'");
  }
  LinearProbe probe;
  try {
    std::vector<double> w = doc.at("weights").get<std::vector<double>>();
    probe.bias = doc.at("bias").get<double>();
    const std::size_t n = w.size();
    probe.weights = Tensor({n}, std::move(w));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedError(std::string("probe file field error: ") + e.what());
  }
  if (probe.weights.empty()) throw ShapeError("probe has no weights");
  if (!probe.weights.all_finite() || !std::isfinite(probe.bias)) throw RangeError("probe parameters must be finite");
  return probe;
}

void save_probe(const LinearProbe& probe, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << probe_to_text(probe);
}

LinearProbe load_probe(const std::string& path) { return probe_from_text(read_text_file(path, "probe file")); }

}  // namespace rinn
