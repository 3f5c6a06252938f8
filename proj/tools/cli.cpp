#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rinn/dataset.hpp"
#include "rinn/errors.hpp"
#include "rinn/evaluation.hpp"
#include "rinn/network.hpp"
#include "rinn/rng.hpp"
#include "rinn/training.hpp"

namespace rinn::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f << text;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read '" + path + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory '" + dir + "'");
}

std::vector<double> split_numbers(const std::string& text, char sep, std::size_t count, const std::string& what) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(sep, start), text.size());
    const std::string part = text.substr(start, end - start);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) throw UsageError(what + ": cannot parse '" + text + "'");
    out.push_back(v);
    start = end + 1;
  }
  if (out.size() != count) throw UsageError(what + ": expected " + std::to_string(count) + " values in '" + text + "'");
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<Sample> load_nonempty(const std::string& dir) {
  std::vector<Sample> s = load_samples(dir);
  if (s.empty()) throw UsageError("no samples in '" + dir + "'");
  return s;
}

// gen ---------------------------------------------------------------------

struct GenArgs {
  bool train = false;
  std::size_t test = 0;
  std::size_t scenes = 0;
  std::size_t canvas = 64;
  std::size_t scene_canvas = 128;
  std::size_t symbols = 2;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  if (a.canvas == 0 || a.scene_canvas == 0) throw UsageError("canvas must be positive");
  if (a.scenes > 0 && a.symbols == 0) throw UsageError("scenes need at least one symbol");
  // Validate sizes before touching the disk.
  if (a.test > 0) center_range(a.canvas);
  if (a.scenes > 0) center_range(a.scene_canvas);
  const bool train = a.train || (a.test == 0 && a.scenes == 0);
  make_out_dir(a.out);
  if (train) {
    save_samples(gen_train_set(), in_dir(a.out, "train"), "class");
    out << "train: 15 samples -> " << in_dir(a.out, "train") << "\n";
  }
  if (a.test > 0) {
    save_samples(gen_test_set(a.test, a.canvas, a.seed), in_dir(a.out, "test"), "test");
    out << "test: " << a.test << " samples -> " << in_dir(a.out, "test") << "\n";
  }
  if (a.scenes > 0) {
    save_scenes(gen_detection_scenes(a.scenes, a.symbols, a.scene_canvas, a.seed), in_dir(a.out, "scenes"));
    out << "scenes: " << a.scenes << " -> " << in_dir(a.out, "scenes") << "\n";
  }
  return kExitOk;
}

// train -------------------------------------------------------------------

struct TrainArgs {
  std::string stage = "all";
  std::string resume;
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string out;
};

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig c;
  if (!a.config.empty()) c = parse_config(read_text(a.config), c);
  if (a.seed) c.seed = *a.seed;
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    apply_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig config = resolve_config(a);
  std::vector<Stage> stages;
  if (a.stage == "all") {
    if (!a.resume.empty()) throw UsageError("--stage all starts from scratch; --resume needs a single stage");
    stages = {Stage::base, Stage::rotate1, Stage::rotate2, Stage::head, Stage::finetune};
  } else {
    stages = {parse_stage(a.stage)};
  }
  std::optional<Model> model;
  if (!a.resume.empty()) model = load_model(a.resume);
  const std::vector<Sample> train = a.data.empty() ? gen_train_set() : load_nonempty(a.data);
  make_out_dir(a.out);
  const std::string log = in_dir(a.out, "run_log.jsonl");
  for (Stage s : stages) {
    auto [next, report] = run_stage(s, model, train, config);
    model = std::move(next);
    append_run_log(report, log);
    out << stage_name(s) << ": ";
    if (!report.epoch_losses.empty())
      out << "loss " << fmt("%.4f", report.epoch_losses.front()) << " -> " << fmt("%.4f", report.epoch_losses.back())
          << ", ";
    out << "train accuracy " << fmt("%.3f", report.train_accuracy) << ", " << fmt("%.1f", report.wall_seconds) << " s\n";
  }
  save_model(*model, in_dir(a.out, "model.rinn"));
  out << "model -> " << in_dir(a.out, "model.rinn") << "\n";
  return kExitOk;
}

// eval --------------------------------------------------------------------

int cmd_eval(const std::string& model_path, const std::string& data, const std::string& out_dir, std::size_t threads,
             std::ostream& out) {
  const Model model = load_model(model_path);
  const std::vector<Sample> test = load_nonempty(data);
  const AccuracyReport r = accuracy(model, test, threads);
  make_out_dir(out_dir);
  write_text(in_dir(out_dir, "report.txt"), r.to_text());
  out << r.to_text();
  return kExitOk;
}

// detect ------------------------------------------------------------------

struct DetectArgs {
  std::string model;
  std::string data;
  double threshold = 0.8;
  std::string sweep;
  int radius = 3;
  std::size_t threads = 1;
  std::string out;
};

int cmd_detect(const DetectArgs& a, std::ostream& out) {
  const Model model = load_model(a.model);
  const std::vector<Scene> scenes = load_scenes(a.data);
  if (scenes.empty()) throw UsageError("no scenes in '" + a.data + "'");
  std::vector<double> thresholds;
  if (!a.sweep.empty()) {
    const auto v = split_numbers(a.sweep, ':', 3, "--sweep");
    thresholds = threshold_sweep(v[0], v[1], v[2]);
  }
  std::vector<Tensor> images;
  for (const Scene& s : scenes) images.push_back(s.canvas);
  std::vector<PoseMap> maps = forward_pose_all(model, images, a.threads);
  const PoseGrid grid = pose_grid(model);

  make_out_dir(a.out);
  std::string lines;
  std::vector<ScoredScene> scored;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const double step = 360.0 / static_cast<double>(maps[k].orientations());
    for (const Detection& d : detect(maps[k], grid, a.threshold, a.radius)) {
      nlohmann::ordered_json j;
      j["scene"] = scenes[k].placements.front().path;
      j["class_id"] = d.class_id;
      j["score"] = d.score;
      j["i"] = d.i;
      j["j"] = d.j;
      j["t"] = d.t;
      j["cy"] = d.cy;
      j["cx"] = d.cx;
      j["angle_deg"] = step * static_cast<double>(d.t);
      lines += j.dump() + "\n";
    }
    scored.push_back({std::move(maps[k]), scenes[k].placements});
  }
  write_text(in_dir(a.out, "detections.jsonl"), lines);

  const PrPoint at = pr_curve(scored, grid, {a.threshold}, a.radius).front();
  out << "threshold " << fmt("%.3f", a.threshold) << ": precision " << fmt("%.4f", at.precision) << " recall "
      << fmt("%.4f", at.recall) << " f1 " << fmt("%.4f", at.f1()) << "\n";
  if (!thresholds.empty()) {
    const auto curve = pr_curve(scored, grid, thresholds, a.radius);
    write_text(in_dir(a.out, "pr.csv"), pr_csv(curve));
    write_text(in_dir(a.out, "pr.svg"), pr_svg(curve));
    const PrPoint* best = &curve.front();
    for (const PrPoint& p : curve)
      if (p.f1() > best->f1()) best = &p;
    out << "best threshold " << fmt("%.3f", best->threshold) << ": f1 " << fmt("%.4f", best->f1()) << "\n";
  }
  return kExitOk;
}

// montage -----------------------------------------------------------------

int cmd_montage(const std::string& model_path, const std::string& image, const std::string& out_dir,
                std::ostream& out) {
  const Model model = load_model(model_path);
  const Tensor img = read_pgm(image);
  const PoseMap pm = forward_pose(model, img);
  const Detection best = classify(pm, pose_grid(model));
  make_out_dir(out_dir);
  write_pgm(pose_montage(pm), in_dir(out_dir, "montage.pgm"));
  out << "argmax class " << best.class_id << " orientation " << best.t << " cell (" << best.i << ", " << best.j
      << ") score " << fmt("%.4f", best.score) << "\n";
  return kExitOk;
}

// oneshot -----------------------------------------------------------------

struct OneshotArgs {
  std::string model;
  int glyph = kClassCount;
  std::size_t trials = 100;
  std::uint64_t seed = 1;
  std::size_t canvas = 64;
  std::string support;
  std::string pose;
  std::string out;
};

int cmd_oneshot(const OneshotArgs& a, std::ostream& out) {
  if (!a.support.empty() && a.pose.empty()) throw UsageError("--support needs --pose cy,cx,angle");
  if (a.glyph < 0 || a.glyph >= kGlyphCount)
    throw UsageError("--glyph must be in [0, " + std::to_string(kGlyphCount) + ")");
  if (a.canvas == 0) throw UsageError("canvas must be positive");
  const Model model = load_model(a.model);
  Sample support;
  if (a.support.empty()) {
    support = gen_pose_set(a.glyph, 1, a.canvas, derive_seed(a.seed, "support")).front();
  } else {
    const auto v = split_numbers(a.pose, ',', 3, "--pose");
    support.image = read_pgm(a.support);
    support.record = {a.support, a.glyph, v[0], v[1], v[2]};
  }
  const LinearProbe probe = oneshot_train(model, support);
  const OneshotReport r = oneshot_evaluate(probe, model, gen_pose_set(a.glyph, a.trials, a.canvas, a.seed));
  make_out_dir(a.out);
  save_probe(probe, in_dir(a.out, "probe.json"));
  const std::string report = "glyph " + std::to_string(a.glyph) + " (" + glyph_name(a.glyph) + ")\n" + r.to_text();
  write_text(in_dir(a.out, "report.txt"), report);
  out << report;
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rotation-equivariant pose networks", "rinn"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads for inference (1 is the deterministic default)")
      ->check(CLI::PositiveNumber);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate training, test and detection data");
  g->add_flag("--train", gen.train, "Write the 15 canonical training glyphs");
  g->add_option("--test", gen.test, "Number of test samples");
  g->add_option("--scenes", gen.scenes, "Number of detection scenes");
  g->add_option("--canvas", gen.canvas, "Test canvas size")->capture_default_str();
  g->add_option("--scene-canvas", gen.scene_canvas, "Detection scene size")->capture_default_str();
  g->add_option("--symbols", gen.symbols, "Symbols per scene")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--out", gen.out)->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run the greedy training pipeline");
  t->add_option("--stage", train.stage, "all|base|rotate1|rotate2|head|finetune")->capture_default_str();
  t->add_option("--resume", train.resume, "Model from the previous stage");
  t->add_option("--config", train.config, "key=value config file");
  t->add_option("--set", train.overrides, "key=value override (repeatable)");
  t->add_option("--seed", train.seed);
  t->add_option("--data", train.data, "Training directory (default: built-in glyphs)");
  t->add_option("--out", train.out)->required();

  std::string model, data, out_dir, image;
  auto* e = app.add_subcommand("eval", "Class, orientation and pose accuracy");
  e->add_option("--model", model)->required();
  e->add_option("--data", data)->required();
  e->add_option("--out", out_dir)->required();

  DetectArgs det;
  auto* d = app.add_subcommand("detect", "Detections and precision-recall sweep");
  d->add_option("--model", det.model)->required();
  d->add_option("--data", det.data)->required();
  d->add_option("--threshold", det.threshold)->capture_default_str();
  d->add_option("--sweep", det.sweep, "lo:hi:step");
  d->add_option("--radius", det.radius, "Suppression radius in cells")->capture_default_str()->check(
      CLI::NonNegativeNumber);
  d->add_option("--out", det.out)->required();

  auto* m = app.add_subcommand("montage", "Pose-map montage of one image");
  m->add_option("--model", model)->required();
  m->add_option("--image", image)->required();
  m->add_option("--out", out_dir)->required();

  OneshotArgs one;
  auto* o = app.add_subcommand("oneshot", "Train a linear probe on one sample and test it");
  o->add_option("--model", one.model)->required();
  o->add_option("--glyph", one.glyph)->capture_default_str();
  o->add_option("--trials", one.trials)->capture_default_str();
  o->add_option("--seed", one.seed)->capture_default_str();
  o->add_option("--canvas", one.canvas)->capture_default_str();
  o->add_option("--support", one.support, "Support image (PGM)");
  o->add_option("--pose", one.pose, "Support pose cy,cx,angle");
  o->add_option("--out", one.out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (t->parsed()) {
      const auto start = std::chrono::steady_clock::now();
      const int code = cmd_train(train, out);
      out << "wall time " << fmt("%.1f", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count())
          << " s\n";
      return code;
    }
    if (e->parsed()) return cmd_eval(model, data, out_dir, threads, out);
    det.threads = threads;
    if (d->parsed()) return cmd_detect(det, out);
    if (m->parsed()) return cmd_montage(model, image, out_dir, out);
    if (o->parsed()) return cmd_oneshot(one, out);
  } catch (const StageOrderError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitPipeline;
  } catch (const DivergenceError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitPipeline;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace rinn::cli
