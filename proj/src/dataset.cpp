#include "rinn/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rinn/errors.hpp"
#include "rinn/rng.hpp"

namespace rinn {

namespace {

struct Point {
  double x;
  double y;
};
using Stroke = std::vector<Point>;

struct Glyph {
  const char* name;
  std::vector<Stroke> strokes;
};

// Stroke polylines in glyph units: x to the right, y down, origin at the
// plane center, one unit = 1.15 px on a 32 px plane. The set was chosen so
// no glyph correlates above 0.74 with any rotation of another.
const std::vector<Glyph>& glyph_table() {
  static const std::vector<Glyph> table = {
      {"F", {{{-5, -9}, {-5, 9}}, {{-5, -9}, {6, -9}}, {{-5, -1}, {3, -1}}}},
      {"L", {{{-5, -9}, {-5, 9}, {6, 9}}}},
      {"R", {{{-5, 9}, {-5, -9}, {3, -9}, {6, -6}, {6, -3}, {3, 0}, {-5, 0}}, {{0, 0}, {6, 9}}}},
      {"J", {{{5, -9}, {5, 5}, {2, 9}, {-3, 9}, {-6, 5}}}},
      {"7", {{{-6, -9}, {6, -9}, {-2, 9}}}},
      {"4", {{{3, 9}, {3, -9}, {-6, 4}, {7, 4}}}},
      {"K", {{{-5, -9}, {-5, 9}}, {{6, -9}, {-5, 2}}, {{-1, -2}, {6, 9}}}},
      {"Y", {{{-6, -9}, {0, 0}, {6, -9}}, {{0, 0}, {0, 9}}}},
      {"2", {{{-6, -5}, {-3, -9}, {3, -9}, {6, -5}, {6, -2}, {-6, 9}, {7, 9}}}},
      {"T", {{{-7, -9}, {7, -9}}, {{0, -9}, {0, 9}}}},
      {"h", {{{-5, -9}, {-5, 9}}, {{-5, 1}, {-1, -2}, {4, -2}, {6, 1}, {6, 9}}}},
      {"U", {{{-6, -9}, {-6, 5}, {-3, 9}, {3, 9}, {6, 5}, {6, -9}}}},
      {"9", {{{6, -2}, {3, 1}, {-3, 1}, {-6, -2}, {-6, -6}, {-3, -9}, {3, -9}, {6, -6}, {6, 4}, {3, 9}, {-4, 9}}}},
      {"e", {{{-6, 0}, {6, 0}, {6, -4}, {3, -7}, {-3, -7}, {-6, -3}, {-6, 4}, {-3, 8}, {5, 8}}}},
      {"t", {{{-1, -9}, {-1, 6}, {2, 9}, {6, 9}}, {{-6, -3}, {5, -3}}}},
      // Novel glyphs.
      {"w", {{{-7, -5}, {-4, 9}, {0, 0}, {4, 9}, {7, -5}}}},
      {"?", {{{-6, -5}, {-3, -9}, {3, -9}, {6, -6}, {6, -3}, {0, 1}, {0, 4}}, {{0, 8}, {0, 9}}}},
      {"M", {{{-7, 9}, {-7, -9}, {0, 3}, {7, -9}, {7, 9}}}},
      {"1", {{{-4, -5}, {1, -9}, {1, 9}}, {{-4, 9}, {6, 9}}}},
      {"f", {{{6, -7}, {3, -9}, {0, -9}, {-2, -6}, {-2, 9}}, {{-6, -2}, {4, -2}}}},
  };
  return table;
}

double segment_distance(double px, double py, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - a.x - t * dx, py - a.y - t * dy);
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << bytes;
  if (!out) throw Error("failed writing '" + path + "'");
}

Sample render(int glyph_id, std::size_t canvas, double cy, double cx, double angle) {
  Sample s{Tensor({canvas, canvas}), {"", glyph_id, cy, cx, angle}};
  paste_glyph(s.image, rasterize_any_glyph(glyph_id), cy, cx, angle);
  return s;
}

}  // namespace

double glyph_disk_radius() { return 16.0 * std::sqrt(2.0); }

Tensor rasterize_any_glyph(int glyph_id, std::size_t size) {
  if (glyph_id < 0 || glyph_id >= kGlyphCount) throw RangeError("glyph id " + std::to_string(glyph_id) + " out of range");
  if (size < 8) throw RangeError("glyph plane must be at least 8 pixels");
  const double unit = 1.15 * static_cast<double>(size) / 32.0;
  const double half_width = 1.3 * static_cast<double>(size) / 32.0;
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  Tensor img({size, size});
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t q = 0; q < size; ++q) {
      double d = 1e300;
      for (const Stroke& stroke : glyph_table()[static_cast<std::size_t>(glyph_id)].strokes)
        for (std::size_t k = 0; k + 1 < stroke.size(); ++k) {
          const Point a{c + unit * stroke[k].x, c + unit * stroke[k].y};
          const Point b{c + unit * stroke[k + 1].x, c + unit * stroke[k + 1].y};
          d = std::min(d, segment_distance(static_cast<double>(q), static_cast<double>(r), a, b));
        }
      img.at({r, q}) = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
    }
  return img;
}

Tensor rasterize_glyph(int class_id, std::size_t size) {
  if (class_id < 0 || class_id >= kClassCount) throw RangeError("class id " + std::to_string(class_id) + " out of range [0, 15)");
  return rasterize_any_glyph(class_id, size);
}

const char* glyph_name(int glyph_id) {
  if (glyph_id < 0 || glyph_id >= kGlyphCount) throw RangeError("glyph id out of range");
  return glyph_table()[static_cast<std::size_t>(glyph_id)].name;
}

double normalized_correlation(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("correlation needs equal shapes");
  const double n = static_cast<double>(a.size());
  const double ma = a.sum() / n, mb = b.sum() / n;
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - ma, y = b[i] - mb;
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

double max_rotation_self_correlation(const Tensor& glyph) {
  double worst = -1.0;
  for (int a = 30; a < 360; a += 30) worst = std::max(worst, normalized_correlation(glyph, rotate_plane(glyph, a)));
  return worst;
}

void paste_glyph(Tensor& canvas, const Tensor& glyph, double cy, double cx, double angle_deg) {
  if (canvas.rank() != 2 || glyph.rank() != 2) throw DimensionError("paste_glyph works on 2-D planes");
  const Tensor rotated = rotate_plane(glyph, angle_deg);
  const double gr = (static_cast<double>(glyph.dim(0)) - 1.0) / 2.0;
  const double gc = (static_cast<double>(glyph.dim(1)) - 1.0) / 2.0;
  const long h = static_cast<long>(canvas.dim(0)), w = static_cast<long>(canvas.dim(1));
  const long r0 = std::max(0L, static_cast<long>(std::floor(cy - gr)) - 1);
  const long r1 = std::min(h - 1, static_cast<long>(std::ceil(cy + gr)) + 1);
  const long c0 = std::max(0L, static_cast<long>(std::floor(cx - gc)) - 1);
  const long c1 = std::min(w - 1, static_cast<long>(std::ceil(cx + gc)) + 1);
  for (long r = r0; r <= r1; ++r)
    for (long c = c0; c <= c1; ++c) {
      const double v = sample_bilinear(rotated, static_cast<double>(r) - cy + gr, static_cast<double>(c) - cx + gc);
      double& dst = canvas[static_cast<std::size_t>(r * w + c)];
      dst = std::max(dst, v);
    }
}

CenterRange center_range(std::size_t size) {
  const double r = glyph_disk_radius();
  const CenterRange range{r - 0.5, static_cast<double>(size) - 0.5 - r};
  if (range.hi < range.lo) {
    throw RangeError("a " + std::to_string(size) + " px canvas cannot hold a rotated glyph");
  }
  return range;
}

std::vector<Sample> gen_train_set() {
  std::vector<Sample> out;
  const double center = (static_cast<double>(kTrainCanvas) - 1.0) / 2.0;
  for (int c = 0; c < kClassCount; ++c) out.push_back(render(c, kTrainCanvas, center, center, 0.0));
  return out;
}

std::vector<Sample> gen_test_set(std::size_t count, std::size_t canvas, std::uint64_t seed) {
  if (count == 0) throw RangeError("test set needs at least one sample");
  const CenterRange range = center_range(canvas);
  Rng rng(derive_seed(seed, "test-set"));
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.index(kClassCount));
    const double angle = rng.uniform(0.0, 360.0);
    const double cy = rng.uniform(range.lo, range.hi);
    const double cx = rng.uniform(range.lo, range.hi);
    out.push_back(render(cls, canvas, cy, cx, angle));
  }
  return out;
}

std::vector<Sample> gen_pose_set(int glyph_id, std::size_t count, std::size_t canvas, std::uint64_t seed) {
  const CenterRange range = center_range(canvas);
  Rng rng(derive_seed(seed, "pose-set-" + std::to_string(glyph_id)));
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double angle = rng.uniform(0.0, 360.0);
    const double cy = rng.uniform(range.lo, range.hi);
    const double cx = rng.uniform(range.lo, range.hi);
    out.push_back(render(glyph_id, canvas, cy, cx, angle));
  }
  return out;
}

bool placements_disjoint(const std::vector<SampleRecord>& placements) {
  const double min_distance = 2.0 * glyph_disk_radius();
  for (std::size_t a = 0; a < placements.size(); ++a)
    for (std::size_t b = a + 1; b < placements.size(); ++b)
      if (std::hypot(placements[a].cy - placements[b].cy, placements[a].cx - placements[b].cx) <= min_distance) return false;
  return true;
}

Scene gen_detection_scene(std::size_t symbol_count, std::size_t canvas, std::uint64_t seed) {
  const CenterRange range = center_range(canvas);
  Rng rng(derive_seed(seed, "detection-scene"));
  Scene scene{Tensor({canvas, canvas}), {}};
  for (std::size_t k = 0; k < symbol_count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      SampleRecord rec{"", static_cast<int>(rng.index(kClassCount)), rng.uniform(range.lo, range.hi),
                       rng.uniform(range.lo, range.hi), rng.uniform(0.0, 360.0)};
      scene.placements.push_back(rec);
      placed = placements_disjoint(scene.placements);
      if (!placed) scene.placements.pop_back();
    }
    if (!placed) {
      throw PackingError("could not place symbol " + std::to_string(k + 1) + " of " + std::to_string(symbol_count) + " on a " +
                         std::to_string(canvas) + " px canvas after 1000 attempts");
    }
  }
  for (const SampleRecord& rec : scene.placements)
    paste_glyph(scene.canvas, rasterize_glyph(rec.class_id), rec.cy, rec.cx, rec.angle_deg);
  return scene;
}

std::vector<Scene> gen_detection_scenes(std::size_t count, std::size_t symbol_count, std::size_t canvas,
                                        std::uint64_t seed) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(gen_detection_scene(symbol_count, canvas, derive_seed(seed, "scene-" + std::to_string(k))));
  return out;
}

std::string encode_pgm(const Tensor& image) {
  if (image.rank() != 2) throw DimensionError("PGM images are 2-D, got " + shape_string(image.shape()));
  std::string out = "P5\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  out.reserve(out.size() + image.size());
  for (double v : image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw RangeError("pixel value " + format_number(v) + " outside [0, 1]");
    out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  return out;
}

Tensor decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) -> long {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos == start || pos - start > 9) throw MalformedError(std::string("PGM header: bad ") + what);
    return std::stol(bytes.substr(start, pos - start));
  };
  if (bytes.compare(0, 2, "P5") != 0) throw MalformedError("PGM header: missing P5 magic");
  pos = 2;
  const long w = read_int("width"), h = read_int("height"), maxval = read_int("maxval");
  if (w <= 0 || h <= 0) throw MalformedError("PGM header: zero extent");
  if (maxval != 255) throw MalformedError("PGM header: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw MalformedError("PGM header: missing separator before payload");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < need) {
    throw TruncatedError("PGM payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " + std::to_string(need));
  }
  if (bytes.size() - pos > need) throw MalformedError("PGM file has trailing bytes");
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < need; ++i) img[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

void write_pgm(const Tensor& image, const std::string& path) { write_file(path, encode_pgm(image)); }

Tensor read_pgm(const std::string& path) { return decode_pgm(read_file(path)); }

std::string manifest_line(const SampleRecord& r) {
  return "{\"path\":" + nlohmann::json(r.path).dump() + ",\"class_id\":" + std::to_string(r.class_id) +
         ",\"cy\":" + format_number(r.cy) + ",\"cx\":" + format_number(r.cx) + ",\"angle_deg\":" + format_number(r.angle_deg) + "}";
}

void write_manifest(const std::vector<SampleRecord>& records, const std::string& path) {
  std::string out;
  for (const SampleRecord& r : records) out += manifest_line(r) + "\n";
  write_file(path, out);
}

std::vector<SampleRecord> read_manifest(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<SampleRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("path").get<std::string>(), j.at("class_id").get<int>(), j.at("cy").get<double>(),
                     j.at("cx").get<double>(), j.at("angle_deg").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw MalformedError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string numbered(const std::string& stem, std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%05zu.pgm", k);
  return stem + buf;
}

std::string manifest_path(const std::string& dir) { return (std::filesystem::path(dir) / "manifest.jsonl").string(); }

std::string member(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace

void save_samples(const std::vector<Sample>& samples, const std::string& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::vector<SampleRecord> records;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    SampleRecord r = samples[k].record;
    r.path = numbered(stem, k);
    write_pgm(samples[k].image, member(dir, r.path));
    records.push_back(r);
  }
  write_manifest(records, manifest_path(dir));
}

std::vector<Sample> load_samples(const std::string& dir) {
  std::vector<Sample> out;
  for (const SampleRecord& r : read_manifest(manifest_path(dir))) out.push_back({read_pgm(member(dir, r.path)), r});
  return out;
}

void save_scenes(const std::vector<Scene>& scenes, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<SampleRecord> records;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const std::string name = numbered("scene", k);
    write_pgm(scenes[k].canvas, member(dir, name));
    for (SampleRecord r : scenes[k].placements) {
      r.path = name;
      records.push_back(r);
    }
  }
  write_manifest(records, manifest_path(dir));
}

std::vector<Scene> load_scenes(const std::string& dir) {
  std::vector<Scene> out;
  std::vector<std::string> names;
  for (const SampleRecord& r : read_manifest(manifest_path(dir))) {
    const auto it = std::find(names.begin(), names.end(), r.path);
    if (it == names.end()) {
      names.push_back(r.path);
      out.push_back({read_pgm(member(dir, r.path)), {r}});
    } else {
      out[static_cast<std::size_t>(it - names.begin())].placements.push_back(r);
    }
  }
  return out;
}

}  // namespace rinn
