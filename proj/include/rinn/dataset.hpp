#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rinn/tensor.hpp"

namespace rinn {

inline constexpr int kClassCount = 15;
// Glyph ids kClassCount .. kGlyphCount-1 are novel symbols that never appear
// in training; the one-shot probe uses them.
inline constexpr int kGlyphCount = 20;
inline constexpr std::size_t kGlyphSize = 32;
inline constexpr std::size_t kTrainCanvas = 34;

// Radius of the disk bounding a rotated 32x32 glyph: 16 * sqrt(2).
double glyph_disk_radius();

// Anti-aliased stroke drawing in [0, 1], centered on the plane.
Tensor rasterize_glyph(int class_id, std::size_t size = kGlyphSize);
// Any glyph id in [0, kGlyphCount).
Tensor rasterize_any_glyph(int glyph_id, std::size_t size = kGlyphSize);
const char* glyph_name(int glyph_id);

// Zero-mean normalized correlation of two equally shaped planes.
double normalized_correlation(const Tensor& a, const Tensor& b);
// Largest correlation between the glyph and its rotations by 30..330 degrees.
double max_rotation_self_correlation(const Tensor& glyph);

struct SampleRecord {
  std::string path;
  int class_id = 0;  // glyph id
  double cy = 0.0;   // scene pixel coordinates of the glyph center
  double cx = 0.0;
  double angle_deg = 0.0;  // counterclockwise, [0, 360)

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct Sample {
  Tensor image;  // [H, W]
  SampleRecord record;
};

struct Scene {
  Tensor canvas;  // [S, S]
  std::vector<SampleRecord> placements;
};

// Rotates `glyph` about its center by `angle_deg`, then writes it into
// `canvas` centered at (cy, cx) with bilinear sub-pixel translation. Pixels
// keep the larger of the existing and the glyph value.
void paste_glyph(Tensor& canvas, const Tensor& glyph, double cy, double cx, double angle_deg);

// Range of centers that keeps the glyph disk inside a canvas of `size`.
struct CenterRange {
  double lo = 0.0;
  double hi = 0.0;
};
CenterRange center_range(std::size_t size);

// One canonical sample per class: 34x34, centered at (16.5, 16.5), angle 0.
std::vector<Sample> gen_train_set();

// Classes uniform over the 15 training glyphs, continuous angles, centers
// uniform over center_range(canvas).
std::vector<Sample> gen_test_set(std::size_t count = 1000, std::size_t canvas = 64, std::uint64_t seed = 1);

// Random poses of one glyph (any id, including novel ones).
std::vector<Sample> gen_pose_set(int glyph_id, std::size_t count, std::size_t canvas, std::uint64_t seed);

// Places `symbol_count` glyphs with pairwise center distance > 32 * sqrt(2).
// Each placement gets 1000 rejection-sampling attempts before PackingError.
Scene gen_detection_scene(std::size_t symbol_count, std::size_t canvas, std::uint64_t seed);

// Scene k uses its own seed derived from (seed, k), so a prefix of a longer
// run matches a shorter one.
std::vector<Scene> gen_detection_scenes(std::size_t count, std::size_t symbol_count, std::size_t canvas,
                                        std::uint64_t seed);

bool placements_disjoint(const std::vector<SampleRecord>& placements);

// P5 binary graymap, maxval 255, value = round(pixel * 255).
void write_pgm(const Tensor& image, const std::string& path);
Tensor read_pgm(const std::string& path);
std::string encode_pgm(const Tensor& image);
Tensor decode_pgm(const std::string& bytes);

// One JSON object per line: {"path","class_id","cy","cx","angle_deg"}.
void write_manifest(const std::vector<SampleRecord>& records, const std::string& path);
std::vector<SampleRecord> read_manifest(const std::string& path);
std::string manifest_line(const SampleRecord& record);

// Directory layout: <stem>_NNNNN.pgm files plus manifest.jsonl, with paths
// relative to the directory. Scenes write one manifest line per placement.
void save_samples(const std::vector<Sample>& samples, const std::string& dir, const std::string& stem);
std::vector<Sample> load_samples(const std::string& dir);
void save_scenes(const std::vector<Scene>& scenes, const std::string& dir);
// Groups manifest lines by path, in order of first appearance.
std::vector<Scene> load_scenes(const std::string& dir);

}  // namespace rinn
