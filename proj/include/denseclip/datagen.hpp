#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "denseclip/matching.hpp"
#include "json.hpp"

namespace denseclip {

// Appearance of one class: per-channel mean plus a diagonal sinusoid.
struct ClassSignature {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  double frequency = 1.0;  // cycles per image width
};

struct TaskSpec {
  Index classes = 8;  // class 0 is background
  Index height = 32;
  Index width = 32;
  Index factor = 4;  // encoder downsample; H and W must divide by it
  Index min_shapes = 1;
  Index max_shapes = 4;
  Index min_size = 8;   // shape side (rectangles) or diameter (discs), pixels
  Index max_size = 16;
  double noise = 0.3;          // per-pixel Gaussian sigma
  double illumination = 0.2;   // sigma of a per-image, per-channel offset
  double texture = 0.15;       // sinusoid amplitude
  std::vector<ClassSignature> signatures;  // empty: drawn from seed
  std::uint64_t seed = 7;

  void validate() const;
  // Explicit table, or one drawn deterministically from `seed`.
  std::vector<ClassSignature> resolved_signatures() const;
};

nlohmann::ordered_json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const nlohmann::json& j);

struct SyntheticSample {
  Tensor image;                     // [H x W x 3]
  std::vector<int> mask;            // H*W entries in [0, K)
  std::vector<BoxAnnotation> boxes;  // tight around each shape's visible pixels
};

enum class ShapeKind { Rectangle, Disc };

// Pixel-space placement. Rectangles cover [x0, x1) x [y0, y1); discs cover
// pixels whose center lies within `radius` of (cx, cy).
struct ShapeLayout {
  ShapeKind kind = ShapeKind::Rectangle;
  int class_id = 1;
  Index x0 = 0, y0 = 0, x1 = 1, y1 = 1;
  double cx = 0, cy = 0, radius = 0;
};

// Paints shapes in order over the class-0 background; later shapes win.
// Shapes left with no visible pixel get no box.
SyntheticSample render_layout(const TaskSpec& spec, const std::vector<ShapeLayout>& layout, Rng& rng);

std::vector<SyntheticSample> generate(const TaskSpec& spec, Index n, std::uint64_t split_seed);

// Seeded shuffle, then the first round(n * fraction) go to train.
std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> split(const std::vector<SyntheticSample>& samples,
                                                                             double train_fraction,
                                                                             std::uint64_t seed = 0);

struct Dataset {
  TaskSpec spec;
  std::vector<SyntheticSample> samples;
};

// Directory with spec.json, images.dct1, masks.dct1 and boxes.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace denseclip
