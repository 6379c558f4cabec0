#include "denseclip/matching.hpp"

#include <cmath>
#include <fstream>

#include "denseclip/dct1.hpp"
#include "json.hpp"

namespace denseclip {

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(aux_weight >= 0.0)) throw ConfigError("aux weight must be non-negative");
}

namespace {

// Rounding can push a cosine of aligned unit vectors a few ulps past 1; clamp
// the value and pass the gradient through unchanged.
Tensor clamp_unit_interval(const Tensor& x) {
  auto xn = x.node();
  return record_op<double>("clamp_unit", x.shape(), x.value().cwiseMax(-1.0).cwiseMin(1.0), {x},
                           [xn](const Matrix& g) { xn->accumulate(g); });
}

}  // namespace

ScoreMap compute_score_map(const Tensor& z, const TextEmbeddings& t, Index h4, Index w4) {
  if (z.rank() != 2 || t.t.rank() != 2 || z.cols() != t.t.cols()) {
    throw DimensionError("score map: feature " + to_string(z.shape()) + " vs text " + to_string(t.t.shape()));
  }
  if (z.rows() != h4 * w4) {
    throw DimensionError("score map: " + std::to_string(z.rows()) + " features for a " + std::to_string(h4) + "x" +
                         std::to_string(w4) + " grid");
  }
  const Tensor s = clamp_unit_interval(matmul_nt(l2_normalize(z, -1), l2_normalize(t.t, -1)));
  return {s, h4, w4};
}

ScoreMap compute_score_map(const PooledFeatures& pooled, const TextEmbeddings& t, Index h4, Index w4) {
  return compute_score_map(pooled.dense, t, h4, w4);
}

FeatureMap fuse_features(const FeatureMap& x4, const ScoreMap& s) {
  if (x4.values.rows() != s.s.rows()) {
    throw DimensionError("fuse: feature map has " + std::to_string(x4.values.rows()) + " positions, score map " +
                         std::to_string(s.s.rows()));
  }
  if (s.s.cols() == 0) return x4;
  return {x4.h4, x4.w4, concat_cols<double>({x4.values, s.s})};
}

Tensor seg_aux_loss(const ScoreMap& s, const SegTarget& y, const LossConfig& cfg) {
  cfg.validate();
  if (static_cast<Index>(y.labels.size()) != s.s.rows()) {
    throw DimensionError("seg aux loss: " + std::to_string(y.labels.size()) + " labels for " +
                         std::to_string(s.s.rows()) + " cells");
  }
  return cross_entropy(scale(s.s, 1.0 / cfg.temperature), std::span<const int>(y.labels));
}

Tensor det_aux_loss(const ScoreMap& s, const DetTarget& y, const LossConfig& cfg) {
  cfg.validate();
  if (s.s.shape() != y.y.shape()) {
    throw DimensionError("det aux loss: scores " + to_string(s.s.shape()) + " vs target " + to_string(y.y.shape()));
  }
  return bce_with_logits(scale(s.s, 1.0 / cfg.temperature), y.y);
}

void validate_box(const BoxAnnotation& box, Index classes) {
  const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (box.class_id < 0 || box.class_id >= classes) {
    throw ValidationError("box class " + std::to_string(box.class_id) + " outside [0, " + std::to_string(classes) + ")");
  }
  if (!in_unit(box.x_min) || !in_unit(box.x_max) || !in_unit(box.y_min) || !in_unit(box.y_max)) {
    throw ValidationError("box coordinates must lie in [0, 1]");
  }
  if (!(box.x_min < box.x_max) || !(box.y_min < box.y_max)) throw ValidationError("box has non-positive extent");
}

namespace {

double cell_center(Index i, Index n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); }

// First and one-past-last cell whose center lies in [lo, hi]. The closed-form
// estimate is corrected against the exact center comparison.
std::pair<Index, Index> covered_cells(double lo, double hi, Index n) {
  Index first = std::max<Index>(0, static_cast<Index>(std::ceil(lo * static_cast<double>(n) - 0.5)));
  while (first > 0 && cell_center(first - 1, n) >= lo) --first;
  while (first < n && cell_center(first, n) < lo) ++first;
  Index last = std::min<Index>(n, static_cast<Index>(std::floor(hi * static_cast<double>(n) - 0.5)) + 1);
  last = std::max(last, first);
  while (last < n && cell_center(last, n) <= hi) ++last;
  while (last > first && cell_center(last - 1, n) > hi) --last;
  return {first, last};
}

}  // namespace

DetTarget rasterize_boxes(std::span<const BoxAnnotation> boxes, Index h4, Index w4, Index classes) {
  if (h4 < 1 || w4 < 1 || classes < 1) throw ConfigError("rasterize: empty grid or class set");
  Matrix y = Matrix::Zero(h4 * w4, classes);
  for (const auto& box : boxes) {
    validate_box(box, classes);
    const auto [c0, c1] = covered_cells(box.x_min, box.x_max, w4);
    const auto [r0, r1] = covered_cells(box.y_min, box.y_max, h4);
    for (Index r = r0; r < r1; ++r) {
      for (Index c = c0; c < c1; ++c) y(r * w4 + c, box.class_id) = 1.0;
    }
  }
  return {Tensor(Shape{h4 * w4, classes}, std::move(y))};
}

void export_score_map(const ScoreMap& s, const std::vector<std::string>& class_names,
                      const std::filesystem::path& dct1_path) {
  dct1::save(dct1_path, s.s);
  nlohmann::ordered_json j;
  j["h4"] = s.h4;
  j["w4"] = s.w4;
  j["K"] = s.class_count();
  j["classes"] = class_names;
  auto sidecar = dct1_path;
  sidecar.replace_extension(".json");
  std::ofstream out(sidecar);
  out << j.dump(2) << '\n';
}

}  // namespace denseclip
