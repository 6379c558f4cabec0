#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "denseclip/encoders.hpp"

namespace denseclip {

// Pixel-text scores s[i][k] = cos(z_i, t_k) over the feature grid.
struct ScoreMap {
  Tensor s;  // [(h4*w4) x K]
  Index h4 = 0;
  Index w4 = 0;

  Index class_count() const { return s.cols(); }
};

// Ground-truth class per feature-grid cell.
struct SegTarget {
  std::vector<int> labels;  // (h4*w4) entries in [0, K)
};

// Binary per-cell, per-class target built from boxes.
struct DetTarget {
  Tensor y;  // [(h4*w4) x K], entries in {0, 1}
};

// Axis-aligned box in normalized image coordinates (x along width).
struct BoxAnnotation {
  int class_id = 0;
  double x_min = 0, y_min = 0, x_max = 1, y_max = 1;
};

struct LossConfig {
  double temperature = 0.07;
  double aux_weight = 0.4;

  void validate() const;
};

ScoreMap compute_score_map(const Tensor& z, const TextEmbeddings& t, Index h4, Index w4);
ScoreMap compute_score_map(const PooledFeatures& pooled, const TextEmbeddings& t, Index h4, Index w4);

// Channel-wise concatenation [x4, s].
FeatureMap fuse_features(const FeatureMap& x4, const ScoreMap& s);

Tensor seg_aux_loss(const ScoreMap& s, const SegTarget& y, const LossConfig& cfg);
Tensor det_aux_loss(const ScoreMap& s, const DetTarget& y, const LossConfig& cfg);

void validate_box(const BoxAnnotation& box, Index classes);

// Cell i is positive for class k iff its center lies inside (boundary
// included) some class-k box.
DetTarget rasterize_boxes(std::span<const BoxAnnotation> boxes, Index h4, Index w4, Index classes);

// DCT1 dump of s plus a JSON sidecar {h4, w4, K, classes}.
void export_score_map(const ScoreMap& s, const std::vector<std::string>& class_names,
                      const std::filesystem::path& dct1_path);

}  // namespace denseclip
