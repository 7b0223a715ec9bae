#pragma once

#include <array>
#include <vector>

#include "mtnet/config.hpp"
#include "mtnet/model.hpp"

namespace mtnet {

struct SceneRect {
  int64_t x0 = 0, y0 = 0, w = 0, h = 0;
  int seg_class = 0;
  int det_class = 0;
  double depth = 0.0;
  std::array<double, 3> color{};
  double yaw = 0.0, pitch = 0.0, roll = 0.0;
  std::array<double, 3> size3d{};
};

/// Deterministic pseudo-random scene: colored rectangles over a background.
/// Rectangles define segmentation classes and constant depths; their
/// centers become detection objects with Gaussian heatmap splats at map
/// (1/8) resolution. A two-row band at the bottom is labeled ignore and
/// masked out of the depth loss.
struct SyntheticSample {
  Tensor image;  // (B,3,H,W), values around [0,1]
  TrainingTargets targets;
  std::vector<std::vector<SceneRect>> rects;  // per batch element
};

/// Errors when (h, w) is smaller than 64x128 or not divisible by 8.
SyntheticSample generate_synthetic(uint64_t seed, int64_t h, int64_t w, int batch,
                                   const ModelConfig& cfg);

}  // namespace mtnet
