#include "mtnet/synthetic.hpp"

#include <cmath>

#include "mtnet/rng.hpp"

namespace mtnet {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBackgroundDepth = 60.0;
constexpr int64_t kIgnoreBandRows = 2;

}  // namespace

SyntheticSample generate_synthetic(uint64_t seed, int64_t h, int64_t w, int batch,
                                   const ModelConfig& cfg) {
  if (h < 64 || w < 128)
    throw ValueError("generate_synthetic: size " + std::to_string(h) + "x" + std::to_string(w) +
                     " below the 64x128 minimum");
  if (h % 8 != 0 || w % 8 != 0)
    throw ValueError("generate_synthetic: extents must be divisible by 8");
  if (batch < 1) throw ValueError("generate_synthetic: batch must be >= 1");

  RngStream rng(seed);
  const int64_t b = batch;
  const int64_t hm = h / 8, wm = w / 8;
  const int nb = cfg.yaw_bins;

  SyntheticSample s;
  s.image = Tensor::zeros({b, 3, h, w});
  s.targets.seg_labels = Tensor::zeros({b, 1, h, w});
  s.targets.depth = Tensor::full({b, 1, h, w}, kBackgroundDepth);
  s.targets.depth_mask = Tensor::full({b, 1, h, w}, 1.0);
  s.targets.det.heatmap = Tensor::zeros({b, cfg.det_classes, hm, wm});
  s.targets.det.offset = Tensor::zeros({b, 2, hm, wm});
  s.targets.det.depth = Tensor::zeros({b, 1, hm, wm});
  s.targets.det.size3d = Tensor::zeros({b, 3, hm, wm});
  s.targets.det.yaw_bin = Tensor::zeros({b, 1, hm, wm});
  s.targets.det.yaw_res = Tensor::zeros({b, 1, hm, wm});
  s.targets.det.pitch_roll = Tensor::zeros({b, 2, hm, wm});
  s.targets.det.mask = Tensor::zeros({b, 1, hm, wm});
  s.targets.det.num_classes = cfg.det_classes;
  s.targets.det.num_bins = nb;
  s.rects.resize(static_cast<size_t>(b));

  for (int64_t n = 0; n < b; ++n) {
    // Background wash.
    double bg[3] = {rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35)};
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < h * w; ++i) s.image[(n * 3 + c) * h * w + i] = bg[c];

    int64_t num_rects = rng.uniform_int(3, 6);
    for (int64_t r = 0; r < num_rects; ++r) {
      SceneRect rect;
      rect.w = rng.uniform_int(w / 8, w / 3);
      rect.h = rng.uniform_int(h / 8, h / 3);
      rect.x0 = rng.uniform_int(0, w - rect.w - 1);
      rect.y0 = rng.uniform_int(0, h - rect.h - 1);
      rect.seg_class = static_cast<int>(rng.uniform_int(1, cfg.seg_classes - 1));
      rect.det_class = rect.seg_class % cfg.det_classes;
      rect.depth = rng.uniform(5.0, 50.0);
      for (auto& c : rect.color) c = rng.uniform(0.3, 1.0);
      rect.yaw = rng.uniform(-kPi, kPi);
      rect.pitch = rng.uniform(-0.3, 0.3);
      rect.roll = rng.uniform(-0.3, 0.3);
      for (auto& d : rect.size3d) d = rng.uniform(1.0, 5.0);
      s.rects[static_cast<size_t>(n)].push_back(rect);

      // Painter's order: later rectangles overwrite earlier ones.
      for (int64_t y = rect.y0; y < rect.y0 + rect.h; ++y) {
        for (int64_t x = rect.x0; x < rect.x0 + rect.w; ++x) {
          for (int c = 0; c < 3; ++c)
            s.image[(n * 3 + c) * h * w + y * w + x] = rect.color[static_cast<size_t>(c)];
          s.targets.seg_labels[n * h * w + y * w + x] = rect.seg_class;
          s.targets.depth[n * h * w + y * w + x] = rect.depth;
        }
      }
    }

    // Detection targets from rectangle centers.
    for (const SceneRect& rect : s.rects[static_cast<size_t>(n)]) {
      double cx = static_cast<double>(rect.x0) + static_cast<double>(rect.w) / 2.0;
      double cy = static_cast<double>(rect.y0) + static_cast<double>(rect.h) / 2.0;
      double cmx = cx / 8.0, cmy = cy / 8.0;
      int64_t ux = static_cast<int64_t>(std::floor(cmx));
      int64_t uy = static_cast<int64_t>(std::floor(cmy));
      if (ux < 0 || ux >= wm || uy < 0 || uy >= hm) continue;

      double sigma = std::max(1.0, static_cast<double>(std::min(rect.w, rect.h)) / 24.0);
      Tensor& hmp = s.targets.det.heatmap;
      for (int64_t v = 0; v < hm; ++v) {
        for (int64_t u = 0; u < wm; ++u) {
          double du = static_cast<double>(u - ux), dv = static_cast<double>(v - uy);
          double g = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
          int64_t idx = ((n * cfg.det_classes + rect.det_class) * hm + v) * wm + u;
          if (g > hmp[idx]) hmp[idx] = g;
        }
      }
      int64_t cell = (n * hm + uy) * wm + ux;
      s.targets.det.offset[(n * 2 + 0) * hm * wm + uy * wm + ux] = cmx - static_cast<double>(ux);
      s.targets.det.offset[(n * 2 + 1) * hm * wm + uy * wm + ux] = cmy - static_cast<double>(uy);
      s.targets.det.depth[cell] = rect.depth;
      for (int d = 0; d < 3; ++d)
        s.targets.det.size3d[(n * 3 + d) * hm * wm + uy * wm + ux] =
            rect.size3d[static_cast<size_t>(d)];
      double bin_width = 2.0 * kPi / static_cast<double>(nb);
      int64_t bin = static_cast<int64_t>(std::floor((rect.yaw + kPi) / bin_width));
      bin = std::min<int64_t>(std::max<int64_t>(bin, 0), nb - 1);
      double center = -kPi + (static_cast<double>(bin) + 0.5) * bin_width;
      s.targets.det.yaw_bin[cell] = static_cast<double>(bin);
      s.targets.det.yaw_res[cell] = rect.yaw - center;
      s.targets.det.pitch_roll[(n * 2 + 0) * hm * wm + uy * wm + ux] = rect.pitch;
      s.targets.det.pitch_roll[(n * 2 + 1) * hm * wm + uy * wm + ux] = rect.roll;
      s.targets.det.mask[cell] = 1.0;
    }

    // Mild texture so normalization statistics stay non-degenerate.
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < h * w; ++i)
        s.image[(n * 3 + c) * h * w + i] += 0.02 * (rng.uniform() - 0.5);

    // Bottom band: segmentation ignore, no depth ground truth.
    for (int64_t y = h - kIgnoreBandRows; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        s.targets.seg_labels[n * h * w + y * w + x] = kSegIgnoreIndex;
        s.targets.depth_mask[n * h * w + y * w + x] = 0.0;
      }
    }
  }
  return s;
}

}  // namespace mtnet
