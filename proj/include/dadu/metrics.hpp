#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dadu/common.hpp"

namespace dadu {

// Integer class-id image, row-major.
struct LabelMask {
  int h{0}, w{0};
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(int height, int width, std::uint8_t fill = 0) : h(height), w(width), labels(std::size_t(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return labels[std::size_t(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return labels[std::size_t(y) * w + x]; }
  bool operator==(const LabelMask&) const = default;
};

// Boundary pixels of one class region: class-c pixels with a four-neighbor
// of a different class, or lying on the image border.
struct ContourSet {
  std::vector<std::pair<int, int>> points;  // (row, col)

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
};

inline double dice_coefficient(const LabelMask& x, const LabelMask& y, int class_id) {
  if (x.h != y.h || x.w != y.w)
    throw ShapeError(detail::cat("dice_coefficient: extents ", x.h, "x", x.w, " vs ", y.h, "x", y.w, " differ"));
  std::size_t nx = 0, ny = 0, inter = 0;
  for (std::size_t i = 0; i < x.labels.size(); ++i) {
    const bool in_x = x.labels[i] == class_id;
    const bool in_y = y.labels[i] == class_id;
    nx += in_x;
    ny += in_y;
    inter += in_x && in_y;
  }
  if (nx + ny == 0) return 1.0;  // absent structure correctly predicted absent
  return 2.0 * double(inter) / double(nx + ny);
}

inline ContourSet extract_contour(const LabelMask& mask, int class_id) {
  ContourSet contour;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (mask.at(y, x) != class_id) continue;
      bool boundary = y == 0 || y == mask.h - 1 || x == 0 || x == mask.w - 1;
      if (!boundary)
        boundary = mask.at(y - 1, x) != class_id || mask.at(y + 1, x) != class_id ||
                   mask.at(y, x - 1) != class_id || mask.at(y, x + 1) != class_id;
      if (boundary) contour.points.emplace_back(y, x);
    }
  return contour;
}

// Directed Hausdorff distance max_{a} min_{b} ||a - b||, Euclidean pixels.
// Undefined (nullopt) when either set is empty.
inline std::optional<double> hausdorff_directed(const ContourSet& a, const ContourSet& b) {
  if (a.empty() || b.empty()) return std::nullopt;
  double worst = 0.0;
  for (const auto& [ay, ax] : a.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [by, bx] : b.points) {
      const double dy = double(ay - by), dx = double(ax - bx);
      const double d2 = dy * dy + dx * dx;
      if (d2 < best) best = d2;
    }
    if (best > worst) worst = best;
  }
  return std::sqrt(worst);
}

struct Hausdorff {
  std::optional<double> ab, ba, sym;
};

inline Hausdorff hausdorff_symmetric(const ContourSet& a, const ContourSet& b) {
  Hausdorff hd;
  hd.ab = hausdorff_directed(a, b);
  hd.ba = hausdorff_directed(b, a);
  if (hd.ab && hd.ba) hd.sym = std::max(*hd.ab, *hd.ba);
  return hd;
}

struct ClassMetrics {
  int class_id{0};
  double dsc{0.0};
  Hausdorff hd;
};

struct CaseMetrics {
  std::vector<ClassMetrics> per_class;         // classes 1..K-1
  double mean_dsc{0.0};                        // unweighted over foreground classes
  std::optional<double> mean_hd_sym;           // over classes where defined
};

// Foreground DSC and symmetric HD per class. spacing converts HD from
// pixels to physical units when available.
inline CaseMetrics evaluate_case(const LabelMask& pred, const LabelMask& truth, int num_classes,
                                 double spacing = 1.0) {
  if (pred.h != truth.h || pred.w != truth.w)
    throw ShapeError("evaluate_case: prediction and truth extents differ");
  CaseMetrics out;
  double dsc_sum = 0.0, hd_sum = 0.0;
  int hd_count = 0;
  for (int c = 1; c < num_classes; ++c) {
    ClassMetrics m;
    m.class_id = c;
    m.dsc = dice_coefficient(truth, pred, c);
    m.hd = hausdorff_symmetric(extract_contour(truth, c), extract_contour(pred, c));
    if (spacing != 1.0) {
      for (auto* v : {&m.hd.ab, &m.hd.ba, &m.hd.sym})
        if (*v) *v = **v * spacing;
    }
    dsc_sum += m.dsc;
    if (m.hd.sym) {
      hd_sum += *m.hd.sym;
      ++hd_count;
    }
    out.per_class.push_back(m);
  }
  out.mean_dsc = dsc_sum / double(num_classes - 1);
  if (hd_count > 0) out.mean_hd_sym = hd_sum / double(hd_count);
  return out;
}

}  // namespace dadu
