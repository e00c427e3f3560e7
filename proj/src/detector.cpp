#include "insetopt/detector.hpp"

#include <algorithm>
#include <cmath>

namespace insetopt {

namespace {

// Expand a tight box to the minimum size, keeping it inside [0,h)x[0,w).
BBox expand_clip(BBox box, int h, int w) {
  if (box.height < kMinBoxSize) {
    const int grow = kMinBoxSize - box.height;
    box.row -= grow / 2;
    box.height = kMinBoxSize;
  }
  if (box.width < kMinBoxSize) {
    const int grow = kMinBoxSize - box.width;
    box.col -= grow / 2;
    box.width = kMinBoxSize;
  }
  box.row = std::clamp(box.row, 0, h - box.height);
  box.col = std::clamp(box.col, 0, w - box.width);
  return box;
}

}  // namespace

std::vector<BBox> detect_bboxes(const Tensor& canvas, double threshold) {
  if (canvas.rank() != 3 || canvas.dim(0) < 4)
    throw std::invalid_argument("detect_bbox: image has no marker channel (need >= 4 channels)");
  const int h = canvas.dim(1), w = canvas.dim(2);
  const int marker = canvas.dim(0) - 1;
  const double* m = canvas.data().data() + static_cast<std::int64_t>(marker) * h * w;

  // connected components (4-neighborhood) over the thresholded marker
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<BBox> boxes;
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (m[start] <= threshold || label[start] >= 0) continue;
    const int id = static_cast<int>(boxes.size());
    int r0 = h, r1 = -1, c0 = w, c1 = -1;
    stack.assign(1, start);
    label[start] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int i = p / w, j = p % w;
      r0 = std::min(r0, i);
      r1 = std::max(r1, i);
      c0 = std::min(c0, j);
      c1 = std::max(c1, j);
      const int nb[4] = {p - w, p + w, (j > 0) ? p - 1 : -1, (j + 1 < w) ? p + 1 : -1};
      for (int q : nb) {
        if (q < 0 || q >= h * w) continue;
        if (m[q] > threshold && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    boxes.push_back(expand_clip(BBox{r0, c0, r1 - r0 + 1, c1 - c0 + 1}, h, w));
  }
  if (boxes.empty()) throw NoInsetRegion();
  std::sort(boxes.begin(), boxes.end(),
            [](const BBox& a, const BBox& b) { return a.col < b.col; });
  return boxes;
}

BBox detect_bbox(const Tensor& canvas, double threshold) {
  std::vector<BBox> boxes = detect_bboxes(canvas, threshold);
  // single-region contract: with several components, take the largest
  return *std::max_element(boxes.begin(), boxes.end(),
                           [](const BBox& a, const BBox& b) { return a.area() < b.area(); });
}

BBox lerp_bbox(const BBox& b_start, const BBox& b_end, double f) {
  if (f < 0.0 || f > 1.0)
    throw std::invalid_argument("lerp_bbox: f must be in [0,1], got " + std::to_string(f));
  auto mix = [f](int a, int b) {
    return static_cast<int>(std::llround(a + f * (static_cast<double>(b) - a)));
  };
  return BBox{mix(b_start.row, b_end.row), mix(b_start.col, b_end.col),
              mix(b_start.height, b_end.height), mix(b_start.width, b_end.width)};
}

}  // namespace insetopt
