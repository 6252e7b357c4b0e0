#pragma once

#include <array>
#include <span>
#include <vector>

namespace dfl {

// Axis-aligned rectangle, top-left corner convention: image origin at the
// top-left, x growing rightward, y growing downward. Boxes are continuous
// subpixel rectangles; area is w*h with no +1 pixel convention.
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + w / 2; }
  double cy() const { return y + h / 2; }
  double area() const { return w * h; }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - w / 2, cy - h / 2, w, h};
  }
};

// Reference box in center form, with its feature-grid provenance.
struct Anchor {
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;
  int row = -1;
  int col = -1;
  int tmpl = -1;

  Box box() const { return Box::from_center(cx, cy, w, h); }
  static Anchor from_box(const Box& b) {
    return Anchor{b.cx(), b.cy(), b.w, b.h, -1, -1, -1};
  }
};

// Dimensionless regression offsets relating a box to its reference box.
struct BoxDelta {
  double tx = 0;
  double ty = 0;
  double tw = 0;
  double th = 0;
};

// Scored box; tile_x/tile_y carry the source tile origin when the detection
// was produced from a tile of a larger frame.
struct Detection {
  Box box;
  double score = 0;
  double tile_x = 0;
  double tile_y = 0;
};

// Intersection over union in [0, 1]; 0 when both boxes are degenerate.
double iou(const Box& a, const Box& b);

struct AnchorGridSpec {
  int stride = 16;
  std::array<double, 3> areas{900.0, 2500.0, 4900.0};
  // width:height ratios, fixed template order 1:1, 2:1, 1:2
  std::array<double, 3> ratios{1.0, 2.0, 0.5};
};

// 9 anchors per feature cell: row-major cells, templates ordered by area
// ascending then ratio in the spec order above. Cell (r, c) is centered at
// ((c+0.5)*stride, (r+0.5)*stride).
std::vector<Anchor> generate_anchors(int feat_h, int feat_w,
                                     const AnchorGridSpec& spec = {});

// t = ((Pcx-Acx)/Aw, (Pcy-Acy)/Ah, log(Pw/Aw), log(Ph/Ah))
BoxDelta encode(const Box& p, const Anchor& a);

// Inverse of encode.
Box decode(const BoxDelta& t, const Anchor& a);

enum class ClipMode {
  discard,  // drop boxes crossing the image boundary
  clip,     // intersect with the image rectangle
};

std::vector<Box> clip_and_filter(std::span<const Box> boxes, double img_w,
                                 double img_h, ClipMode mode);

// Greedy non-maximum suppression: repeatedly keep the highest-score
// remaining detection and drop the rest with IoU strictly above the
// threshold. Ties break toward the lower original index. Output is in keep
// order (scores non-increasing).
std::vector<Detection> nms(std::span<const Detection> dets,
                           double iou_threshold);

}  // namespace dfl
