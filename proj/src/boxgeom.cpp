#include "dfl/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfl/errors.hpp"

namespace dfl {

double iou(const Box& a, const Box& b) {
  double ix = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  double iy = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

std::vector<Anchor> generate_anchors(int feat_h, int feat_w,
                                     const AnchorGridSpec& spec) {
  if (feat_h < 1 || feat_w < 1)
    throw InvalidGrid("feature extents must be >= 1, got " +
                      std::to_string(feat_h) + "x" + std::to_string(feat_w));
  if (spec.stride < 1)
    throw InvalidGrid("stride must be >= 1, got " + std::to_string(spec.stride));

  // Template order: area ascending, then ratio in spec order.
  std::array<std::pair<double, double>, 9> templates;  // (w, h)
  int t = 0;
  for (double area : spec.areas)
    for (double ratio : spec.ratios)
      templates[t++] = {std::sqrt(area * ratio), std::sqrt(area / ratio)};

  std::vector<Anchor> anchors;
  anchors.reserve(9u * feat_h * feat_w);
  for (int r = 0; r < feat_h; ++r) {
    for (int c = 0; c < feat_w; ++c) {
      double cx = (c + 0.5) * spec.stride;
      double cy = (r + 0.5) * spec.stride;
      for (int k = 0; k < 9; ++k)
        anchors.push_back(Anchor{cx, cy, templates[k].first,
                                 templates[k].second, r, c, k});
    }
  }
  return anchors;
}

BoxDelta encode(const Box& p, const Anchor& a) {
  if (!(p.w > 0) || !(p.h > 0))
    throw DegenerateBox("encode requires positive extents, got w=" +
                        std::to_string(p.w) + " h=" + std::to_string(p.h));
  if (!(a.w > 0) || !(a.h > 0))
    throw DegenerateBox("reference box must have positive extents");
  return BoxDelta{(p.cx() - a.cx) / a.w, (p.cy() - a.cy) / a.h,
                  std::log(p.w / a.w), std::log(p.h / a.h)};
}

Box decode(const BoxDelta& t, const Anchor& a) {
  double cx = t.tx * a.w + a.cx;
  double cy = t.ty * a.h + a.cy;
  double w = a.w * std::exp(t.tw);
  double h = a.h * std::exp(t.th);
  return Box::from_center(cx, cy, w, h);
}

std::vector<Box> clip_and_filter(std::span<const Box> boxes, double img_w,
                                 double img_h, ClipMode mode) {
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const Box& b : boxes) {
    if (mode == ClipMode::discard) {
      if (b.x < 0 || b.y < 0 || b.x2() > img_w || b.y2() > img_h) continue;
      out.push_back(b);
    } else {
      double x1 = std::clamp(b.x, 0.0, img_w);
      double y1 = std::clamp(b.y, 0.0, img_h);
      double x2 = std::clamp(b.x2(), 0.0, img_w);
      double y2 = std::clamp(b.y2(), 0.0, img_h);
      out.push_back(Box{x1, y1, std::max(0.0, x2 - x1), std::max(0.0, y2 - y1)});
    }
  }
  return out;
}

std::vector<Detection> nms(std::span<const Detection> dets,
                           double iou_threshold) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  std::vector<Detection> kept;
  std::vector<bool> removed(dets.size(), false);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      size_t j = order[oj];
      if (removed[j]) continue;
      if (iou(dets[i].box, dets[j].box) > iou_threshold) removed[j] = true;
    }
  }
  return kept;
}

}  // namespace dfl
