#include "dfl/assigner.hpp"

#include <algorithm>

#include "dfl/errors.hpp"

namespace dfl {

namespace {

void check_thresholds(double pos, double neg) {
  if (!(0 <= neg && neg < pos && pos <= 1))
    throw InvalidThresholds("need 0 <= neg < pos <= 1, got neg=" +
                            std::to_string(neg) + " pos=" + std::to_string(pos));
}

bool out_of_bounds(const Box& b, double img_w, double img_h) {
  return b.x < 0 || b.y < 0 || b.x2() > img_w || b.y2() > img_h;
}

// Shared threshold labeling once discards are settled.
void label_by_overlap(std::vector<AnchorAssignment>& out,
                      std::span<const Anchor> anchors,
                      std::span<const Box> gt_boxes, double pos_thresh,
                      double neg_thresh) {
  for (auto& a : out) {
    if (a.label == AnchorLabel::discarded) continue;
    if (gt_boxes.empty()) {
      a.label = AnchorLabel::negative;
      continue;
    }
    Box abox = anchors[a.anchor_index].box();
    double best = -1;
    size_t best_gt = 0;
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      double v = iou(abox, gt_boxes[g]);
      if (v > best) {  // ties keep the lowest gt index
        best = v;
        best_gt = g;
      }
    }
    if (best > pos_thresh) {
      a.label = AnchorLabel::positive;
      a.gt_index = best_gt;
      a.target = encode(gt_boxes[best_gt], anchors[a.anchor_index]);
    } else if (best < neg_thresh) {
      a.label = AnchorLabel::negative;
    } else {
      a.label = AnchorLabel::ignored;
    }
  }
}

}  // namespace

std::vector<AnchorAssignment> assign_anchors(std::span<const Anchor> anchors,
                                             std::span<const Box> gt_boxes,
                                             double img_w, double img_h,
                                             double pos_thresh,
                                             double neg_thresh,
                                             bool force_gt_match) {
  check_thresholds(pos_thresh, neg_thresh);

  std::vector<AnchorAssignment> out(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) {
    out[i].anchor_index = i;
    if (out_of_bounds(anchors[i].box(), img_w, img_h))
      out[i].label = AnchorLabel::discarded;
  }
  label_by_overlap(out, anchors, gt_boxes, pos_thresh, neg_thresh);

  if (force_gt_match && !gt_boxes.empty()) {
    // Each gt claims its best in-bounds anchor; an anchor contested by two
    // gts keeps the higher overlap (ties toward the lower gt index).
    std::vector<double> forced_iou(anchors.size(), -1.0);
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      double best = -1;
      size_t best_a = anchors.size();
      for (size_t i = 0; i < anchors.size(); ++i) {
        if (out[i].label == AnchorLabel::discarded) continue;
        double v = iou(anchors[i].box(), gt_boxes[g]);
        if (v > best) {
          best = v;
          best_a = i;
        }
      }
      if (best_a == anchors.size()) continue;  // everything discarded
      auto& a = out[best_a];
      bool already_better =
          (a.label == AnchorLabel::positive) &&
          (forced_iou[best_a] < 0 ||  // threshold positive, keep it
           forced_iou[best_a] >= best);
      if (already_better) continue;
      a.label = AnchorLabel::positive;
      a.gt_index = g;
      a.target = encode(gt_boxes[g], anchors[best_a]);
      forced_iou[best_a] = best;
    }
  }
  return out;
}

RpnBatch sample_rpn_batch(std::span<const AnchorAssignment> assignments,
                          const SamplerConfig& cfg, Rng& rng) {
  if (cfg.rpn_pos < 1 || cfg.rpn_neg < 1)
    throw InvalidThresholds("rpn_pos and rpn_neg must be >= 1");

  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i].label == AnchorLabel::positive) pos.push_back(i);
    if (assignments[i].label == AnchorLabel::negative) neg.push_back(i);
  }
  if (neg.empty())
    throw NoNegatives("image yields zero negative anchors");

  size_t batch = (size_t)cfg.rpn_pos + (size_t)cfg.rpn_neg;
  size_t n_pos = std::min(pos.size(), (size_t)cfg.rpn_pos);
  size_t n_neg = std::min(neg.size(), batch - n_pos);

  RpnBatch out;
  for (size_t k : rng.sample_indices(pos.size(), n_pos))
    out.indices.push_back(pos[k]);
  for (size_t k : rng.sample_indices(neg.size(), n_neg))
    out.indices.push_back(neg[k]);
  out.n_cls = (int)out.indices.size();
  out.n_reg = (int)n_pos;
  return out;
}

ProposalBatch assign_and_sample_proposals(std::span<const Box> proposals,
                                          std::span<const Box> gt_boxes,
                                          const SamplerConfig& cfg, Rng& rng) {
  check_thresholds(cfg.cls_pos_iou, cfg.cls_neg_iou);
  if (cfg.cls_neg_per_pos < 1 || cfg.cls_batch < 1)
    throw InvalidThresholds("cls_neg_per_pos and cls_batch must be >= 1");

  ProposalBatch out;
  out.assignments.resize(proposals.size());
  std::vector<Anchor> refs(proposals.size());
  for (size_t i = 0; i < proposals.size(); ++i) {
    refs[i] = Anchor::from_box(proposals[i]);
    out.assignments[i].anchor_index = i;
  }
  label_by_overlap(out.assignments, refs, gt_boxes, cfg.cls_pos_iou,
                   cfg.cls_neg_iou);

  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < out.assignments.size(); ++i) {
    if (out.assignments[i].label == AnchorLabel::positive) pos.push_back(i);
    if (out.assignments[i].label == AnchorLabel::negative) neg.push_back(i);
  }

  size_t max_pos = (size_t)cfg.cls_batch / (size_t)(1 + cfg.cls_neg_per_pos);
  size_t n_pos = std::min(pos.size(), std::max<size_t>(max_pos, 1));
  n_pos = std::min(n_pos, (size_t)cfg.cls_batch);
  size_t neg_cap = n_pos * (size_t)cfg.cls_neg_per_pos;
  size_t n_neg = std::min({neg.size(), neg_cap, (size_t)cfg.cls_batch - n_pos});

  for (size_t k : rng.sample_indices(pos.size(), n_pos))
    out.sampled.push_back(pos[k]);
  for (size_t k : rng.sample_indices(neg.size(), n_neg))
    out.sampled.push_back(neg[k]);
  return out;
}

}  // namespace dfl
