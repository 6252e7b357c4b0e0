#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dfl/boxgeom.hpp"
#include "dfl/rng.hpp"

namespace dfl {

enum class AnchorLabel { positive, negative, ignored, discarded };

struct AnchorAssignment {
  size_t anchor_index = 0;
  AnchorLabel label = AnchorLabel::ignored;
  std::optional<size_t> gt_index;   // present iff positive
  std::optional<BoxDelta> target;   // present iff positive
};

struct SamplerConfig {
  int rpn_pos = 64;
  int rpn_neg = 64;
  int cls_neg_per_pos = 3;
  int cls_batch = 128;
  uint64_t seed = 0;
  double pos_iou = 0.7;
  double neg_iou = 0.1;
  // Second-stage thresholds default to the first-stage values.
  double cls_pos_iou = 0.7;
  double cls_neg_iou = 0.1;
  bool force_gt_match = false;
};

// Labels every anchor: boundary-exceeding anchors are discarded before any
// IoU is computed; the rest compare their best ground-truth overlap against
// the thresholds (strict > for positive, strict < for negative, the band in
// between is ignored). With force_gt_match, each ground truth additionally
// claims its best in-bounds anchor as positive.
std::vector<AnchorAssignment> assign_anchors(
    std::span<const Anchor> anchors, std::span<const Box> gt_boxes,
    double img_w, double img_h, double pos_thresh = 0.7,
    double neg_thresh = 0.1, bool force_gt_match = false);

struct RpnBatch {
  std::vector<size_t> indices;  // into the assignment sequence
  int n_cls = 0;
  int n_reg = 0;
};

// min(rpn_pos, #positives) positives, topped up with negatives to
// rpn_pos + rpn_neg.
RpnBatch sample_rpn_batch(std::span<const AnchorAssignment> assignments,
                          const SamplerConfig& cfg, Rng& rng);

struct ProposalBatch {
  std::vector<AnchorAssignment> assignments;
  std::vector<size_t> sampled;
};

// Stage-two labeling and sampling: the proposal itself is the reference box
// for the regression target; negatives are capped at cls_neg_per_pos per
// positive and the batch at cls_batch.
ProposalBatch assign_and_sample_proposals(std::span<const Box> proposals,
                                          std::span<const Box> gt_boxes,
                                          const SamplerConfig& cfg, Rng& rng);

}  // namespace dfl
