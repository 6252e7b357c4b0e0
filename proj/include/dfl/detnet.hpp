#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfl/assigner.hpp"
#include "dfl/boxgeom.hpp"
#include "dfl/datapipe.hpp"
#include "dfl/losses.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

struct DetectorConfig {
  int pre_nms_top_n = 1000;
  int post_nms_top_n = 100;
  double proposal_nms_iou = 0.7;
  double final_nms_iou = 0.3;
  double score_thresh = 0.5;
  int roi_pool_size = 7;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int steps = 200;
  uint64_t seed = 1;
  bool use_focal_rpn = true;
  bool use_focal_cls = true;
  bool use_skip = true;
  double lambda_rpn = 15.0;  // regression weight in the RPN objective
  double lambda_cls = 1.0;   // regression weight in the classifier objective
};

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> velocity;  // SGD momentum state
};

class ParamSet {
 public:
  Parameter& add(std::string name, Shape shape, std::vector<double> value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  std::span<Parameter> all() { return params_; }
  std::span<const Parameter> all() const { return params_; }
  size_t size() const { return params_.size(); }

  std::vector<ParamRecord> to_records() const;
  // Replaces values; every parameter must be present with matching shape.
  void load_records(std::span<const ParamRecord> records);

 private:
  std::vector<Parameter> params_;
};

// Seeded uniform(-b, b) with b = sqrt(1/fan_in); biases zero. The layout
// depends on use_skip and roi_pool_size.
ParamSet init_detector_params(const DetectorConfig& cfg);

// Per-graph binding of parameters as leaves, in ParamSet order.
struct BoundParams {
  std::vector<std::pair<Parameter*, Tensor>> entries;
  Tensor at(const std::string& name) const;
};
BoundParams bind_params(Graph& g, ParamSet& params);

struct BackboneOutput {
  Tensor c4;  // stride 16, 32 channels
  Tensor c5;  // stride 32, 64 channels
};

// Five conv(3x3, stride 1, pad 1) + relu + maxpool(2,2) stages with widths
// 8, 16, 32, 32, 64. Input 1x3xHxW with H, W divisible by 32.
BackboneOutput backbone_forward(Graph& g, Tensor image, const BoundParams& bp);

// use_skip: upsample c5, reduce 64->32 with a 1x1 conv, concat with c4.
// Otherwise a single 1x1 conv of the upsampled c5 (64 channels).
Tensor skip_fuse(Graph& g, const BackboneOutput& out, const BoundParams& bp,
                 bool use_skip);

struct RpnOut {
  Tensor scores;  // 1x9xHxW sigmoid objectness, channel k = template k
  Tensor deltas;  // 1x36xHxW, channels 4k..4k+3 = (tx, ty, tw, th)
};
RpnOut rpn_head(Graph& g, Tensor fused, const BoundParams& bp);

// Flat index helpers into the RPN output tensors for anchor j of a
// feat_h x feat_w grid (anchors in generate_anchors order).
size_t rpn_score_index(size_t anchor_j, int feat_h, int feat_w);
std::array<size_t, 4> rpn_delta_index(size_t anchor_j, int feat_h, int feat_w);

// decode + clip/discard + min-size filter + score top-k + NMS + top-k.
std::vector<Box> propose(std::span<const double> scores,
                         std::span<const double> deltas,
                         std::span<const Anchor> anchors, int feat_h,
                         int feat_w, double img_w, double img_h,
                         const DetectorConfig& cfg, ClipMode mode);

// Max pooling of the box (image coordinates, divided by stride) into an
// out_size x out_size grid per channel; gradient routes to each bin's
// argmax cell.
Tensor roi_pool(Graph& g, Tensor featmap, const Box& box, int out_size,
                int stride = 16);

struct ClsOut {
  Tensor score;  // shape {1}, sigmoid
  Tensor delta;  // shape {4}, offsets relative to the proposal
};
ClsOut classifier_head(Graph& g, Tensor roi_feats, const BoundParams& bp);

// Decisions captured on the first build so the same scalar can be rebuilt
// at perturbed parameters (finite-difference checks).
struct TrainPlan {
  bool valid = false;
  std::vector<RpnSample> rpn_samples;
  RpnLossWeights rpn_weights;
  struct ClsSample {
    Box proposal;
    int label = -1;
    std::optional<BoxDelta> target;
  };
  std::vector<ClsSample> cls_samples;
};

Tensor build_training_loss(Graph& g, Tensor image, std::span<const Box> gts,
                           const BoundParams& bp, const DetectorConfig& dcfg,
                           const SamplerConfig& scfg, const FocalConfig& fcfg,
                           Rng& rng, TrainPlan& plan);

class Detector {
 public:
  Detector(const DetectorConfig& cfg, const SamplerConfig& sampler,
           const FocalConfig& focal);

  // One forward/backward/update pass; returns the scalar loss.
  double train_step(const PixelImage& image, std::span<const Box> gt_boxes);

  std::vector<Detection> detect(const PixelImage& image) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const DetectorConfig& config() const { return cfg_; }
  int steps_taken() const { return step_; }

 private:
  DetectorConfig cfg_;
  SamplerConfig sampler_;
  FocalConfig focal_;
  ParamSet params_;
  int step_ = 0;
};

// Tiles a large frame, detects per tile, and maps detections back into
// frame coordinates (tile_x/tile_y carry the origin); overlapping results
// are merged with a final NMS pass.
std::vector<Detection> detect_tiled(const Detector& det,
                                    const PixelImage& frame, int tile_w,
                                    int tile_h);

}  // namespace dfl
