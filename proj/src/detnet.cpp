#include "dfl/detnet.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "dfl/errors.hpp"

namespace dfl {

Parameter& ParamSet::add(std::string name, Shape shape,
                         std::vector<double> value) {
  Parameter p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  size_t n = shape_numel(p.shape);
  if (value.empty()) value.assign(n, 0.0);
  if (value.size() != n)
    throw ShapeMismatch("parameter " + p.name + ": value size mismatch");
  p.value = std::move(value);
  p.velocity.assign(n, 0.0);
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParamSet::at(const std::string& name) {
  for (Parameter& p : params_)
    if (p.name == name) return p;
  throw ParseError("unknown parameter '" + name + "'");
}

const Parameter& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::vector<ParamRecord> ParamSet::to_records() const {
  std::vector<ParamRecord> recs;
  recs.reserve(params_.size());
  for (const Parameter& p : params_)
    recs.push_back(ParamRecord{p.name, p.shape, p.value});
  return recs;
}

void ParamSet::load_records(std::span<const ParamRecord> records) {
  for (Parameter& p : params_) {
    const ParamRecord* found = nullptr;
    for (const ParamRecord& r : records)
      if (r.name == p.name) {
        found = &r;
        break;
      }
    if (!found)
      throw ParseError("checkpoint lacks parameter '" + p.name + "'");
    if (found->shape != p.shape)
      throw ParseError("checkpoint parameter '" + p.name + "' has shape " +
                       shape_str(found->shape) + ", expected " +
                       shape_str(p.shape));
    p.value = found->values;
    std::fill(p.velocity.begin(), p.velocity.end(), 0.0);
  }
}

namespace {

std::vector<double> uniform_init(Rng& rng, size_t n, size_t fan_in) {
  double b = std::sqrt(1.0 / (double)fan_in);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-b, b);
  return v;
}

void add_conv(ParamSet& ps, Rng& rng, const std::string& name, size_t out_c,
              size_t in_c, size_t k) {
  Shape ws{out_c, in_c, k, k};
  ps.add(name + ".w", ws, uniform_init(rng, shape_numel(ws), in_c * k * k));
  ps.add(name + ".b", Shape{out_c}, {});
}

void add_linear(ParamSet& ps, Rng& rng, const std::string& name, size_t out_d,
                size_t in_d) {
  Shape ws{out_d, in_d};
  ps.add(name + ".w", ws, uniform_init(rng, shape_numel(ws), in_d));
  ps.add(name + ".b", Shape{out_d}, {});
}

constexpr int kBackboneWidths[5] = {8, 16, 32, 32, 64};
constexpr int kFusedChannels = 64;
constexpr int kStride = 16;

}  // namespace

ParamSet init_detector_params(const DetectorConfig& cfg) {
  Rng rng = Rng::derive(cfg.seed, 0);
  ParamSet ps;
  int in_c = 3;
  for (int i = 0; i < 5; ++i) {
    add_conv(ps, rng, "backbone.conv" + std::to_string(i + 1),
             kBackboneWidths[i], in_c, 3);
    in_c = kBackboneWidths[i];
  }
  if (cfg.use_skip) {
    add_conv(ps, rng, "fuse.reduce", 32, 64, 1);
  } else {
    add_conv(ps, rng, "fuse.noskip", 64, 64, 1);
  }
  add_conv(ps, rng, "rpn.conv", 64, kFusedChannels, 3);
  add_conv(ps, rng, "rpn.score", 9, 64, 1);
  add_conv(ps, rng, "rpn.delta", 36, 64, 1);
  size_t roi_dim = (size_t)kFusedChannels * cfg.roi_pool_size * cfg.roi_pool_size;
  add_linear(ps, rng, "cls.fc1", 256, roi_dim);
  add_linear(ps, rng, "cls.score", 1, 256);
  add_linear(ps, rng, "cls.delta", 4, 256);
  return ps;
}

BoundParams bind_params(Graph& g, ParamSet& params) {
  BoundParams bp;
  for (Parameter& p : params.all())
    bp.entries.emplace_back(&p, g.leaf(p.shape, p.value));
  return bp;
}

Tensor BoundParams::at(const std::string& name) const {
  for (const auto& [p, t] : entries)
    if (p->name == name) return t;
  throw ParseError("unbound parameter '" + name + "'");
}

BackboneOutput backbone_forward(Graph& g, Tensor image,
                                const BoundParams& bp) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 3)
    throw ShapeMismatch("backbone expects a 1x3xHxW image, got " +
                        shape_str(s));
  if (s[2] % 32 != 0 || s[3] % 32 != 0)
    throw ShapeMismatch("image extents must be divisible by 32, got " +
                        shape_str(s));

  Tensor x = image;
  Tensor c4;
  for (int i = 0; i < 5; ++i) {
    std::string name = "backbone.conv" + std::to_string(i + 1);
    x = g.conv2d(x, bp.at(name + ".w"), bp.at(name + ".b"), 1, 1);
    x = g.relu(x);
    x = g.maxpool2d(x, 2, 2);
    if (i == 3) c4 = x;
  }
  return BackboneOutput{c4, x};
}

Tensor skip_fuse(Graph& g, const BackboneOutput& out, const BoundParams& bp,
                 bool use_skip) {
  const Shape& s4 = out.c4.shape();
  const Shape& s5 = out.c5.shape();
  if (s5[2] * 2 != s4[2] || s5[3] * 2 != s4[3])
    throw ShapeMismatch("c5 spatial must be half of c4, got " + shape_str(s4) +
                        " vs " + shape_str(s5));
  Tensor up = g.upsample_nearest(out.c5, 2);
  if (use_skip) {
    Tensor reduced =
        g.conv2d(up, bp.at("fuse.reduce.w"), bp.at("fuse.reduce.b"), 1, 0);
    return g.concat_channels(out.c4, reduced);
  }
  return g.conv2d(up, bp.at("fuse.noskip.w"), bp.at("fuse.noskip.b"), 1, 0);
}

RpnOut rpn_head(Graph& g, Tensor fused, const BoundParams& bp) {
  Tensor h = g.relu(g.conv2d(fused, bp.at("rpn.conv.w"), bp.at("rpn.conv.b"),
                             1, 1));
  Tensor scores =
      g.sigmoid(g.conv2d(h, bp.at("rpn.score.w"), bp.at("rpn.score.b"), 1, 0));
  Tensor deltas =
      g.conv2d(h, bp.at("rpn.delta.w"), bp.at("rpn.delta.b"), 1, 0);
  return RpnOut{scores, deltas};
}

size_t rpn_score_index(size_t anchor_j, int feat_h, int feat_w) {
  size_t cell = anchor_j / 9;
  size_t k = anchor_j % 9;
  size_t r = cell / feat_w;
  size_t c = cell % feat_w;
  return (k * feat_h + r) * feat_w + c;
}

std::array<size_t, 4> rpn_delta_index(size_t anchor_j, int feat_h,
                                      int feat_w) {
  size_t cell = anchor_j / 9;
  size_t k = anchor_j % 9;
  size_t r = cell / feat_w;
  size_t c = cell % feat_w;
  std::array<size_t, 4> idx;
  for (size_t d = 0; d < 4; ++d)
    idx[d] = ((4 * k + d) * feat_h + r) * feat_w + c;
  return idx;
}

std::vector<Box> propose(std::span<const double> scores,
                         std::span<const double> deltas,
                         std::span<const Anchor> anchors, int feat_h,
                         int feat_w, double img_w, double img_h,
                         const DetectorConfig& cfg, ClipMode mode) {
  if (scores.size() != (size_t)9 * feat_h * feat_w ||
      deltas.size() != (size_t)36 * feat_h * feat_w ||
      anchors.size() != (size_t)9 * feat_h * feat_w)
    throw ShapeMismatch("propose: grid size mismatch");

  std::vector<Detection> cands;
  cands.reserve(anchors.size());
  for (size_t j = 0; j < anchors.size(); ++j) {
    auto di = rpn_delta_index(j, feat_h, feat_w);
    BoxDelta t{deltas[di[0]], deltas[di[1]], deltas[di[2]], deltas[di[3]]};
    Box b = decode(t, anchors[j]);
    if (mode == ClipMode::discard) {
      if (b.x < 0 || b.y < 0 || b.x2() > img_w || b.y2() > img_h) continue;
    } else {
      Box single[] = {b};
      b = clip_and_filter(single, img_w, img_h, ClipMode::clip)[0];
    }
    if (b.w < 1 || b.h < 1) continue;
    cands.push_back(Detection{b, scores[rpn_score_index(j, feat_h, feat_w)]});
  }

  std::stable_sort(cands.begin(), cands.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  if ((int)cands.size() > cfg.pre_nms_top_n) cands.resize(cfg.pre_nms_top_n);

  std::vector<Detection> kept = nms(cands, cfg.proposal_nms_iou);
  if ((int)kept.size() > cfg.post_nms_top_n) kept.resize(cfg.post_nms_top_n);

  std::vector<Box> out;
  out.reserve(kept.size());
  for (const Detection& d : kept) out.push_back(d.box);
  return out;
}

namespace {

class RoiPoolOp : public CustomOp {
 public:
  RoiPoolOp(std::vector<size_t> argmax) : argmax_(std::move(argmax)) {}
  const char* name() const override { return "roi_pool"; }
  void backward(Graph& g, std::span<const size_t> inputs,
                size_t output) override {
    auto gout = g.adjoint_of(output);
    auto gx = g.adjoint_accum(inputs[0]);
    for (size_t i = 0; i < gout.size(); ++i) gx[argmax_[i]] += gout[i];
  }

 private:
  std::vector<size_t> argmax_;
};

// Bin [start, end) over n cells from c0; an empty split borrows the left
// neighbor's last cell.
std::pair<int, int> roi_bin(int c0, int n, int out_size, int i) {
  int s = c0 + (int)((int64_t)i * n / out_size);
  int e = c0 + (int)((int64_t)(i + 1) * n / out_size);
  if (e == s) {
    s = std::max(c0, e - 1);
    e = s + 1;
  }
  return {s, e};
}

}  // namespace

Tensor roi_pool(Graph& g, Tensor featmap, const Box& box, int out_size,
                int stride) {
  const Shape& fs = featmap.shape();
  if (fs.size() != 4 || fs[0] != 1)
    throw ShapeMismatch("roi_pool expects a 1xCxHxW feature map");
  if (out_size < 1) throw ShapeMismatch("roi_pool: out_size must be >= 1");
  if (box.w < 1 || box.h < 1)
    throw DegenerateRoi("box " + std::to_string(box.w) + "x" +
                        std::to_string(box.h) + " is below one pixel");

  int C = (int)fs[1], Hf = (int)fs[2], Wf = (int)fs[3];
  double x0f = box.x / stride, x1f = box.x2() / stride;
  double y0f = box.y / stride, y1f = box.y2() / stride;
  int cx0 = std::clamp((int)std::floor(x0f), 0, Wf - 1);
  int cx1 = std::clamp((int)std::ceil(x1f), cx0 + 1, Wf);
  int cy0 = std::clamp((int)std::floor(y0f), 0, Hf - 1);
  int cy1 = std::clamp((int)std::ceil(y1f), cy0 + 1, Hf);
  int nx = cx1 - cx0, ny = cy1 - cy0;

  auto x = featmap.value();
  std::vector<double> out((size_t)C * out_size * out_size);
  std::vector<size_t> argmax(out.size());
  for (int c = 0; c < C; ++c) {
    const double* plane = x.data() + (size_t)c * Hf * Wf;
    for (int by = 0; by < out_size; ++by) {
      auto [ys, ye] = roi_bin(cy0, ny, out_size, by);
      for (int bx = 0; bx < out_size; ++bx) {
        auto [xs, xe] = roi_bin(cx0, nx, out_size, bx);
        size_t best = (size_t)ys * Wf + xs;
        double bv = plane[best];
        for (int yy = ys; yy < ye; ++yy) {
          for (int xx = xs; xx < xe; ++xx) {
            size_t idx = (size_t)yy * Wf + xx;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        }
        size_t o = ((size_t)c * out_size + by) * out_size + bx;
        out[o] = bv;
        argmax[o] = (size_t)c * Hf * Wf + best;
      }
    }
  }

  auto op = std::make_shared<RoiPoolOp>(std::move(argmax));
  Tensor in[] = {featmap};
  return g.custom(op, in, Shape{1, (size_t)C, (size_t)out_size,
                                (size_t)out_size},
                  std::move(out));
}

ClsOut classifier_head(Graph& g, Tensor roi_feats, const BoundParams& bp) {
  Tensor h = g.relu(g.linear(roi_feats, bp.at("cls.fc1.w"), bp.at("cls.fc1.b")));
  Tensor score = g.sigmoid(g.linear(h, bp.at("cls.score.w"), bp.at("cls.score.b")));
  Tensor delta = g.linear(h, bp.at("cls.delta.w"), bp.at("cls.delta.b"));
  return ClsOut{score, delta};
}

Tensor build_training_loss(Graph& g, Tensor image, std::span<const Box> gts,
                           const BoundParams& bp, const DetectorConfig& dcfg,
                           const SamplerConfig& scfg, const FocalConfig& fcfg,
                           Rng& rng, TrainPlan& plan) {
  const Shape& is = image.shape();
  double img_w = (double)is[3], img_h = (double)is[2];

  BackboneOutput bb = backbone_forward(g, image, bp);
  Tensor fused = skip_fuse(g, bb, bp, dcfg.use_skip);
  RpnOut rpn = rpn_head(g, fused, bp);
  int feat_h = (int)fused.shape()[2], feat_w = (int)fused.shape()[3];

  if (!plan.valid) {
    std::vector<Anchor> anchors = generate_anchors(feat_h, feat_w);
    std::vector<AnchorAssignment> assignments =
        assign_anchors(anchors, gts, img_w, img_h, scfg.pos_iou, scfg.neg_iou,
                       scfg.force_gt_match);
    RpnBatch batch = sample_rpn_batch(assignments, scfg, rng);
    for (size_t idx : batch.indices) {
      const AnchorAssignment& a = assignments[idx];
      RpnSample s;
      s.score_index = rpn_score_index(a.anchor_index, feat_h, feat_w);
      s.delta_index = rpn_delta_index(a.anchor_index, feat_h, feat_w);
      s.label = a.label == AnchorLabel::positive ? 1 : -1;
      s.target = a.target;
      plan.rpn_samples.push_back(s);
    }
    plan.rpn_weights =
        RpnLossWeights{dcfg.lambda_rpn, batch.n_cls, batch.n_reg};

    std::vector<Box> proposals =
        propose(rpn.scores.value(), rpn.deltas.value(), anchors, feat_h,
                feat_w, img_w, img_h, dcfg, ClipMode::discard);
    ProposalBatch pb = assign_and_sample_proposals(proposals, gts, scfg, rng);
    for (size_t idx : pb.sampled) {
      const AnchorAssignment& a = pb.assignments[idx];
      plan.cls_samples.push_back(TrainPlan::ClsSample{
          proposals[idx], a.label == AnchorLabel::positive ? 1 : -1,
          a.target});
    }
    plan.valid = true;
  }

  Tensor total = rpn_loss(g, rpn.scores, rpn.deltas, plan.rpn_samples,
                          plan.rpn_weights, fcfg, dcfg.use_focal_rpn);
  for (const TrainPlan::ClsSample& s : plan.cls_samples) {
    Tensor roi = roi_pool(g, fused, s.proposal, dcfg.roi_pool_size, kStride);
    ClsOut head = classifier_head(g, roi, bp);
    Tensor closs = classifier_loss(g, head.score, head.delta, s.label,
                                   s.target, dcfg.lambda_cls, fcfg,
                                   dcfg.use_focal_cls);
    total = g.add(total, closs);
  }
  return total;
}

Detector::Detector(const DetectorConfig& cfg, const SamplerConfig& sampler,
                   const FocalConfig& focal)
    : cfg_(cfg), sampler_(sampler), focal_(focal),
      params_(init_detector_params(cfg)) {}

double Detector::train_step(const PixelImage& image,
                            std::span<const Box> gt_boxes) {
  Graph g;
  Tensor img = g.leaf(Shape{1, 3, (size_t)image.height, (size_t)image.width},
                      image.values);
  BoundParams bp = bind_params(g, params_);
  // Sampling stream: sampler seed plus the per-image step counter.
  Rng rng = Rng::derive(sampler_.seed, 1 + (uint64_t)step_);
  TrainPlan plan;
  Tensor loss = build_training_loss(g, img, gt_boxes, bp, cfg_, sampler_,
                                    focal_, rng, plan);
  double loss_v = loss.value()[0];
  if (!std::isfinite(loss_v))
    throw NonFiniteValue("training loss at step " + std::to_string(step_));
  g.backward(loss);

  for (auto& [p, t] : bp.entries) {
    auto grad = t.grad();
    for (size_t i = 0; i < p->value.size(); ++i) {
      p->velocity[i] = cfg_.momentum * p->velocity[i] + grad[i];
      p->value[i] -= cfg_.learning_rate * p->velocity[i];
    }
  }
  ++step_;
  return loss_v;
}

std::vector<Detection> Detector::detect(const PixelImage& image) const {
  Graph g;
  Tensor img = g.leaf(Shape{1, 3, (size_t)image.height, (size_t)image.width},
                      image.values);
  // Forward only; leaves copy the parameter values.
  BoundParams bp = bind_params(g, const_cast<ParamSet&>(params_));
  BackboneOutput bb = backbone_forward(g, img, bp);
  Tensor fused = skip_fuse(g, bb, bp, cfg_.use_skip);
  RpnOut rpn = rpn_head(g, fused, bp);
  int feat_h = (int)fused.shape()[2], feat_w = (int)fused.shape()[3];
  double img_w = image.width, img_h = image.height;

  std::vector<Anchor> anchors = generate_anchors(feat_h, feat_w);
  std::vector<Box> proposals =
      propose(rpn.scores.value(), rpn.deltas.value(), anchors, feat_h, feat_w,
              img_w, img_h, cfg_, ClipMode::clip);

  std::vector<Detection> scored;
  for (const Box& prop : proposals) {
    Tensor roi = roi_pool(g, fused, prop, cfg_.roi_pool_size, kStride);
    ClsOut head = classifier_head(g, roi, bp);
    double p = head.score.value()[0];
    auto dv = head.delta.value();
    Box refined = decode(BoxDelta{dv[0], dv[1], dv[2], dv[3]},
                         Anchor::from_box(prop));
    Box single[] = {refined};
    refined = clip_and_filter(single, img_w, img_h, ClipMode::clip)[0];
    if (p < cfg_.score_thresh) continue;
    scored.push_back(Detection{refined, p});
  }
  return nms(scored, cfg_.final_nms_iou);
}

std::vector<Detection> detect_tiled(const Detector& det,
                                    const PixelImage& frame, int tile_w,
                                    int tile_h) {
  ImageRecord rec;
  rec.width = frame.width;
  rec.height = frame.height;
  std::vector<Tile> tiles = tile_image(rec, tile_w, tile_h);

  std::vector<Detection> merged;
  for (const Tile& t : tiles) {
    PixelImage patch = crop(frame, (int)t.x0, (int)t.y0, t.width, t.height);
    PixelImage padded = pad_to_multiple(patch, 32);
    for (Detection d : det.detect(padded)) {
      d.tile_x = t.x0;
      d.tile_y = t.y0;
      d.box.x += t.x0;
      d.box.y += t.y0;
      merged.push_back(d);
    }
  }
  return nms(merged, det.config().final_nms_iou);
}

}  // namespace dfl
