#include "dfl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "dfl/errors.hpp"

namespace dfl {

namespace {

void check_focal_cfg(const FocalConfig& cfg) {
  if (cfg.gamma < 0)
    throw InvalidThresholds("gamma must be >= 0, got " + std::to_string(cfg.gamma));
  if (!(cfg.prob_epsilon > 0) || !(cfg.prob_epsilon < 0.5))
    throw InvalidThresholds("prob_epsilon must lie in (0, 0.5), got " +
                            std::to_string(cfg.prob_epsilon));
}

// p_t and whether the clamp was active (gradient is 0 there).
std::pair<double, bool> prob_true_class(double p, int y, const FocalConfig& cfg) {
  double pt = (y == 1) ? p : 1.0 - p;
  double clamped = std::clamp(pt, cfg.prob_epsilon, 1.0 - cfg.prob_epsilon);
  return {clamped, clamped != pt};
}

}  // namespace

double ce_loss(double p, int y, const FocalConfig& cfg) {
  check_focal_cfg(cfg);
  auto [pt, _] = prob_true_class(p, y, cfg);
  return -std::log(pt);
}

double ce_loss_dp(double p, int y, const FocalConfig& cfg) {
  check_focal_cfg(cfg);
  auto [pt, clamped] = prob_true_class(p, y, cfg);
  if (clamped) return 0.0;
  double d_pt = -1.0 / pt;
  return (y == 1) ? d_pt : -d_pt;
}

double focal_loss(double p, int y, const FocalConfig& cfg) {
  check_focal_cfg(cfg);
  auto [pt, _] = prob_true_class(p, y, cfg);
  return -std::pow(1.0 - pt, cfg.gamma) * std::log(pt);
}

double focal_loss_dp(double p, int y, const FocalConfig& cfg) {
  check_focal_cfg(cfg);
  auto [pt, clamped] = prob_true_class(p, y, cfg);
  if (clamped) return 0.0;
  double d_pt;
  if (cfg.gamma == 0.0) {
    d_pt = -1.0 / pt;
  } else {
    d_pt = cfg.gamma * std::pow(1.0 - pt, cfg.gamma - 1.0) * std::log(pt) -
           std::pow(1.0 - pt, cfg.gamma) / pt;
  }
  return (y == 1) ? d_pt : -d_pt;
}

double smooth_l1(double x) {
  double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_dx(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0 ? 1.0 : -1.0;
}

namespace {

double cls_term(double p, int y, const FocalConfig& cfg, bool use_focal) {
  return use_focal ? focal_loss(p, y, cfg) : ce_loss(p, y, cfg);
}

double cls_term_dp(double p, int y, const FocalConfig& cfg, bool use_focal) {
  return use_focal ? focal_loss_dp(p, y, cfg) : ce_loss_dp(p, y, cfg);
}

void check_weights(const RpnLossWeights& w, size_t n_samples, int n_pos) {
  if (!(w.lambda_reg > 0))
    throw InvalidThresholds("lambda_reg must be > 0");
  if (w.n_cls < 1 || (size_t)w.n_cls != n_samples)
    throw ShapeMismatch("rpn_loss: n_cls=" + std::to_string(w.n_cls) +
                        " but batch has " + std::to_string(n_samples) +
                        " samples");
  if (w.n_reg != n_pos)
    throw ShapeMismatch("rpn_loss: n_reg=" + std::to_string(w.n_reg) +
                        " but batch has " + std::to_string(n_pos) +
                        " positives");
}

}  // namespace

double rpn_loss_value(std::span<const RpnSampleValue> samples,
                      const RpnLossWeights& weights, const FocalConfig& cfg,
                      bool use_focal) {
  int n_pos = 0;
  for (const auto& s : samples)
    if (s.label == 1) ++n_pos;
  check_weights(weights, samples.size(), n_pos);

  double cls_sum = 0, reg_sum = 0;
  for (const auto& s : samples) {
    cls_sum += cls_term(s.p, s.label, cfg, use_focal);
    if (s.label == 1) {
      if (!s.t || !s.t_star)
        throw MissingRegressionTarget("positive sample lacks t or t*");
      reg_sum += smooth_l1(s.t->tx - s.t_star->tx) +
                 smooth_l1(s.t->ty - s.t_star->ty) +
                 smooth_l1(s.t->tw - s.t_star->tw) +
                 smooth_l1(s.t->th - s.t_star->th);
    }
  }
  double loss = cls_sum / weights.n_cls;
  if (weights.n_reg > 0)
    loss += weights.lambda_reg * reg_sum / weights.n_reg;
  return loss;
}

double classifier_loss_value(double p, int label,
                             const std::optional<BoxDelta>& t,
                             const std::optional<BoxDelta>& t_star,
                             double lambda2, const FocalConfig& cfg,
                             bool use_focal) {
  double loss = cls_term(p, label, cfg, use_focal);
  if (label == 1) {
    if (!t || !t_star)
      throw MissingRegressionTarget("positive candidate lacks T or T*");
    loss += lambda2 * (smooth_l1(t->tx - t_star->tx) +
                       smooth_l1(t->ty - t_star->ty) +
                       smooth_l1(t->tw - t_star->tw) +
                       smooth_l1(t->th - t_star->th));
  }
  return loss;
}

namespace {

class RpnLossOp : public CustomOp {
 public:
  RpnLossOp(std::vector<RpnSample> samples, RpnLossWeights weights,
            FocalConfig cfg, bool use_focal)
      : samples_(std::move(samples)),
        weights_(weights),
        cfg_(cfg),
        use_focal_(use_focal) {}

  const char* name() const override { return "rpn_loss"; }

  double forward(std::span<const double> scores, std::span<const double> deltas) {
    double cls_sum = 0, reg_sum = 0;
    for (const auto& s : samples_) {
      cls_sum += cls_term(scores[s.score_index], s.label, cfg_, use_focal_);
      if (s.label == 1) {
        const BoxDelta& ts = *s.target;
        reg_sum += smooth_l1(deltas[s.delta_index[0]] - ts.tx) +
                   smooth_l1(deltas[s.delta_index[1]] - ts.ty) +
                   smooth_l1(deltas[s.delta_index[2]] - ts.tw) +
                   smooth_l1(deltas[s.delta_index[3]] - ts.th);
      }
    }
    double loss = cls_sum / weights_.n_cls;
    if (weights_.n_reg > 0)
      loss += weights_.lambda_reg * reg_sum / weights_.n_reg;
    return loss;
  }

  void backward(Graph& g, std::span<const size_t> inputs,
                size_t output) override {
    double gout = g.adjoint_of(output)[0];
    auto scores = g.value(inputs[0]);
    auto deltas = g.value(inputs[1]);
    auto gscores = g.adjoint_accum(inputs[0]);
    auto gdeltas = g.adjoint_accum(inputs[1]);
    double cls_scale = gout / weights_.n_cls;
    double reg_scale =
        weights_.n_reg > 0 ? gout * weights_.lambda_reg / weights_.n_reg : 0.0;
    for (const auto& s : samples_) {
      gscores[s.score_index] +=
          cls_scale * cls_term_dp(scores[s.score_index], s.label, cfg_, use_focal_);
      if (s.label == 1) {
        const BoxDelta& ts = *s.target;
        gdeltas[s.delta_index[0]] +=
            reg_scale * smooth_l1_dx(deltas[s.delta_index[0]] - ts.tx);
        gdeltas[s.delta_index[1]] +=
            reg_scale * smooth_l1_dx(deltas[s.delta_index[1]] - ts.ty);
        gdeltas[s.delta_index[2]] +=
            reg_scale * smooth_l1_dx(deltas[s.delta_index[2]] - ts.tw);
        gdeltas[s.delta_index[3]] +=
            reg_scale * smooth_l1_dx(deltas[s.delta_index[3]] - ts.th);
      }
    }
  }

 private:
  std::vector<RpnSample> samples_;
  RpnLossWeights weights_;
  FocalConfig cfg_;
  bool use_focal_;
};

class ClassifierLossOp : public CustomOp {
 public:
  ClassifierLossOp(int label, std::optional<BoxDelta> target, double lambda2,
                   FocalConfig cfg, bool use_focal)
      : label_(label),
        target_(target),
        lambda2_(lambda2),
        cfg_(cfg),
        use_focal_(use_focal) {}

  const char* name() const override { return "classifier_loss"; }

  double forward(double p, std::span<const double> delta) const {
    double loss = cls_term(p, label_, cfg_, use_focal_);
    if (label_ == 1) {
      loss += lambda2_ * (smooth_l1(delta[0] - target_->tx) +
                          smooth_l1(delta[1] - target_->ty) +
                          smooth_l1(delta[2] - target_->tw) +
                          smooth_l1(delta[3] - target_->th));
    }
    return loss;
  }

  void backward(Graph& g, std::span<const size_t> inputs,
                size_t output) override {
    double gout = g.adjoint_of(output)[0];
    double p = g.value(inputs[0])[0];
    auto delta = g.value(inputs[1]);
    g.adjoint_accum(inputs[0])[0] +=
        gout * cls_term_dp(p, label_, cfg_, use_focal_);
    if (label_ == 1) {
      auto gdelta = g.adjoint_accum(inputs[1]);
      gdelta[0] += gout * lambda2_ * smooth_l1_dx(delta[0] - target_->tx);
      gdelta[1] += gout * lambda2_ * smooth_l1_dx(delta[1] - target_->ty);
      gdelta[2] += gout * lambda2_ * smooth_l1_dx(delta[2] - target_->tw);
      gdelta[3] += gout * lambda2_ * smooth_l1_dx(delta[3] - target_->th);
    }
  }

 private:
  int label_;
  std::optional<BoxDelta> target_;
  double lambda2_;
  FocalConfig cfg_;
  bool use_focal_;
};

}  // namespace

Tensor rpn_loss(Graph& g, Tensor scores, Tensor deltas,
                std::span<const RpnSample> samples,
                const RpnLossWeights& weights, const FocalConfig& cfg,
                bool use_focal) {
  check_focal_cfg(cfg);
  int n_pos = 0;
  size_t ns = scores.numel();
  size_t nd = deltas.numel();
  for (const auto& s : samples) {
    if (s.score_index >= ns)
      throw ShapeMismatch("rpn_loss: score index out of range");
    for (size_t di : s.delta_index)
      if (di >= nd) throw ShapeMismatch("rpn_loss: delta index out of range");
    if (s.label == 1) {
      if (!s.target)
        throw MissingRegressionTarget("positive anchor sample lacks t*");
      ++n_pos;
    }
  }
  check_weights(weights, samples.size(), n_pos);

  auto op = std::make_shared<RpnLossOp>(
      std::vector<RpnSample>(samples.begin(), samples.end()), weights, cfg,
      use_focal);
  double loss = op->forward(scores.value(), deltas.value());
  Tensor in[] = {scores, deltas};
  return g.custom(op, in, Shape{1}, {loss});
}

Tensor classifier_loss(Graph& g, Tensor score, Tensor delta, int label,
                       const std::optional<BoxDelta>& target, double lambda2,
                       const FocalConfig& cfg, bool use_focal) {
  check_focal_cfg(cfg);
  if (score.numel() != 1)
    throw ShapeMismatch("classifier_loss: score must be scalar, shape " +
                        shape_str(score.shape()));
  if (delta.numel() != 4)
    throw ShapeMismatch("classifier_loss: delta must have 4 entries, shape " +
                        shape_str(delta.shape()));
  if (label == 1 && !target)
    throw MissingRegressionTarget("positive candidate lacks T*");

  auto op = std::make_shared<ClassifierLossOp>(label, target, lambda2, cfg,
                                               use_focal);
  double loss = op->forward(score.value()[0], delta.value());
  Tensor in[] = {score, delta};
  return g.custom(op, in, Shape{1}, {loss});
}

}  // namespace dfl
