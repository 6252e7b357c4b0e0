#pragma once

#include <array>
#include <optional>
#include <span>

#include "dfl/boxgeom.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

struct FocalConfig {
  double gamma = 2.0;
  double prob_epsilon = 1e-7;  // clamp bound for p_t before any log
};

struct RpnLossWeights {
  double lambda_reg = 15.0;
  int n_cls = 1;  // sampled anchors in the batch
  int n_reg = 0;  // positive anchors in the batch
};

// Binary cross entropy over p_t = p (y=+1) or 1-p (y=-1), post-clamp.
double ce_loss(double p, int y, const FocalConfig& cfg = {});
double ce_loss_dp(double p, int y, const FocalConfig& cfg = {});

// -(1 - p_t)^gamma * log(p_t). gamma = 0 recovers cross entropy.
double focal_loss(double p, int y, const FocalConfig& cfg = {});
double focal_loss_dp(double p, int y, const FocalConfig& cfg = {});

// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
double smooth_l1(double x);
double smooth_l1_dx(double x);

// Value-level sample for the standalone loss evaluators.
struct RpnSampleValue {
  double p = 0.5;
  int label = -1;  // +1 positive, -1 negative
  std::optional<BoxDelta> t;
  std::optional<BoxDelta> t_star;
};

double rpn_loss_value(std::span<const RpnSampleValue> samples,
                      const RpnLossWeights& weights, const FocalConfig& cfg,
                      bool use_focal = true);

double classifier_loss_value(double p, int label,
                             const std::optional<BoxDelta>& t,
                             const std::optional<BoxDelta>& t_star,
                             double lambda2, const FocalConfig& cfg,
                             bool use_focal = true);

// Graph-node sample: indices into the RPN head's score and delta tensors.
struct RpnSample {
  size_t score_index = 0;
  std::array<size_t, 4> delta_index{};
  int label = -1;
  std::optional<BoxDelta> target;  // present exactly for positives
};

// Builds the RPN objective as a scalar node:
//   (1/N_cls) sum_i FL(p_i, y_i) + lambda (1/N_reg) sum_pos smooth_l1 terms
// The regression sum is 0 when n_reg == 0.
Tensor rpn_loss(Graph& g, Tensor scores, Tensor deltas,
                std::span<const RpnSample> samples,
                const RpnLossWeights& weights, const FocalConfig& cfg,
                bool use_focal = true);

// Per-candidate second-stage objective as a scalar node:
//   FL(p, y) + lambda2 [y=+1] sum_c smooth_l1(T_c - T*_c)
// score has shape {1}, delta shape {4}.
Tensor classifier_loss(Graph& g, Tensor score, Tensor delta, int label,
                       const std::optional<BoxDelta>& target, double lambda2,
                       const FocalConfig& cfg, bool use_focal = true);

}  // namespace dfl
