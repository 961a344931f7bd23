#pragma once

#include <span>

#include "gradmask/autodiff.hpp"
#include "gradmask/model.hpp"
#include "gradmask/signal.hpp"

namespace gradmask {

enum class Reduction { kSum, kMean };

struct ObjectiveConfig {
  // Penalty weight; 0 turns the objective into plain logistic loss.
  double lambda = 1.0;
  Reduction reduction = Reduction::kMean;
};

// Dense tensors for one minibatch. Examples carrying a mask are additionally
// gathered into the `masked_*` tensors; `outside_mask` is 1 at coordinates
// outside each example's mask and 0 inside.
struct Batch {
  std::size_t size = 0;
  ad::Tensor signals;  // [N, L, T]
  ad::Tensor targets;  // [N, K], +/-1
  std::size_t masked = 0;
  ad::Tensor masked_signals;  // [M, L, T]
  ad::Tensor masked_targets;  // [M, K]
  ad::Tensor outside_mask;    // [M, L, T]
};

Batch make_batch(std::span<const SignalExample* const> examples);

// sum over rows and labels of ln(1 + exp(-y * f)).
ad::Tensor logistic_loss(const ad::Tensor& logits, const ad::Tensor& targets);
ad::Tensor logistic_loss(const LogitFn& model, const SignalExample& example);

// lambda * sum over coordinates outside the mask of (d loss / d x)^2. The
// input gradient is built with create_graph, so the result stays
// differentiable with respect to the model parameters.
ad::Tensor penalty(const LogitFn& model, const ad::Tensor& signals,
                   const ad::Tensor& targets, const ad::Tensor& outside_mask,
                   double lambda);
// Single example; throws ValidationError when it has no mask.
ad::Tensor penalty(const LogitFn& model, const SignalExample& example,
                   double lambda);

// Masked examples contribute logistic loss plus penalty, the rest logistic
// loss only. With lambda == 0 or no masked examples the penalty branch is
// skipped entirely, so the value and its gradient equal the mask-free
// objective bit for bit.
ad::Tensor objective_batch(const LogitFn& model, const Batch& batch,
                           const ObjectiveConfig& config);
ad::Tensor objective_batch(const LogitFn& model,
                           std::span<const SignalExample* const> examples,
                           const ObjectiveConfig& config);

}  // namespace gradmask
