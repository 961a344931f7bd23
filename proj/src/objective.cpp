#include "gradmask/objective.hpp"

#include <algorithm>

#include "gradmask/error.hpp"

namespace gradmask {

using ad::Tensor;

Batch make_batch(std::span<const SignalExample* const> examples) {
  if (examples.empty()) throw ValidationError("empty batch");
  const auto& first = *examples.front();
  const std::size_t L = first.leads, T = first.samples,
                    K = first.labels.size();
  const std::size_t d = L * T;
  Batch b;
  b.size = examples.size();
  std::vector<double> x, y, mx, my, w;
  x.reserve(b.size * d);
  y.reserve(b.size * K);
  for (const auto* ex : examples) {
    if (ex->leads != L || ex->samples != T || ex->labels.size() != K) {
      throw ShapeError("batch: example '" + ex->id + "' has a different shape");
    }
    x.insert(x.end(), ex->signal.begin(), ex->signal.end());
    for (int v : ex->labels) y.push_back(v);
    if (!ex->mask) continue;
    ++b.masked;
    mx.insert(mx.end(), ex->signal.begin(), ex->signal.end());
    for (int v : ex->labels) my.push_back(v);
    const auto base = w.size();
    w.resize(base + d, 1.0);
    for (auto idx : ex->mask->flat_indices()) w[base + idx] = 0.0;
  }
  b.signals = Tensor::constant({b.size, L, T}, std::move(x));
  b.targets = Tensor::constant({b.size, K}, std::move(y));
  if (b.masked > 0) {
    b.masked_signals = Tensor::constant({b.masked, L, T}, std::move(mx));
    b.masked_targets = Tensor::constant({b.masked, K}, std::move(my));
    b.outside_mask = Tensor::constant({b.masked, L, T}, std::move(w));
  }
  return b;
}

Tensor logistic_loss(const Tensor& logits, const Tensor& targets) {
  return ad::sum(ad::log1p_exp(ad::neg(ad::mul(targets, logits))));
}

Tensor logistic_loss(const LogitFn& model, const SignalExample& example) {
  const SignalExample* one[] = {&example};
  const Batch b = make_batch(one);
  return logistic_loss(model(b.signals), b.targets);
}

Tensor penalty(const LogitFn& model, const Tensor& signals,
               const Tensor& targets, const Tensor& outside_mask,
               double lambda) {
  const Tensor x = signals.clone_leaf();
  const Tensor loss = logistic_loss(model(x), targets);
  const Tensor input_grad = ad::grad(loss, {x}, /*create_graph=*/true)[0];
  return ad::scale(ad::sum(ad::mul(ad::square(input_grad), outside_mask)),
                   lambda);
}

Tensor penalty(const LogitFn& model, const SignalExample& example,
               double lambda) {
  if (!example.mask) {
    throw ValidationError("penalty: example '" + example.id +
                          "' has no mask; route it to logistic_loss");
  }
  const SignalExample* one[] = {&example};
  const Batch b = make_batch(one);
  return penalty(model, b.masked_signals, b.masked_targets, b.outside_mask,
                 lambda);
}

Tensor objective_batch(const LogitFn& model, const Batch& batch,
                       const ObjectiveConfig& config) {
  Tensor total = logistic_loss(model(batch.signals), batch.targets);
  if (config.lambda != 0.0 && batch.masked > 0) {
    total = ad::add(total, penalty(model, batch.masked_signals,
                                   batch.masked_targets, batch.outside_mask,
                                   config.lambda));
  }
  if (config.reduction == Reduction::kMean) {
    total = ad::scale(total, 1.0 / static_cast<double>(batch.size));
  }
  return total;
}

Tensor objective_batch(const LogitFn& model,
                       std::span<const SignalExample* const> examples,
                       const ObjectiveConfig& config) {
  return objective_batch(model, make_batch(examples), config);
}

}  // namespace gradmask
