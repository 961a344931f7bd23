#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gradmask/autodiff.hpp"

namespace gradmask {

// conv(kernel_size, "same" padding) + bias + relu.
struct PlainConvBlock {
  std::size_t out_channels = 16;
  std::size_t kernel_size = 9;
};

// Optional 1x1 bottleneck, then parallel "same" convolutions of different
// kernel sizes whose outputs are concatenated, biased and passed through relu.
struct InceptionBlock {
  std::vector<std::size_t> kernel_sizes{9, 19, 39};
  std::size_t bottleneck_channels = 16;
  std::size_t branch_channels = 16;
};

using BlockSpec = std::variant<PlainConvBlock, InceptionBlock>;

struct ModelConfig {
  std::size_t in_leads = 12;
  std::size_t n_classes = 71;
  std::vector<BlockSpec> blocks{InceptionBlock{}, InceptionBlock{}};
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t out_channels(std::size_t block) const;
  std::size_t feature_channels() const;
  // Shortest input that covers every kernel tap of every layer.
  std::size_t receptive_field() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Named parameter tensors, in a fixed order. All are differentiable leaves.
class ModelParams {
 public:
  void add(std::string name, ad::Tensor tensor);

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const ad::Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  ad::Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const ad::Tensor& get(const std::string& name) const;
  const std::vector<ad::Tensor>& tensors() const { return tensors_; }
  std::size_t total_count() const;

  // Independent copy with fresh leaves.
  ModelParams clone() const;
  bool values_equal(const ModelParams& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> tensors_;
};

// Fan-in scaled uniform init (bound sqrt(6 / fan_in), variance 2 / fan_in);
// biases zero.
ModelParams init_params(const ModelConfig& config);

// x: [N, L, T] (or [L, T] for one example) -> logits [N, K].
ad::Tensor forward(const ModelConfig& config, const ModelParams& params,
                   const ad::Tensor& x);

// sign with sign(0) = -1.
std::vector<int> predict(std::span<const double> logits);

using LogitFn = std::function<ad::Tensor(const ad::Tensor&)>;

// Binds config and params into a callable for the objective and saliency.
LogitFn as_logit_fn(const ModelConfig& config, const ModelParams& params);

}  // namespace gradmask
