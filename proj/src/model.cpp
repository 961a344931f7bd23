#include "gradmask/model.hpp"

#include <algorithm>
#include <cmath>

#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/rng.hpp"

namespace gradmask {

using ad::Tensor;
using nlohmann::json;

namespace {

void check_kernel(std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw ValidationError("model config: kernel size " + std::to_string(k) +
                          " must be odd");
  }
}

Tensor uniform_init(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> data(ad::numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::leaf(std::move(shape), std::move(data));
}

Tensor same_conv(const Tensor& x, const Tensor& w) {
  return ad::conv1d(x, w, {1, (w.dim(2) - 1) / 2});
}

}  // namespace

void ModelConfig::validate() const {
  if (in_leads == 0 || n_classes == 0) {
    throw ValidationError("model config: in_leads and n_classes must be > 0");
  }
  if (blocks.empty()) {
    throw ValidationError("model config: at least one block required");
  }
  for (const auto& b : blocks) {
    if (const auto* p = std::get_if<PlainConvBlock>(&b)) {
      check_kernel(p->kernel_size);
      if (p->out_channels == 0) {
        throw ValidationError("model config: out_channels must be > 0");
      }
    } else {
      const auto& inc = std::get<InceptionBlock>(b);
      if (inc.kernel_sizes.empty() || inc.branch_channels == 0) {
        throw ValidationError("model config: inception block needs branches");
      }
      for (auto k : inc.kernel_sizes) check_kernel(k);
    }
  }
}

std::size_t ModelConfig::out_channels(std::size_t block) const {
  const auto& b = blocks.at(block);
  if (const auto* p = std::get_if<PlainConvBlock>(&b)) return p->out_channels;
  const auto& inc = std::get<InceptionBlock>(b);
  return inc.kernel_sizes.size() * inc.branch_channels;
}

std::size_t ModelConfig::feature_channels() const {
  return out_channels(blocks.size() - 1);
}

std::size_t ModelConfig::receptive_field() const {
  std::size_t rf = 1;
  for (const auto& b : blocks) {
    std::size_t k = 1;
    if (const auto* p = std::get_if<PlainConvBlock>(&b)) {
      k = p->kernel_size;
    } else {
      const auto& ks = std::get<InceptionBlock>(b).kernel_sizes;
      k = *std::max_element(ks.begin(), ks.end());
    }
    rf += k - 1;
  }
  return rf;
}

void to_json(json& j, const ModelConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.blocks) {
    if (const auto* p = std::get_if<PlainConvBlock>(&b)) {
      blocks.push_back({{"type", "conv"},
                        {"out_channels", p->out_channels},
                        {"kernel_size", p->kernel_size}});
    } else {
      const auto& inc = std::get<InceptionBlock>(b);
      blocks.push_back({{"type", "inception"},
                        {"kernel_sizes", inc.kernel_sizes},
                        {"bottleneck_channels", inc.bottleneck_channels},
                        {"branch_channels", inc.branch_channels}});
    }
  }
  j = {{"in_leads", c.in_leads},
       {"n_classes", c.n_classes},
       {"blocks", blocks},
       {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  require_known_keys(j, {"in_leads", "n_classes", "blocks", "seed"}, "model config");
  c.in_leads = j.value("in_leads", c.in_leads);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.seed = j.value("seed", c.seed);
  if (j.contains("blocks")) {
    c.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      const auto type = b.value("type", std::string("inception"));
      if (type == "conv") {
        require_known_keys(b, {"type", "out_channels", "kernel_size"}, "conv block");
        PlainConvBlock p;
        p.out_channels = b.value("out_channels", p.out_channels);
        p.kernel_size = b.value("kernel_size", p.kernel_size);
        c.blocks.emplace_back(p);
      } else if (type == "inception") {
        require_known_keys(b, {"type", "kernel_sizes", "bottleneck_channels", "branch_channels"},
                           "inception block");
        InceptionBlock inc;
        inc.kernel_sizes = b.value("kernel_sizes", inc.kernel_sizes);
        inc.bottleneck_channels =
            b.value("bottleneck_channels", inc.bottleneck_channels);
        inc.branch_channels = b.value("branch_channels", inc.branch_channels);
        c.blocks.emplace_back(inc);
      } else {
        throw ValidationError("model config: unknown block type '" + type +
                              "'");
      }
    }
  }
}

void ModelParams::add(std::string name, Tensor tensor) {
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw ValidationError("no parameter named '" + name + "'");
}

std::size_t ModelParams::total_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (std::size_t i = 0; i < size(); ++i) {
    out.add(names_[i], tensors_[i].clone_leaf());
  }
  return out;
}

bool ModelParams::values_equal(const ModelParams& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (tensors_[i].shape() != other.tensors_[i].shape()) return false;
    const auto a = tensors_[i].data();
    const auto b = other.tensors_[i].data();
    if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) return false;
  }
  return true;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  ModelParams p;
  std::size_t in = config.in_leads;
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    if (const auto* conv = std::get_if<PlainConvBlock>(&config.blocks[b])) {
      p.add(prefix + "weight",
            uniform_init({conv->out_channels, in, conv->kernel_size},
                         in * conv->kernel_size, rng));
      p.add(prefix + "bias", Tensor::leaf({conv->out_channels},
                                          std::vector<double>(conv->out_channels)));
    } else {
      const auto& inc = std::get<InceptionBlock>(config.blocks[b]);
      std::size_t branch_in = in;
      if (inc.bottleneck_channels > 0) {
        p.add(prefix + "bottleneck.weight",
              uniform_init({inc.bottleneck_channels, in, 1}, in, rng));
        branch_in = inc.bottleneck_channels;
      }
      for (auto k : inc.kernel_sizes) {
        p.add(prefix + "branch" + std::to_string(k) + ".weight",
              uniform_init({inc.branch_channels, branch_in, k}, branch_in * k,
                           rng));
      }
      const std::size_t out = config.out_channels(b);
      p.add(prefix + "bias", Tensor::leaf({out}, std::vector<double>(out)));
    }
    in = config.out_channels(b);
  }
  p.add("head.weight", uniform_init({in, config.n_classes}, in, rng));
  p.add("head.bias",
        Tensor::leaf({config.n_classes}, std::vector<double>(config.n_classes)));
  return p;
}

Tensor forward(const ModelConfig& config, const ModelParams& params,
               const Tensor& x_in) {
  Tensor x = x_in;
  if (x.rank() == 2) x = ad::reshape(x, {1, x.dim(0), x.dim(1)});
  if (x.rank() != 3 || x.dim(1) != config.in_leads) {
    throw ShapeError("model input " + ad::shape_str(x_in.shape()) +
                     " does not match " + std::to_string(config.in_leads) +
                     " leads");
  }
  const std::size_t min_len = config.receptive_field();
  if (x.dim(2) < min_len) {
    throw ValidationError("signal of length " + std::to_string(x.dim(2)) +
                          " is shorter than the model's minimum length " +
                          std::to_string(min_len));
  }
  std::size_t pi = 0;
  auto next = [&]() -> const Tensor& { return params.tensor(pi++); };
  Tensor h = x;
  for (const auto& block : config.blocks) {
    if (std::holds_alternative<PlainConvBlock>(block)) {
      const Tensor& w = next();
      const Tensor& b = next();
      h = ad::relu(ad::bias_add(same_conv(h, w), b));
      continue;
    }
    const auto& inc = std::get<InceptionBlock>(block);
    Tensor trunk = h;
    if (inc.bottleneck_channels > 0) trunk = ad::conv1d(h, next());
    std::vector<Tensor> branches;
    for (std::size_t i = 0; i < inc.kernel_sizes.size(); ++i) {
      branches.push_back(same_conv(trunk, next()));
    }
    Tensor joined = branches.size() == 1 ? branches[0]
                                         : ad::concat_channels(branches);
    h = ad::relu(ad::bias_add(joined, next()));
  }
  const Tensor pooled = ad::global_avg_pool(h);
  const Tensor& head_w = next();
  const Tensor& head_b = next();
  return ad::bias_add(ad::matmul(pooled, head_w), head_b);
}

std::vector<int> predict(std::span<const double> logits) {
  std::vector<int> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] > 0.0 ? 1 : -1;
  }
  return out;
}

LogitFn as_logit_fn(const ModelConfig& config, const ModelParams& params) {
  return [&config, &params](const Tensor& x) {
    return forward(config, params, x);
  };
}

}  // namespace gradmask
