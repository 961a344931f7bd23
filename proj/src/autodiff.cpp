#include "gradmask/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "gradmask/error.hpp"
#include "gradmask/rng.hpp"

namespace gradmask::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_nan_trap = false;
thread_local ReluKinkMonitor* t_kink_monitor = nullptr;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

template <typename F>
Tensor unary(const char* op, const Tensor& a, F&& f, BackwardFn backward) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, std::move(out), a.shape(), {a}, std::move(backward));
}

template <typename F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F&& f,
              BackwardFn backward) {
  require_same_shape(op, a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return make_result(op, std::move(out), a.shape(), {a, b},
                     std::move(backward));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_log1p_exp(double x) {
  // ln(1+e^x) = max(x,0) + ln(1 + e^{-|x|})
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Outer/channel/inner split of an [N, C, ...] tensor.
struct ChannelLayout {
  std::size_t outer;
  std::size_t channels;
  std::size_t inner;
};

ChannelLayout channel_layout(const char* op, const Shape& shape) {
  if (shape.size() < 2) {
    throw ShapeError(std::string(op) + ": expected [N, C, ...], got " +
                     shape_str(shape));
  }
  std::size_t inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) inner *= shape[i];
  return {shape[0], shape[1], inner};
}

// Valid output positions t for kernel tap k: 0 <= t*s + k - p < in_len.
std::pair<std::size_t, std::size_t> tap_range(std::size_t k, std::size_t in_len,
                                              std::size_t out_len,
                                              ConvGeometry g) {
  const long s = static_cast<long>(g.stride);
  const long off = static_cast<long>(k) - static_cast<long>(g.padding);
  long lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  long hi = static_cast<long>(out_len);  // exclusive
  const long max_t = (static_cast<long>(in_len) - 1 - off);
  if (max_t < 0) return {0, 0};
  hi = std::min(hi, max_t / s + 1);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  if (ad::numel(shape) != data.size()) {
    throw ShapeError("constant: " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->data = std::move(data);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  const auto n = ad::numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = ad::numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) {
    throw std::logic_error("mutable_data on a non-leaf tensor");
  }
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor has shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  return constant(impl_->shape, impl_->data);
}

Tensor Tensor::clone_leaf() const { return leaf(impl_->shape, impl_->data); }

Tensor make_result(const char* op, std::vector<double> data, Shape shape,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  if (t_nan_trap) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data[i])) {
        throw NonFiniteError(std::string("non-finite value in ") + op +
                             " output at flat index " + std::to_string(i));
      }
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->data = std::move(data);
  impl->shape = std::move(shape);
  if (t_grad_enabled && any_requires_grad(inputs)) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

NanTrap::NanTrap() : previous_(t_nan_trap) { t_nan_trap = true; }
NanTrap::~NanTrap() { t_nan_trap = previous_; }

ReluKinkMonitor::ReluKinkMonitor()
    : previous_(t_kink_monitor),
      min_abs_(std::numeric_limits<double>::infinity()) {
  t_kink_monitor = this;
}
ReluKinkMonitor::~ReluKinkMonitor() { t_kink_monitor = previous_; }
double ReluKinkMonitor::min_abs_input() const { return min_abs_; }

void note_relu_inputs(std::span<const double> values) {
  for (auto* m = t_kink_monitor; m != nullptr; m = m->previous_) {
    for (double v : values) m->min_abs_ = std::min(m->min_abs_, std::abs(v));
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                  return std::vector<Tensor>{g, g};
                }});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                  return std::vector<Tensor>{g, neg(g)};
                }});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
                  std::vector<Tensor> out(2);
                  if (need[0]) out[0] = mul(g, in[1]);
                  if (need[1]) out[1] = mul(g, in[0]);
                  return out;
                }});
}

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; },
               {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                 return std::vector<Tensor>{neg(g)};
               }});
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               {[factor](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                 return std::vector<Tensor>{scale(g, factor)};
               }});
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                 return std::vector<Tensor>{g};
               }});
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                 return std::vector<Tensor>{mul(g, scale(in[0], 2.0))};
               }});
}

// The step mask is a constant, so relu'' = 0 everywhere.
Tensor relu(const Tensor& a) {
  if (t_kink_monitor != nullptr) note_relu_inputs(a.data());
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                 std::vector<double> step(in[0].numel());
                 const auto x = in[0].data();
                 for (std::size_t i = 0; i < step.size(); ++i) {
                   step[i] = x[i] > 0.0 ? 1.0 : 0.0;
                 }
                 return std::vector<Tensor>{
                     mul(g, Tensor::constant(in[0].shape(), std::move(step)))};
               }});
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid,
               {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                 const Tensor s = sigmoid(in[0]);
                 return std::vector<Tensor>{
                     mul(g, mul(s, add_scalar(neg(s), 1.0)))};
               }});
}

Tensor log1p_exp(const Tensor& a) {
  return unary("log1p_exp", a, stable_log1p_exp,
               {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                 return std::vector<Tensor>{mul(g, sigmoid(in[0]))};
               }});
}

// ----------------------------------------------------- reductions / reshapes

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Shape shape = a.shape();
  return make_result("sum", {total}, {}, {a},
                     {[shape](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{expand(g, shape)};
                     }});
}

Tensor expand(const Tensor& s, const Shape& shape) {
  if (s.numel() != 1) {
    throw ShapeError("expand: expected a scalar, got " + shape_str(s.shape()));
  }
  return make_result("expand", std::vector<double>(numel(shape), s.at(0)),
                     shape, {s},
                     {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{
                           reshape(sum(g), in[0].shape())};
                     }});
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> data(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(data), std::move(shape), {a},
                     {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(g, in[0].shape())};
                     }});
}

// ----------------------------------------------------------------- linear

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result("matmul", std::move(out), {m, n}, {a, b},
                     {[](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) {
                         r[0] = matmul(g, transpose(in[1]));
                       }
                       if (need[1]) {
                         r[1] = matmul(transpose(in[0]), g);
                       }
                       return r;
                     }});
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  }
  return make_result("transpose", std::move(out), {n, m}, {a},
                     {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{transpose(g)};
                     }});
}

// --------------------------------------------------------------- channels

Tensor broadcast_channels(const Tensor& bias, const Shape& shape) {
  const auto lay = channel_layout("broadcast_channels", shape);
  if (bias.rank() != 1 || bias.dim(0) != lay.channels) {
    throw ShapeError("broadcast_channels: bias " + shape_str(bias.shape()) +
                     " does not match " + shape_str(shape));
  }
  std::vector<double> out(numel(shape));
  const auto b = bias.data();
  for (std::size_t n = 0; n < lay.outer; ++n) {
    for (std::size_t c = 0; c < lay.channels; ++c) {
      double* dst = out.data() + (n * lay.channels + c) * lay.inner;
      std::fill(dst, dst + lay.inner, b[c]);
    }
  }
  return make_result("broadcast_channels", std::move(out), shape, {bias},
                     {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{sum_channels(g)};
                     }});
}

Tensor sum_channels(const Tensor& a) {
  const auto lay = channel_layout("sum_channels", a.shape());
  std::vector<double> out(lay.channels, 0.0);
  const auto x = a.data();
  for (std::size_t n = 0; n < lay.outer; ++n) {
    for (std::size_t c = 0; c < lay.channels; ++c) {
      const double* src = x.data() + (n * lay.channels + c) * lay.inner;
      double acc = 0.0;
      for (std::size_t i = 0; i < lay.inner; ++i) acc += src[i];
      out[c] += acc;
    }
  }
  Shape shape = a.shape();
  return make_result("sum_channels", std::move(out), {lay.channels}, {a},
                     {[shape](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{broadcast_channels(g, shape)};
                     }});
}

Tensor bias_add(const Tensor& a, const Tensor& bias) {
  return add(a, broadcast_channels(bias, a.shape()));
}

Tensor global_avg_pool(const Tensor& a) {
  require_rank("global_avg_pool", a, 3);
  const std::size_t n = a.dim(0), c = a.dim(1), t = a.dim(2);
  std::vector<double> out(n * c, 0.0);
  const auto x = a.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < t; ++j) acc += x[i * t + j];
    out[i] = acc / static_cast<double>(t);
  }
  return make_result("global_avg_pool", std::move(out), {n, c}, {a},
                     {[t](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{spread_time(g, t)};
                     }});
}

Tensor spread_time(const Tensor& a, std::size_t length) {
  require_rank("spread_time", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> out(n * c * length);
  const auto x = a.data();
  const double inv = 1.0 / static_cast<double>(length);
  for (std::size_t i = 0; i < n * c; ++i) {
    std::fill(out.begin() + i * length, out.begin() + (i + 1) * length,
              x[i] * inv);
  }
  return make_result("spread_time", std::move(out), {n, c, length}, {a},
                     {[](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{global_avg_pool(g)};
                     }});
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto first = channel_layout("concat_channels", parts[0].shape());
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto lay = channel_layout("concat_channels", p.shape());
    if (lay.outer != first.outer || lay.inner != first.inner ||
        p.rank() != parts[0].rank()) {
      throw ShapeError("concat_channels: shape mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += lay.channels;
  }
  Shape shape = parts[0].shape();
  shape[1] = total;
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t c = p.dim(1);
    const auto x = p.data();
    for (std::size_t n = 0; n < first.outer; ++n) {
      std::copy_n(x.data() + n * c * first.inner, c * first.inner,
                  out.data() + (n * total + offset) * first.inner);
    }
    offset += c;
  }
  return make_result(
      "concat_channels", std::move(out), std::move(shape), parts,
      {[offsets](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
        std::vector<Tensor> r(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
          if (need[i]) {
            r[i] = slice_channels(g, offsets[i], in[i].dim(1));
          }
        }
        return r;
      }});
}

Tensor slice_channels(const Tensor& a, std::size_t offset, std::size_t count) {
  const auto lay = channel_layout("slice_channels", a.shape());
  if (offset + count > lay.channels) {
    throw ShapeError("slice_channels: [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of range for " +
                     shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[1] = count;
  std::vector<double> out(numel(shape));
  const auto x = a.data();
  for (std::size_t n = 0; n < lay.outer; ++n) {
    std::copy_n(x.data() + (n * lay.channels + offset) * lay.inner,
                count * lay.inner, out.data() + n * count * lay.inner);
  }
  const std::size_t total = lay.channels;
  return make_result(
      "slice_channels", std::move(out), std::move(shape), {a},
      {[total, offset](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
        return std::vector<Tensor>{embed_channels(g, total, offset)};
      }});
}

Tensor embed_channels(const Tensor& a, std::size_t total, std::size_t offset) {
  const auto lay = channel_layout("embed_channels", a.shape());
  if (offset + lay.channels > total) {
    throw ShapeError("embed_channels: does not fit");
  }
  Shape shape = a.shape();
  shape[1] = total;
  std::vector<double> out(numel(shape), 0.0);
  const auto x = a.data();
  for (std::size_t n = 0; n < lay.outer; ++n) {
    std::copy_n(x.data() + n * lay.channels * lay.inner,
                lay.channels * lay.inner,
                out.data() + (n * total + offset) * lay.inner);
  }
  const std::size_t count = lay.channels;
  return make_result(
      "embed_channels", std::move(out), std::move(shape), {a},
      {[offset, count](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
        return std::vector<Tensor>{slice_channels(g, offset, count)};
      }});
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  std::vector<double> out(indices.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) {
      throw ShapeError("gather: index " + std::to_string(indices[i]) +
                       " out of range for " + shape_str(a.shape()));
    }
    out[i] = x[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(
      "gather", std::move(out), {indices.size()}, {a},
      {[idx](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>&) {
        return std::vector<Tensor>{scatter_add(g, idx, in[0].shape())};
      }});
}

Tensor scatter_add(const Tensor& values, std::span<const std::size_t> indices,
                   const Shape& shape) {
  if (values.numel() != indices.size()) {
    throw ShapeError("scatter_add: " + std::to_string(values.numel()) +
                     " values for " + std::to_string(indices.size()) +
                     " indices");
  }
  std::vector<double> out(numel(shape), 0.0);
  const auto v = values.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= out.size()) {
      throw ShapeError("scatter_add: index out of range");
    }
    out[indices[i]] += v[i];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result("scatter_add", std::move(out), shape, {values},
                     {[idx](const Tensor& g, const std::vector<Tensor>&,
                    const std::vector<bool>&) {
                       return std::vector<Tensor>{gather(g, idx)};
                     }});
}

// ---------------------------------------------------------------- conv1d

std::size_t conv_output_length(std::size_t input_length,
                               std::size_t kernel_size, ConvGeometry geom) {
  if (geom.stride == 0) throw ShapeError("conv1d: stride must be positive");
  const std::size_t padded = input_length + 2 * geom.padding;
  if (kernel_size == 0 || padded < kernel_size) {
    throw ShapeError("conv1d: kernel " + std::to_string(kernel_size) +
                     " longer than padded input " + std::to_string(padded));
  }
  return (padded - kernel_size) / geom.stride + 1;
}

// The three conv kernels below are the partial derivatives of the trilinear
// form S(x, w, gy) = sum gy[n,o,t] w[o,c,K-1-k] x[n,c,t*s+k-p]. Each one's
// backward is expressed through the other two.

Tensor conv1d(const Tensor& x, const Tensor& w, ConvGeometry geom) {
  require_rank("conv1d", x, 3);
  require_rank("conv1d", w, 3);
  const std::size_t batch = x.dim(0), cin = x.dim(1), tin = x.dim(2);
  const std::size_t cout = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != cin) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t tout = conv_output_length(tin, kernel, geom);
  std::vector<double> out(batch * cout * tout, 0.0);
  const auto xd = x.data();
  const auto wd = w.data();
  const std::size_t s = geom.stride;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* y = out.data() + (n * cout + o) * tout;
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xs = xd.data() + (n * cin + c) * tin;
        const double* ws = wd.data() + (o * cin + c) * kernel;
        for (std::size_t k = 0; k < kernel; ++k) {
          const double wv = ws[kernel - 1 - k];
          auto [lo, hi] = tap_range(k, tin, tout, geom);
          // Unsigned wrap is intended: t*s + off stays in [0, tin) for t in
          // [lo, hi).
          const std::size_t off = k - geom.padding;
          if (s == 1) {
            for (std::size_t t = lo; t < hi; ++t) y[t] += wv * xs[t + off];
          } else {
            for (std::size_t t = lo; t < hi; ++t) y[t] += wv * xs[t * s + off];
          }
        }
      }
    }
  }
  return make_result(
      "conv1d", std::move(out), {batch, cout, tout}, {x, w},
      {[geom, tin, kernel](const Tensor& g, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) {
          r[0] = conv1d_input_grad(g, in[1], tin, geom);
        }
        if (need[1]) {
          r[1] = conv1d_weight_grad(in[0], g, kernel, geom);
        }
        return r;
      }});
}

Tensor conv1d_input_grad(const Tensor& grad_out, const Tensor& w,
                         std::size_t input_length, ConvGeometry geom) {
  require_rank("conv1d_input_grad", grad_out, 3);
  require_rank("conv1d_input_grad", w, 3);
  const std::size_t batch = grad_out.dim(0), cout = grad_out.dim(1),
                    tout = grad_out.dim(2);
  const std::size_t cin = w.dim(1), kernel = w.dim(2);
  if (w.dim(0) != cout ||
      conv_output_length(input_length, kernel, geom) != tout) {
    throw ShapeError("conv1d_input_grad: grad " + shape_str(grad_out.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t tin = input_length;
  std::vector<double> out(batch * cin * tin, 0.0);
  const auto gd = grad_out.data();
  const auto wd = w.data();
  const std::size_t s = geom.stride;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double* gy = gd.data() + (n * cout + o) * tout;
      for (std::size_t c = 0; c < cin; ++c) {
        double* gx = out.data() + (n * cin + c) * tin;
        const double* ws = wd.data() + (o * cin + c) * kernel;
        for (std::size_t k = 0; k < kernel; ++k) {
          const double wv = ws[kernel - 1 - k];
          auto [lo, hi] = tap_range(k, tin, tout, geom);
          const std::size_t off = k - geom.padding;
          if (s == 1) {
            for (std::size_t t = lo; t < hi; ++t) gx[t + off] += wv * gy[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) gx[t * s + off] += wv * gy[t];
          }
        }
      }
    }
  }
  return make_result(
      "conv1d_input_grad", std::move(out), {batch, cin, tin}, {grad_out, w},
      {[geom, kernel](const Tensor& h, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = conv1d(h, in[1], geom);
        if (need[1]) {
          r[1] = conv1d_weight_grad(h, in[0], kernel, geom);
        }
        return r;
      }});
}

Tensor conv1d_weight_grad(const Tensor& x, const Tensor& grad_out,
                          std::size_t kernel_size, ConvGeometry geom) {
  require_rank("conv1d_weight_grad", x, 3);
  require_rank("conv1d_weight_grad", grad_out, 3);
  const std::size_t batch = x.dim(0), cin = x.dim(1), tin = x.dim(2);
  const std::size_t cout = grad_out.dim(1), tout = grad_out.dim(2);
  if (grad_out.dim(0) != batch ||
      conv_output_length(tin, kernel_size, geom) != tout) {
    throw ShapeError("conv1d_weight_grad: input " + shape_str(x.shape()) +
                     " incompatible with grad " + shape_str(grad_out.shape()));
  }
  const std::size_t kernel = kernel_size;
  std::vector<double> out(cout * cin * kernel, 0.0);
  const auto xd = x.data();
  const auto gd = grad_out.data();
  const std::size_t s = geom.stride;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double* gy = gd.data() + (n * cout + o) * tout;
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xs = xd.data() + (n * cin + c) * tin;
        double* gw = out.data() + (o * cin + c) * kernel;
        for (std::size_t k = 0; k < kernel; ++k) {
          auto [lo, hi] = tap_range(k, tin, tout, geom);
          const std::size_t off = k - geom.padding;
          double acc = 0.0;
          if (s == 1) {
            for (std::size_t t = lo; t < hi; ++t) acc += gy[t] * xs[t + off];
          } else {
            for (std::size_t t = lo; t < hi; ++t) acc += gy[t] * xs[t * s + off];
          }
          gw[kernel - 1 - k] += acc;
        }
      }
    }
  }
  return make_result(
      "conv1d_weight_grad", std::move(out), {cout, cin, kernel}, {x, grad_out},
      {[geom, tin](const Tensor& h, const std::vector<Tensor>& in,
                    const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) {
          r[0] = conv1d_input_grad(in[1], h, tin, geom);
        }
        if (need[1]) r[1] = conv1d(in[0], h, geom);
        return r;
      }});
}

// ---------------------------------------------------------------- backward

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& leaves,
                         bool create_graph) {
  if (output.numel() != 1) {
    throw ShapeError("grad: output must be scalar, got " +
                     shape_str(output.shape()));
  }
  std::optional<NoGradGuard> no_grad;
  if (!create_graph) no_grad.emplace();

  // Post-order DFS over nodes that require grad; inputs visited in order so
  // the schedule (and therefore every accumulation) is deterministic.
  std::vector<Tensor> order;
  if (output.requires_grad()) {
    std::unordered_set<const TensorImpl*> visited;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(output, 0);
    visited.insert(output.id());
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      const auto& fn = t.grad_fn();
      if (fn && next < fn->inputs.size()) {
        const Tensor& child = fn->inputs[next++];
        if (child.requires_grad() && visited.insert(child.id()).second) {
          stack.emplace_back(child, 0);
        }
        continue;
      }
      order.push_back(t);
      stack.pop_back();
    }
  }

  std::unordered_set<const TensorImpl*> wanted;
  for (const auto& l : leaves) wanted.insert(l.id());

  // A node is relevant when some requested leaf is reachable from it; only
  // relevant inputs get adjoints. `order` lists inputs before consumers.
  std::unordered_set<const TensorImpl*> relevant;
  for (const auto& t : order) {
    bool r = wanted.contains(t.id());
    if (!r && t.grad_fn()) {
      for (const auto& in : t.grad_fn()->inputs) {
        if (relevant.contains(in.id())) {
          r = true;
          break;
        }
      }
    }
    if (r) relevant.insert(t.id());
  }

  std::unordered_map<const TensorImpl*, Tensor> adjoint;
  adjoint.emplace(output.id(), Tensor::full(output.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor& t = *it;
    auto found = adjoint.find(t.id());
    if (found == adjoint.end()) continue;
    const auto& fn = t.grad_fn();
    if (!fn || !relevant.contains(t.id())) continue;
    const Tensor upstream = found->second;
    if (!wanted.contains(t.id())) adjoint.erase(found);
    std::vector<bool> needed(fn->inputs.size());
    for (std::size_t i = 0; i < needed.size(); ++i) {
      needed[i] = relevant.contains(fn->inputs[i].id());
    }
    auto parts = fn->backward.fn(upstream, fn->inputs, needed);
    for (std::size_t i = 0; i < fn->inputs.size(); ++i) {
      const Tensor& input = fn->inputs[i];
      if (!needed[i] || i >= parts.size() || !parts[i].defined()) {
        continue;
      }
      auto [slot, inserted] = adjoint.try_emplace(input.id(), parts[i]);
      if (!inserted) slot->second = add(slot->second, parts[i]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(leaves.size());
  for (const auto& l : leaves) {
    auto found = adjoint.find(l.id());
    result.push_back(found != adjoint.end() ? found->second
                                            : Tensor::zeros(l.shape()));
  }
  return result;
}

// -------------------------------------------------------------- grad check

namespace {

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t limit,
                                     Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (limit == 0 || limit >= n) return idx;
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options) {
  if (options.order != 1 && options.order != 2) {
    throw ValidationError("grad_check: order must be 1 or 2");
  }
  std::vector<Tensor> leaves = point;
  Rng rng(options.seed);

  std::vector<Tensor> directions;
  if (options.order == 2) {
    for (const auto& l : leaves) {
      std::vector<double> r(l.numel());
      for (auto& v : r) v = rng.normal();
      directions.push_back(Tensor::constant(l.shape(), std::move(r)));
    }
  }

  // The scalar being differentiated: f itself, or s(p) for order 2.
  auto probe = [&](bool differentiable) -> Tensor {
    if (options.order == 1) return f(leaves);
    auto first = grad(f(leaves), leaves, differentiable);
    Tensor s = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      s = add(s, sum(mul(first[i], directions[i])));
    }
    return s;
  };

  const auto analytic = grad(probe(true), leaves, false);

  GradCheckResult result;
  bool first = true;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li].mutable_data();
    for (std::size_t j :
         pick_coords(values.size(), options.max_coords_per_leaf, rng)) {
      const double v = values[j];
      const double h = 1e-6 * std::max(1.0, std::abs(v));
      values[j] = v + h;
      const double up = probe(false).item();
      const double v_up = values[j];
      values[j] = v - h;
      const double down = probe(false).item();
      const double v_down = values[j];
      values[j] = v;
      const double numeric = (up - down) / (v_up - v_down);
      const double a = analytic[li].at(j);
      const double err =
          std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (first || err > result.max_rel_error) {
        result = {err, li, j, a, numeric};
        first = false;
      }
    }
  }
  return result;
}

}  // namespace gradmask::ad
