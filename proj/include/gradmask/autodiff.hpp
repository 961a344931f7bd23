#pragma once

// Reverse-mode differentiation over dense float64 tensors.
//
// Every backward rule is written in terms of the same differentiable ops used
// in the forward pass. With create_graph=true the adjoint computation records
// its own graph, so a function of an input gradient can be differentiated
// again (double backward). With create_graph=false the same rules run with
// recording disabled, which yields bit-identical first-order values.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gradmask::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct Node;
struct BackwardFn;

struct TensorImpl {
  std::vector<double> data;
  Shape shape;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  // A differentiable leaf.
  static Tensor leaf(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  // Leaves only; mutating an interior node would corrupt its graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat) const { return impl_->data.at(flat); }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  const std::shared_ptr<Node>& grad_fn() const { return impl_->grad_fn; }
  const TensorImpl* id() const { return impl_.get(); }

  // Same values, no graph linkage.
  Tensor detach() const;
  Tensor clone_leaf() const;

 private:
  friend Tensor make_result(const char* op, std::vector<double> data,
                            Shape shape, std::vector<Tensor> inputs,
                            BackwardFn backward);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Maps the upstream adjoint of a node's output to adjoints of its inputs.
// `needed[i]` is false for inputs whose adjoint nobody asked for; rules may
// skip them. Undefined entries mean "no contribution".
struct BackwardFn {
  std::function<std::vector<Tensor>(const Tensor& grad,
                                    const std::vector<Tensor>& inputs,
                                    const std::vector<bool>& needed)>
      fn;
};

struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

Tensor make_result(const char* op, std::vector<double> data, Shape shape,
                   std::vector<Tensor> inputs, BackwardFn backward);

// Graph recording switch (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// While active, every op result is checked and the first non-finite value
// throws NonFiniteError naming the op.
class NanTrap {
 public:
  NanTrap();
  ~NanTrap();
  NanTrap(const NanTrap&) = delete;
  NanTrap& operator=(const NanTrap&) = delete;

 private:
  bool previous_;
};

// Records the smallest |input| seen by relu while active. Finite-difference
// checks use it to reject points sitting too close to a kink.
class ReluKinkMonitor {
 public:
  ReluKinkMonitor();
  ~ReluKinkMonitor();
  ReluKinkMonitor(const ReluKinkMonitor&) = delete;
  ReluKinkMonitor& operator=(const ReluKinkMonitor&) = delete;
  double min_abs_input() const;

 private:
  ReluKinkMonitor* previous_;
  double min_abs_;
  friend void note_relu_inputs(std::span<const double>);
};

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Numerically stable ln(1 + e^x).
Tensor log1p_exp(const Tensor& a);

// Reductions and broadcasts.
Tensor sum(const Tensor& a);
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);

// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Channel axis is axis 1 of an [N, C, ...] tensor.
Tensor broadcast_channels(const Tensor& bias, const Shape& shape);
Tensor sum_channels(const Tensor& a);
Tensor bias_add(const Tensor& a, const Tensor& bias);

// [N, C, T] -> [N, C], mean over T.
Tensor global_avg_pool(const Tensor& a);
// [N, C] -> [N, C, length], each value divided by length.
Tensor spread_time(const Tensor& a, std::size_t length);

// Concatenate / slice along axis 1.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& a, std::size_t offset, std::size_t count);
Tensor embed_channels(const Tensor& a, std::size_t total, std::size_t offset);

// Flat gather and its adjoint.
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
Tensor scatter_add(const Tensor& values, std::span<const std::size_t> indices,
                   const Shape& shape);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x [N, Cin, Tin], w [Cout, Cin, K] -> [N, Cout, Tout], a true convolution
// (kernel reversed): y[n,o,t] = sum_{c,k} w[o,c,K-1-k] * x[n,c,t*stride+k-padding].
// So kernel [1, -1] over [1, 2, 4] gives [1, 2].
Tensor conv1d(const Tensor& x, const Tensor& w, ConvGeometry geom = {});
// Adjoints of conv1d with respect to x and w. Both are themselves
// differentiable so conv layers support double backward.
Tensor conv1d_input_grad(const Tensor& grad_out, const Tensor& w,
                         std::size_t input_length, ConvGeometry geom);
Tensor conv1d_weight_grad(const Tensor& x, const Tensor& grad_out,
                          std::size_t kernel_size, ConvGeometry geom);

std::size_t conv_output_length(std::size_t input_length,
                               std::size_t kernel_size, ConvGeometry geom);

// Adjoint of a scalar `output` with respect to each leaf. Leaves the output
// does not depend on get a zero adjoint. With create_graph the returned
// adjoints are differentiable.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& leaves,
                         bool create_graph = false);

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  int order = 1;
  // 0 checks every coordinate; otherwise a seeded random subset per leaf.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares analytic adjoints against central finite differences with
// step 1e-6 * max(1, |v|). Error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
//
// order 2 checks the derivative of s(p) = sum_i <r_i, df/dp_i> for fixed
// random directions r_i: the analytic side goes through double backward,
// the numeric side differences the analytic first derivative.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options = {});

}  // namespace gradmask::ad
