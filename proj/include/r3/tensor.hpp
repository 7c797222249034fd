#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "r3/rng.hpp"

namespace r3 {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Dense float64 tensor with an optional reverse-mode graph node. Row-major
// storage, dynamic tape: every op that touches a grad-requiring input
// records its parents and an adjoint closure on the result.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // extent 0 (2-D convenience)
  std::size_t cols() const;  // extent 1 (2-D convenience)

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double value() const;  // scalar fetch; throws on non-scalar
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  void set_requires_grad(bool v);
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if absent
  void clear_grad();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Adjoint rule: reads this node's grad (and saved forward values) and
  // accumulates into the parents' grad buffers.
  std::function<void(const TensorImpl&)> backward_fn;

  void accumulate(const std::vector<double>& g);
  std::vector<double>& grad_buffer();
};

// Graph recording is on by default; evaluation paths disable it with a guard
// so forward-only passes allocate no tape.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Pointwise ops accept equal shapes or a smaller operand whose shape matches
// a trailing suffix of the larger one (broadcast across leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows);

// Row-wise L2 normalization; rows with exactly zero norm pass through.
Tensor normalize_rows(const Tensor& a);

// Copy with the graph cut (stop-gradient).
Tensor detach(const Tensor& a);

// Forward takes `values`, backward routes the incoming gradient to `x`
// unchanged; `values` receives nothing through this node.
Tensor straight_through(const Tensor& x, const Tensor& values);

// Mean negative log-likelihood over rows whose target is >= 0. Returns the
// scalar loss; `count_out`, when non-null, receives the active-row count.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                          std::size_t* count_out = nullptr);

// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse topological
// order. A second backward on the same loss node is an error.
void backward(const Tensor& loss);

// Central-difference check of backward() for a scalar-valued tensor function.
// Returns max over coordinates of |fd - analytic| / max(|fd|, |analytic|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double eps);

}  // namespace r3
