#include "r3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace r3 {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void TensorImpl::accumulate(const std::vector<double>& g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// Wires up the result node when any input requires grad and recording is on.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<std::shared_ptr<TensorImpl>> parents,
               std::function<void(const TensorImpl&)> fn) {
  auto impl = make_impl(std::move(shape), std::move(data));
  if (g_grad_enabled) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p && p->requires_grad) needs = true;
    }
    if (needs) {
      impl->requires_grad = true;
      impl->parents = std::move(parents);
      impl->backward_fn = std::move(fn);
    }
  }
  return Tensor(impl);
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " +
                                shape_str(t.shape()));
  }
}

// Suffix-broadcast resolution: returns (large, small, small_is_b) or throws.
struct BroadcastPlan {
  const Tensor* large;
  const Tensor* small;
  bool small_is_b;
};

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  std::size_t off = large.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != large[off + i]) return false;
  }
  return true;
}

BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {&a, &b, true};
  if (is_suffix(b.shape(), a.shape())) return {&a, &b, true};
  if (is_suffix(a.shape(), b.shape())) return {&b, &a, false};
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_impl(shape, std::vector<double>(numel(shape), 0.0)));
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(make_impl(shape, std::vector<double>(numel(shape), value)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  }
  return Tensor(make_impl(shape, std::move(data)));
}

Tensor Tensor::scalar(double value) {
  return Tensor(make_impl({1}, std::vector<double>{value}));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return Tensor(make_impl(shape, std::move(data)));
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
std::size_t Tensor::rows() const { return impl_->shape.at(0); }
std::size_t Tensor::cols() const { return impl_->shape.at(1); }

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }

double Tensor::value() const {
  if (size() != 1) {
    throw std::logic_error("value(): tensor is not scalar, shape " +
                           shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  return impl_->data.at(i * cols() + j);
}

void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw std::logic_error("grad(): no gradient present; run backward() first");
  }
  return impl_->grad;
}

void Tensor::clear_grad() { impl_->grad.clear(); }

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* crow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op(
      {m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n](const TensorImpl& self) {
        const auto& g = self.grad;
        if (ai->requires_grad) {
          std::vector<double> da(m * k, 0.0);
          // dA = dC . B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = &g[i * n];
              const double* brow = &bi->data[p * n];
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              da[i * k + p] = s;
            }
          }
          ai->accumulate(da);
        }
        if (bi->requires_grad) {
          std::vector<double> db(k * n, 0.0);
          // dB = A^T . dC
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &g[i * n];
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = ai->data[i * k + p];
              double* dbrow = &db[p * n];
              for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
            }
          }
          bi->accumulate(db);
        }
      });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto& av = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  auto ai = a.impl();
  return make_op({c, r}, std::move(out), {ai}, [ai, r, c](const TensorImpl& self) {
    std::vector<double> da(r * c);
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t i = 0; i < r; ++i) da[i * c + j] = self.grad[j * r + i];
    }
    ai->accumulate(da);
  });
}

namespace {

enum class PointwiseOp { add, sub, mul };

Tensor pointwise(PointwiseOp op, const Tensor& a, const Tensor& b) {
  const char* name = op == PointwiseOp::add  ? "add"
                     : op == PointwiseOp::sub ? "sub"
                                              : "mul";
  BroadcastPlan plan = broadcast_plan(a, b, name);
  const auto& lv = plan.large->data();
  const auto& sv = plan.small->data();
  const std::size_t ln = lv.size(), sn = sv.size();
  std::vector<double> out(ln);
  const bool small_is_b = plan.small_is_b;
  for (std::size_t i = 0; i < ln; ++i) {
    const double x = lv[i];
    const double y = sv[i % sn];
    double lhs = small_is_b ? x : y;
    double rhs = small_is_b ? y : x;
    switch (op) {
      case PointwiseOp::add: out[i] = lhs + rhs; break;
      case PointwiseOp::sub: out[i] = lhs - rhs; break;
      case PointwiseOp::mul: out[i] = lhs * rhs; break;
    }
  }
  auto li = plan.large->impl();
  auto si = plan.small->impl();
  return make_op(
      plan.large->shape(), std::move(out), {li, si},
      [li, si, op, small_is_b, ln, sn](const TensorImpl& self) {
        const auto& g = self.grad;
        // sign/factor applied to each operand's adjoint
        if (li->requires_grad) {
          std::vector<double> dl(ln);
          for (std::size_t i = 0; i < ln; ++i) {
            double gi = g[i];
            switch (op) {
              case PointwiseOp::add: dl[i] = gi; break;
              case PointwiseOp::sub: dl[i] = small_is_b ? gi : -gi; break;
              case PointwiseOp::mul: dl[i] = gi * si->data[i % sn]; break;
            }
          }
          li->accumulate(dl);
        }
        if (si->requires_grad) {
          std::vector<double> ds(sn, 0.0);
          for (std::size_t i = 0; i < ln; ++i) {
            double gi = g[i];
            double contrib = 0.0;
            switch (op) {
              case PointwiseOp::add: contrib = gi; break;
              case PointwiseOp::sub: contrib = small_is_b ? -gi : gi; break;
              case PointwiseOp::mul: contrib = gi * li->data[i]; break;
            }
            ds[i % sn] += contrib;
          }
          si->accumulate(ds);
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return pointwise(PointwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return pointwise(PointwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return pointwise(PointwiseOp::mul, a, b); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {ai}, [ai, c](const TensorImpl& self) {
    std::vector<double> da(self.grad.size());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = self.grad[i] * c;
    ai->accumulate(da);
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v += c;
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {ai},
                 [ai](const TensorImpl& self) { ai->accumulate(self.grad); });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {ai}, [ai](const TensorImpl& self) {
    std::vector<double> da(self.grad.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
      da[i] = ai->data[i] > 0.0 ? self.grad[i] : 0.0;
    }
    ai->accumulate(da);
  });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.shape().size()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(a.shape()));
  }
  for (double v : a.data()) {
    if (std::isnan(v)) throw std::runtime_error("softmax: NaN in input");
  }
  const Shape& shape = a.shape();
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::size_t outer = a.size() / (n * inner);

  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto ai = a.impl();
  return make_op(
      shape, std::move(out), {ai},
      [ai, n, inner, outer](const TensorImpl& self) {
        std::vector<double> da(self.grad.size());
        // grad_in = s * (grad_out - dot(grad_out, s)) per normalization slice
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dot += self.grad[base + j * inner] * self.data[base + j * inner];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              da[idx] = self.data[idx] * (self.grad[idx] - dot);
            }
          }
        }
        ai->accumulate(da);
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const Shape& shape = x.shape();
  if (shape.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t d = shape.back();
  if (gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layer_norm: gain/bias length must equal last axis " +
                                std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return make_op(
      shape, std::move(out), {xi, gi, bi},
      [xi, gi, bi, d, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const TensorImpl& self) {
        const auto& g = self.grad;
        if (gi->requires_grad || bi->requires_grad) {
          std::vector<double> dgain(d, 0.0), dbias(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              dgain[j] += g[r * d + j] * xhat[r * d + j];
              dbias[j] += g[r * d + j];
            }
          }
          if (gi->requires_grad) gi->accumulate(dgain);
          if (bi->requires_grad) bi->accumulate(dbias);
        }
        if (xi->requires_grad) {
          std::vector<double> dx(rows * d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gi->data[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gi->data[j];
              dx[r * d + j] =
                  inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
          xi->accumulate(dx);
        }
      });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto xi = x.impl();
  return make_op(x.shape(), std::move(out), {xi},
                 [xi, mask = std::move(mask)](const TensorImpl& self) {
                   std::vector<double> dx(self.grad.size());
                   for (std::size_t i = 0; i < dx.size(); ++i) {
                     dx[i] = self.grad[i] * mask[i];
                   }
                   xi->accumulate(dx);
                 });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto ai = a.impl();
  return make_op({1}, {total}, {ai}, [ai](const TensorImpl& self) {
    std::vector<double> da(ai->data.size(), self.grad[0]);
    ai->accumulate(da);
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto ai = a.impl();
  return make_op({1}, {total * inv}, {ai}, [ai, inv](const TensorImpl& self) {
    std::vector<double> da(ai->data.size(), self.grad[0] * inv);
    ai->accumulate(da);
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " +
                                shape_str(shape) + " changes element count");
  }
  auto ai = a.impl();
  return make_op(shape, std::vector<double>(a.data()), {ai},
                 [ai](const TensorImpl& self) { ai->accumulate(self.grad); });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.rows() != r) {
      throw std::invalid_argument("concat_cols: row mismatch, " +
                                  shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    total_c += p.cols();
  }
  std::vector<double> out(r * total_c);
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    const auto& pv = p.data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(&pv[i * c], c, &out[i * total_c + off]);
    }
    impls.push_back(p.impl());
    widths.push_back(c);
    off += c;
  }
  return make_op(
      {r, total_c}, std::move(out), impls,
      [impls, widths, r, total_c](const TensorImpl& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < impls.size(); ++k) {
          const std::size_t c = widths[k];
          if (impls[k]->requires_grad) {
            std::vector<double> dp(r * c);
            for (std::size_t i = 0; i < r; ++i) {
              std::copy_n(&self.grad[i * total_c + off], c, &dp[i * c]);
            }
            impls[k]->accumulate(dp);
          }
          off += c;
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  check_2d(a, "slice_cols");
  const std::size_t r = a.rows(), c = a.cols();
  if (start + count > c) {
    throw std::out_of_range("slice_cols: columns [" + std::to_string(start) +
                            ", " + std::to_string(start + count) +
                            ") exceed width " + std::to_string(c));
  }
  std::vector<double> out(r * count);
  const auto& av = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(&av[i * c + start], count, &out[i * count]);
  }
  auto ai = a.impl();
  return make_op({r, count}, std::move(out), {ai},
                 [ai, start, count, r, c](const TensorImpl& self) {
                   std::vector<double> da(r * c, 0.0);
                   for (std::size_t i = 0; i < r; ++i) {
                     for (std::size_t j = 0; j < count; ++j) {
                       da[i * c + start + j] = self.grad[i * count + j];
                     }
                   }
                   ai->accumulate(da);
                 });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
  check_2d(table, "gather_rows");
  const std::size_t r = table.rows(), c = table.cols();
  std::vector<double> out(rows.size() * c);
  const auto& tv = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int idx = rows[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= r) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx) +
                              " out of range for " + std::to_string(r) + " rows");
    }
    std::copy_n(&tv[static_cast<std::size_t>(idx) * c], c, &out[i * c]);
  }
  auto ti = table.impl();
  return make_op({rows.size(), c}, std::move(out), {ti},
                 [ti, rows, c](const TensorImpl& self) {
                   std::vector<double> dt(ti->data.size(), 0.0);
                   for (std::size_t i = 0; i < rows.size(); ++i) {
                     double* dst = &dt[static_cast<std::size_t>(rows[i]) * c];
                     const double* src = &self.grad[i * c];
                     for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                   }
                   ti->accumulate(dt);
                 });
}

Tensor normalize_rows(const Tensor& a) {
  check_2d(a, "normalize_rows");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  std::vector<double> norms(r);
  const auto& av = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += av[i * c + j] * av[i * c + j];
    const double norm = std::sqrt(sq);
    norms[i] = norm;
    if (norm == 0.0) {
      std::copy_n(&av[i * c], c, &out[i * c]);
    } else {
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / norm;
    }
  }
  auto ai = a.impl();
  return make_op(
      a.shape(), std::move(out), {ai},
      [ai, r, c, norms = std::move(norms)](const TensorImpl& self) {
        std::vector<double> da(r * c);
        for (std::size_t i = 0; i < r; ++i) {
          if (norms[i] == 0.0) {
            for (std::size_t j = 0; j < c; ++j) da[i * c + j] = self.grad[i * c + j];
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dot += self.grad[i * c + j] * self.data[i * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            da[i * c + j] =
                (self.grad[i * c + j] - self.data[i * c + j] * dot) / norms[i];
          }
        }
        ai->accumulate(da);
      });
}

Tensor detach(const Tensor& a) {
  return Tensor(make_impl(a.shape(), std::vector<double>(a.data())));
}

Tensor straight_through(const Tensor& x, const Tensor& values) {
  if (x.shape() != values.shape()) {
    throw std::invalid_argument("straight_through: shape mismatch " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(values.shape()));
  }
  auto xi = x.impl();
  return make_op(x.shape(), std::vector<double>(values.data()), {xi},
                 [xi](const TensorImpl& self) { xi->accumulate(self.grad); });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                          std::size_t* count_out) {
  check_2d(logits, "cross_entropy_mean");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) {
    throw std::invalid_argument("cross_entropy_mean: " + std::to_string(n) +
                                " rows but " + std::to_string(targets.size()) +
                                " targets");
  }
  std::size_t count = 0;
  double total = 0.0;
  std::vector<double> lse(n, 0.0);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy_mean: target " + std::to_string(t) +
                              " out of range for vocab " + std::to_string(v));
    }
    const double* row = &lv[i * v];
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[i] = mx + std::log(s);
    total += lse[i] - row[t];
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("cross_entropy_mean: no active targets");
  }
  if (count_out) *count_out = count;
  const double inv = 1.0 / static_cast<double>(count);
  auto li = logits.impl();
  return make_op(
      {1}, {total * inv}, {li},
      [li, targets, n, v, inv, lse = std::move(lse)](const TensorImpl& self) {
        std::vector<double> dl(n * v, 0.0);
        const double go = self.grad[0] * inv;
        for (std::size_t i = 0; i < n; ++i) {
          const int t = targets[i];
          if (t < 0) continue;
          const double* row = &li->data[i * v];
          for (std::size_t j = 0; j < v; ++j) {
            double p = std::exp(row[j] - lse[i]);
            dl[i * v + j] = go * (p - (static_cast<int>(j) == t ? 1.0 : 0.0));
          }
        }
        li->accumulate(dl);
      });
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::logic_error("backward: loss must be a defined scalar tensor");
  }
  auto root = loss.impl();
  if (root->backward_done) {
    throw std::logic_error("backward: already run on this graph; rebuild the "
                           "forward pass before calling again");
  }
  root->backward_done = true;

  // Iterative post-order DFS: parents land before their consumers.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, bool>> stack{{root.get(), false}};
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      topo.push_back(node);
      continue;
    }
    if (visited.count(node)) continue;
    visited.insert(node);
    stack.push_back({node, true});
    for (const auto& p : node->parents) {
      if (p && !visited.count(p.get())) stack.push_back({p.get(), false});
    }
  }

  root->grad_buffer()[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be > 0");
  x.set_requires_grad(true);
  x.clear_grad();
  Tensor loss = f(x);
  backward(loss);
  std::vector<double> analytic = x.grad();

  double max_err = 0.0;
  auto& xd = x.data();
  NoGradGuard guard;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double saved = xd[i];
    xd[i] = saved + eps;
    const double up = f(x).value();
    xd[i] = saved - eps;
    const double down = f(x).value();
    xd[i] = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-8});
    max_err = std::max(max_err, std::fabs(fd - analytic[i]) / denom);
  }
  return max_err;
}

}  // namespace r3
