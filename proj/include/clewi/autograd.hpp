#pragma once

// Reverse-mode differentiation over a fixed primitive set.
//
// A Tape records every op applied to its Vars together with a closure that
// turns the output gradient into input gradients. Values are immutable once
// pushed. A non-recording tape evaluates the same ops without storing
// closures, which is how inference and statistics passes run.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/tensor.hpp"

namespace clewi {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using Tensor = BasicTensor<T>;
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor value) {
    return push(std::move(value), false, nullptr);
  }

  /// Trainable leaf. Only tracked for gradients when the tape records.
  Var<T> parameter(std::string name, Tensor value) {
    auto v = push(std::move(value), record_, nullptr);
    if (record_) params_.emplace_back(std::move(name), v.id);
    return v;
  }

  const Tensor& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends an op output. `needs_grad` is true when any input requires grad.
  Var<T> push(Tensor value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && needs_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Gradient slot of `v`, zero-initialised on first touch; null when `v`
  /// does not require a gradient.
  Tensor* grad_slot(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Runs the tape backward from a scalar loss and returns d(loss)/d(param)
  /// for every parameter leaf, keyed by name.
  std::map<std::string, Tensor> backward(Var<T> loss) {
    if (loss.tape != this) throw Error("backward: loss belongs to another tape");
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(value(loss).shape()));
    }
    if (!requires_grad(loss)) {
      throw MissingGradientError(
          "backward: loss is detached from every trainable parameter");
    }
    for (auto& n : nodes_) n.has_grad = false;
    *grad_slot(loss) = Tensor(value(loss).shape(), T{1});
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      // Closures only touch grads of earlier nodes; no node is appended here.
      n.backward(*this, n.grad);
    }
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : params_) {
      const Node& n = nodes_[id];
      if (!n.has_grad) {
        throw MissingGradientError("backward: no gradient reached '" + name + "'");
      }
      auto [it, inserted] = out.emplace(name, n.grad);
      if (!inserted) {
        for (std::size_t k = 0; k < n.grad.size(); ++k) it->second[k] += n.grad[k];
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

enum class BnMode {
  Train,    ///< batch statistics, running stats updated with momentum
  Eval,     ///< running statistics
  Collect,  ///< batch statistics, running stats updated, no gradients
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace ops {

namespace detail {

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw Error("ops: operands live on different tapes");
}

template <class T>
void require_same_shape(const char* op, const BasicTensor<T>& a,
                        const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

}  // namespace detail

/// a[r x k] * b[k x c]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(A.shape()) + " by " +
                     shape_str(B.shape()));
  }
  const std::size_t R = A.dim(0), K = A.dim(1), C = B.dim(1);
  BasicTensor<T> out({R, C});
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += double(A[r * K + k]) * B[k * C + c];
      out[r * C + c] = static_cast<T>(acc);
    }
  }
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [a, b, R, K, C](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) acc += double(g[r * C + c]) * B[k * C + c];
          (*ga)[r * K + k] += static_cast<T>(acc);
        }
    }
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < R; ++r) acc += double(A[r * K + k]) * g[r * C + c];
          (*gb)[k * C + c] += static_cast<T>(acc);
        }
    }
  });
}

/// Affine layer: x[N x in] * W^T + b, with W[out x in] and b[out].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& B = b.value();
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1) || B.rank() != 1 ||
      B.dim(0) != W.dim(0)) {
    throw ShapeError("linear: input " + shape_str(X.shape()) + ", weight " +
                     shape_str(W.shape()) + ", bias " + shape_str(B.shape()));
  }
  const std::size_t N = X.dim(0), In = X.dim(1), Out = W.dim(0);
  BasicTensor<T> out({N, Out});
  for (std::size_t n = 0; n < N; ++n) {
    const T* xr = X.data() + n * In;
    for (std::size_t o = 0; o < Out; ++o) {
      const T* wr = W.data() + o * In;
      double acc = B[o];
      for (std::size_t i = 0; i < In; ++i) acc += double(xr[i]) * wr[i];
      out[n * Out + o] = static_cast<T>(acc);
    }
  }
  return x.tape->push(std::move(out), detail::any_grad({x, w, b}),
                      [x, w, b, N, In, Out](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    if (auto* gx = t.grad_slot(x)) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < In; ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < Out; ++o) acc += double(g[n * Out + o]) * W[o * In + i];
          (*gx)[n * In + i] += static_cast<T>(acc);
        }
    }
    if (auto* gw = t.grad_slot(w)) {
      for (std::size_t o = 0; o < Out; ++o)
        for (std::size_t i = 0; i < In; ++i) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += double(g[n * Out + o]) * X[n * In + i];
          (*gw)[o * In + i] += static_cast<T>(acc);
        }
    }
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t o = 0; o < Out; ++o) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) acc += g[n * Out + o];
        (*gb)[o] += static_cast<T>(acc);
      }
    }
  });
}

/// Output spatial extent of a convolution; throws when it is not integral.
inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (stride == 0 || padded < k || (padded - k) % stride != 0) {
    throw ShapeError("conv2d: non-integer output size for input " +
                     std::to_string(in) + ", kernel " + std::to_string(k) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

/// Cross-correlation of x[N x C x H x W] with w[O x C x k x k], no bias.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, w);
  const auto& X = x.value();
  const auto& Wt = w.value();
  if (X.rank() != 4 || Wt.rank() != 4 || X.dim(1) != Wt.dim(1) ||
      Wt.dim(2) != Wt.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(X.shape()) + ", weight " +
                     shape_str(Wt.shape()));
  }
  const std::size_t k = Wt.dim(2);
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const std::size_t O = Wt.dim(0);
  const std::size_t Ho = conv_out_size(H, k, stride, pad);
  const std::size_t Wo = conv_out_size(Wd, k, stride, pad);

  // Visits every (output, input, weight) triple with in-bounds input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::size_t out_idx = ((n * O + o) * Ho + oy) * Wo + ox;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = long(oy * stride + ky) - long(pad);
                if (iy < 0 || iy >= long(H)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = long(ox * stride + kx) - long(pad);
                  if (ix < 0 || ix >= long(Wd)) continue;
                  const std::size_t in_idx = ((n * C + c) * H + std::size_t(iy)) * Wd + std::size_t(ix);
                  const std::size_t w_idx = ((o * C + c) * k + ky) * k + kx;
                  fn(out_idx, in_idx, w_idx);
                }
              }
          }
  };

  std::vector<double> acc(N * O * Ho * Wo, 0.0);
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
    acc[oi] += double(X[ii]) * Wt[wi];
  });
  BasicTensor<T> out({N, O, Ho, Wo});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);

  return x.tape->push(std::move(out), detail::any_grad({x, w}),
                      [x, w, for_each_tap](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& X = t.value(x);
    const auto& Wt = t.value(w);
    auto* gx = t.grad_slot(x);
    auto* gw = t.grad_slot(w);
    std::vector<double> ax(gx ? gx->size() : 0, 0.0);
    std::vector<double> aw(gw ? gw->size() : 0, 0.0);
    for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
      if (gx) ax[ii] += double(g[oi]) * Wt[wi];
      if (gw) aw[wi] += double(g[oi]) * X[ii];
    });
    for (std::size_t i = 0; i < ax.size(); ++i) (*gx)[i] += static_cast<T>(ax[i]);
    for (std::size_t i = 0; i < aw.size(); ++i) (*gw)[i] += static_cast<T>(aw[i]);
  });
}

/// Batch normalisation over the channel axis (axis 1) of a [N x C] or
/// [N x C x H x W] input.
///
/// Running statistics live outside the tape and are updated in place in
/// Train and Collect modes: running = (1 - momentum) * running + momentum *
/// batch, where the variance fed to the running estimate is unbiased.
/// Zero-variance channels normalise to zero through the epsilon floor.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta,
                  BasicTensor<T>& running_mean, BasicTensor<T>& running_var,
                  BnMode mode, double momentum = kBatchNormMomentum,
                  double eps = kBatchNormEps) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const auto& X = x.value();
  if (X.rank() != 2 && X.rank() != 4) {
    throw ShapeError("batch_norm: expected rank 2 or 4 input, got " +
                     shape_str(X.shape()));
  }
  const std::size_t N = X.dim(0), C = X.dim(1);
  const std::size_t S = X.rank() == 4 ? X.dim(2) * X.dim(3) : 1;
  for (const auto* p : {&gamma.value(), &beta.value(), &static_cast<const BasicTensor<T>&>(running_mean),
                        &static_cast<const BasicTensor<T>&>(running_var)}) {
    if (p->rank() != 1 || p->dim(0) != C) {
      throw ShapeError("batch_norm: channel count " + std::to_string(C) +
                       " does not match parameter " + shape_str(p->shape()));
    }
  }
  const std::size_t M = N * S;
  const bool batch_stats = mode != BnMode::Eval;

  std::vector<double> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double m, v;
    if (batch_stats) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) s += X[(n * C + c) * S + i];
      m = s / double(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
          const double d = X[(n * C + c) * S + i] - m;
          ss += d * d;
        }
      v = ss / double(M);
      const double unbiased = M > 1 ? ss / double(M - 1) : v;
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * m);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    mean[c] = m;
    inv_std[c] = 1.0 / std::sqrt(v + eps);
  }

  const auto& G = gamma.value();
  const auto& B = beta.value();
  BasicTensor<T> xhat(X.shape());
  BasicTensor<T> out(X.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t idx = (n * C + c) * S + i;
        const double h = (X[idx] - mean[c]) * inv_std[c];
        xhat[idx] = static_cast<T>(h);
        out[idx] = static_cast<T>(double(G[c]) * h + B[c]);
      }

  const bool needs = detail::any_grad({x, gamma, beta}) && mode != BnMode::Collect;
  return x.tape->push(std::move(out), needs,
                      [=, xhat = std::move(xhat)](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& G = t.value(gamma);
    std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t idx = (n * C + c) * S + i;
          sum_g[c] += g[idx];
          sum_gh[c] += double(g[idx]) * xhat[idx];
        }
    if (auto* gg = t.grad_slot(gamma))
      for (std::size_t c = 0; c < C; ++c) (*gg)[c] += static_cast<T>(sum_gh[c]);
    if (auto* gb = t.grad_slot(beta))
      for (std::size_t c = 0; c < C; ++c) (*gb)[c] += static_cast<T>(sum_g[c]);
    if (auto* gx = t.grad_slot(x)) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < S; ++i) {
            const std::size_t idx = (n * C + c) * S + i;
            const double dh = double(g[idx]) * G[c];
            double dx;
            if (batch_stats) {
              // d/dx of (x - mean) / sqrt(var + eps) with batch moments.
              dx = inv_std[c] / double(M) *
                   (double(M) * dh - G[c] * sum_g[c] - double(xhat[idx]) * G[c] * sum_gh[c]);
            } else {
              dx = dh * inv_std[c];
            }
            (*gx)[idx] += static_cast<T>(dx);
          }
    }
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  const auto& X = x.value();
  BasicTensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > T{0} ? X[i] : T{0};
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [x](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& X = t.value(x);
    auto* gx = t.grad_slot(x);
    for (std::size_t i = 0; i < X.size(); ++i)
      if (X[i] > T{0}) (*gx)[i] += g[i];
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  const auto& A = a.value();
  const auto& B = b.value();
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    for (auto v : {a, b})
      if (auto* gv = t.grad_slot(v))
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
  });
}

/// Element-wise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  const auto& A = a.value();
  const auto& B = b.value();
  BasicTensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (auto* ga = t.grad_slot(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B[i];
    if (auto* gb = t.grad_slot(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A[i];
  });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  const auto& X = x.value();
  BasicTensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * factor;
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [x, factor](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
  });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var<T> sum(Var<T> x) {
  const auto& X = x.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
  BasicTensor<T> out({1}, static_cast<T>(acc));
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [x](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0];
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [x](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// Non-overlapping average pooling with a k x k window and stride k.
template <class T>
Var<T> avgpool2d(Var<T> x, std::size_t k) {
  const auto& X = x.value();
  if (X.rank() != 4 || k == 0 || X.dim(2) % k != 0 || X.dim(3) % k != 0) {
    throw ShapeError("avgpool2d: window " + std::to_string(k) +
                     " does not tile input " + shape_str(X.shape()));
  }
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / double(k * k);
  BasicTensor<T> out({N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            acc += X[(nc * H + oy * k + dy) * W + ox * k + dx];
        out[(nc * Ho + oy) * Wo + ox] = static_cast<T>(acc * inv);
      }
  return x.tape->push(std::move(out), x.tape->requires_grad(x),
                      [=](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_slot(x);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const T share = static_cast<T>(g[(nc * Ho + oy) * Wo + ox] * inv);
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx)
              (*gx)[(nc * H + oy * k + dy) * W + ox * k + dx] += share;
        }
  });
}

/// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const auto& L = logits.value();
  if (L.rank() != 2 || L.dim(0) != labels.size() || L.dim(0) == 0) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(L.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = L.dim(0), K = L.dim(1);
  BasicTensor<T> probs({N, K});
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || std::size_t(y) >= K) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(K) + ")");
    }
    const T* row = L.data() + n * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(row[k]) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k)
      probs[n * K + k] = static_cast<T>(std::exp(double(row[k]) - lse));
    total += lse - double(row[std::size_t(y)]);
  }
  BasicTensor<T> out({1}, static_cast<T>(total / double(N)));
  return logits.tape->push(std::move(out), logits.tape->requires_grad(logits),
                           [=, probs = std::move(probs)](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gl = t.grad_slot(logits);
    const double s = double(g[0]) / double(N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        double d = probs[n * K + k];
        if (k == std::size_t(labels[n])) d -= 1.0;
        (*gl)[n * K + k] += static_cast<T>(d * s);
      }
  });
}

/// Mean squared error against a constant target.
template <class T>
Var<T> mse(Var<T> pred, const BasicTensor<T>& target) {
  const auto& P = pred.value();
  detail::require_same_shape("mse", P, target);
  if (P.empty()) throw ShapeError("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = double(P[i]) - target[i];
    acc += d * d;
  }
  const double n = double(P.size());
  BasicTensor<T> out({1}, static_cast<T>(acc / n));
  return pred.tape->push(std::move(out), pred.tape->requires_grad(pred),
                         [pred, target, n](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& P = t.value(pred);
    auto* gp = t.grad_slot(pred);
    for (std::size_t i = 0; i < P.size(); ++i)
      (*gp)[i] += static_cast<T>(2.0 * (double(P[i]) - target[i]) / n * g[0]);
  });
}

}  // namespace ops
}  // namespace clewi
