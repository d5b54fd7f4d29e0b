#pragma once

// Dense row-major tensor with a reverse-mode differentiation tape.
//
// Design notes:
//   - storage is contiguous and row-major; every shape transform copies
//     (no views / strides), which keeps the backward rules trivial
//   - broadcasting follows trailing-dimension alignment (numpy rules)
//   - a Tape owns the recorded backward closures for one training step;
//     ops called without a tape run grad-free (inference path)
//   - scalar type is a template parameter: float for training/inference,
//     double for finite-difference gradient checks

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/rng.hpp"

namespace pcfnat {

template <class T>
struct TensorNode {
  std::vector<index_t> shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<index_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(std::vector<index_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(1), requires_grad);
  }
  static Tensor filled(std::vector<index_t> shape, T value, bool requires_grad = false) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }
  static Tensor from_data(std::vector<index_t> shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (numel_of(shape) != static_cast<index_t>(data.size()))
      throw dim_error(strcat_msg("from_data: shape ", shape_str(shape), " wants ",
                                 numel_of(shape), " values, got ", data.size()));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }
  static Tensor randn(std::vector<index_t> shape, Rng& rng, T stddev = T(1),
                      bool requires_grad = false) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    for (T& v : t.node_->data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }
  static Tensor rand_uniform(std::vector<index_t> shape, Rng& rng, T lo, T hi,
                             bool requires_grad = false) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    for (T& v : t.node_->data)
      v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }
  static Tensor uninitialized(std::vector<index_t> shape, bool requires_grad = false) {
    for (index_t d : shape)
      if (d <= 0) throw dim_error("tensor extents must be positive, got " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data.resize(static_cast<std::size_t>(numel_of(t.node_->shape)));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<index_t>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  index_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  index_t numel() const { return static_cast<index_t>(node_->data.size()); }

  std::span<T> data() { return {node_->data.data(), node_->data.size()}; }
  std::span<const T> data() const { return {node_->data.data(), node_->data.size()}; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }

  // Gradient buffer; materializes zeros on first access so "unreached
  // tensors hold zero" reads true.
  std::span<T> grad() {
    ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<const T> grad() const {
    const_cast<Tensor*>(this)->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void accumulate_grad_at(index_t i, T v) {
    ensure_grad();
    node_->grad[static_cast<std::size_t>(i)] += v;
  }
  std::span<T> grad_accum() {  // ensure + expose for bulk accumulation
    ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }

  T item() const {
    if (numel() != 1) throw contract_error("item(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::initializer_list<index_t> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw dim_error("at(): rank mismatch");
    index_t off = 0;
    int d = 0;
    for (index_t i : idx) {
      off = off * node_->shape[static_cast<std::size_t>(d)] + i;
      ++d;
    }
    return node_->data[static_cast<std::size_t>(off)];
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }
  std::shared_ptr<TensorNode<T>> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  // Seeds d(loss)/d(loss) = 1 and replays the recorded ops in reverse.
  // A second call without reset() is a contract violation.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw contract_error("backward: loss must be scalar, shape " + shape_str(loss.shape()));
    if (entries_.empty()) throw contract_error("backward: tape is empty");
    if (consumed_) throw contract_error("backward: tape already consumed; call reset() first");
    consumed_ = true;
    loss.accumulate_grad_at(0, T(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Shape / broadcast helpers
// ---------------------------------------------------------------------------

inline std::vector<index_t> contiguous_strides(const std::vector<index_t>& shape) {
  std::vector<index_t> s(shape.size());
  index_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = acc;
    acc *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

inline std::vector<index_t> broadcast_shape(const std::vector<index_t>& a,
                                            const std::vector<index_t>& b) {
  const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  std::vector<index_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const index_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const index_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw dim_error(strcat_msg("shapes not broadcastable: ", shape_str(a), " vs ", shape_str(b)));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed at `out` rank, 0 on broadcast dimensions.
inline std::vector<index_t> broadcast_strides(const std::vector<index_t>& in_shape,
                                              const std::vector<index_t>& out_shape) {
  const std::size_t r = out_shape.size(), ri = in_shape.size();
  std::vector<index_t> in_str = contiguous_strides(in_shape);
  std::vector<index_t> s(r, 0);
  for (std::size_t i = 0; i < ri; ++i) {
    const std::size_t o = r - ri + i;
    if (in_shape[i] == out_shape[o])
      s[o] = in_str[i];
    else if (in_shape[i] == 1)
      s[o] = 0;
    else
      throw dim_error(strcat_msg("cannot broadcast ", shape_str(in_shape), " to ",
                                 shape_str(out_shape)));
  }
  return s;
}

// Odometer walk over out_shape yielding (flat_out, off_a, off_b).
template <class F>
void for_each_broadcast2(const std::vector<index_t>& out_shape,
                         const std::vector<index_t>& sa,
                         const std::vector<index_t>& sb, F&& f) {
  const index_t n = numel_of(out_shape);
  const int rank = static_cast<int>(out_shape.size());
  if (rank == 0) {
    f(index_t{0}, index_t{0}, index_t{0});
    return;
  }
  std::vector<index_t> idx(static_cast<std::size_t>(rank), 0);
  index_t ia = 0, ib = 0;
  for (index_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (int d = rank - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ia += sa[du];
      ib += sb[du];
      if (idx[du] < out_shape[du]) break;
      idx[du] = 0;
      ia -= sa[du] * out_shape[du];
      ib -= sb[du] * out_shape[du];
    }
  }
}

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* what) {
#ifndef NDEBUG
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw contract_error(strcat_msg("non-finite value produced by ", what));
#else
  (void)t;
  (void)what;
#endif
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

// out[i] = f(a[i]); backward: da[i] += dfdx(a[i], out[i]) * dout[i]
template <class T, class FwdF, class DerivF>
Tensor<T> unary_op(const Tensor<T>& a, Tape<T>* tape, const char* name, FwdF f, DerivF dfdx) {
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  const T* pa = a.data().data();
  T* po = out.data().data();
  const index_t n = a.numel();
  for (index_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  detail::check_finite(out, name);
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, dfdx]() mutable {
      if (!o1.has_grad()) return;
      auto go = o1.grad();
      auto ga = a1.grad_accum();
      auto xa = a1.data();
      auto yo = o1.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dfdx(xa[i], yo[i]) * go[i];
    });
  }
  return out;
}

enum class BinaryKind { add, sub, mul };

template <class T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, Tape<T>* tape) {
  const std::vector<index_t> oshape = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::uninitialized(oshape);
  const auto sa = broadcast_strides(a.shape(), oshape);
  const auto sb = broadcast_strides(b.shape(), oshape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();

  const bool same = a.shape() == b.shape();
  const index_t n = out.numel();
  switch (kind) {
    case BinaryKind::add:
      if (same)
        for (index_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      else
        for_each_broadcast2(oshape, sa, sb,
                            [&](index_t io, index_t ia, index_t ib) { po[io] = pa[ia] + pb[ib]; });
      break;
    case BinaryKind::sub:
      if (same)
        for (index_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      else
        for_each_broadcast2(oshape, sa, sb,
                            [&](index_t io, index_t ia, index_t ib) { po[io] = pa[ia] - pb[ib]; });
      break;
    case BinaryKind::mul:
      if (same)
        for (index_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      else
        for_each_broadcast2(oshape, sa, sb,
                            [&](index_t io, index_t ia, index_t ib) { po[io] = pa[ia] * pb[ib]; });
      break;
  }
  detail::check_finite(out, "binary op");

  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([a1 = a, b1 = b, o1 = out, oshape, sa, sb, kind]() mutable {
      if (!o1.has_grad()) return;
      auto go = o1.grad();
      const T* pa1 = a1.data().data();
      const T* pb1 = b1.data().data();
      T* ga = a1.requires_grad() ? a1.grad_accum().data() : nullptr;
      T* gb = b1.requires_grad() ? b1.grad_accum().data() : nullptr;
      switch (kind) {
        case BinaryKind::add:
          for_each_broadcast2(oshape, sa, sb, [&](index_t io, index_t ia, index_t ib) {
            if (ga) ga[ia] += go[io];
            if (gb) gb[ib] += go[io];
          });
          break;
        case BinaryKind::sub:
          for_each_broadcast2(oshape, sa, sb, [&](index_t io, index_t ia, index_t ib) {
            if (ga) ga[ia] += go[io];
            if (gb) gb[ib] -= go[io];
          });
          break;
        case BinaryKind::mul:
          for_each_broadcast2(oshape, sa, sb, [&](index_t io, index_t ia, index_t ib) {
            if (ga) ga[ia] += go[io] * pb1[ib];
            if (gb) gb[ib] += go[io] * pa1[ia];
          });
          break;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary_op(a, b, BinaryKind::add, tape);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary_op(a, b, BinaryKind::sub, tape);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary_op(a, b, BinaryKind::mul, tape);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> neg(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return scale(a, T(-1), tape);
}
template <class T>
Tensor<T> tanh(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "tanh", [](T x) { return std::tanh(x); },
                  [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "sigmoid",
                  [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                             : std::exp(x) / (T(1) + std::exp(x)); },
                  [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> relu(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "relu", [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "log", [](T x) { return std::log(x); },
                  [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "sqrt", [](T x) { return std::sqrt(x); },
                  [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> power(const Tensor<T>& a, T p, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "power", [p](T x) { return std::pow(x, p); },
                  [p](T x, T) { return p * std::pow(x, p - T(1)); });
}
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo, Tape<T>* tape = nullptr) {
  return unary_op(a, tape, "clamp_min", [lo](T x) { return x < lo ? lo : x; },
                  [lo](T x, T) { return x < lo ? T(0) : T(1); });
}

// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  constexpr double kA = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kB = 0.044715;
  auto fwd = [](T x) {
    const T u = static_cast<T>(kA) * (x + static_cast<T>(kB) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
  };
  auto deriv = [](T x, T) {
    const T u = static_cast<T>(kA) * (x + static_cast<T>(kB) * x * x * x);
    const T th = std::tanh(u);
    const T du = static_cast<T>(kA) * (T(1) + T(3) * static_cast<T>(kB) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
  };
  return unary_op(a, tape, "gelu", fwd, deriv);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N], row-major, ikj order.
template <class T>
void gemm_acc(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    for (index_t k = 0; k < K; ++k) {
      const T a = a_row[k];
      if (a == T(0)) continue;
      const T* b_row = B + k * N;
      for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,N] += A[M,K] * B^T where Bt is [N,K] row-major.
template <class T>
void gemm_acc_bt(const T* A, const T* Bt, T* C, index_t M, index_t K, index_t N) {
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    for (index_t j = 0; j < N; ++j) {
      const T* b_row = Bt + j * K;
      T acc = 0;
      for (index_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
      c_row[j] += acc;
    }
  }
}

// C[M,N] += A^T * B where At is [K,M] row-major.
template <class T>
void gemm_acc_at(const T* At, const T* B, T* C, index_t M, index_t K, index_t N) {
  for (index_t k = 0; k < K; ++k) {
    const T* a_row = At + k * M;
    const T* b_row = B + k * N;
    for (index_t i = 0; i < M; ++i) {
      const T a = a_row[i];
      if (a == T(0)) continue;
      T* c_row = C + i * N;
      for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw dim_error(strcat_msg("matmul: expected 2-D operands, got ", shape_str(a.shape()),
                               " and ", shape_str(b.shape())));
  if (a.dim(1) != b.dim(0))
    throw dim_error(strcat_msg("matmul: inner extents disagree: ", shape_str(a.shape()),
                               " x ", shape_str(b.shape())));
  const index_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  detail::check_finite(out, "matmul");
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([a1 = a, b1 = b, o1 = out, M, K, N]() mutable {
      if (!o1.has_grad()) return;
      const T* gc = o1.grad().data();
      if (a1.requires_grad())  // dA += dC * B^T
        detail::gemm_acc_bt(gc, b1.data().data(), a1.grad_accum().data(), M, N, K);
      if (b1.requires_grad())  // dB += A^T * dC
        detail::gemm_acc_at(a1.data().data(), gc, b1.grad_accum().data(), K, M, N);
    });
  }
  return out;
}

// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw dim_error(strcat_msg("bmm: incompatible shapes ", shape_str(a.shape()), " x ",
                               shape_str(b.shape())));
  const index_t Bn = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor<T> out = Tensor<T>::zeros({Bn, M, N});
  for (index_t g = 0; g < Bn; ++g)
    detail::gemm_acc(a.data().data() + g * M * K, b.data().data() + g * K * N,
                     out.data().data() + g * M * N, M, K, N);
  detail::check_finite(out, "bmm");
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([a1 = a, b1 = b, o1 = out, Bn, M, K, N]() mutable {
      if (!o1.has_grad()) return;
      const T* gc = o1.grad().data();
      for (index_t g = 0; g < Bn; ++g) {
        if (a1.requires_grad())
          detail::gemm_acc_bt(gc + g * M * N, b1.data().data() + g * K * N,
                              a1.grad_accum().data() + g * M * K, M, N, K);
        if (b1.requires_grad())
          detail::gemm_acc_at(a1.data().data() + g * M * K, gc + g * M * N,
                              b1.grad_accum().data() + g * K * N, K, M, N);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace detail {

inline void axis_extents(const std::vector<index_t>& shape, int axis, index_t& outer,
                         index_t& n, index_t& inner) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw dim_error(strcat_msg("axis ", axis, " out of range for shape ", shape_str(shape)));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  n = shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
}

inline int normalize_axis(const std::vector<index_t>& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank)
    throw dim_error(strcat_msg("axis ", axis, " out of range for shape ", shape_str(shape)));
  return ax;
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtraction per slice).
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis, Tape<T>* tape = nullptr) {
  index_t outer, n, inner;
  detail::axis_extents(a.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t o = 0; o < outer; ++o) {
    for (index_t in = 0; in < inner; ++in) {
      const index_t base = o * n * inner + in;
      T mx = px[base];
      for (index_t i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
      T denom = 0;
      for (index_t i = 0; i < n; ++i) {
        const T e = std::exp(px[base + i * inner] - mx);
        py[base + i * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (index_t i = 0; i < n; ++i) py[base + i * inner] *= inv;
    }
  }
  detail::check_finite(out, "softmax");
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, outer, n, inner]() mutable {
      if (!o1.has_grad()) return;
      const T* y = o1.data().data();
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for (index_t o = 0; o < outer; ++o) {
        for (index_t in = 0; in < inner; ++in) {
          const index_t base = o * n * inner + in;
          T dot = 0;
          for (index_t i = 0; i < n; ++i) dot += y[base + i * inner] * gy[base + i * inner];
          for (index_t i = 0; i < n; ++i) {
            const index_t k = base + i * inner;
            gx[k] += y[k] * (gy[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<index_t> reduced_shape(const std::vector<index_t>& shape, int axis,
                                          bool keepdim) {
  const int ax = normalize_axis(shape, axis);
  std::vector<index_t> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i == ax) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(shape[static_cast<std::size_t>(i)]);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim, Tape<T>* tape = nullptr) {
  index_t outer, n, inner;
  detail::axis_extents(a.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::zeros(detail::reduced_shape(a.shape(), axis, keepdim));
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t o = 0; o < outer; ++o)
    for (index_t i = 0; i < n; ++i)
      for (index_t in = 0; in < inner; ++in)
        py[o * inner + in] += px[(o * n + i) * inner + in];
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, outer, n, inner]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for (index_t o = 0; o < outer; ++o)
        for (index_t i = 0; i < n; ++i)
          for (index_t in = 0; in < inner; ++in)
            gx[(o * n + i) * inner + in] += gy[o * inner + in];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim, Tape<T>* tape = nullptr) {
  const index_t n = a.dim(detail::normalize_axis(a.shape(), axis));
  return scale(sum(a, axis, keepdim, tape), T(1) / static_cast<T>(n), tape);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = 0;
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out]() mutable {
      if (!o1.has_grad()) return;
      const T g = o1.grad()[0];
      auto gx = a1.grad_accum();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  return scale(sum_all(a, tape), T(1) / static_cast<T>(a.numel()), tape);
}

// Biased (population) variance along an axis.
template <class T>
Tensor<T> variance(const Tensor<T>& a, int axis, bool keepdim, Tape<T>* tape = nullptr) {
  index_t outer, n, inner;
  detail::axis_extents(a.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::zeros(detail::reduced_shape(a.shape(), axis, keepdim));
  std::vector<T> means(static_cast<std::size_t>(outer * inner), T(0));
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t o = 0; o < outer; ++o)
    for (index_t i = 0; i < n; ++i)
      for (index_t in = 0; in < inner; ++in)
        means[static_cast<std::size_t>(o * inner + in)] += px[(o * n + i) * inner + in];
  for (auto& m : means) m /= static_cast<T>(n);
  for (index_t o = 0; o < outer; ++o)
    for (index_t i = 0; i < n; ++i)
      for (index_t in = 0; in < inner; ++in) {
        const T d = px[(o * n + i) * inner + in] - means[static_cast<std::size_t>(o * inner + in)];
        py[o * inner + in] += d * d;
      }
  for (index_t j = 0; j < outer * inner; ++j) py[j] /= static_cast<T>(n);
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, means, outer, n, inner]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      const T* px1 = a1.data().data();
      T* gx = a1.grad_accum().data();
      const T invn = T(2) / static_cast<T>(n);
      for (index_t o = 0; o < outer; ++o)
        for (index_t i = 0; i < n; ++i)
          for (index_t in = 0; in < inner; ++in) {
            const index_t k = (o * n + i) * inner + in;
            gx[k] += invn * (px1[k] - means[static_cast<std::size_t>(o * inner + in)]) *
                     gy[o * inner + in];
          }
    });
  }
  return out;
}

// Max along an axis; gradient routes to the (first) argmax.
template <class T>
Tensor<T> max_along(const Tensor<T>& a, int axis, bool keepdim, Tape<T>* tape = nullptr) {
  index_t outer, n, inner;
  detail::axis_extents(a.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::uninitialized(detail::reduced_shape(a.shape(), axis, keepdim));
  std::vector<index_t> argmax(static_cast<std::size_t>(outer * inner), 0);
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t o = 0; o < outer; ++o)
    for (index_t in = 0; in < inner; ++in) {
      index_t best = 0;
      T bv = px[o * n * inner + in];
      for (index_t i = 1; i < n; ++i) {
        const T v = px[(o * n + i) * inner + in];
        if (v > bv) {
          bv = v;
          best = i;
        }
      }
      py[o * inner + in] = bv;
      argmax[static_cast<std::size_t>(o * inner + in)] = best;
    }
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, argmax, outer, n, inner]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for (index_t o = 0; o < outer; ++o)
        for (index_t in = 0; in < inner; ++in) {
          const index_t j = o * inner + in;
          gx[(o * n + argmax[static_cast<std::size_t>(j)]) * inner + in] += gy[j];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape transforms (all copying)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<index_t> new_shape, Tape<T>* tape = nullptr) {
  if (numel_of(new_shape) != a.numel())
    throw dim_error(strcat_msg("reshape: cannot view ", shape_str(a.shape()), " as ",
                               shape_str(new_shape)));
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape),
                                       std::vector<T>(a.data().begin(), a.data().end()));
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out]() mutable {
      if (!o1.has_grad()) return;
      auto gy = o1.grad();
      auto gx = a1.grad_accum();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm, Tape<T>* tape = nullptr) {
  const int rank = a.ndim();
  if (static_cast<int>(perm.size()) != rank) throw dim_error("permute: rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  std::vector<index_t> oshape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)])
      throw dim_error("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
    oshape[static_cast<std::size_t>(i)] = a.dim(p);
  }
  Tensor<T> out = Tensor<T>::uninitialized(oshape);
  const auto in_str = contiguous_strides(a.shape());
  // stride of out dim i in the input = in_str[perm[i]]
  std::vector<index_t> map_str(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    map_str[static_cast<std::size_t>(i)] = in_str[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  const T* px = a.data().data();
  T* py = out.data().data();
  std::vector<index_t> zero(static_cast<std::size_t>(rank), 0);
  for_each_broadcast2(oshape, map_str, zero,
                      [&](index_t io, index_t ii, index_t) { py[io] = px[ii]; });
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, oshape, map_str, zero]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for_each_broadcast2(oshape, map_str, zero,
                          [&](index_t io, index_t ii, index_t) { gx[ii] += gy[io]; });
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis, Tape<T>* tape = nullptr) {
  if (parts.empty()) throw contract_error("concat: no inputs");
  const int ax = detail::normalize_axis(parts[0].shape(), axis);
  std::vector<index_t> oshape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const auto& s = parts[p].shape();
    if (static_cast<int>(s.size()) != static_cast<int>(oshape.size()))
      throw dim_error("concat: rank mismatch");
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
      if (i != ax && s[static_cast<std::size_t>(i)] != oshape[static_cast<std::size_t>(i)])
        throw dim_error(strcat_msg("concat: extent mismatch on axis ", i, ": ",
                                   shape_str(oshape), " vs ", shape_str(s)));
    oshape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
  }
  Tensor<T> out = Tensor<T>::uninitialized(oshape);
  index_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= oshape[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < static_cast<int>(oshape.size()); ++i)
    inner *= oshape[static_cast<std::size_t>(i)];
  const index_t ntot = oshape[static_cast<std::size_t>(ax)];
  T* py = out.data().data();
  index_t off = 0;
  std::vector<index_t> offsets;
  for (const auto& part : parts) {
    offsets.push_back(off);
    const index_t np = part.dim(ax);
    const T* px = part.data().data();
    for (index_t o = 0; o < outer; ++o)
      std::memcpy(py + (o * ntot + off) * inner, px + o * np * inner,
                  static_cast<std::size_t>(np * inner) * sizeof(T));
    off += np;
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape && needs) {
    out.set_requires_grad(true);
    tape->record([parts1 = parts, o1 = out, offsets, outer, inner, ntot]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      for (std::size_t p = 0; p < parts1.size(); ++p) {
        if (!parts1[p].requires_grad()) continue;
        auto& part = parts1[p];
        const index_t np = part.numel() / (outer * inner);
        T* gx = part.grad_accum().data();
        const index_t off1 = offsets[p];
        for (index_t o = 0; o < outer; ++o)
          for (index_t i = 0; i < np * inner; ++i)
            gx[o * np * inner + i] += gy[(o * ntot + off1) * inner + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, index_t start, index_t len,
                Tape<T>* tape = nullptr) {
  const int ax = detail::normalize_axis(a.shape(), axis);
  const index_t n = a.dim(ax);
  if (start < 0 || len <= 0 || start + len > n)
    throw dim_error(strcat_msg("slice: [", start, ",", start + len, ") out of range for axis ",
                               ax, " of ", shape_str(a.shape())));
  std::vector<index_t> oshape = a.shape();
  oshape[static_cast<std::size_t>(ax)] = len;
  Tensor<T> out = Tensor<T>::uninitialized(oshape);
  index_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t o = 0; o < outer; ++o)
    std::memcpy(py + o * len * inner, px + (o * n + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(T));
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, outer, inner, n, start, len]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for (index_t o = 0; o < outer; ++o)
        for (index_t i = 0; i < len * inner; ++i)
          gx[(o * n + start) * inner + i] += gy[o * len * inner + i];
    });
  }
  return out;
}

// Pads the last (time) axis; gradient on the padded region is dropped.
template <class T>
Tensor<T> pad_end(const Tensor<T>& a, index_t left, index_t right, T value,
                  Tape<T>* tape = nullptr) {
  if (left < 0 || right < 0) throw dim_error("pad_end: negative padding");
  std::vector<index_t> oshape = a.shape();
  const index_t n = oshape.back();
  oshape.back() = n + left + right;
  Tensor<T> out = Tensor<T>::filled(oshape, value);
  const index_t rows = a.numel() / n;
  const T* px = a.data().data();
  T* py = out.data().data();
  for (index_t r = 0; r < rows; ++r)
    std::memcpy(py + r * (n + left + right) + left, px + r * n,
                static_cast<std::size_t>(n) * sizeof(T));
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([a1 = a, o1 = out, rows, n, left, right]() mutable {
      if (!o1.has_grad()) return;
      const T* gy = o1.grad().data();
      T* gx = a1.grad_accum().data();
      for (index_t r = 0; r < rows; ++r)
        for (index_t i = 0; i < n; ++i)
          gx[r * n + i] += gy[r * (n + left + right) + left + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy (fused, numerically stable)
// ---------------------------------------------------------------------------

// logits [B,S], labels in [0,S). Returns mean cross-entropy as a scalar.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        Tape<T>* tape = nullptr) {
  if (logits.ndim() != 2)
    throw dim_error("cross_entropy: logits must be [batch, classes]");
  const index_t B = logits.dim(0), S = logits.dim(1);
  if (static_cast<index_t>(labels.size()) != B)
    throw contract_error("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= S)
      throw contract_error(strcat_msg("cross_entropy: label ", y, " out of range [0,", S, ")"));
  const T* px = logits.data().data();
  std::vector<T> probs(static_cast<std::size_t>(B * S));
  T loss = 0;
  for (index_t b = 0; b < B; ++b) {
    const T* row = px + b * S;
    T mx = row[0];
    for (index_t s = 1; s < S; ++s) mx = std::max(mx, row[s]);
    T denom = 0;
    for (index_t s = 0; s < S; ++s) {
      const T e = std::exp(row[s] - mx);
      probs[static_cast<std::size_t>(b * S + s)] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (index_t s = 0; s < S; ++s) probs[static_cast<std::size_t>(b * S + s)] *= inv;
    loss -= std::log(probs[static_cast<std::size_t>(b * S + labels[static_cast<std::size_t>(b)])]);
  }
  loss /= static_cast<T>(B);
  Tensor<T> out = Tensor<T>::scalar(loss);
  detail::check_finite(out, "cross_entropy");
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([l1 = logits, o1 = out, probs, labels, B, S]() mutable {
      if (!o1.has_grad()) return;
      const T g = o1.grad()[0] / static_cast<T>(B);
      T* gx = l1.grad_accum().data();
      for (index_t b = 0; b < B; ++b) {
        for (index_t s = 0; s < S; ++s)
          gx[b * S + s] += g * probs[static_cast<std::size_t>(b * S + s)];
        gx[b * S + labels[static_cast<std::size_t>(b)]] -= g;
      }
    });
  }
  return out;
}

}  // namespace pcfnat
