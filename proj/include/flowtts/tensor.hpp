#pragma once

// Dense tensor with reverse-mode autodiff on an explicit tape.
// Scalar type is a template parameter: float for training, double for
// finite-difference gradient verification. Matrix products are backed by
// CBLAS; everything else is plain loops.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <vector>

#include "flowtts/common.hpp"

namespace flowtts {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Full-output NaN scanning is opt-in (tests switch it on); ops with genuine
// singularities always validate their outputs.
inline bool& nan_guard() {
  static bool on = false;
  return on;
}

namespace detail {

template <class S>
struct Storage {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until touched by backward
  bool requires_grad = false;
};

inline void blas_single_thread_once() {
  static std::once_flag flag;
  std::call_once(flag, []() { openblas_set_num_threads(1); });
}

// Row-major C = alpha * op(A) op(B) + beta * C
inline void raw_gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                     float alpha, const float* a, const float* b, float beta,
                     float* c) {
  blas_single_thread_once();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), alpha, a,
              int(ta ? m : k), b, int(tb ? k : n), beta, c, int(n));
}

inline void raw_gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                     double alpha, const double* a, const double* b,
                     double beta, double* c) {
  blas_single_thread_once();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), alpha, a,
              int(ta ? m : k), b, int(tb ? k : n), beta, c, int(n));
}

}  // namespace detail

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->value.assign(size_t(shape_numel(t.st_->shape)), S(0));
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.st_->value.begin(), t.st_->value.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from(std::vector<S> data, Shape shape) {
    if (int64_t(data.size()) != shape_numel(shape))
      fail("Tensor::from: data length " + std::to_string(data.size()) +
           " does not match shape " + shape_str(shape));
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->value = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, S scale = S(1),
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.st_->value) v = S(rng.normal()) * scale;
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int64_t numel() const { return int64_t(st_->value.size()); }
  int64_t rows() const { return st_->shape.size() == 2 ? st_->shape[0] : 1; }
  int64_t cols() const {
    return st_->shape.size() == 2 ? st_->shape[1] : st_->shape[0];
  }
  S* data() { return st_->value.data(); }
  const S* data() const { return st_->value.data(); }
  S item() const {
    if (numel() != 1) fail("Tensor::item on non-scalar " + shape_str(shape()));
    return st_->value[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool rg) { st_->requires_grad = rg; }
  bool has_grad() const { return st_ && !st_->grad.empty(); }
  // Gradient buffer, allocated zeroed on first touch. Storage constness is
  // shallow (shared handle), so this is const like data() would be in a view.
  S* grad() const {
    ensure_grad();
    return st_->grad.data();
  }
  void ensure_grad() const {
    if (st_->grad.empty()) st_->grad.assign(st_->value.size(), S(0));
  }
  void zero_grad() const {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

 private:
  std::shared_ptr<detail::Storage<S>> st_;
};

// Ordered record of executed ops. Backward replays the record in exact
// reverse execution order; a second backward without clear() is an error.
template <class S>
class Tape {
 public:
  Tape() : prev_(current_ref()) { current_ref() = this; }
  ~Tape() { current_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ref(); }
  static Tape* swap_current(Tape* t) {
    Tape*& cur = current_ref();
    Tape* old = cur;
    cur = t;
    return old;
  }

  void push(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }

  void backward(const Tensor<S>& loss) {
    if (used_) fail("Tape::backward called twice without clear()");
    if (loss.numel() != 1)
      fail("Tape::backward requires a scalar loss, got " +
           shape_str(loss.shape()));
    used_ = true;
    loss.grad()[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() {
    ops_.clear();
    used_ = false;
  }

 private:
  static Tape*& current_ref() {
    thread_local Tape* cur = nullptr;
    return cur;
  }
  std::vector<std::function<void()>> ops_;
  Tape* prev_ = nullptr;
  bool used_ = false;
};

// Suspends tape recording for the scope (frozen models, inference paths).
template <class S>
class NoGrad {
 public:
  NoGrad() : prev_(Tape<S>::swap_current(nullptr)) {}
  ~NoGrad() { Tape<S>::swap_current(prev_); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<S>* prev_;
};

namespace detail {

template <class S>
bool tracking(std::initializer_list<const Tensor<S>*> ins) {
  if (!Tape<S>::current()) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
void finish(const char* op, Tensor<S>& out, bool track,
            std::function<void()> backward) {
  if (nan_guard()) {
    for (int64_t i = 0; i < out.numel(); ++i)
      if (!std::isfinite(out.data()[i]))
        fail(std::string(op) + ": non-finite value in output");
  }
  if (track) {
    out.set_requires_grad(true);
    Tape<S>::current()->push(std::move(backward));
  }
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  detail::finish("add", out, track, [a, b, out]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (a.requires_grad()) {
      S* ga = a.grad();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      S* gb = b.grad();
      for (int64_t i = 0; i < b.numel(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  detail::finish("sub", out, track, [a, b, out]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (a.requires_grad()) {
      S* ga = a.grad();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      S* gb = b.grad();
      for (int64_t i = 0; i < b.numel(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  detail::finish("mul", out, track, [a, b, out]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (a.requires_grad()) {
      S* ga = a.grad();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      S* gb = b.grad();
      for (int64_t i = 0; i < b.numel(); ++i) gb[i] += go[i] * a.data()[i];
    }
  });
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  detail::finish("scale", out, track, [a, out, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i] * c;
  });
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
  detail::finish("add_scalar", out, track, [a, out]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
  });
  return out;
}

// x [T,C] + v [C] broadcast over rows
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  int64_t t = x.rows(), c = x.cols();
  if (v.numel() != c)
    fail("add_rowvec: vector length " + shape_str(v.shape()) +
         " does not match columns of " + shape_str(x.shape()));
  bool track = detail::tracking<S>({&x, &v});
  auto out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < c; ++j)
      out.data()[i * c + j] = x.data()[i * c + j] + v.data()[j];
  detail::finish("add_rowvec", out, track, [x, v, out, t, c]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (x.requires_grad()) {
      S* gx = x.grad();
      for (int64_t i = 0; i < t * c; ++i) gx[i] += go[i];
    }
    if (v.requires_grad()) {
      S* gv = v.grad();
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < c; ++j) gv[j] += go[i * c + j];
    }
  });
  return out;
}

template <class S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  int64_t t = x.rows(), c = x.cols();
  if (v.numel() != c)
    fail("mul_rowvec: vector length " + shape_str(v.shape()) +
         " does not match columns of " + shape_str(x.shape()));
  bool track = detail::tracking<S>({&x, &v});
  auto out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < c; ++j)
      out.data()[i * c + j] = x.data()[i * c + j] * v.data()[j];
  detail::finish("mul_rowvec", out, track, [x, v, out, t, c]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (x.requires_grad()) {
      S* gx = x.grad();
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < c; ++j)
          gx[i * c + j] += go[i * c + j] * v.data()[j];
    }
    if (v.requires_grad()) {
      S* gv = v.grad();
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < c; ++j)
          gv[j] += go[i * c + j] * x.data()[i * c + j];
    }
  });
  return out;
}

// v [C] -> [T,C], every row a copy of v
template <class S>
Tensor<S> tile_rowvec(const Tensor<S>& v, int64_t t) {
  int64_t c = v.numel();
  bool track = detail::tracking<S>({&v});
  auto out = Tensor<S>::zeros({t, c});
  for (int64_t i = 0; i < t; ++i)
    std::memcpy(out.data() + i * c, v.data(), sizeof(S) * size_t(c));
  detail::finish("tile_rowvec", out, track, [v, out, t, c]() {
    if (!out.has_grad() || !v.requires_grad()) return;
    const S* go = out.grad();
    S* gv = v.grad();
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < c; ++j) gv[j] += go[i * c + j];
  });
  return out;
}

// x * s with s a scalar tensor (e.g. a learned inverse temperature)
template <class S>
Tensor<S> mul_scalar_t(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.numel() != 1) fail("mul_scalar_t: scale must be scalar");
  bool track = detail::tracking<S>({&x, &s});
  S sv = s.data()[0];
  auto out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * sv;
  detail::finish("mul_scalar_t", out, track, [x, s, out, sv]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    if (x.requires_grad()) {
      S* gx = x.grad();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * sv;
    }
    if (s.requires_grad()) {
      S acc = 0;
      for (int64_t i = 0; i < x.numel(); ++i) acc += go[i] * x.data()[i];
      s.grad()[0] += acc;
    }
  });
  return out;
}

template <class S>
Tensor<S> reciprocal(const Tensor<S>& s) {
  if (s.numel() != 1) fail("reciprocal: scalar only");
  S v = s.data()[0];
  if (std::abs(v) < S(1e-20)) fail("reciprocal: divide by zero");
  bool track = detail::tracking<S>({&s});
  auto out = Tensor<S>::scalar(S(1) / v);
  detail::finish("reciprocal", out, track, [s, out, v]() {
    if (!out.has_grad() || !s.requires_grad()) return;
    s.grad()[0] += -out.grad()[0] / (v * v);
  });
  return out;
}

// ---------------------------------------------------------------------------
// matrix products (CBLAS-backed)

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros({m, n});
  detail::raw_gemm(false, false, m, n, k, S(1), a.data(), b.data(), S(0),
                   out.data());
  detail::finish("matmul", out, track, [a, b, out, m, n, k]() {
    if (!out.has_grad()) return;
    if (a.requires_grad())
      detail::raw_gemm(false, true, m, k, n, S(1), out.grad(), b.data(), S(1),
                       a.grad());
    if (b.requires_grad())
      detail::raw_gemm(true, false, k, n, m, S(1), a.data(), out.grad(), S(1),
                       b.grad());
  });
  return out;
}

// a [m,k] * b^T with b [n,k]
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    fail("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  int64_t m = a.rows(), k = a.cols(), n = b.rows();
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros({m, n});
  detail::raw_gemm(false, true, m, n, k, S(1), a.data(), b.data(), S(0),
                   out.data());
  detail::finish("matmul_nt", out, track, [a, b, out, m, n, k]() {
    if (!out.has_grad()) return;
    if (a.requires_grad())
      detail::raw_gemm(false, false, m, k, n, S(1), out.grad(), b.data(), S(1),
                       a.grad());
    if (b.requires_grad())
      detail::raw_gemm(true, false, n, k, m, S(1), out.grad(), a.data(), S(1),
                       b.grad());
  });
  return out;
}

// a^T * b with a [k,m], b [k,n]
template <class S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.rows() != b.rows())
    fail("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  int64_t k = a.rows(), m = a.cols(), n = b.cols();
  bool track = detail::tracking<S>({&a, &b});
  auto out = Tensor<S>::zeros({m, n});
  detail::raw_gemm(true, false, m, n, k, S(1), a.data(), b.data(), S(0),
                   out.data());
  detail::finish("matmul_tn", out, track, [a, b, out, m, n, k]() {
    if (!out.has_grad()) return;
    if (a.requires_grad())
      detail::raw_gemm(false, true, k, m, n, S(1), b.data(), out.grad(), S(1),
                       a.grad());
    if (b.requires_grad())
      detail::raw_gemm(false, false, k, n, m, S(1), a.data(), out.grad(), S(1),
                       b.grad());
  });
  return out;
}

// ---------------------------------------------------------------------------
// structure

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) fail("concat_rows: no inputs");
  int64_t c = parts[0].cols(), rtot = 0;
  for (const auto& p : parts) {
    if (p.cols() != c)
      fail("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
           shape_str(parts[0].shape()));
    rtot += p.rows();
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking<S>({&p});
  auto out = Tensor<S>::zeros({rtot, c});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off * c, p.data(), sizeof(S) * size_t(p.numel()));
    off += p.rows();
  }
  detail::finish("concat_rows", out, track, [parts, out, c]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    int64_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        S* gp = p.grad();
        for (int64_t i = 0; i < p.numel(); ++i) gp[i] += go[off * c + i];
      }
      off += p.rows();
    }
  });
  return out;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) fail("concat_cols: no inputs");
  int64_t r = parts[0].rows(), ctot = 0;
  for (const auto& p : parts) {
    if (p.rows() != r)
      fail("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
           shape_str(parts[0].shape()));
    ctot += p.cols();
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking<S>({&p});
  auto out = Tensor<S>::zeros({r, ctot});
  int64_t coff = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * ctot + coff, p.data() + i * p.cols(),
                  sizeof(S) * size_t(p.cols()));
    coff += p.cols();
  }
  detail::finish("concat_cols", out, track, [parts, out, r, ctot]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    int64_t coff = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        S* gp = p.grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < p.cols(); ++j)
            gp[i * p.cols() + j] += go[i * ctot + coff + j];
      }
      coff += p.cols();
    }
  });
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int64_t r0, int64_t r1) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    fail("slice_rows: range [" + std::to_string(r0) + "," +
         std::to_string(r1) + ") out of bounds for " + shape_str(a.shape()));
  int64_t c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({r1 - r0, c});
  std::memcpy(out.data(), a.data() + r0 * c,
              sizeof(S) * size_t((r1 - r0) * c));
  detail::finish("slice_rows", out, track, [a, out, r0, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < out.numel(); ++i) ga[r0 * c + i] += go[i];
  });
  return out;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int64_t c0, int64_t c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    fail("slice_cols: range [" + std::to_string(c0) + "," +
         std::to_string(c1) + ") out of bounds for " + shape_str(a.shape()));
  int64_t r = a.rows(), c = a.cols(), w = c1 - c0;
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({r, w});
  for (int64_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * w, a.data() + i * c + c0,
                sizeof(S) * size_t(w));
  detail::finish("slice_cols", out, track, [a, out, r, c, c0, w]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j) ga[i * c + c0 + j] += go[i * w + j];
  });
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
         shape_str(shape));
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros(std::move(shape));
  std::memcpy(out.data(), a.data(), sizeof(S) * size_t(a.numel()));
  detail::finish("reshape", out, track, [a, out]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
  });
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.shape().size() != 2) fail("transpose: 2-D only");
  int64_t r = a.rows(), c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
  detail::finish("transpose", out, track, [a, out, r, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
  });
  return out;
}

// row gather; also serves as embedding lookup and length regulation
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<int>& ids) {
  if (ids.empty()) fail("gather_rows: empty index list");
  int64_t r = a.rows(), c = a.cols();
  for (int id : ids)
    if (id < 0 || id >= r)
      fail("gather_rows: index " + std::to_string(id) +
           " out of range for " + shape_str(a.shape()));
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({int64_t(ids.size()), c});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + int64_t(i) * c, a.data() + int64_t(ids[i]) * c,
                sizeof(S) * size_t(c));
  detail::finish("gather_rows", out, track, [a, out, ids, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < c; ++j)
        ga[int64_t(ids[i]) * c + j] += go[int64_t(i) * c + j];
  });
  return out;
}

// nearest-neighbor 2x temporal upsampling: each row duplicated
template <class S>
Tensor<S> upsample_rows2(const Tensor<S>& a) {
  int64_t r = a.rows(), c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({2 * r, c});
  for (int64_t i = 0; i < r; ++i) {
    std::memcpy(out.data() + (2 * i) * c, a.data() + i * c,
                sizeof(S) * size_t(c));
    std::memcpy(out.data() + (2 * i + 1) * c, a.data() + i * c,
                sizeof(S) * size_t(c));
  }
  detail::finish("upsample_rows2", out, track, [a, out, r, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        ga[i * c + j] += go[(2 * i) * c + j] + go[(2 * i + 1) * c + j];
  });
  return out;
}

// im2col for a same-padded 1-D convolution of odd kernel k over rows
template <class S>
Tensor<S> unfold1d(const Tensor<S>& x, int64_t k) {
  if (k % 2 == 0) fail("unfold1d: kernel must be odd");
  int64_t t = x.rows(), c = x.cols(), half = k / 2;
  bool track = detail::tracking<S>({&x});
  auto out = Tensor<S>::zeros({t, k * c});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t o = 0; o < k; ++o) {
      int64_t src = i + o - half;
      if (src < 0 || src >= t) continue;
      std::memcpy(out.data() + i * k * c + o * c, x.data() + src * c,
                  sizeof(S) * size_t(c));
    }
  detail::finish("unfold1d", out, track, [x, out, t, c, k, half]() {
    if (!out.has_grad() || !x.requires_grad()) return;
    const S* go = out.grad();
    S* gx = x.grad();
    for (int64_t i = 0; i < t; ++i)
      for (int64_t o = 0; o < k; ++o) {
        int64_t src = i + o - half;
        if (src < 0 || src >= t) continue;
        for (int64_t j = 0; j < c; ++j)
          gx[src * c + j] += go[i * k * c + o * c + j];
      }
  });
  return out;
}

template <class S>
Tensor<S> detach(const Tensor<S>& a) {
  auto out = Tensor<S>::zeros(a.shape());
  std::memcpy(out.data(), a.data(), sizeof(S) * size_t(a.numel()));
  return out;
}

// ---------------------------------------------------------------------------
// reductions & nonlinearities

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  bool track = detail::tracking<S>({&a});
  S acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  auto out = Tensor<S>::scalar(acc);
  detail::finish("sum_all", out, track, [a, out]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    S go = out.grad()[0];
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go;
  });
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  bool track = detail::tracking<S>({&a});
  S acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  S n = S(a.numel());
  auto out = Tensor<S>::scalar(acc / n);
  detail::finish("mean_all", out, track, [a, out, n]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    S go = out.grad()[0] / n;
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go;
  });
  return out;
}

// [T,C] -> [C], mean over rows (temporal mean pooling)
template <class S>
Tensor<S> mean_axis0(const Tensor<S>& a) {
  int64_t t = a.rows(), c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros({c});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < c; ++j) out.data()[j] += a.data()[i * c + j];
  for (int64_t j = 0; j < c; ++j) out.data()[j] /= S(t);
  detail::finish("mean_axis0", out, track, [a, out, t, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += go[j] / S(t);
  });
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    S x = a.data()[i];
    out.data()[i] = S(0.5) * x * (S(1) + S(std::erf(double(x) * M_SQRT1_2)));
  }
  detail::finish("gelu", out, track, [a, out]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < a.numel(); ++i) {
      double x = double(a.data()[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      ga[i] += go[i] * S(cdf + x * pdf);
    }
  });
  return out;
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  int64_t r = a.rows(), c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto out = Tensor<S>::zeros(a.shape());
  for (int64_t i = 0; i < r; ++i) {
    const S* x = a.data() + i * c;
    S* y = out.data() + i * c;
    S mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    S z = 0;
    for (int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int64_t j = 0; j < c; ++j) y[j] /= z;
  }
  if (nan_guard()) {
    for (int64_t i = 0; i < out.numel(); ++i)
      if (!std::isfinite(out.data()[i]))
        fail("softmax_rows: non-finite value in output");
  }
  detail::finish("softmax_rows", out, track, [a, out, r, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    const S* go = out.grad();
    S* ga = a.grad();
    for (int64_t i = 0; i < r; ++i) {
      const S* y = out.data() + i * c;
      const S* g = go + i * c;
      S dot = 0;
      for (int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& g,
                     const Tensor<S>& b, S eps = S(1e-5)) {
  int64_t r = x.rows(), c = x.cols();
  if (g.numel() != c || b.numel() != c)
    fail("layer_norm: affine params do not match columns of " +
         shape_str(x.shape()));
  bool track = detail::tracking<S>({&x, &g, &b});
  auto out = Tensor<S>::zeros(x.shape());
  auto xhat = Tensor<S>::zeros(x.shape());
  auto inv_sd = Tensor<S>::zeros({r});
  for (int64_t i = 0; i < r; ++i) {
    const S* xi = x.data() + i * c;
    S mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += xi[j];
    mu /= S(c);
    S var = 0;
    for (int64_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= S(c);
    S isd = S(1) / std::sqrt(var + eps);
    inv_sd.data()[i] = isd;
    for (int64_t j = 0; j < c; ++j) {
      S xh = (xi[j] - mu) * isd;
      xhat.data()[i * c + j] = xh;
      out.data()[i * c + j] = xh * g.data()[j] + b.data()[j];
    }
  }
  detail::finish("layer_norm", out, track, [x, g, b, out, xhat, inv_sd, r, c]() {
    if (!out.has_grad()) return;
    const S* go = out.grad();
    for (int64_t i = 0; i < r; ++i) {
      const S* gi = go + i * c;
      const S* xh = xhat.data() + i * c;
      if (x.requires_grad()) {
        S* gx = x.grad() + i * c;
        S sum_dxh = 0, sum_dxh_xh = 0;
        for (int64_t j = 0; j < c; ++j) {
          S dxh = gi[j] * g.data()[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[j];
        }
        S isd = inv_sd.data()[i];
        for (int64_t j = 0; j < c; ++j) {
          S dxh = gi[j] * g.data()[j];
          gx[j] += (dxh - sum_dxh / S(c) - xh[j] * sum_dxh_xh / S(c)) * isd;
        }
      }
      if (g.requires_grad()) {
        S* gg = g.grad();
        for (int64_t j = 0; j < c; ++j) gg[j] += gi[j] * xh[j];
      }
      if (b.requires_grad()) {
        S* gb = b.grad();
        for (int64_t j = 0; j < c; ++j) gb[j] += gi[j];
      }
    }
  });
  return out;
}

// layer norm without learned affine (modulation supplies scale/shift)
template <class S>
Tensor<S> layer_norm_plain(const Tensor<S>& x, S eps = S(1e-5)) {
  int64_t r = x.rows(), c = x.cols();
  bool track = detail::tracking<S>({&x});
  auto out = Tensor<S>::zeros(x.shape());
  auto inv_sd = Tensor<S>::zeros({r});
  for (int64_t i = 0; i < r; ++i) {
    const S* xi = x.data() + i * c;
    S mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += xi[j];
    mu /= S(c);
    S var = 0;
    for (int64_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= S(c);
    S isd = S(1) / std::sqrt(var + eps);
    inv_sd.data()[i] = isd;
    for (int64_t j = 0; j < c; ++j)
      out.data()[i * c + j] = (xi[j] - mu) * isd;
  }
  detail::finish("layer_norm_plain", out, track, [x, out, inv_sd, r, c]() {
    if (!out.has_grad() || !x.requires_grad()) return;
    const S* go = out.grad();
    for (int64_t i = 0; i < r; ++i) {
      const S* gi = go + i * c;
      const S* xh = out.data() + i * c;
      S* gx = x.grad() + i * c;
      S sum_d = 0, sum_d_xh = 0;
      for (int64_t j = 0; j < c; ++j) {
        sum_d += gi[j];
        sum_d_xh += gi[j] * xh[j];
      }
      S isd = inv_sd.data()[i];
      for (int64_t j = 0; j < c; ++j)
        gx[j] += (gi[j] - sum_d / S(c) - xh[j] * sum_d_xh / S(c)) * isd;
    }
  });
  return out;
}

template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x) {
  int64_t r = x.rows(), c = x.cols();
  bool track = detail::tracking<S>({&x});
  auto out = Tensor<S>::zeros(x.shape());
  auto norms = Tensor<S>::zeros({r});
  for (int64_t i = 0; i < r; ++i) {
    const S* xi = x.data() + i * c;
    S n2 = 0;
    for (int64_t j = 0; j < c; ++j) n2 += xi[j] * xi[j];
    S n = std::max(std::sqrt(n2), S(1e-12));
    norms.data()[i] = n;
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = xi[j] / n;
  }
  detail::finish("l2_normalize_rows", out, track, [x, out, norms, r, c]() {
    if (!out.has_grad() || !x.requires_grad()) return;
    const S* go = out.grad();
    S* gx = x.grad();
    for (int64_t i = 0; i < r; ++i) {
      const S* y = out.data() + i * c;
      const S* g = go + i * c;
      S dot = 0;
      for (int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
      S n = norms.data()[i];
      for (int64_t j = 0; j < c; ++j)
        gx[i * c + j] += (g[j] - y[j] * dot) / n;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// losses

template <class S>
Tensor<S> mse(const Tensor<S>& pred, const Tensor<S>& target) {
  detail::check_same_shape("mse", pred, target);
  bool track = detail::tracking<S>({&pred, &target});
  S acc = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    S d = pred.data()[i] - target.data()[i];
    acc += d * d;
  }
  S n = S(pred.numel());
  auto out = Tensor<S>::scalar(acc / n);
  if (!std::isfinite(out.item())) fail("mse: non-finite loss");
  detail::finish("mse", out, track, [pred, target, out, n]() {
    if (!out.has_grad()) return;
    S go = out.grad()[0];
    if (pred.requires_grad()) {
      S* gp = pred.grad();
      for (int64_t i = 0; i < pred.numel(); ++i)
        gp[i] += go * S(2) * (pred.data()[i] - target.data()[i]) / n;
    }
    if (target.requires_grad()) {
      S* gt = target.grad();
      for (int64_t i = 0; i < target.numel(); ++i)
        gt[i] -= go * S(2) * (pred.data()[i] - target.data()[i]) / n;
    }
  });
  return out;
}

// mean squared error over valid rows only; mask is per-row
template <class S>
Tensor<S> masked_mse(const Tensor<S>& pred, const Tensor<S>& target,
                     const std::vector<uint8_t>& row_mask) {
  detail::check_same_shape("masked_mse", pred, target);
  int64_t r = pred.rows(), c = pred.cols();
  if (int64_t(row_mask.size()) != r)
    fail("masked_mse: mask length " + std::to_string(row_mask.size()) +
         " does not match rows of " + shape_str(pred.shape()));
  int64_t valid_rows = 0;
  for (auto m : row_mask) valid_rows += m ? 1 : 0;
  if (valid_rows == 0) fail("masked_mse: all rows masked out");
  S n = S(valid_rows * c);
  bool track = detail::tracking<S>({&pred, &target});
  S acc = 0;
  for (int64_t i = 0; i < r; ++i) {
    if (!row_mask[i]) continue;
    for (int64_t j = 0; j < c; ++j) {
      S d = pred.data()[i * c + j] - target.data()[i * c + j];
      acc += d * d;
    }
  }
  auto out = Tensor<S>::scalar(acc / n);
  if (!std::isfinite(out.item())) fail("masked_mse: non-finite loss");
  detail::finish("masked_mse", out, track, [pred, target, out, row_mask, r, c, n]() {
    if (!out.has_grad()) return;
    S go = out.grad()[0];
    if (pred.requires_grad()) {
      S* gp = pred.grad();
      for (int64_t i = 0; i < r; ++i) {
        if (!row_mask[i]) continue;
        for (int64_t j = 0; j < c; ++j)
          gp[i * c + j] += go * S(2) *
                           (pred.data()[i * c + j] - target.data()[i * c + j]) / n;
      }
    }
    if (target.requires_grad()) {
      S* gt = target.grad();
      for (int64_t i = 0; i < r; ++i) {
        if (!row_mask[i]) continue;
        for (int64_t j = 0; j < c; ++j)
          gt[i * c + j] -= go * S(2) *
                           (pred.data()[i * c + j] - target.data()[i * c + j]) / n;
      }
    }
  });
  return out;
}

// mean over the batch of -log softmax(logits)[target]
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits,
                                const std::vector<int>& targets) {
  int64_t n = logits.rows(), c = logits.cols();
  if (int64_t(targets.size()) != n)
    fail("softmax_cross_entropy: " + std::to_string(targets.size()) +
         " targets for " + std::to_string(n) + " rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      fail("softmax_cross_entropy: target " + std::to_string(t) +
           " out of range [0," + std::to_string(c) + ")");
  bool track = detail::tracking<S>({&logits});
  auto probs = Tensor<S>::zeros(logits.shape());
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const S* x = logits.data() + i * c;
    S* p = probs.data() + i * c;
    S mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    S z = 0;
    for (int64_t j = 0; j < c; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (int64_t j = 0; j < c; ++j) p[j] /= z;
    acc -= std::log(std::max(p[targets[size_t(i)]], S(1e-30)));
  }
  auto out = Tensor<S>::scalar(acc / S(n));
  if (!std::isfinite(out.item())) fail("softmax_cross_entropy: non-finite loss");
  detail::finish("softmax_cross_entropy", out, track, [logits, out, probs, targets, n, c]() {
    if (!out.has_grad() || !logits.requires_grad()) return;
    S go = out.grad()[0];
    S* gl = logits.grad();
    for (int64_t i = 0; i < n; ++i) {
      const S* p = probs.data() + i * c;
      for (int64_t j = 0; j < c; ++j) {
        S onehot = (j == targets[size_t(i)]) ? S(1) : S(0);
        gl[i * c + j] += go * (p[j] - onehot) / S(n);
      }
    }
  });
  return out;
}

// a.b / (|a||b|); near-zero norms give value 0 with zero gradient so padded
// or degenerate frames do not poison a batch with NaN
template <class S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.numel() != b.numel())
    fail("cosine_similarity: size mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  int64_t n = a.numel();
  S dot = 0, na2 = 0, nb2 = 0;
  for (int64_t i = 0; i < n; ++i) {
    dot += a.data()[i] * b.data()[i];
    na2 += a.data()[i] * a.data()[i];
    nb2 += b.data()[i] * b.data()[i];
  }
  S na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na < S(1e-12) || nb < S(1e-12)) {
    EventCounters::degenerate_cosine()++;
    return Tensor<S>::scalar(S(0));
  }
  bool track = detail::tracking<S>({&a, &b});
  S v = dot / (na * nb);
  auto out = Tensor<S>::scalar(v);
  detail::finish("cosine_similarity", out, track, [a, b, out, na, nb, v, n]() {
    if (!out.has_grad()) return;
    S go = out.grad()[0];
    if (a.requires_grad()) {
      S* ga = a.grad();
      for (int64_t i = 0; i < n; ++i)
        ga[i] += go * (b.data()[i] / (na * nb) - v * a.data()[i] / (na * na));
    }
    if (b.requires_grad()) {
      S* gb = b.grad();
      for (int64_t i = 0; i < n; ++i)
        gb[i] += go * (a.data()[i] / (na * nb) - v * b.data()[i] / (nb * nb));
    }
  });
  return out;
}

// mean over rows of cosine(a_i, b_i) against a constant target b; gradient
// flows into a only. Degenerate rows contribute 0 with no gradient, same rule
// as above.
template <class S>
Tensor<S> cosine_rows_mean(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("cosine_rows_mean", a, b);
  if (b.requires_grad())
    fail("cosine_rows_mean: target must not require gradients");
  int64_t r = a.rows(), c = a.cols();
  bool track = detail::tracking<S>({&a});
  auto vals = Tensor<S>::zeros({r});
  auto nas = Tensor<S>::zeros({r});
  auto nbs = Tensor<S>::zeros({r});
  S acc = 0;
  for (int64_t i = 0; i < r; ++i) {
    const S* ai = a.data() + i * c;
    const S* bi = b.data() + i * c;
    S dot = 0, na2 = 0, nb2 = 0;
    for (int64_t j = 0; j < c; ++j) {
      dot += ai[j] * bi[j];
      na2 += ai[j] * ai[j];
      nb2 += bi[j] * bi[j];
    }
    S na = std::sqrt(na2), nb = std::sqrt(nb2);
    nas.data()[i] = na;
    nbs.data()[i] = nb;
    if (na < S(1e-12) || nb < S(1e-12)) {
      EventCounters::degenerate_cosine()++;
      vals.data()[i] = 0;
      continue;
    }
    vals.data()[i] = dot / (na * nb);
    acc += vals.data()[i];
  }
  auto out = Tensor<S>::scalar(acc / S(r));
  if (!std::isfinite(out.item())) fail("cosine_rows_mean: non-finite value");
  detail::finish("cosine_rows_mean", out, track, [a, b, out, vals, nas, nbs, r, c]() {
    if (!out.has_grad() || !a.requires_grad()) return;
    S go = out.grad()[0] / S(r);
    S* ga = a.grad();
    for (int64_t i = 0; i < r; ++i) {
      S na = nas.data()[i], nb = nbs.data()[i];
      if (na < S(1e-12) || nb < S(1e-12)) continue;
      S v = vals.data()[i];
      const S* ai = a.data() + i * c;
      const S* bi = b.data() + i * c;
      for (int64_t j = 0; j < c; ++j)
        ga[i * c + j] += go * (bi[j] / (na * nb) - v * ai[j] / (na * na));
    }
  });
  return out;
}

}  // namespace flowtts
