#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsain {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

/// Hot-path variant: the message is only materialized on failure.
template <class MsgFn>
inline void require_lazy(bool ok, MsgFn&& msg) {
  if (!ok) fail(msg());
}

/// Running count of forward multiply-adds performed by matrix products.
/// Elementwise work, reductions and data movement are not counted.
inline std::int64_t& madd_counter() {
  thread_local std::int64_t count = 0;
  return count;
}

/// Deterministic RNG: fixed transforms on top of mt19937_64 so that streams
/// are reproducible independent of the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53; }

  /// Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(hi >= lo, "uniform_int: empty range");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(gen_() % span);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  /// Standard Gumbel via inverse transform, -log(-log(U)).
  double gumbel() { return -std::log(-std::log(uniform())); }

 private:
  std::mt19937_64 gen_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto d : shape) require(d > 0, "Tensor: nonpositive extent in " + shape_str(shape));
    require(numel(shape) == static_cast<std::int64_t>(data.size()),
            "Tensor: shape " + shape_str(shape) + " does not match data length " +
                std::to_string(data.size()));
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                  requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                  requires_grad);
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double item() const {
    require(size() == 1, "item: tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }

  /// Gradient buffer, allocated to zeros on first touch.
  std::vector<double>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  const std::vector<double>& grad() const { return impl_->grad; }

  void zero_grad() { impl_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Reverse-mode tape. Nodes are appended in forward order, so parents always
/// precede their consumers; backward() replays them exactly once in reverse.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  void backward(Tensor loss) {
    require(loss.size() == 1, "backward: loss must be a scalar, got " + shape_str(loss.shape()));
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_;
};

namespace detail {

struct Bcast {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same_shape;
};

inline Bcast broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) {
    Bcast bc;
    bc.out = a;
    bc.same_shape = true;
    return bc;
  }
  int ra = static_cast<int>(a.size());
  int rb = static_cast<int>(b.size());
  int nd = std::max(ra, rb);
  Bcast bc;
  bc.same_shape = false;
  bc.out.assign(static_cast<std::size_t>(nd), 1);
  bc.stride_a.assign(static_cast<std::size_t>(nd), 0);
  bc.stride_b.assign(static_cast<std::size_t>(nd), 0);
  // natural row-major strides
  std::vector<std::int64_t> na(static_cast<std::size_t>(ra)), nb(static_cast<std::size_t>(rb));
  std::int64_t s = 1;
  for (int i = ra - 1; i >= 0; --i) { na[static_cast<std::size_t>(i)] = s; s *= a[static_cast<std::size_t>(i)]; }
  s = 1;
  for (int i = rb - 1; i >= 0; --i) { nb[static_cast<std::size_t>(i)] = s; s *= b[static_cast<std::size_t>(i)]; }
  for (int d = nd - 1; d >= 0; --d) {
    int ia = d - (nd - ra);
    int ib = d - (nd - rb);
    std::int64_t da = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    std::int64_t db = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    std::int64_t dout;
    if (da == db) dout = da;
    else if (da == 1 || db == 1) dout = std::max(da, db);
    else fail(std::string(op) + ": shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    bc.out[static_cast<std::size_t>(d)] = dout;
    bc.stride_a[static_cast<std::size_t>(d)] = (ia >= 0 && da != 1) ? na[static_cast<std::size_t>(ia)] : 0;
    bc.stride_b[static_cast<std::size_t>(d)] = (ib >= 0 && db != 1) ? nb[static_cast<std::size_t>(ib)] : 0;
  }
  return bc;
}

/// Visits every output element with the matching input offsets.
template <class F>
inline void bcast_apply(const Bcast& bc, F&& f) {
  std::int64_t n = numel(bc.out);
  if (bc.same_shape) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  int nd = static_cast<int>(bc.out.size());
  if (nd == 1) {
    std::int64_t sa = bc.stride_a[0], sb = bc.stride_b[0];
    for (std::int64_t i = 0; i < n; ++i) f(i, i * sa, i * sb);
    return;
  }
  if (nd == 2) {
    std::int64_t rows = bc.out[0], cols = bc.out[1];
    std::int64_t sa0 = bc.stride_a[0], sa1 = bc.stride_a[1];
    std::int64_t sb0 = bc.stride_b[0], sb1 = bc.stride_b[1];
    std::int64_t i = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
      std::int64_t oa = r * sa0, ob = r * sb0;
      for (std::int64_t c = 0; c < cols; ++c, ++i) f(i, oa + c * sa1, ob + c * sb1);
    }
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = nd - 1; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      oa += bc.stride_a[ud];
      ob += bc.stride_b[ud];
      if (idx[ud] < bc.out[ud]) break;
      oa -= bc.stride_a[ud] * bc.out[ud];
      ob -= bc.stride_b[ud] * bc.out[ud];
      idx[ud] = 0;
    }
  }
}

template <class F, class DA, class DB>
inline Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, F f, DA dfda, DB dfdb,
                        const char* name) {
  Bcast bc = broadcast(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(bc.out);
  {
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    bcast_apply(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      ov[static_cast<std::size_t>(i)] =
          f(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
    });
  }
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a = a, b = b, out, bc, dfda, dfdb]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& av = a.data();
      const auto& bv = b.data();
      std::vector<double>* ga = a.requires_grad() ? &a.grad() : nullptr;
      std::vector<double>* gb = b.requires_grad() ? &b.grad() : nullptr;
      bcast_apply(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        double g = go[static_cast<std::size_t>(i)];
        double x = av[static_cast<std::size_t>(ia)];
        double y = bv[static_cast<std::size_t>(ib)];
        if (ga) (*ga)[static_cast<std::size_t>(ia)] += g * dfda(x, y);
        if (gb) (*gb)[static_cast<std::size_t>(ib)] += g * dfdb(x, y);
      });
    });
  }
  return out;
}

template <class F, class DF>
inline Tensor unary_op(Tape& tape, const Tensor& x, F f, DF dfdx, const char* /*name*/) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = f(xv[i]);
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, dfdx]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& xv2 = x.data();
      const auto& yv = out.data();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < xv2.size(); ++i) gx[i] += go[i] * dfdx(xv2[i], yv[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style trailing-axis broadcasting)
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      tape, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      tape, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      tape, a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; }, "mul");
}

/// y = scale * x + shift with compile-time-constant coefficients.
inline Tensor affine(Tape& tape, const Tensor& x, double scale, double shift) {
  return detail::unary_op(
      tape, x, [scale, shift](double v) { return scale * v + shift; },
      [scale](double, double) { return scale; }, "affine");
}

inline Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  return detail::unary_op(
      tape, x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }, "clamp");
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  auto fwd = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  };
  return detail::unary_op(
      tape, x, fwd, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

/// Exact Gaussian-CDF form: x * Phi(x).
inline double gelu_scalar(double v) { return 0.5 * v * std::erfc(-v * M_SQRT1_2); }

inline Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> cdf(x.data().size());
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      cdf[i] = 0.5 * std::erfc(-xv[i] * M_SQRT1_2);
      ov[i] = xv[i] * cdf[i];
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, cdf = std::move(cdf)]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& xv = x.data();
      auto& gx = x.grad();
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        double pdf = std::exp(-0.5 * xv[i] * xv[i]) * inv_sqrt_2pi;
        gx[i] += go[i] * (cdf[i] + xv[i] * pdf);
      }
    });
  }
  return out;
}

inline Tensor tanh(Tape& tape, const Tensor& x) {
  return detail::unary_op(
      tape, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

inline Tensor exp(Tape& tape, const Tensor& x) {
  return detail::unary_op(
      tape, x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; }, "exp");
}

/// Input is clamped to >= 1e-12 before the log; below the clamp the local
/// derivative is zero.
inline Tensor log(Tape& tape, const Tensor& x) {
  constexpr double kFloor = 1e-12;
  return detail::unary_op(
      tape, x, [](double v) { return std::log(v < kFloor ? kFloor : v); },
      [](double v, double) { return v < kFloor ? 0.0 : 1.0 / v; }, "log");
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// a[m x k] * b[k x p] -> [m x p]; a 1-D rhs of length k yields a length-m
/// vector. Counts m*k*p forward multiply-adds.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_lazy(a.ndim() == 2,
               [&] { return "matmul: lhs must be 2-D, got " + shape_str(a.shape()); });
  require_lazy(b.ndim() == 1 || b.ndim() == 2,
               [&] { return "matmul: rhs must be 1-D or 2-D, got " + shape_str(b.shape()); });
  std::int64_t m = a.dim(0), k = a.dim(1);
  std::int64_t kb = b.dim(0);
  std::int64_t p = b.ndim() == 2 ? b.dim(1) : 1;
  require_lazy(k == kb, [&] {
    return "matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
           shape_str(b.shape());
  });
  Shape out_shape = b.ndim() == 2 ? Shape{m, p} : Shape{m};
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) {
      const double* arow = av + i * k;
      double* orow = ov + i * p;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double aik = arow[kk];
        const double* brow = bv + kk * p;
        for (std::int64_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
      }
    }
    madd_counter() += m * k * p;
  }
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a = a, b = b, out, m, k, p]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        const double* bv = b.data().data();
        // dA = dC * B^T as row-wise axpy over a transposed copy of B
        std::vector<double> bt(static_cast<std::size_t>(k * p));
        for (std::int64_t kk = 0; kk < k; ++kk)
          for (std::int64_t j = 0; j < p; ++j)
            bt[static_cast<std::size_t>(j * k + kk)] = bv[kk * p + j];
        for (std::int64_t i = 0; i < m; ++i) {
          const double* grow = go + i * p;
          double* garow = ga + i * k;
          for (std::int64_t j = 0; j < p; ++j) {
            double g = grow[j];
            const double* btrow = bt.data() + j * k;
            for (std::int64_t kk = 0; kk < k; ++kk) garow[kk] += g * btrow[kk];
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        const double* av = a.data().data();
        for (std::int64_t i = 0; i < m; ++i) {
          const double* arow = av + i * k;
          const double* grow = go + i * p;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            double aik = arow[kk];
            double* gbrow = gb + kk * p;
            for (std::int64_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor transpose2d(Tape& tape, const Tensor& x) {
  require(x.ndim() == 2, "transpose2d: need 2-D tensor, got " + shape_str(x.shape()));
  std::int64_t m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        ov[static_cast<std::size_t>(j * m + i)] = xv[static_cast<std::size_t>(i * n + j)];
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          gx[static_cast<std::size_t>(i * n + j)] += go[static_cast<std::size_t>(j * m + i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " +
                                        shape_str(shape) + " changes element count");
  Tensor out(std::move(shape), x.data());
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

/// Concatenates 1-D tensors along axis 0, or 2-D tensors along axis 0/1.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  int nd = parts[0].ndim();
  require(nd == 1 || nd == 2, "concat: only 1-D/2-D supported");
  require(axis >= 0 && axis < nd, "concat: axis out of range");
  for (const auto& t : parts)
    require(t.ndim() == nd, "concat: rank mismatch " + shape_str(t.shape()));

  Tensor out;
  bool rg = false;
  for (const auto& t : parts) rg = rg || t.requires_grad();

  if (nd == 1 || axis == 0) {
    std::int64_t cols = nd == 2 ? parts[0].dim(1) : 1;
    std::int64_t rows = 0;
    for (const auto& t : parts) {
      if (nd == 2)
        require(t.dim(1) == cols, "concat: column mismatch " + shape_str(t.shape()));
      rows += t.dim(0);
    }
    out = Tensor::zeros(nd == 2 ? Shape{rows, cols} : Shape{rows});
    auto& ov = out.data();
    std::size_t off = 0;
    for (const auto& t : parts) {
      const auto& tv = t.data();
      std::copy(tv.begin(), tv.end(), ov.begin() + static_cast<std::ptrdiff_t>(off));
      off += tv.size();
    }
    out.set_requires_grad(rg);
    if (tape.recording() && rg) {
      tape.record([parts = parts, out]() mutable {
        if (!out.has_grad()) return;
        const auto& go = out.grad();
        std::size_t off2 = 0;
        for (auto& t : parts) {
          std::size_t n = t.data().size();
          if (t.requires_grad()) {
            auto& gt = t.grad();
            for (std::size_t i = 0; i < n; ++i) gt[i] += go[off2 + i];
          }
          off2 += n;
        }
      });
    }
    return out;
  }

  // axis == 1, 2-D
  std::int64_t rows = parts[0].dim(0);
  std::int64_t cols = 0;
  for (const auto& t : parts) {
    require(t.dim(0) == rows, "concat: row mismatch " + shape_str(t.shape()));
    cols += t.dim(1);
  }
  out = Tensor::zeros({rows, cols});
  auto& ov = out.data();
  std::int64_t coff = 0;
  for (const auto& t : parts) {
    const auto& tv = t.data();
    std::int64_t tc = t.dim(1);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < tc; ++c)
        ov[static_cast<std::size_t>(r * cols + coff + c)] =
            tv[static_cast<std::size_t>(r * tc + c)];
    coff += tc;
  }
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([parts = parts, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      std::int64_t coff2 = 0;
      for (auto& t : parts) {
        std::int64_t tc = t.dim(1);
        if (t.requires_grad()) {
          auto& gt = t.grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < tc; ++c)
              gt[static_cast<std::size_t>(r * tc + c)] +=
                  go[static_cast<std::size_t>(r * cols + coff2 + c)];
        }
        coff2 += tc;
      }
    });
  }
  return out;
}

inline Tensor slice1d(Tape& tape, const Tensor& x, std::int64_t offset, std::int64_t length) {
  require(x.ndim() == 1, "slice1d: need 1-D tensor, got " + shape_str(x.shape()));
  require(offset >= 0 && length >= 1 && offset + length <= x.dim(0),
          "slice1d: range [" + std::to_string(offset) + ", " +
              std::to_string(offset + length) + ") outside " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({length});
  std::copy(x.data().begin() + offset, x.data().begin() + offset + length, out.data().begin());
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, offset, length]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::int64_t i = 0; i < length; ++i)
        gx[static_cast<std::size_t>(offset + i)] += go[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::int64_t offset, std::int64_t length) {
  require(x.ndim() == 2, "slice_cols: need 2-D tensor, got " + shape_str(x.shape()));
  std::int64_t rows = x.dim(0), cols = x.dim(1);
  require(offset >= 0 && length >= 1 && offset + length <= cols,
          "slice_cols: column range outside " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({rows, length});
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < length; ++c)
        ov[static_cast<std::size_t>(r * length + c)] =
            xv[static_cast<std::size_t>(r * cols + offset + c)];
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, offset, length, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < length; ++c)
          gx[static_cast<std::size_t>(r * cols + offset + c)] +=
              go[static_cast<std::size_t>(r * length + c)];
    });
  }
  return out;
}

/// Row gather; duplicate indices accumulate gradient on the shared row.
inline Tensor gather_rows(Tape& tape, const Tensor& x, std::vector<std::int64_t> idx) {
  require(x.ndim() == 2, "gather_rows: need 2-D tensor, got " + shape_str(x.shape()));
  std::int64_t rows = x.dim(0), cols = x.dim(1);
  for (auto r : idx)
    if (r < 0 || r >= rows)
      fail("gather_rows: row " + std::to_string(r) + " outside " + shape_str(x.shape()));
  std::int64_t m = static_cast<std::int64_t>(idx.size());
  require(m >= 1, "gather_rows: empty index list");
  Tensor out = Tensor::zeros({m, cols});
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < m; ++r)
      std::copy(xv.begin() + idx[static_cast<std::size_t>(r)] * cols,
                xv.begin() + (idx[static_cast<std::size_t>(r)] + 1) * cols,
                ov.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, idx, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::int64_t c = 0; c < cols; ++c)
          gx[static_cast<std::size_t>(idx[r] * cols + c)] +=
              go[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
    });
  }
  return out;
}

/// Element-level gather: out[i] = x[idx[i]] over flat storage. Arbitrary
/// layout permutations and expansions in one op; duplicate indices
/// accumulate gradient.
inline Tensor gather_flat(Tape& tape, const Tensor& x, std::vector<std::int64_t> idx,
                          Shape out_shape) {
  std::int64_t n = x.size();
  if (numel(out_shape) != static_cast<std::int64_t>(idx.size()))
    fail("gather_flat: index count " + std::to_string(idx.size()) + " != output elements " +
         std::to_string(numel(out_shape)));
  for (auto i : idx)
    if (i < 0 || i >= n)
      fail("gather_flat: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(std::move(out_shape));
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      ov[i] = xv[static_cast<std::size_t>(idx[i])];
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, idx = std::move(idx)]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        gx[static_cast<std::size_t>(idx[i])] += go[i];
    });
  }
  return out;
}

/// Sums consecutive groups of `group` rows: [G*group x c] -> [G x c].
inline Tensor sum_row_groups(Tape& tape, const Tensor& x, std::int64_t group) {
  require(x.ndim() == 2, "sum_row_groups: need 2-D tensor, got " + shape_str(x.shape()));
  std::int64_t rows = x.dim(0), cols = x.dim(1);
  require(group >= 1 && rows % group == 0,
          "sum_row_groups: group size " + std::to_string(group) + " does not divide " +
              std::to_string(rows) + " rows");
  std::int64_t out_rows = rows / group;
  Tensor out = Tensor::zeros({out_rows, cols});
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      double* orow = ov.data() + (r / group) * cols;
      const double* xrow = xv.data() + r * cols;
      for (std::int64_t c = 0; c < cols; ++c) orow[c] += xrow[c];
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, group, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = go.data() + (r / group) * cols;
        double* xrow = gx.data() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) xrow[c] += grow[c];
      }
    });
  }
  return out;
}

/// Embedding-table gather. Masked-out positions produce zero rows, and row 0
/// (the padding row) never receives gradient.
inline Tensor embed_lookup(Tape& tape, const Tensor& table, std::vector<std::int64_t> ids,
                           std::vector<std::uint8_t> mask) {
  require(table.ndim() == 2, "embed_lookup: table must be 2-D, got " + shape_str(table.shape()));
  require(ids.size() == mask.size(), "embed_lookup: ids/mask length mismatch");
  std::int64_t rows = table.dim(0), cols = table.dim(1);
  for (auto id : ids)
    if (id < 0 || id >= rows)
      fail("embed_lookup: id " + std::to_string(id) + " outside table " +
           shape_str(table.shape()));
  std::int64_t m = static_cast<std::int64_t>(ids.size());
  require(m >= 1, "embed_lookup: empty id list");
  Tensor out = Tensor::zeros({m, cols});
  {
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < m; ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      std::copy(tv.begin() + ids[static_cast<std::size_t>(r)] * cols,
                tv.begin() + (ids[static_cast<std::size_t>(r)] + 1) * cols,
                ov.begin() + static_cast<std::ptrdiff_t>(r * cols));
    }
  }
  out.set_requires_grad(table.requires_grad());
  if (tape.recording() && table.requires_grad()) {
    tape.record([table = table, out, ids, mask, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gt = table.grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (!mask[r] || ids[r] == 0) continue;
        for (std::int64_t c = 0; c < cols; ++c)
          gt[static_cast<std::size_t>(ids[r] * cols + c)] +=
              go[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.data()[0] = s;
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      double g = out.grad()[0];
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

inline Tensor sum_rows(Tape& tape, const Tensor& x) {
  require(x.ndim() == 2, "sum_rows: need 2-D tensor, got " + shape_str(x.shape()));
  std::int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros({cols});
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c)
        ov[static_cast<std::size_t>(c)] += xv[static_cast<std::size_t>(r * cols + c)];
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c)
          gx[static_cast<std::size_t>(r * cols + c)] += go[static_cast<std::size_t>(c)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  require(x.ndim() >= 1, "softmax_lastdim: need at least 1-D");
  std::int64_t d = x.dim(x.ndim() - 1);
  std::int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  {
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xv.data() + r * d;
      double* yr = ov.data() + r * d;
      double mx = xr[0];
      for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        s += yr[j];
      }
      for (std::int64_t j = 0; j < d; ++j) yr[j] /= s;
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && x.requires_grad()) {
    tape.record([x = x, out, rows, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& yv = out.data();
      auto& gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = go.data() + r * d;
        const double* yr = yv.data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        for (std::int64_t j = 0; j < d; ++j)
          gx[static_cast<std::size_t>(r * d + j)] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

/// Normalizes the last axis to zero mean / unit variance (population
/// variance), then applies the trainable affine gain/bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps) {
  require(x.ndim() >= 1, "layer_norm: need at least 1-D");
  require(eps > 0.0, "layer_norm: eps must be positive");
  std::int64_t d = x.dim(x.ndim() - 1);
  require(gain.ndim() == 1 && gain.dim(0) == d,
          "layer_norm: gain shape " + shape_str(gain.shape()) + " != [" + std::to_string(d) + "]");
  require(bias.ndim() == 1 && bias.dim(0) == d,
          "layer_norm: bias shape " + shape_str(bias.shape()) + " != [" + std::to_string(d) + "]");
  std::int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<std::size_t>(x.size()));
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  {
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xv.data() + r * d;
      double mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double c = xr[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = inv;
      for (std::int64_t j = 0; j < d; ++j) {
        double xh = (xr[j] - mean) * inv;
        xhat[static_cast<std::size_t>(r * d + j)] = xh;
        ov[static_cast<std::size_t>(r * d + j)] = gv[static_cast<std::size_t>(j)] * xh +
                                                  bv[static_cast<std::size_t>(j)];
      }
    }
  }
  bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([x = x, gain = gain, bias = bias, out, xhat = std::move(xhat),
                 inv_std = std::move(inv_std), rows,
                 d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& gv = gain.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = go.data() + r * d;
        const double* xh = xhat.data() + r * d;
        if (x.requires_grad()) {
          auto& gx = x.grad();
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            double dh = gr[j] * gv[static_cast<std::size_t>(j)];
            m1 += dh;
            m2 += dh * xh[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          double inv = inv_std[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < d; ++j) {
            double dh = gr[j] * gv[static_cast<std::size_t>(j)];
            gx[static_cast<std::size_t>(r * d + j)] += (dh - m1 - xh[j] * m2) * inv;
          }
        }
        if (gain.requires_grad()) {
          auto& gg = gain.grad();
          for (std::int64_t j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += gr[j] * xh[j];
        }
        if (bias.requires_grad()) {
          auto& gb = bias.grad();
          for (std::int64_t j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += gr[j];
        }
      }
    });
  }
  return out;
}

}  // namespace dsain
