#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsm {

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Non-finite activation during a rollout or train forward.
struct diverged_error : std::runtime_error {
  int step;
  diverged_error(const std::string& what, int step_index)
      : std::runtime_error(what), step(step_index) {}
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw shape_error("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Live-allocation accounting; lets tests assert that long rollouts run in
// constant memory.
struct TensorStats {
  static std::atomic<std::int64_t>& live_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& alloc_count() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static void on_alloc(std::int64_t bytes) {
    alloc_count().fetch_add(1, std::memory_order_relaxed);
    const std::int64_t live =
        live_bytes().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::int64_t peak = peak_bytes().load(std::memory_order_relaxed);
    while (live > peak &&
           !peak_bytes().compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
    }
  }
  static void on_free(std::int64_t bytes) {
    live_bytes().fetch_sub(bytes, std::memory_order_relaxed);
  }
  static void reset_peak() {
    peak_bytes().store(live_bytes().load(std::memory_order_relaxed),
                       std::memory_order_relaxed);
  }
};

template <typename Real>
struct Buffer {
  std::vector<Real> v;
  explicit Buffer(std::size_t n, Real fill = Real(0)) : v(n, fill) {
    TensorStats::on_alloc(static_cast<std::int64_t>(n * sizeof(Real)));
  }
  explicit Buffer(std::vector<Real> values) : v(std::move(values)) {
    TensorStats::on_alloc(static_cast<std::int64_t>(v.size() * sizeof(Real)));
  }
  ~Buffer() { TensorStats::on_free(static_cast<std::int64_t>(v.size() * sizeof(Real))); }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;
};

// Dense row-major tensor of rank <= 3. Copies are shallow (shared storage);
// use clone() for a deep copy. `grad` is non-null exactly when the tensor
// participates in the differentiation graph.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Shape shape;
  std::shared_ptr<Buffer<Real>> buf;
  std::shared_ptr<Buffer<Real>> grad;
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    const std::size_t n = shape_numel(s);
    if (s.size() > 3) throw shape_error("rank > 3 not supported: " + shape_str(s));
    t.shape = std::move(s);
    t.buf = std::make_shared<Buffer<Real>>(n);
    return t;
  }

  static Tensor full(Shape s, Real value) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
  }

  static Tensor from_values(Shape s, std::vector<Real> values) {
    if (shape_numel(s) != values.size())
      throw shape_error("value count does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.buf = std::make_shared<Buffer<Real>>(std::move(values));
    return t;
  }

  bool defined() const { return static_cast<bool>(buf); }
  std::size_t numel() const { return buf ? buf->v.size() : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  Real* data() { return buf->v.data(); }
  const Real* data() const { return buf->v.data(); }
  Real* grad_data() { return grad->v.data(); }
  const Real* grad_data() const { return grad->v.data(); }

  Real& at(std::size_t i) { return buf->v[i]; }
  Real at(std::size_t i) const { return buf->v[i]; }

  Real scalar() const {
    if (numel() != 1) throw usage_error("scalar() on tensor with numel != 1");
    return buf->v[0];
  }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<Buffer<Real>>(numel());
    requires_grad = true;
  }

  void zero_grad() {
    if (grad) std::fill(grad->v.begin(), grad->v.end(), Real(0));
  }

  // Deep copy of values only; the copy is a constant.
  Tensor clone_values() const {
    Tensor t;
    t.shape = shape;
    t.buf = std::make_shared<Buffer<Real>>(buf->v);
    return t;
  }

  // Shares storage (and gradient) under a new shape. Gradient flow is
  // unaffected: both views accumulate into the same buffer.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw shape_error("reshape " + shape_str(shape) + " -> " + shape_str(s));
    if (s.size() > 3) throw shape_error("rank > 3 not supported");
    Tensor t = *this;
    t.shape = std::move(s);
    return t;
  }

  bool all_finite() const {
    for (const Real& x : buf->v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename R2>
  Tensor<R2> cast() const {
    Tensor<R2> t = Tensor<R2>::zeros(shape);
    for (std::size_t i = 0; i < numel(); ++i)
      t.at(i) = static_cast<R2>(buf->v[i]);
    return t;
  }
};

// Flat record of primitive applications. backward() replays the closures in
// exact reverse recording order; gradients accumulate into the buffers the
// closures captured. A stop-gradient boundary is simply a tensor that joins
// later ops without a grad buffer, so nothing upstream is ever visited.
template <typename Real>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t node_count() const { return nodes_.size(); }

  void backward(Tensor<Real>& loss) {
    if (loss.numel() != 1) throw usage_error("backward() expects a scalar loss");
    if (!loss.requires_grad || !loss.grad)
      throw usage_error("backward() expects a loss recorded on the active tape");
    loss.grad->v[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <typename Real>
inline Tape<Real>*& active_tape() {
  thread_local Tape<Real>* tape = nullptr;
  return tape;
}

template <typename Real>
inline bool grad_enabled() {
  return active_tape<Real>() != nullptr;
}

template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : prev_(active_tape<Real>()) {
    active_tape<Real>() = &tape;
  }
  ~TapeScope() { active_tape<Real>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* prev_;
};

template <typename Real>
class NoGradScope {
 public:
  NoGradScope() : prev_(active_tape<Real>()) { active_tape<Real>() = nullptr; }
  ~NoGradScope() { active_tape<Real>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Real>* prev_;
};

}  // namespace rsm
