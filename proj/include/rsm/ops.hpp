#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "rsm/tensor.hpp"

namespace rsm {

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

template <typename Real>
inline void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b,
                             const char* op) {
  if (a.shape != b.shape)
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                      " vs " + shape_str(b.shape));
}

template <typename Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const std::size_t n = out.numel();
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ag, bg, n]() {
      const Real* g = og->v.data();
      if (ag) {
        Real* p = ag->v.data();
        for (std::size_t i = 0; i < n; ++i) p[i] += g[i];
      }
      if (bg) {
        Real* p = bg->v.data();
        for (std::size_t i = 0; i < n; ++i) p[i] += g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ag, bg, n]() {
      const Real* g = og->v.data();
      if (ag)
        for (std::size_t i = 0; i < n; ++i) ag->v[i] += g[i];
      if (bg)
        for (std::size_t i = 0; i < n; ++i) bg->v[i] -= g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ab = a.buf;
    auto bb = b.buf;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ab, bb, ag, bg, n]() {
      const Real* g = og->v.data();
      if (ag)
        for (std::size_t i = 0; i < n; ++i) ag->v[i] += g[i] * bb->v[i];
      if (bg)
        for (std::size_t i = 0; i < n; ++i) bg->v[i] += g[i] * ab->v[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;

  Tape<Real>* tape = active_tape<Real>();
  if (tape && a.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto ag = a.grad;
    tape->record([og, ag, c, n]() {
      for (std::size_t i = 0; i < n; ++i) ag->v[i] += og->v[i] * c;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix products (Eigen-backed kernels)
// ---------------------------------------------------------------------------

// a: [.., m, k] (rank 2 or 3), b: [k, n] -> [.., m, n]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw shape_error("matmul: need a rank>=2 and b rank 2");
  const int k = a.shape.back();
  if (k != b.dim(0))
    throw shape_error("matmul: inner dimensions disagree " + shape_str(a.shape) +
                      " x " + shape_str(b.shape));
  const int n = b.dim(1);
  Shape out_shape = a.shape;
  out_shape.back() = n;
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);
  const Eigen::Index rows = static_cast<Eigen::Index>(a.numel()) / k;

  detail::ConstMatMap<Real> A(a.data(), rows, k);
  detail::ConstMatMap<Real> B(b.data(), k, n);
  detail::MatMap<Real> O(out.data(), rows, n);
  O.noalias() = A * B;

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ab = a.buf;
    auto bb = b.buf;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ab, bb, ag, bg, rows, k, n]() {
      detail::ConstMatMap<Real> G(og->v.data(), rows, n);
      if (ag) {
        detail::ConstMatMap<Real> B2(bb->v.data(), k, n);
        detail::MatMap<Real> GA(ag->v.data(), rows, k);
        GA.noalias() += G * B2.transpose();
      }
      if (bg) {
        detail::ConstMatMap<Real> A2(ab->v.data(), rows, k);
        detail::MatMap<Real> GB(bg->v.data(), k, n);
        GB.noalias() += A2.transpose() * G;
      }
    });
  }
  return out;
}

// a: [.., m, k], b: [n, k] -> [.., m, n] = a . b^T
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw shape_error("matmul_nt: need a rank>=2 and b rank 2");
  const int k = a.shape.back();
  if (k != b.dim(1))
    throw shape_error("matmul_nt: inner dimensions disagree " + shape_str(a.shape) +
                      " x " + shape_str(b.shape) + "^T");
  const int n = b.dim(0);
  Shape out_shape = a.shape;
  out_shape.back() = n;
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);
  const Eigen::Index rows = static_cast<Eigen::Index>(a.numel()) / k;

  detail::ConstMatMap<Real> A(a.data(), rows, k);
  detail::ConstMatMap<Real> B(b.data(), n, k);
  detail::MatMap<Real> O(out.data(), rows, n);
  O.noalias() = A * B.transpose();

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ab = a.buf;
    auto bb = b.buf;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ab, bb, ag, bg, rows, k, n]() {
      detail::ConstMatMap<Real> G(og->v.data(), rows, n);
      if (ag) {
        detail::ConstMatMap<Real> B2(bb->v.data(), n, k);
        detail::MatMap<Real> GA(ag->v.data(), rows, k);
        GA.noalias() += G * B2;
      }
      if (bg) {
        detail::ConstMatMap<Real> A2(ab->v.data(), rows, k);
        detail::MatMap<Real> GB(bg->v.data(), n, k);
        GB.noalias() += G.transpose() * A2;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// indexing / layout
// ---------------------------------------------------------------------------

// table: [R, c], ids in [0, R) -> [N, c]
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw shape_error("gather_rows: table must be rank 2");
  const int r = table.dim(0);
  const int c = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= r)
      throw data_error("gather_rows: index " + std::to_string(id) + " out of range [0, " +
                       std::to_string(r) + ")");
  Tensor<Real> out = Tensor<Real>::zeros({static_cast<int>(ids.size()), c});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * c, c,
                out.data() + i * c);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && table.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto tg = table.grad;
    tape->record([og, tg, ids, c]() {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const Real* g = og->v.data() + i * c;
        Real* dst = tg->v.data() + static_cast<std::size_t>(ids[i]) * c;
        for (int j = 0; j < c; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// [B, S1, d] ++ [B, S2, d] -> [B, S1+S2, d] along the sequence axis
template <typename Real>
Tensor<Real> concat_seq(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw shape_error("concat_seq: incompatible shapes " + shape_str(a.shape) + ", " +
                      shape_str(b.shape));
  const int batch = a.dim(0), s1 = a.dim(1), s2 = b.dim(1), d = a.dim(2);
  Tensor<Real> out = Tensor<Real>::zeros({batch, s1 + s2, d});
  for (int i = 0; i < batch; ++i) {
    std::copy_n(a.data() + static_cast<std::size_t>(i) * s1 * d, std::size_t(s1) * d,
                out.data() + static_cast<std::size_t>(i) * (s1 + s2) * d);
    std::copy_n(b.data() + static_cast<std::size_t>(i) * s2 * d, std::size_t(s2) * d,
                out.data() + static_cast<std::size_t>(i) * (s1 + s2) * d +
                    std::size_t(s1) * d);
  }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ag, bg, batch, s1, s2, d]() {
      for (int i = 0; i < batch; ++i) {
        const Real* g = og->v.data() + static_cast<std::size_t>(i) * (s1 + s2) * d;
        if (ag) {
          Real* p = ag->v.data() + static_cast<std::size_t>(i) * s1 * d;
          for (std::size_t j = 0; j < std::size_t(s1) * d; ++j) p[j] += g[j];
        }
        if (bg) {
          Real* p = bg->v.data() + static_cast<std::size_t>(i) * s2 * d;
          const Real* gb = g + std::size_t(s1) * d;
          for (std::size_t j = 0; j < std::size_t(s2) * d; ++j) p[j] += gb[j];
        }
      }
    });
  }
  return out;
}

// [B, S, d] -> [B, len, d], positions [start, start+len)
template <typename Real>
Tensor<Real> slice_seq(const Tensor<Real>& x, int start, int len) {
  if (x.rank() != 3) throw shape_error("slice_seq: rank 3 required");
  const int batch = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (start < 0 || len < 0 || start + len > s) throw shape_error("slice_seq: bad range");
  Tensor<Real> out = Tensor<Real>::zeros({batch, len, d});
  for (int i = 0; i < batch; ++i)
    std::copy_n(x.data() + (static_cast<std::size_t>(i) * s + start) * d,
                std::size_t(len) * d, out.data() + static_cast<std::size_t>(i) * len * d);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    tape->record([og, xg, batch, s, d, start, len]() {
      for (int i = 0; i < batch; ++i) {
        const Real* g = og->v.data() + static_cast<std::size_t>(i) * len * d;
        Real* p = xg->v.data() + (static_cast<std::size_t>(i) * s + start) * d;
        for (std::size_t j = 0; j < std::size_t(len) * d; ++j) p[j] += g[j];
      }
    });
  }
  return out;
}

// slice along the last axis: [.., D] -> [.., len]
template <typename Real>
Tensor<Real> slice_last(const Tensor<Real>& x, int offset, int len) {
  if (x.rank() < 1) throw shape_error("slice_last: rank >= 1 required");
  const int d = x.shape.back();
  if (offset < 0 || len <= 0 || offset + len > d) throw shape_error("slice_last: bad range");
  Shape out_shape = x.shape;
  out_shape.back() = len;
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);
  const std::size_t outer = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * d + offset, len, out.data() + o * len);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    tape->record([og, xg, outer, d, offset, len]() {
      for (std::size_t o = 0; o < outer; ++o) {
        const Real* g = og->v.data() + o * len;
        Real* p = xg->v.data() + o * d + offset;
        for (int j = 0; j < len; ++j) p[j] += g[j];
      }
    });
  }
  return out;
}

// [B, S, d] + [S, d], the addend broadcast over the batch axis
template <typename Real>
Tensor<Real> broadcast_add_seq(const Tensor<Real>& x, const Tensor<Real>& t) {
  if (x.rank() != 3 || t.rank() != 2 || x.dim(1) != t.dim(0) || x.dim(2) != t.dim(1))
    throw shape_error("broadcast_add_seq: incompatible shapes");
  const int batch = x.dim(0);
  const std::size_t per = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (int i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < per; ++j)
      out.at(static_cast<std::size_t>(i) * per + j) =
          x.at(static_cast<std::size_t>(i) * per + j) + t.at(j);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (x.requires_grad || t.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.requires_grad ? x.grad : nullptr;
    auto tg = t.requires_grad ? t.grad : nullptr;
    tape->record([og, xg, tg, batch, per]() {
      if (xg)
        for (std::size_t i = 0; i < std::size_t(batch) * per; ++i)
          xg->v[i] += og->v[i];
      if (tg)
        for (int i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < per; ++j)
            tg->v[j] += og->v[static_cast<std::size_t>(i) * per + j];
    });
  }
  return out;
}

// [B, S, d] <-> [B, d, S]
template <typename Real>
Tensor<Real> transpose_12(const Tensor<Real>& x) {
  if (x.rank() != 3) throw shape_error("transpose_12: rank 3 required");
  const int batch = x.dim(0), s = x.dim(1), d = x.dim(2);
  Tensor<Real> out = Tensor<Real>::zeros({batch, d, s});
  for (int b = 0; b < batch; ++b) {
    const Real* src = x.data() + static_cast<std::size_t>(b) * s * d;
    Real* dst = out.data() + static_cast<std::size_t>(b) * s * d;
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < d; ++j) dst[static_cast<std::size_t>(j) * s + i] = src[static_cast<std::size_t>(i) * d + j];
  }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    tape->record([og, xg, batch, s, d]() {
      for (int b = 0; b < batch; ++b) {
        const Real* g = og->v.data() + static_cast<std::size_t>(b) * s * d;
        Real* p = xg->v.data() + static_cast<std::size_t>(b) * s * d;
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < d; ++j) p[static_cast<std::size_t>(i) * d + j] += g[static_cast<std::size_t>(j) * s + i];
      }
    });
  }
  return out;
}

// [B, S, d] -> [B*h, S, d/h]; head-major groups so rank stays <= 3
template <typename Real>
Tensor<Real> heads_split(const Tensor<Real>& x, int heads) {
  if (x.rank() != 3) throw shape_error("heads_split: rank 3 required");
  const int batch = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (heads <= 0 || d % heads != 0)
    throw config_error("heads_split: hidden size " + std::to_string(d) +
                       " not divisible by heads " + std::to_string(heads));
  const int hd = d / heads;
  Tensor<Real> out = Tensor<Real>::zeros({batch * heads, s, hd});
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < s; ++i)
      for (int h = 0; h < heads; ++h)
        std::copy_n(x.data() + (static_cast<std::size_t>(b) * s + i) * d + h * hd, hd,
                    out.data() + (static_cast<std::size_t>(b * heads + h) * s + i) * hd);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    tape->record([og, xg, batch, s, d, heads, hd]() {
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < s; ++i)
          for (int h = 0; h < heads; ++h) {
            const Real* g =
                og->v.data() + (static_cast<std::size_t>(b * heads + h) * s + i) * hd;
            Real* p = xg->v.data() + (static_cast<std::size_t>(b) * s + i) * d + h * hd;
            for (int j = 0; j < hd; ++j) p[j] += g[j];
          }
    });
  }
  return out;
}

// [B*h, S, hd] -> [B, S, h*hd]
template <typename Real>
Tensor<Real> heads_merge(const Tensor<Real>& x, int heads) {
  if (x.rank() != 3) throw shape_error("heads_merge: rank 3 required");
  const int gb = x.dim(0), s = x.dim(1), hd = x.dim(2);
  if (heads <= 0 || gb % heads != 0) throw config_error("heads_merge: bad head count");
  const int batch = gb / heads;
  const int d = heads * hd;
  Tensor<Real> out = Tensor<Real>::zeros({batch, s, d});
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < s; ++i)
      for (int h = 0; h < heads; ++h)
        std::copy_n(x.data() + (static_cast<std::size_t>(b * heads + h) * s + i) * hd, hd,
                    out.data() + (static_cast<std::size_t>(b) * s + i) * d + h * hd);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    tape->record([og, xg, batch, s, heads, hd]() {
      const int d = heads * hd;
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < s; ++i)
          for (int h = 0; h < heads; ++h) {
            const Real* g = og->v.data() + (static_cast<std::size_t>(b) * s + i) * d + h * hd;
            Real* p = xg->v.data() + (static_cast<std::size_t>(b * heads + h) * s + i) * hd;
            for (int j = 0; j < hd; ++j) p[j] += g[j];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

// cos/sin tables of shape [S, hd/2]; angle(pos, i) = pos * base^(-2i/hd)
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> rope_tables(int seq_len, int head_dim, double base) {
  if (head_dim % 2 != 0)
    throw config_error("rope: head dimension must be even, got " + std::to_string(head_dim));
  const int half = head_dim / 2;
  Tensor<Real> cos_t = Tensor<Real>::zeros({seq_len, half});
  Tensor<Real> sin_t = Tensor<Real>::zeros({seq_len, half});
  for (int pos = 0; pos < seq_len; ++pos)
    for (int i = 0; i < half; ++i) {
      const double angle = pos * std::pow(base, -2.0 * i / head_dim);
      cos_t.at(static_cast<std::size_t>(pos) * half + i) = static_cast<Real>(std::cos(angle));
      sin_t.at(static_cast<std::size_t>(pos) * half + i) = static_cast<Real>(std::sin(angle));
    }
  return {cos_t, sin_t};
}

// x: [G, S, hd]; rotates channel pairs (2i, 2i+1). Backward is the inverse
// rotation, since rotations are orthogonal.
template <typename Real>
Tensor<Real> rope_apply(const Tensor<Real>& x, const Tensor<Real>& cos_t,
                        const Tensor<Real>& sin_t) {
  if (x.rank() != 3) throw shape_error("rope_apply: rank 3 required");
  const int g = x.dim(0), s = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) throw config_error("rope_apply: odd head dimension");
  const int half = hd / 2;
  if (cos_t.dim(0) != s || cos_t.dim(1) != half)
    throw shape_error("rope_apply: table shape mismatch");
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (int a = 0; a < g; ++a)
    for (int p = 0; p < s; ++p) {
      const Real* src = x.data() + (static_cast<std::size_t>(a) * s + p) * hd;
      Real* dst = out.data() + (static_cast<std::size_t>(a) * s + p) * hd;
      const Real* c = cos_t.data() + static_cast<std::size_t>(p) * half;
      const Real* sn = sin_t.data() + static_cast<std::size_t>(p) * half;
      for (int i = 0; i < half; ++i) {
        const Real x0 = src[2 * i], x1 = src[2 * i + 1];
        dst[2 * i] = x0 * c[i] - x1 * sn[i];
        dst[2 * i + 1] = x0 * sn[i] + x1 * c[i];
      }
    }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    auto cb = cos_t.buf;
    auto sb = sin_t.buf;
    tape->record([og, xg, cb, sb, g, s, half]() {
      const int hd = 2 * half;
      for (int a = 0; a < g; ++a)
        for (int p = 0; p < s; ++p) {
          const Real* gr = og->v.data() + (static_cast<std::size_t>(a) * s + p) * hd;
          Real* px = xg->v.data() + (static_cast<std::size_t>(a) * s + p) * hd;
          const Real* c = cb->v.data() + static_cast<std::size_t>(p) * half;
          const Real* sn = sb->v.data() + static_cast<std::size_t>(p) * half;
          for (int i = 0; i < half; ++i) {
            const Real g0 = gr[2 * i], g1 = gr[2 * i + 1];
            px[2 * i] += g0 * c[i] + g1 * sn[i];
            px[2 * i + 1] += -g0 * sn[i] + g1 * c[i];
          }
        }
    });
  }
  return out;
}

template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> rope_rotate(const Tensor<Real>& q,
                                                  const Tensor<Real>& k,
                                                  const Tensor<Real>& cos_t,
                                                  const Tensor<Real>& sin_t) {
  return {rope_apply(q, cos_t, sin_t), rope_apply(k, cos_t, sin_t)};
}

// ---------------------------------------------------------------------------
// attention core: softmax(q k^T / sqrt(hd)) v, no causal mask
// ---------------------------------------------------------------------------

namespace detail {

// rowwise softmax of an [s, s] score matrix, in place
template <typename Real>
inline void softmax_rows(RowMat<Real>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Real mx = m(r, 0);
    for (Eigen::Index c = 1; c < m.cols(); ++c) mx = std::max(mx, m(r, c));
    double sum = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const Real e = std::exp(m(r, c) - mx);
      m(r, c) = e;
      sum += static_cast<double>(e);
    }
    const Real inv = static_cast<Real>(1.0 / sum);
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) *= inv;
  }
}

}  // namespace detail

template <typename Real>
Tensor<Real> attn_core(const Tensor<Real>& q, const Tensor<Real>& k,
                       const Tensor<Real>& v) {
  detail::check_same_shape(q, k, "attn_core");
  detail::check_same_shape(q, v, "attn_core");
  if (q.rank() != 3) throw shape_error("attn_core: rank 3 required");
  const int g = q.dim(0), s = q.dim(1), hd = q.dim(2);
  const Real sc = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor<Real> out = Tensor<Real>::zeros(q.shape);

  for (int a = 0; a < g; ++a) {
    detail::ConstMatMap<Real> Q(q.data() + static_cast<std::size_t>(a) * s * hd, s, hd);
    detail::ConstMatMap<Real> K(k.data() + static_cast<std::size_t>(a) * s * hd, s, hd);
    detail::ConstMatMap<Real> V(v.data() + static_cast<std::size_t>(a) * s * hd, s, hd);
    detail::RowMat<Real> P = (Q * K.transpose()) * sc;
    detail::softmax_rows(P);
    detail::MatMap<Real> O(out.data() + static_cast<std::size_t>(a) * s * hd, s, hd);
    O.noalias() = P * V;
  }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (q.requires_grad || k.requires_grad || v.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto qb = q.buf, kb = k.buf, vb = v.buf;
    auto qg = q.requires_grad ? q.grad : nullptr;
    auto kg = k.requires_grad ? k.grad : nullptr;
    auto vg = v.requires_grad ? v.grad : nullptr;
    tape->record([og, qb, kb, vb, qg, kg, vg, g, s, hd, sc]() {
      for (int a = 0; a < g; ++a) {
        const std::size_t off = static_cast<std::size_t>(a) * s * hd;
        detail::ConstMatMap<Real> Q(qb->v.data() + off, s, hd);
        detail::ConstMatMap<Real> K(kb->v.data() + off, s, hd);
        detail::ConstMatMap<Real> V(vb->v.data() + off, s, hd);
        detail::ConstMatMap<Real> G(og->v.data() + off, s, hd);
        // probabilities are recomputed rather than saved to keep rollout
        // memory bounded by O(S^2) scratch instead of per-node storage
        detail::RowMat<Real> P = (Q * K.transpose()) * sc;
        detail::softmax_rows(P);
        if (vg) {
          detail::MatMap<Real> GV(vg->v.data() + off, s, hd);
          GV.noalias() += P.transpose() * G;
        }
        if (qg || kg) {
          detail::RowMat<Real> GP = G * V.transpose();
          for (int r = 0; r < s; ++r) {
            double dot = 0.0;
            for (int c = 0; c < s; ++c) dot += static_cast<double>(GP(r, c)) * P(r, c);
            for (int c = 0; c < s; ++c)
              GP(r, c) = P(r, c) * (GP(r, c) - static_cast<Real>(dot));
          }
          if (qg) {
            detail::MatMap<Real> GQ(qg->v.data() + off, s, hd);
            GQ.noalias() += (GP * K) * sc;
          }
          if (kg) {
            detail::MatMap<Real> GK(kg->v.data() + off, s, hd);
            GK.noalias() += (GP.transpose() * Q) * sc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and gated ffn pieces
// ---------------------------------------------------------------------------

// y_i = gain_i * x_i / sqrt(mean_j(x_j^2) + eps), per trailing-axis vector
template <typename Real>
Tensor<Real> rms_norm(const Tensor<Real>& x, const Tensor<Real>& gain, double eps) {
  if (gain.rank() != 1 || gain.dim(0) != x.shape.back())
    throw shape_error("rms_norm: gain must match the trailing axis");
  if (eps <= 0) throw config_error("rms_norm: eps must be > 0");
  const int d = x.shape.back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = x.data() + r * d;
    Real* po = out.data() + r * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += static_cast<double>(px[j]) * px[j];
    const Real inv = static_cast<Real>(1.0 / std::sqrt(ms / d + eps));
    for (int j = 0; j < d; ++j) po[j] = gain.at(static_cast<std::size_t>(j)) * px[j] * inv;
  }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (x.requires_grad || gain.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto xb = x.buf;
    auto gb = gain.buf;
    auto xg = x.requires_grad ? x.grad : nullptr;
    auto gg = gain.requires_grad ? gain.grad : nullptr;
    tape->record([og, xb, gb, xg, gg, rows, d, eps]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* px = xb->v.data() + r * d;
        const Real* g = og->v.data() + r * d;
        double ms = 0.0;
        for (int j = 0; j < d; ++j) ms += static_cast<double>(px[j]) * px[j];
        const double inv = 1.0 / std::sqrt(ms / d + eps);
        if (xg) {
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += static_cast<double>(g[j]) * gb->v[j] * px[j];
          const double inv3_dot_over_d = inv * inv * inv * dot / d;
          Real* p = xg->v.data() + r * d;
          for (int j = 0; j < d; ++j)
            p[j] += static_cast<Real>(inv * gb->v[j] * g[j] - inv3_dot_over_d * px[j]);
        }
        if (gg)
          for (int j = 0; j < d; ++j)
            gg->v[j] += static_cast<Real>(static_cast<double>(g[j]) * px[j] * inv);
      }
    });
  }
  return out;
}

// silu(a) * b, elementwise
template <typename Real>
Tensor<Real> silu_mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "silu_mul");
  Tensor<Real> out = Tensor<Real>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const Real s = detail::sigmoid(a.at(i));
    out.at(i) = a.at(i) * s * b.at(i);
  }

  Tape<Real>* tape = active_tape<Real>();
  if (tape && (a.requires_grad || b.requires_grad)) {
    out.ensure_grad();
    auto og = out.grad;
    auto ab = a.buf, bb = b.buf;
    auto ag = a.requires_grad ? a.grad : nullptr;
    auto bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ab, bb, ag, bg, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        const Real av = ab->v[i];
        const Real s = detail::sigmoid(av);
        const Real g = og->v[i];
        if (ag) ag->v[i] += g * bb->v[i] * s * (Real(1) + av * (Real(1) - s));
        if (bg) bg->v[i] += g * av * s;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// loss and reductions
// ---------------------------------------------------------------------------

// Mean over non-ignored positions of -log softmax(logits)[target].
// Zero non-ignored positions: loss 0 with zero gradient.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& targets,
                           int ignore_label) {
  if (logits.rank() < 2) throw shape_error("cross_entropy: rank >= 2 required");
  const int v = logits.shape.back();
  const std::size_t rows = logits.numel() / static_cast<std::size_t>(v);
  if (targets.size() != rows)
    throw shape_error("cross_entropy: target count " + std::to_string(targets.size()) +
                      " does not match positions " + std::to_string(rows));
  std::size_t counted = 0;
  double loss_sum = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_label) continue;
    if (t < 0 || t >= v)
      throw data_error("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(v) + ")");
    const Real* p = logits.data() + r * v;
    double mx = static_cast<double>(p[0]);
    for (int c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(p[c]));
    double sum = 0.0;
    for (int c = 0; c < v; ++c) sum += std::exp(static_cast<double>(p[c]) - mx);
    loss_sum += std::log(sum) + mx - static_cast<double>(p[t]);
    ++counted;
  }
  Tensor<Real> out = Tensor<Real>::zeros({1});
  out.at(0) = counted ? static_cast<Real>(loss_sum / static_cast<double>(counted)) : Real(0);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && logits.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto lb = logits.buf;
    auto lg = logits.grad;
    tape->record([og, lb, lg, targets, ignore_label, rows, v, counted]() {
      if (counted == 0) return;
      const double coeff = static_cast<double>(og->v[0]) / static_cast<double>(counted);
      for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t == ignore_label) continue;
        const Real* p = lb->v.data() + r * v;
        double mx = static_cast<double>(p[0]);
        for (int c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(p[c]));
        double sum = 0.0;
        for (int c = 0; c < v; ++c) sum += std::exp(static_cast<double>(p[c]) - mx);
        Real* gp = lg->v.data() + r * v;
        for (int c = 0; c < v; ++c) {
          const double soft = std::exp(static_cast<double>(p[c]) - mx) / sum;
          gp[c] += static_cast<Real>(coeff * (soft - (c == t ? 1.0 : 0.0)));
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += static_cast<double>(x.at(i));
  Tensor<Real> out = Tensor<Real>::zeros({1});
  out.at(0) = static_cast<Real>(s);

  Tape<Real>* tape = active_tape<Real>();
  if (tape && x.requires_grad) {
    out.ensure_grad();
    auto og = out.grad;
    auto xg = x.grad;
    const std::size_t n = x.numel();
    tape->record([og, xg, n]() {
      const Real g = og->v[0];
      for (std::size_t i = 0; i < n; ++i) xg->v[i] += g;
    });
  }
  return out;
}

// Forward-transparent boundary: shares storage, drops the gradient path.
template <typename Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x) {
  Tensor<Real> out;
  out.shape = x.shape;
  out.buf = x.buf;
  out.grad = nullptr;
  out.requires_grad = false;
  return out;
}

// ---------------------------------------------------------------------------
// compositions
// ---------------------------------------------------------------------------

// (silu(x Wg) . (x Wu)) Wd
template <typename Real>
Tensor<Real> swiglu_ffn(const Tensor<Real>& x, const Tensor<Real>& w_gate,
                        const Tensor<Real>& w_up, const Tensor<Real>& w_down) {
  return matmul(silu_mul(matmul(x, w_gate), matmul(x, w_up)), w_down);
}

// SwiGLU applied across the token axis: [B, S, d] -> transpose -> mix -> back.
// The mixing weights are built for a fixed sequence length.
template <typename Real>
Tensor<Real> token_mix_ffn(const Tensor<Real>& x, const Tensor<Real>& w_gate,
                           const Tensor<Real>& w_up, const Tensor<Real>& w_down) {
  if (x.rank() != 3) throw shape_error("token_mix_ffn: rank 3 required");
  if (w_gate.dim(0) != x.dim(1))
    throw config_error("token_mix_ffn: weights built for sequence length " +
                       std::to_string(w_gate.dim(0)) + ", input has " +
                       std::to_string(x.dim(1)));
  return transpose_12(swiglu_ffn(transpose_12(x), w_gate, w_up, w_down));
}

// Multi-head non-causal self-attention with optional rotary embedding.
template <typename Real>
Tensor<Real> attention(const Tensor<Real>& x, const Tensor<Real>& w_qkv,
                       const Tensor<Real>& w_out, int n_heads,
                       const Tensor<Real>* rope_cos = nullptr,
                       const Tensor<Real>* rope_sin = nullptr) {
  if (x.rank() != 3) throw shape_error("attention: rank 3 required");
  const int d = x.dim(2);
  if (n_heads <= 0 || d % n_heads != 0)
    throw config_error("attention: hidden size " + std::to_string(d) +
                       " not divisible by " + std::to_string(n_heads) + " heads");
  Tensor<Real> qkv = matmul(x, w_qkv);
  Tensor<Real> q = heads_split(slice_last(qkv, 0, d), n_heads);
  Tensor<Real> k = heads_split(slice_last(qkv, d, d), n_heads);
  Tensor<Real> v = heads_split(slice_last(qkv, 2 * d, d), n_heads);
  if (rope_cos && rope_sin) {
    q = rope_apply(q, *rope_cos, *rope_sin);
    k = rope_apply(k, *rope_cos, *rope_sin);
  }
  return matmul(heads_merge(attn_core(q, k, v), n_heads), w_out);
}

// argmax over the trailing axis; first index wins ties
template <typename Real>
std::vector<int> argmax_last(const Tensor<Real>& x) {
  const int v = x.shape.back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(v);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* p = x.data() + r * v;
    int best = 0;
    for (int c = 1; c < v; ++c)
      if (p[c] > p[best]) best = c;
    out[r] = best;
  }
  return out;
}

}  // namespace rsm
