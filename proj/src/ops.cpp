#include "mvaf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mvaf {

namespace {

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename Real>
std::vector<Real> copy_of(Var<Real> v) {
  auto s = v.value();
  return {s.begin(), s.end()};
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Shared forward/backward skeleton for suffix-broadcast binary ops.
enum class Binary { Add, Sub, Mul };

template <typename Real>
Var<Real> binary(Var<Real> a, Var<Real> b, Binary kind, const char* name) {
  if (kind != Binary::Sub && !is_suffix(a.shape(), b.shape()) && is_suffix(b.shape(), a.shape()))
    std::swap(a, b);
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not broadcast-compatible");
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  auto av = a.value();
  auto bv = b.value();
  std::vector<Real> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const Real* ap = av.data() + o * inner;
    Real* op = out.data() + o * inner;
    switch (kind) {
      case Binary::Add:
        for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] + bv[i];
        break;
      case Binary::Sub:
        for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] - bv[i];
        break;
      case Binary::Mul:
        for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] * bv[i];
        break;
    }
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {ia, ib}, [ia, ib, inner, outer, kind](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.accumulate(ia);
    auto gb = t.accumulate(ib);
    auto av = t.value(ia);
    auto bv = t.value(ib);
    for (std::size_t o = 0; o < outer; ++o) {
      const Real* gp = g.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const Real gi = gp[i];
        switch (kind) {
          case Binary::Add:
            if (!ga.empty()) ga[o * inner + i] += gi;
            if (!gb.empty()) gb[i] += gi;
            break;
          case Binary::Sub:
            if (!ga.empty()) ga[o * inner + i] += gi;
            if (!gb.empty()) gb[i] -= gi;
            break;
          case Binary::Mul:
            if (!ga.empty()) ga[o * inner + i] += gi * bv[i];
            if (!gb.empty()) gb[i] += gi * av[o * inner + i];
            break;
        }
      }
    }
  });
}

template <typename Real>
Var<Real> unary(Var<Real> a, Real (*fwd)(Real), Real (*deriv)(Real x, Real y)) {
  auto av = a.value();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [ia, deriv](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto y = t.value(self);
    auto x = t.value(ia);
    auto ga = t.accumulate(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

// Splits a shape around `axis` into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* name) {
  if (axis >= shape.size())
    throw DimensionError(std::string(name) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  return binary(a, b, Binary::Add, "add");
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  return binary(a, b, Binary::Sub, "sub");
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  return binary(a, b, Binary::Mul, "mul");
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real factor) {
  auto av = a.value();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [ia, factor](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.accumulate(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

namespace {

// Each kernel picks the loop order whose innermost loop runs over the longer
// dimension, transposing the right operand when that makes it contiguous.
constexpr std::size_t kNarrow = 8;

template <typename Real>
Real dot(const Real* x, const Real* y, std::size_t n) {
  Real acc[4] = {0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t u = 0; u < 4; ++u) acc[u] += x[i + u] * y[i + u];
  for (; i < n; ++i) acc[0] += x[i] * y[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <typename Real>
std::vector<Real> transposed(const Real* B, std::size_t q, std::size_t r) {
  std::vector<Real> bt(q * r);
  for (std::size_t kk = 0; kk < q; ++kk)
    for (std::size_t j = 0; j < r; ++j) bt[j * q + kk] = B[kk * r + j];
  return bt;
}

// C[p,r] += A[p,q] B[q,r]
template <typename Real>
void mm_acc(const Real* __restrict A, const Real* __restrict B, Real* __restrict C, std::size_t p, std::size_t q,
            std::size_t r) {
  if (r < kNarrow && q > r) {
    const auto bt = transposed(B, q, r);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < r; ++j) C[i * r + j] += dot(A + i * q, bt.data() + j * q, q);
    return;
  }
  std::size_t i = 0;
  for (; i + 4 <= p; i += 4) {
    Real* __restrict c0 = C + i * r;
    Real* __restrict c1 = c0 + r;
    Real* __restrict c2 = c1 + r;
    Real* __restrict c3 = c2 + r;
    const Real* a = A + i * q;
    for (std::size_t kk = 0; kk < q; ++kk) {
      const Real x0 = a[kk], x1 = a[q + kk], x2 = a[2 * q + kk], x3 = a[3 * q + kk];
      const Real* __restrict brow = B + kk * r;
      for (std::size_t j = 0; j < r; ++j) {
        const Real b = brow[j];
        c0[j] += x0 * b;
        c1[j] += x1 * b;
        c2[j] += x2 * b;
        c3[j] += x3 * b;
      }
    }
  }
  for (; i < p; ++i) {
    Real* __restrict c = C + i * r;
    for (std::size_t kk = 0; kk < q; ++kk) {
      const Real x = A[i * q + kk];
      const Real* __restrict brow = B + kk * r;
      for (std::size_t j = 0; j < r; ++j) c[j] += x * brow[j];
    }
  }
}

// GA[p,q] += G[p,r] B[q,r]^T
template <typename Real>
void mm_abt_acc(const Real* __restrict G, const Real* __restrict B, Real* __restrict GA, std::size_t p,
                std::size_t q, std::size_t r) {
  if (q >= kNarrow) {
    const auto bt = transposed(B, q, r);
    mm_acc(G, bt.data(), GA, p, r, q);
    return;
  }
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t kk = 0; kk < q; ++kk) GA[i * q + kk] += dot(G + i * r, B + kk * r, r);
}

// GB[q,r] += A[p,q]^T G[p,r]
template <typename Real>
void mm_atb_acc(const Real* __restrict A, const Real* __restrict G, Real* __restrict GB, std::size_t p,
                std::size_t q, std::size_t r) {
  if (r < kNarrow && q > r) {
    std::vector<Real> gbt(q * r, Real(0));
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < r; ++j) {
        const Real x = G[i * r + j];
        const Real* __restrict arow = A + i * q;
        Real* __restrict dst = gbt.data() + j * q;
        for (std::size_t kk = 0; kk < q; ++kk) dst[kk] += x * arow[kk];
      }
    for (std::size_t kk = 0; kk < q; ++kk)
      for (std::size_t j = 0; j < r; ++j) GB[kk * r + j] += gbt[j * q + kk];
    return;
  }
  // Rows of GB are independent; A^T is formed so each output row reads contiguously.
  const auto at = transposed(A, p, q);
  mm_acc(at.data(), G, GB, q, p, r);
}

}  // namespace

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                          " are incompatible");
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t p = sa[sa.size() - 2], q = sa.back(), r = sb.back();
  if (sb[sb.size() - 2] != q) throw mismatch();

  // Right-aligned batch broadcast.
  const std::size_t ra = sa.size() - 2, rb = sb.size() - 2;
  const std::size_t rank = std::max(ra, rb);
  Shape batch(rank), ba(rank, 1), bb(rank, 1);
  for (std::size_t i = 0; i < ra; ++i) ba[rank - ra + i] = sa[i];
  for (std::size_t i = 0; i < rb; ++i) bb[rank - rb + i] = sb[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1) throw mismatch();
    batch[i] = std::max(ba[i], bb[i]);
  }
  const std::size_t nb = numel(batch);
  std::vector<std::size_t> aoff(nb), boff(nb);
  {
    auto sta = strides_of(ba), stb = strides_of(bb);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t k = 0; k < nb; ++k) {
      std::size_t oa = 0, ob = 0;
      for (std::size_t i = 0; i < rank; ++i) {
        if (ba[i] != 1) oa += idx[i] * sta[i];
        if (bb[i] != 1) ob += idx[i] * stb[i];
      }
      aoff[k] = oa * p * q;
      boff[k] = ob * q * r;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < batch[i]) break;
        idx[i] = 0;
      }
    }
  }

  auto av = a.value();
  auto bv = b.value();
  std::vector<Real> out(nb * p * r, Real(0));
  for (std::size_t k = 0; k < nb; ++k)
    mm_acc(av.data() + aoff[k], bv.data() + boff[k], out.data() + k * p * r, p, q, r);
  Shape os = batch;
  os.push_back(p);
  os.push_back(r);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(os), std::move(out), {ia, ib},
                         [ia, ib, p, q, r, nb, aoff = std::move(aoff), boff = std::move(boff)](Tape<Real>& t, int self) {
                           auto g = t.grad(self);
                           auto ga = t.accumulate(ia);
                           auto gb = t.accumulate(ib);
                           auto av = t.value(ia);
                           auto bv = t.value(ib);
                           for (std::size_t k = 0; k < nb; ++k) {
                             const Real* G = g.data() + k * p * r;
                             if (!ga.empty()) mm_abt_acc(G, bv.data() + boff[k], ga.data() + aoff[k], p, q, r);
                             if (!gb.empty()) mm_atb_acc(av.data() + aoff[k], G, gb.data() + boff[k], p, q, r);
                           }
                         });
}

template <typename Real>
Var<Real> permute(Var<Real> a, const std::vector<std::size_t>& order) {
  const Shape& sa = a.shape();
  const std::size_t rank = sa.size();
  if (order.size() != rank)
    throw DimensionError("permute: order length does not match shape " + shape_str(sa));
  std::vector<bool> seen(rank, false);
  for (auto o : order) {
    if (o >= rank || seen[o]) throw DimensionError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = sa[order[i]];
  auto in_strides = strides_of(sa);
  // src[k] = input offset of output element k.
  std::vector<std::size_t> src(a.size());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < src.size(); ++k) {
    src[k] = off;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t stride = in_strides[order[i]];
      if (++idx[i] < os[i]) {
        off += stride;
        break;
      }
      off -= (os[i] - 1) * stride;
      idx[i] = 0;
    }
  }
  auto av = a.value();
  std::vector<Real> out(src.size());
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = av[src[k]];
  const int ia = a.id();
  return a.tape().record(std::move(os), std::move(out), {ia}, [ia, src = std::move(src)](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.accumulate(ia);
    for (std::size_t k = 0; k < src.size(); ++k) ga[src[k]] += g[k];
  });
}

template <typename Real>
Var<Real> transpose(Var<Real> a) {
  const std::size_t rank = a.shape().size();
  if (rank < 2) throw DimensionError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(rank);
  for (std::size_t i = 0; i < rank; ++i) order[i] = i;
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(a, order);
}

template <typename Real>
Var<Real> reshape(Var<Real> a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const int ia = a.id();
  return a.tape().record(std::move(shape), copy_of(a), {ia}, [ia](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.accumulate(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename Real>
Var<Real> concat(const std::vector<Var<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  auto split0 = split_axis(s0, axis, "concat");
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) ok = false;
    if (!ok)
      throw DimensionError("concat: shape " + shape_str(s) + " does not match " + shape_str(s0) +
                           " off axis " + std::to_string(axis));
    widths.push_back(s[axis] * split0.inner);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  const std::size_t row = total * split0.inner;
  std::vector<Real> out(numel(os));
  std::vector<int> ids;
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].value();
    for (std::size_t o = 0; o < split0.outer; ++o)
      std::copy_n(v.data() + o * widths[k], widths[k], out.data() + o * row + col);
    col += widths[k];
    ids.push_back(parts[k].id());
  }
  const std::size_t outer = split0.outer;
  return parts.front().tape().record(std::move(os), std::move(out), ids,
                                     [ids, widths, row, outer](Tape<Real>& t, int self) {
                                       auto g = t.grad(self);
                                       std::size_t col = 0;
                                       for (std::size_t k = 0; k < ids.size(); ++k) {
                                         auto gk = t.accumulate(ids[k]);
                                         if (!gk.empty())
                                           for (std::size_t o = 0; o < outer; ++o)
                                             for (std::size_t i = 0; i < widths[k]; ++i)
                                               gk[o * widths[k] + i] += g[o * row + col + i];
                                         col += widths[k];
                                       }
                                     });
}

template <typename Real>
Var<Real> slice(Var<Real> a, std::size_t axis, std::size_t begin, std::size_t end) {
  auto s = split_axis(a.shape(), axis, "slice");
  if (begin >= end || end > s.n)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for axis of size " + std::to_string(s.n));
  Shape os = a.shape();
  os[axis] = end - begin;
  const std::size_t width = (end - begin) * s.inner;
  const std::size_t row = s.n * s.inner;
  const std::size_t start = begin * s.inner;
  auto av = a.value();
  std::vector<Real> out(s.outer * width);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.data() + o * row + start, width, out.data() + o * width);
  const int ia = a.id();
  const std::size_t outer = s.outer;
  return a.tape().record(std::move(os), std::move(out), {ia},
                         [ia, outer, width, row, start](Tape<Real>& t, int self) {
                           auto g = t.grad(self);
                           auto ga = t.accumulate(ia);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < width; ++i)
                               ga[o * row + start + i] += g[o * width + i];
                         });
}

template <typename Real>
Var<Real> relu(Var<Real> a) {
  return unary<Real>(
      a, [](Real x) { return x > 0 ? x : Real(0); },
      [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

template <typename Real>
Var<Real> gelu(Var<Real> a) {
  return unary<Real>(
      a,
      [](Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2))); },
      [](Real x, Real) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
        const Real pdf = std::exp(Real(-0.5) * x * x) * Real(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
        return cdf + x * pdf;
      });
}

template <typename Real>
Var<Real> sigmoid(Var<Real> a) {
  return unary<Real>(
      a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Var<Real> max_over_axis(Var<Real> a, std::size_t axis) {
  auto s = split_axis(a.shape(), axis, "max_over_axis");
  auto av = a.value();
  std::vector<Real> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.n * s.inner + i;
      for (std::size_t k = 1; k < s.n; ++k) {
        const std::size_t idx = (o * s.n + k) * s.inner + i;
        if (av[idx] > av[best]) best = idx;
      }
      out[o * s.inner + i] = av[best];
      arg[o * s.inner + i] = best;
    }
  const int ia = a.id();
  return a.tape().record(drop_axis(a.shape(), axis), std::move(out), {ia},
                         [ia, arg = std::move(arg)](Tape<Real>& t, int self) {
                           auto g = t.grad(self);
                           auto ga = t.accumulate(ia);
                           for (std::size_t k = 0; k < arg.size(); ++k) ga[arg[k]] += g[k];
                         });
}

template <typename Real>
Var<Real> mean_over_axis(Var<Real> a, std::size_t axis) {
  auto s = split_axis(a.shape(), axis, "mean_over_axis");
  auto av = a.value();
  std::vector<Real> out(s.outer * s.inner, Real(0));
  const Real inv = Real(1) / Real(s.n);
  for (std::size_t o = 0; o < s.outer; ++o) {
    Real* op = out.data() + o * s.inner;
    for (std::size_t k = 0; k < s.n; ++k) {
      const Real* ip = av.data() + (o * s.n + k) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) op[i] += ip[i];
    }
    for (std::size_t i = 0; i < s.inner; ++i) op[i] *= inv;
  }
  const int ia = a.id();
  return a.tape().record(drop_axis(a.shape(), axis), std::move(out), {ia},
                         [ia, s, inv](Tape<Real>& t, int self) {
                           auto g = t.grad(self);
                           auto ga = t.accumulate(ia);
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t k = 0; k < s.n; ++k)
                               for (std::size_t i = 0; i < s.inner; ++i)
                                 ga[(o * s.n + k) * s.inner + i] += g[o * s.inner + i] * inv;
                         });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
  Real total = 0;
  for (Real v : a.value()) total += v;
  const int ia = a.id();
  return a.tape().record({1}, {total}, {ia}, [ia](Tape<Real>& t, int self) {
    const Real g = t.grad(self)[0];
    auto ga = t.accumulate(ia);
    for (auto& v : ga) v += g;
  });
}

template <typename Real>
Var<Real> masked_softmax_lastdim(Var<Real> logits, const Tensor<Real>* additive_mask,
                                 SoftmaxStatus* status) {
  const Shape& shape = logits.shape();
  const std::size_t k = shape.back();
  const std::size_t rows = logits.size() / k;
  std::size_t mask_rows = 0;
  if (additive_mask != nullptr) {
    if (!is_suffix(shape, additive_mask->shape()) || additive_mask->shape().back() != k)
      throw DimensionError("masked_softmax: mask shape " + shape_str(additive_mask->shape()) +
                           " does not broadcast to " + shape_str(shape));
    mask_rows = additive_mask->size() / k;
  }
  auto lv = logits.value();
  std::vector<Real> out(logits.size(), Real(0));
  std::vector<bool> dead(rows, false);
  std::size_t dead_count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* x = lv.data() + r * k;
    const Real* m = additive_mask ? additive_mask->data().data() + (r % mask_rows) * k : nullptr;
    Real* y = out.data() + r * k;
    Real mx = 0;
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (m && is_masked(m[j])) continue;
      const Real z = m ? x[j] + m[j] : x[j];
      if (!any || z > mx) mx = z;
      any = true;
    }
    if (!any) {
      dead[r] = true;
      ++dead_count;
      continue;
    }
    Real total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (m && is_masked(m[j])) continue;
      const Real z = m ? x[j] + m[j] : x[j];
      y[j] = std::exp(z - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < k; ++j) y[j] /= total;
  }
  if (dead_count > 0 && status == nullptr)
    throw ContractError("masked_softmax: " + std::to_string(dead_count) +
                        " rows are fully masked and the caller did not opt in");
  if (status != nullptr) {
    status->all_masked_rows = dead_count;
    status->row_all_masked = dead;
  }
  const int il = logits.id();
  return logits.tape().record(shape, std::move(out), {il}, [il, k, rows](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto y = t.value(self);
    auto gl = t.accumulate(il);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = y.data() + r * k;
      const Real* gr = g.data() + r * k;
      Real dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < k; ++j) gl[r * k + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps) {
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match width " + std::to_string(c));
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / c;
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<Real> out(x.size());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * c;
    Real mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= Real(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Real(c);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const Real h = (xr[j] - mean) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      x.shape(), std::move(out), {ix, ig, ib},
      [ix, ig, ib, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Real>& t, int self) {
        auto g = t.grad(self);
        auto gx = t.accumulate(ix);
        auto gg = t.accumulate(ig);
        auto gb = t.accumulate(ib);
        auto gam = t.value(ig);
        std::vector<Real> dh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* gr = g.data() + r * c;
          const Real* hr = xhat.data() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            if (!gg.empty()) gg[j] += gr[j] * hr[j];
            if (!gb.empty()) gb[j] += gr[j];
          }
          if (gx.empty()) continue;
          Real mean_dh = 0, mean_dhh = 0;
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = gr[j] * gam[j];
            mean_dh += dh[j];
            mean_dhh += dh[j] * hr[j];
          }
          mean_dh /= Real(c);
          mean_dhh /= Real(c);
          for (std::size_t j = 0; j < c; ++j)
            gx[r * c + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
        }
      });
}

template <typename Real>
Var<Real> mask_rows(Var<Real> a, const std::vector<bool>& keep) {
  const std::size_t n = a.shape().front();
  if (keep.size() != n)
    throw DimensionError("mask_rows: " + std::to_string(keep.size()) + " flags for " +
                         std::to_string(n) + " rows");
  const std::size_t inner = a.size() / n;
  std::vector<Real> out = copy_of(a);
  for (std::size_t r = 0; r < n; ++r)
    if (!keep[r]) std::fill_n(out.begin() + r * inner, inner, Real(0));
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [ia, keep, inner](Tape<Real>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.accumulate(ia);
    for (std::size_t r = 0; r < keep.size(); ++r)
      if (keep[r])
        for (std::size_t i = 0; i < inner; ++i) ga[r * inner + i] += g[r * inner + i];
  });
}

template <typename Real>
Var<Real> dropout(Var<Real> a, Real rate, std::uint64_t seed) {
  if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0, 1)");
  if (rate == 0) return a;
  std::vector<Real> keep(a.size());
  const Real scale_kept = Real(1) / (Real(1) - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const double u = double(splitmix64(seed ^ (i * 0x632be59bd9b4e019ULL)) >> 11) * 0x1.0p-53;
    keep[i] = u < double(rate) ? Real(0) : scale_kept;
  }
  Var<Real> m = a.tape().constant(Tensor<Real>(a.shape(), std::move(keep)));
  return mul(a, m);
}

#define MVAF_INSTANTIATE_OPS(R)                                                                \
  template Var<R> add(Var<R>, Var<R>);                                                         \
  template Var<R> sub(Var<R>, Var<R>);                                                         \
  template Var<R> mul(Var<R>, Var<R>);                                                         \
  template Var<R> scale(Var<R>, R);                                                            \
  template Var<R> matmul(Var<R>, Var<R>);                                                      \
  template Var<R> permute(Var<R>, const std::vector<std::size_t>&);                            \
  template Var<R> transpose(Var<R>);                                                           \
  template Var<R> reshape(Var<R>, Shape);                                                      \
  template Var<R> concat(const std::vector<Var<R>>&, std::size_t);                             \
  template Var<R> slice(Var<R>, std::size_t, std::size_t, std::size_t);                        \
  template Var<R> relu(Var<R>);                                                                \
  template Var<R> gelu(Var<R>);                                                                \
  template Var<R> sigmoid(Var<R>);                                                             \
  template Var<R> max_over_axis(Var<R>, std::size_t);                                          \
  template Var<R> mean_over_axis(Var<R>, std::size_t);                                         \
  template Var<R> sum(Var<R>);                                                                 \
  template Var<R> masked_softmax_lastdim(Var<R>, const Tensor<R>*, SoftmaxStatus*);            \
  template Var<R> layer_norm(Var<R>, Var<R>, Var<R>, R);                                       \
  template Var<R> mask_rows(Var<R>, const std::vector<bool>&);                                 \
  template Var<R> dropout(Var<R>, R, std::uint64_t);

MVAF_INSTANTIATE_OPS(float)
MVAF_INSTANTIATE_OPS(double)

}  // namespace mvaf
