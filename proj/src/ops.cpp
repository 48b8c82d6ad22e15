#include "ringmo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace ringmo::ops {

namespace {

using Index = std::int64_t;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ConfigError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                      std::to_string(rank));
  }
  return a;
}

Index prod(const Shape& s, std::size_t begin, std::size_t end) {
  Index n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Result shape of a leading-axis broadcast between a and b.
const Shape& broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                   " are not broadcastable over leading axes");
}

template <typename T, typename F>
Tensor<T> binary_map(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F f) {
  Tensor<T> out(out_shape);
  const Index n = out.size();
  const Index na = a.size();
  const Index nb = b.size();
  auto* o = out.data().data();
  const auto* pa = a.data().data();
  const auto* pb = b.data().data();
  if (na == n && nb == n) {
    for (Index i = 0; i < n; ++i) o[i] = f(pa[i], pb[i]);
  } else if (na == n) {
    for (Index base = 0; base < n; base += nb)
      for (Index j = 0; j < nb; ++j) o[base + j] = f(pa[base + j], pb[j]);
  } else {
    for (Index base = 0; base < n; base += na)
      for (Index j = 0; j < na; ++j) o[base + j] = f(pa[j], pb[base + j]);
  }
  return out;
}

// Sums a broadcast gradient back down to `shape` (a suffix of g's shape).
template <typename T>
Tensor<T> reduce_to(Tensor<T> g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor<T> out(shape);
  const Index m = out.size();
  const auto* src = g.data().data();
  auto* dst = out.data().data();
  for (Index base = 0; base < g.size(); base += m)
    for (Index j = 0; j < m; ++j) dst[j] += src[base + j];
  return out;
}

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void mm_nn(const T* A, const T* B, T* C, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    T* c = C + i * n;
    for (Index p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      if (av == T(0)) continue;
      const T* b = B + p * n;
      for (Index j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// D[m,k] += G[m,n] B[k,n]^T
template <typename T>
void mm_nt(const T* G, const T* B, T* D, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const T* g = G + i * n;
    for (Index p = 0; p < k; ++p) {
      const T* b = B + p * n;
      T acc = 0;
      for (Index j = 0; j < n; ++j) acc += g[j] * b[j];
      D[i * k + p] += acc;
    }
  }
}

// D[k,n] += A[m,k]^T G[m,n]
template <typename T>
void mm_tn(const T* A, const T* G, T* D, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const T* g = G + i * n;
    for (Index p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      if (av == T(0)) continue;
      T* d = D + p * n;
      for (Index j = 0; j < n; ++j) d[j] += av * g[j];
    }
  }
}

std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& a, const std::vector<int>& perm) {
  const auto& in_shape = a.shape();
  const int r = a.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  const auto in_strides = strides_of(in_shape);
  std::vector<Index> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  Tensor<T> out(out_shape);
  if (out.size() == 0) return out;
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  const auto* src = a.data().data();
  auto* dst = out.data().data();
  const Index inner = r > 0 ? out_shape[r - 1] : 1;
  const Index inner_stride = r > 0 ? src_stride[r - 1] : 1;
  Index src_off = 0;
  for (Index o = 0; o < out.size(); o += inner) {
    for (Index j = 0; j < inner; ++j) dst[o + j] = src[src_off + j * inner_stride];
    // advance odometer over all but the innermost axis
    for (int ax = r - 2; ax >= 0; --ax) {
      if (++idx[ax] < out_shape[ax]) {
        src_off += src_stride[ax];
        break;
      }
      src_off -= (out_shape[ax] - 1) * src_stride[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor<T> roll_axis(const Tensor<T>& a, Index shift, int axis) {
  const auto& s = a.shape();
  const Index outer = prod(s, 0, static_cast<std::size_t>(axis));
  const Index n = s[axis];
  const Index inner = prod(s, static_cast<std::size_t>(axis) + 1, s.size());
  Tensor<T> out(s);
  const Index sh = ((shift % n) + n) % n;
  const auto* src = a.data().data();
  auto* dst = out.data().data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < n; ++i) {
      const Index j = (i + sh) % n;
      std::copy_n(src + (o * n + i) * inner, inner, dst + (o * n + j) * inner);
    }
  return out;
}

template <typename T>
T gelu_value(T x) {
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(kAlpha * (xd + kCubic * xd * xd * xd))));
}

template <typename T>
T gelu_grad(T x) {
  constexpr double kAlpha = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  const double xd = x;
  const double t = std::tanh(kAlpha * (xd + kCubic * xd * xd * xd));
  return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * kAlpha * (1.0 + 3.0 * kCubic * xd * xd));
}

}  // namespace

std::int64_t window_output_extent(std::int64_t in, int kernel, int stride, int padding, const char* what) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ConfigError(std::string(what) + ": kernel/stride must be >= 1 and padding >= 0");
  }
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0 || span % stride != 0) {
    throw ConfigError(std::string(what) + ": extent " + std::to_string(in) + " with kernel " +
                      std::to_string(kernel) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding) + " gives a non-integer output extent");
  }
  return span / stride + 1;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "add");
  auto out = binary_map(a.value(), b.value(), out_shape, [](T x, T y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return Tape<T>::record("add", {a, b}, std::move(out), [sa, sb](const Tensor<T>& g, const std::vector<bool>& need) {
    std::vector<Tensor<T>> grads(2);
    if (need[0]) grads[0] = reduce_to(g, sa);
    if (need[1]) grads[1] = reduce_to(g, sb);
    return grads;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "sub");
  auto out = binary_map(a.value(), b.value(), out_shape, [](T x, T y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return Tape<T>::record("sub", {a, b}, std::move(out), [sa, sb](const Tensor<T>& g, const std::vector<bool>& need) {
    std::vector<Tensor<T>> grads(2);
    if (need[0]) grads[0] = reduce_to(g, sa);
    if (need[1]) {
      Tensor<T> neg = g;
      for (auto& x : neg.vec()) x = -x;
      grads[1] = reduce_to(std::move(neg), sb);
    }
    return grads;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "mul");
  auto out = binary_map(a.value(), b.value(), out_shape, [](T x, T y) { return x * y; });
  return Tape<T>::record("mul", {a, b}, std::move(out), [a, b](const Tensor<T>& g, const std::vector<bool>& need) {
    std::vector<Tensor<T>> grads(2);
    auto times = [](T x, T y) { return x * y; };
    if (need[0]) grads[0] = reduce_to(binary_map(g, b.value(), g.shape(), times), a.shape());
    if (need[1]) grads[1] = reduce_to(binary_map(g, a.value(), g.shape(), times), b.shape());
    return grads;
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x *= s;
  return Tape<T>::record("scale", {a}, std::move(out), [s](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d = g;
    for (auto& x : d.vec()) x *= s;
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x += s;
  return Tape<T>::record("add_scalar", {a}, std::move(out), [](const Tensor<T>& g, const std::vector<bool>&) {
    return std::vector<Tensor<T>>{g};
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x = std::abs(x);
  return Tape<T>::record("abs", {a}, std::move(out), [a](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d = g;
    const auto& x = a.value();
    for (Index i = 0; i < d.size(); ++i) d[i] = x[i] > T(0) ? d[i] : (x[i] < T(0) ? -d[i] : T(0));
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x = gelu_value(x);
  return Tape<T>::record("gelu", {a}, std::move(out), [a](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d = g;
    const auto& x = a.value();
    for (Index i = 0; i < d.size(); ++i) d[i] *= gelu_grad(x[i]);
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

// ---------------------------------------------------------------------------
// contraction

namespace {

struct MatmulGeometry {
  Shape out_shape;
  Index batch = 1;
  Index m = 0, k = 0, n = 0;
  bool a_shared = false;
  bool b_shared = false;
};

MatmulGeometry matmul_geometry(const Shape& sa, const Shape& sb) {
  auto fail = [&] {
    return ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  MatmulGeometry g;
  g.m = sa[sa.size() - 2];
  g.k = sa[sa.size() - 1];
  g.n = sb[sb.size() - 1];
  if (sb[sb.size() - 2] != g.k) throw fail();
  const Shape ba(sa.begin(), sa.end() - 2);
  const Shape bb(sb.begin(), sb.end() - 2);
  Shape batch;
  if (ba == bb) {
    batch = ba;
  } else if (ba.empty()) {
    batch = bb;
    g.a_shared = true;
  } else if (bb.empty()) {
    batch = ba;
    g.b_shared = true;
  } else {
    throw fail();
  }
  g.batch = numel(batch);
  g.out_shape = batch;
  g.out_shape.push_back(g.m);
  g.out_shape.push_back(g.n);
  return g;
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto geo = matmul_geometry(a.shape(), b.shape());
  Tensor<T> out(geo.out_shape);
  const auto* pa = a.value().data().data();
  const auto* pb = b.value().data().data();
  auto* pc = out.data().data();
  const Index sa = geo.a_shared ? 0 : geo.m * geo.k;
  const Index sb = geo.b_shared ? 0 : geo.k * geo.n;
  for (Index bi = 0; bi < geo.batch; ++bi) {
    mm_nn(pa + bi * sa, pb + bi * sb, pc + bi * geo.m * geo.n, geo.m, geo.k, geo.n);
  }
  return Tape<T>::record(
      "matmul", {a, b}, std::move(out), [a, b, geo, sa, sb](const Tensor<T>& g, const std::vector<bool>& need) {
        std::vector<Tensor<T>> grads(2);
        const auto* pg = g.data().data();
        if (need[0]) {
          Tensor<T> da(a.shape());
          for (Index bi = 0; bi < geo.batch; ++bi) {
            mm_nt(pg + bi * geo.m * geo.n, b.value().data().data() + bi * sb, da.data().data() + bi * sa, geo.m,
                  geo.k, geo.n);
          }
          grads[0] = std::move(da);
        }
        if (need[1]) {
          Tensor<T> db(b.shape());
          for (Index bi = 0; bi < geo.batch; ++bi) {
            mm_tn(a.value().data().data() + bi * sa, pg + bi * geo.m * geo.n, db.data().data() + bi * sb, geo.m,
                  geo.k, geo.n);
          }
          grads[1] = std::move(db);
        }
        return grads;
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const Index in = w.dim(0);
  const Index rows = x.value().size() / in;
  auto x2 = reshape(x, Shape{rows, in});
  auto y = matmul(x2, w);
  if (b) {
    if (b->shape() != Shape{w.dim(1)}) {
      throw ShapeError("linear: bias " + shape_str(b->shape()) + " vs weight " + shape_str(w.shape()));
    }
    y = add(y, *b);
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return reshape(y, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// rearrangement

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const Shape from = a.shape();
  return Tape<T>::record("reshape", {a}, a.value().reshaped(std::move(shape)),
                         [from](const Tensor<T>& g, const std::vector<bool>&) {
                           return std::vector<Tensor<T>>{g.reshaped(from)};
                         });
}

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  std::vector<int> p(perm.size());
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  if (static_cast<int>(perm.size()) != r) {
    throw ConfigError("permute: permutation of length " + std::to_string(perm.size()) + " for shape " +
                      shape_str(a.shape()));
  }
  for (std::size_t i = 0; i < perm.size(); ++i) {
    p[i] = normalize_axis(perm[i], r, "permute");
    if (seen[p[i]]) throw ConfigError("permute: repeated axis");
    seen[p[i]] = true;
  }
  std::vector<int> inverse(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inverse[p[i]] = static_cast<int>(i);
  return Tape<T>::record("permute", {a}, permute_tensor(a.value(), p),
                         [inverse](const Tensor<T>& g, const std::vector<bool>&) {
                           return std::vector<Tensor<T>>{permute_tensor(g, inverse)};
                         });
}

template <typename T>
Var<T> transpose(const Var<T>& a, int axis0, int axis1) {
  const int r = a.rank();
  std::vector<int> perm(static_cast<std::size_t>(r));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[normalize_axis(axis0, r, "transpose")], perm[normalize_axis(axis1, r, "transpose")]);
  return permute(a, perm);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(s0.size()), "concat");
  Shape out_shape = s0;
  out_shape[ax] = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s0;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(s0) + " differ off-axis");
    extents.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const Index outer = prod(s0, 0, static_cast<std::size_t>(ax));
  const Index inner = prod(s0, static_cast<std::size_t>(ax) + 1, s0.size());
  const Index total = out_shape[ax];
  Tensor<T> out(out_shape);
  Index offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto* src = parts[pi].value().data().data();
    const Index chunk = extents[pi] * inner;
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.data().data() + (o * total + offset) * inner);
    }
    offset += extents[pi];
  }
  return Tape<T>::record("concat", parts, std::move(out),
                         [extents, outer, inner, total, ax, parts](const Tensor<T>& g, const std::vector<bool>& need) {
                           std::vector<Tensor<T>> grads(extents.size());
                           Index off = 0;
                           for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                             if (need[pi]) {
                               Tensor<T> d(parts[pi].shape());
                               const Index chunk = extents[pi] * inner;
                               for (Index o = 0; o < outer; ++o) {
                                 std::copy_n(g.data().data() + (o * total + off) * inner, chunk,
                                             d.data().data() + o * chunk);
                               }
                               grads[pi] = std::move(d);
                             }
                             off += extents[pi];
                           }
                           (void)ax;
                           return grads;
                         });
}

template <typename T>
std::vector<Var<T>> split(const Var<T>& a, int axis, const std::vector<std::int64_t>& sizes) {
  const Shape& s = a.shape();
  const int ax = normalize_axis(axis, a.rank(), "split");
  Index total = 0;
  for (auto e : sizes) {
    if (e < 1) throw ConfigError("split: part extents must be >= 1");
    total += e;
  }
  if (total != s[ax]) {
    throw ConfigError("split: parts sum to " + std::to_string(total) + " but axis extent is " + std::to_string(s[ax]));
  }
  const Index outer = prod(s, 0, static_cast<std::size_t>(ax));
  const Index inner = prod(s, static_cast<std::size_t>(ax) + 1, s.size());
  std::vector<Var<T>> out;
  Index offset = 0;
  for (auto e : sizes) {
    Shape ps = s;
    ps[ax] = e;
    Tensor<T> part(ps);
    const Index chunk = e * inner;
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(a.value().data().data() + (o * s[ax] + offset) * inner, chunk, part.data().data() + o * chunk);
    }
    const Shape full = s;
    const Index extent = s[ax];
    out.push_back(Tape<T>::record(
        "split", {a}, std::move(part), [full, outer, inner, extent, offset, e](const Tensor<T>& g, const std::vector<bool>&) {
          Tensor<T> d(full);
          const Index chunk = e * inner;
          for (Index o = 0; o < outer; ++o) {
            std::copy_n(g.data().data() + o * chunk, chunk, d.data().data() + (o * extent + offset) * inner);
          }
          return std::vector<Tensor<T>>{std::move(d)};
        }));
    offset += e;
  }
  return out;
}

template <typename T>
Var<T> roll(const Var<T>& a, const std::vector<std::int64_t>& shifts, const std::vector<int>& axes) {
  if (shifts.size() != axes.size()) throw ConfigError("roll: shifts and axes differ in length");
  std::vector<int> ax(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) ax[i] = normalize_axis(axes[i], a.rank(), "roll");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < ax.size(); ++i) out = roll_axis(out, shifts[i], ax[i]);
  return Tape<T>::record("roll", {a}, std::move(out), [shifts, ax](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d = g;
    for (std::size_t i = 0; i < ax.size(); ++i) d = roll_axis(d, -shifts[i], ax[i]);
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

template <typename T>
Var<T> index_select(const Var<T>& a, const std::vector<std::int64_t>& index) {
  if (a.rank() < 1 || index.empty()) throw ShapeError("index_select: need rank >= 1 and a non-empty index");
  const Index rows = a.dim(0);
  const Index inner = a.value().size() / rows;
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<Index>(index.size());
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= rows) throw std::out_of_range("index_select: index out of range");
    std::copy_n(a.value().data().data() + index[r] * inner, inner, out.data().data() + static_cast<Index>(r) * inner);
  }
  const Shape src_shape = a.shape();
  return Tape<T>::record("index_select", {a}, std::move(out),
                         [index, src_shape, inner](const Tensor<T>& g, const std::vector<bool>&) {
                           Tensor<T> d(src_shape);
                           for (std::size_t r = 0; r < index.size(); ++r) {
                             const T* src = g.data().data() + static_cast<Index>(r) * inner;
                             T* dst = d.data().data() + index[r] * inner;
                             for (Index j = 0; j < inner; ++j) dst[j] += src[j];
                           }
                           return std::vector<Tensor<T>>{std::move(d)};
                         });
}

// ---------------------------------------------------------------------------
// normalization

template <typename T>
Var<T> softmax(const Var<T>& a, int axis) {
  const Shape& s = a.shape();
  const int ax = normalize_axis(axis, a.rank(), "softmax");
  const Index outer = prod(s, 0, static_cast<std::size_t>(ax));
  const Index n = s[ax];
  const Index inner = prod(s, static_cast<std::size_t>(ax) + 1, s.size());
  Tensor<T> out(s);
  const auto* x = a.value().data().data();
  auto* y = out.data().data();
  for (Index o = 0; o < outer; ++o)
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      double total = 0;
      for (Index i = 0; i < n; ++i) {
        // fully masked rows (all -inf) have no defined distribution; emit zeros
        const T e = std::isinf(mx) && mx < 0 ? T(0) : static_cast<T>(std::exp(x[base + i * inner] - mx));
        y[base + i * inner] = e;
        total += e;
      }
      if (total > 0)
        for (Index i = 0; i < n; ++i) y[base + i * inner] = static_cast<T>(y[base + i * inner] / total);
    }
  auto result = std::make_shared<Tensor<T>>(out);
  return Tape<T>::record("softmax", {a}, std::move(out),
                         [result, outer, n, inner](const Tensor<T>& g, const std::vector<bool>&) {
                           Tensor<T> d(g.shape());
                           const auto* y = result->data().data();
                           const auto* pg = g.data().data();
                           auto* pd = d.data().data();
                           for (Index o = 0; o < outer; ++o)
                             for (Index in = 0; in < inner; ++in) {
                               const Index base = o * n * inner + in;
                               double dot = 0;
                               for (Index i = 0; i < n; ++i) dot += pg[base + i * inner] * y[base + i * inner];
                               for (Index i = 0; i < n; ++i) {
                                 const Index k = base + i * inner;
                                 pd[k] = static_cast<T>(y[k] * (pg[k] - dot));
                               }
                             }
                           return std::vector<Tensor<T>>{std::move(d)};
                         });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Index c = x.dim(-1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const Index rows = x.value().size() / c;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const auto* px = x.value().data().data();
  const auto* pgm = gamma.value().data().data();
  const auto* pbt = beta.value().data().data();
  for (Index r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    double m = 0;
    for (Index j = 0; j < c; ++j) m += row[j];
    m /= static_cast<double>(c);
    double v = 0;
    for (Index j = 0; j < c; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(v + static_cast<double>(eps));
    (*rstd)[r] = static_cast<T>(rs);
    for (Index j = 0; j < c; ++j) {
      const T h = static_cast<T>((row[j] - m) * rs);
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * pgm[j] + pbt[j];
    }
  }
  return Tape<T>::record(
      "layer_norm", {x, gamma, beta}, std::move(out),
      [xhat, rstd, gamma, rows, c](const Tensor<T>& g, const std::vector<bool>& need) {
        std::vector<Tensor<T>> grads(3);
        const auto* pg = g.data().data();
        const auto* ph = xhat->data().data();
        const auto* pgm = gamma.value().data().data();
        if (need[0]) {
          Tensor<T> dx(g.shape());
          for (Index r = 0; r < rows; ++r) {
            double mean_d = 0, mean_dh = 0;
            for (Index j = 0; j < c; ++j) {
              const double dh = static_cast<double>(pg[r * c + j]) * pgm[j];
              mean_d += dh;
              mean_dh += dh * ph[r * c + j];
            }
            mean_d /= static_cast<double>(c);
            mean_dh /= static_cast<double>(c);
            for (Index j = 0; j < c; ++j) {
              const double dh = static_cast<double>(pg[r * c + j]) * pgm[j];
              dx[r * c + j] = static_cast<T>((*rstd)[r] * (dh - mean_d - ph[r * c + j] * mean_dh));
            }
          }
          grads[0] = std::move(dx);
        }
        if (need[1] || need[2]) {
          Tensor<T> dg(Shape{c}), db(Shape{c});
          for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < c; ++j) {
              dg[j] += pg[r * c + j] * ph[r * c + j];
              db[j] += pg[r * c + j];
            }
          grads[1] = std::move(dg);
          grads[2] = std::move(db);
        }
        return grads;
      });
}

// ---------------------------------------------------------------------------
// convolution and pooling

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias, Conv2dParams p) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected [B,C,H,W] input and 4-D weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Co = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const int G = p.groups;
  if (G < 1 || C % G != 0 || Co % G != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(C) + "->" + std::to_string(Co) +
                      " not divisible by groups " + std::to_string(G));
  }
  if (Cg != C / G) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()) +
                     " with groups " + std::to_string(G));
  }
  if (bias && bias->shape() != Shape{Co}) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(Co) + " output channels");
  }
  const Index OH = window_output_extent(H, static_cast<int>(KH), p.stride, p.padding, "conv2d");
  const Index OW = window_output_extent(W, static_cast<int>(KW), p.stride, p.padding, "conv2d");
  const Index cout_g = Co / G;
  const int s = p.stride, pad = p.padding;

  Tensor<T> out(Shape{B, Co, OH, OW});
  const auto* px = x.value().data().data();
  const auto* pw = w.value().data().data();
  auto* po = out.data().data();
  for (Index b = 0; b < B; ++b)
    for (Index oc = 0; oc < Co; ++oc) {
      T* plane = po + (b * Co + oc) * OH * OW;
      if (bias) std::fill_n(plane, OH * OW, bias->value()[oc]);
      const Index g = oc / cout_g;
      for (Index icg = 0; icg < Cg; ++icg) {
        const T* in = px + (b * C + g * Cg + icg) * H * W;
        for (Index ky = 0; ky < KH; ++ky)
          for (Index kx = 0; kx < KW; ++kx) {
            const T wv = pw[((oc * Cg + icg) * KH + ky) * KW + kx];
            for (Index oy = 0; oy < OH; ++oy) {
              const Index iy = oy * s - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (Index ox = 0; ox < OW; ++ox) {
                const Index ix = ox * s - pad + kx;
                if (ix < 0 || ix >= W) continue;
                plane[oy * OW + ox] += wv * in[iy * W + ix];
              }
            }
          }
      }
    }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return Tape<T>::record(
      "conv2d", inputs, std::move(out),
      [x, w, has_bias, B, C, H, W, Co, Cg, KH, KW, OH, OW, cout_g, s, pad](const Tensor<T>& g,
                                                                           const std::vector<bool>& need) {
        std::vector<Tensor<T>> grads(has_bias ? 3 : 2);
        const auto* pg = g.data().data();
        const auto* px = x.value().data().data();
        const auto* pw = w.value().data().data();
        Tensor<T> dx, dw;
        if (need[0]) dx = Tensor<T>(x.shape());
        if (need[1]) dw = Tensor<T>(w.shape());
        for (Index b = 0; b < B; ++b)
          for (Index oc = 0; oc < Co; ++oc) {
            const T* gp = pg + (b * Co + oc) * OH * OW;
            const Index grp = oc / cout_g;
            for (Index icg = 0; icg < Cg; ++icg) {
              const Index ch = (b * C + grp * Cg + icg) * H * W;
              for (Index ky = 0; ky < KH; ++ky)
                for (Index kx = 0; kx < KW; ++kx) {
                  const Index widx = ((oc * Cg + icg) * KH + ky) * KW + kx;
                  const T wv = pw[widx];
                  T wacc = 0;
                  for (Index oy = 0; oy < OH; ++oy) {
                    const Index iy = oy * s - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (Index ox = 0; ox < OW; ++ox) {
                      const Index ix = ox * s - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      const T gv = gp[oy * OW + ox];
                      if (need[0]) dx[ch + iy * W + ix] += wv * gv;
                      wacc += px[ch + iy * W + ix] * gv;
                    }
                  }
                  if (need[1]) dw[widx] += wacc;
                }
            }
          }
        if (need[0]) grads[0] = std::move(dx);
        if (need[1]) grads[1] = std::move(dw);
        if (has_bias && need[2]) {
          Tensor<T> db(Shape{Co});
          for (Index b = 0; b < B; ++b)
            for (Index oc = 0; oc < Co; ++oc) {
              const T* gp = pg + (b * Co + oc) * OH * OW;
              T acc = 0;
              for (Index i = 0; i < OH * OW; ++i) acc += gp[i];
              db[oc] += acc;
            }
          grads[2] = std::move(db);
        }
        return grads;
      });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, Pool2dParams p) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (2 * p.padding > p.kernel) throw ConfigError("maxpool2d: padding must be at most half the kernel");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index OH = window_output_extent(H, p.kernel, p.stride, p.padding, "maxpool2d");
  const Index OW = window_output_extent(W, p.kernel, p.stride, p.padding, "maxpool2d");
  Tensor<T> out(Shape{B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const auto* px = x.value().data().data();
  for (Index bc = 0; bc < B * C; ++bc) {
    const T* in = px + bc * H * W;
    for (Index oy = 0; oy < OH; ++oy)
      for (Index ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        Index arg = -1;
        for (int ky = 0; ky < p.kernel; ++ky) {
          const Index iy = oy * p.stride - p.padding + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < p.kernel; ++kx) {
            const Index ix = ox * p.stride - p.padding + kx;
            if (ix < 0 || ix >= W) continue;
            if (arg < 0 || in[iy * W + ix] > best) {
              best = in[iy * W + ix];
              arg = iy * W + ix;
            }
          }
        }
        const Index o = (bc * OH + oy) * OW + ox;
        out[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = bc * H * W + arg;
      }
  }
  const Shape in_shape = x.shape();
  return Tape<T>::record("maxpool2d", {x}, std::move(out), [argmax, in_shape](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d(in_shape);
    for (Index o = 0; o < g.size(); ++o) d[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename T>
Var<T> sum(const Var<T>& a) {
  double total = 0;
  for (auto v : a.value().data()) total += v;
  const Shape s = a.shape();
  return Tape<T>::record("sum", {a}, Tensor<T>::scalar(static_cast<T>(total)),
                         [s](const Tensor<T>& g, const std::vector<bool>&) {
                           return std::vector<Tensor<T>>{Tensor<T>(s, g.item())};
                         });
}

template <typename T>
Var<T> mean(const Var<T>& a, int axis) {
  const Shape& s = a.shape();
  const int ax = normalize_axis(axis, a.rank(), "mean");
  const Index outer = prod(s, 0, static_cast<std::size_t>(ax));
  const Index n = s[ax];
  const Index inner = prod(s, static_cast<std::size_t>(ax) + 1, s.size());
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + ax);
  Tensor<T> out(out_shape);
  for (Index o = 0; o < outer; ++o)
    for (Index in = 0; in < inner; ++in) {
      double acc = 0;
      for (Index i = 0; i < n; ++i) acc += a.value()[(o * n + i) * inner + in];
      out[o * inner + in] = static_cast<T>(acc / static_cast<double>(n));
    }
  return Tape<T>::record("mean", {a}, std::move(out), [s, outer, n, inner](const Tensor<T>& g, const std::vector<bool>&) {
    Tensor<T> d(s);
    const T inv = T(1) / static_cast<T>(n);
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < n; ++i)
        for (Index in = 0; in < inner; ++in) d[(o * n + i) * inner + in] = g[o * inner + in] * inv;
    return std::vector<Tensor<T>>{std::move(d)};
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " + std::to_string(labels.size()) +
                     " labels");
  }
  const Index B = logits.dim(0), K = logits.dim(1);
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  double loss = 0;
  for (Index b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K) throw std::out_of_range("cross_entropy: label out of range");
    const T* row = logits.value().data().data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0;
    for (Index k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (Index k = 0; k < K; ++k) (*probs)[b * K + k] = static_cast<T>(std::exp(row[k] - mx) / z);
    loss -= row[labels[b]] - mx - std::log(z);
  }
  loss /= static_cast<double>(B);
  return Tape<T>::record("cross_entropy", {logits}, Tensor<T>::scalar(static_cast<T>(loss)),
                         [probs, labels, B, K](const Tensor<T>& g, const std::vector<bool>&) {
                           Tensor<T> d = *probs;
                           for (Index b = 0; b < B; ++b) d[b * K + labels[b]] -= T(1);
                           const T s = g.item() / static_cast<T>(B);
                           for (auto& v : d.vec()) v *= s;
                           return std::vector<Tensor<T>>{std::move(d)};
                         });
}

#define RINGMO_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> scale(const Var<T>&, T);                                                                \
  template Var<T> add_scalar(const Var<T>&, T);                                                           \
  template Var<T> abs(const Var<T>&);                                                                     \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);                     \
  template Var<T> reshape(const Var<T>&, Shape);                                                          \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                        \
  template Var<T> transpose(const Var<T>&, int, int);                                                     \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                                \
  template std::vector<Var<T>> split(const Var<T>&, int, const std::vector<std::int64_t>&);               \
  template Var<T> roll(const Var<T>&, const std::vector<std::int64_t>&, const std::vector<int>&);          \
  template Var<T> index_select(const Var<T>&, const std::vector<std::int64_t>&);                          \
  template Var<T> softmax(const Var<T>&, int);                                                            \
  template Var<T> gelu(const Var<T>&);                                                                    \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                             \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, Conv2dParams);      \
  template Var<T> maxpool2d(const Var<T>&, Pool2dParams);                                                 \
  template Var<T> sum(const Var<T>&);                                                                     \
  template Var<T> mean(const Var<T>&, int);                                                               \
  template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&);

RINGMO_INSTANTIATE_OPS(float)
RINGMO_INSTANTIATE_OPS(double)

}  // namespace ringmo::ops
