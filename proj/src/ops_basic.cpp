#include <algorithm>
#include <cmath>

#include "topowmamba/ops.hpp"

namespace twm {

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T, class FwdFn, class BwdFn>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, FwdFn f, BwdFn dfdx) {
  auto out = Tensor<T>::uninit(x.shape(), x.requires_grad());
  const T* xd = x.data();
  T* od = out.data();
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) od[i] = f(xd[i]);
  check_finite(name, out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record(name, [xc, oc, dfdx]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < xc.numel(); ++i) gx[i] += (*og)[i] * dfdx(xc.data()[i], oc.data()[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto out = Tensor<T>::uninit(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite("add", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record("add", [ac, bc, oc]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      if (ac.requires_grad()) {
        T* g = ac.grad();
        for (std::int64_t i = 0; i < ac.numel(); ++i) g[i] += (*og)[i];
      }
      if (bc.requires_grad()) {
        T* g = bc.grad();
        for (std::int64_t i = 0; i < bc.numel(); ++i) g[i] += (*og)[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto out = Tensor<T>::uninit(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite("mul", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record("mul", [ac, bc, oc]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      if (ac.requires_grad()) {
        T* g = ac.grad();
        for (std::int64_t i = 0; i < ac.numel(); ++i) g[i] += (*og)[i] * bc.data()[i];
      }
      if (bc.requires_grad()) {
        T* g = bc.grad();
        for (std::int64_t i = 0; i < bc.numel(); ++i) g[i] += (*og)[i] * ac.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("div", a, b);
  auto out = Tensor<T>::uninit(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  check_finite("div", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record("div", [ac, bc, oc]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      if (ac.requires_grad()) {
        T* g = ac.grad();
        for (std::int64_t i = 0; i < ac.numel(); ++i) g[i] += (*og)[i] / bc.data()[i];
      }
      if (bc.requires_grad()) {
        T* g = bc.grad();
        for (std::int64_t i = 0; i < bc.numel(); ++i) g[i] -= (*og)[i] * oc.data()[i] / bc.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary_op("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return unary_op("mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op("sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_op("silu", x,
                  [](T v) { return v / (T(1) + std::exp(-v)); },
                  [](T v, T) {
                    const T s = T(1) / (T(1) + std::exp(-v));
                    return s * (T(1) + v * (T(1) - s));
                  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  return unary_op("gelu", x,
                  [](T v) {
                    const double u = kSqrt2OverPi * (static_cast<double>(v) + kCubic * static_cast<double>(v) * v * v);
                    return static_cast<T>(0.5 * static_cast<double>(v) * (1.0 + std::tanh(u)));
                  },
                  [](T v, T) {
                    const double xv = static_cast<double>(v);
                    const double u = kSqrt2OverPi * (xv + kCubic * xv * xv * xv);
                    const double t = std::tanh(u);
                    const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * xv * xv);
                    return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const auto c = x.dim(-1);
  const auto rows = x.numel() / c;
  auto out = Tensor<T>::uninit(x.shape(), x.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = out.data() + r * c;
    T m = xr[0];
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
    T s = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - m);
      s += yr[j];
    }
    for (std::int64_t j = 0; j < c; ++j) yr[j] /= s;
  }
  check_finite("softmax", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("softmax", [xc, oc, rows, c]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = oc.data() + r * c;
        const T* g = og->data() + r * c;
        T dot = T(0);
        for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const auto c = x.dim(-1);
  const auto rows = x.numel() / c;
  auto out = Tensor<T>::uninit(x.shape(), x.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = out.data() + r * c;
    T m = xr[0];
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
    T s = T(0);
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(xr[j] - m);
    const T lse = m + std::log(s);
    for (std::int64_t j = 0; j < c; ++j) yr[j] = xr[j] - lse;
  }
  check_finite("log_softmax", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("log_softmax", [xc, oc, rows, c]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = oc.data() + r * c;
        const T* g = og->data() + r * c;
        T sg = T(0);
        for (std::int64_t j = 0; j < c; ++j) sg += g[j];
        for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += g[j] - std::exp(y[j]) * sg;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  auto out = Tensor<T>::uninit(Shape{}, x.requires_grad());
  out.data()[0] = acc;
  check_finite("sum", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("sum", [xc, oc]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < xc.numel(); ++i) gx[i] += (*og)[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("sum_last requires rank >= 1");
  const auto c = x.dim(-1);
  const auto rows = x.numel() / c;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  auto out = Tensor<T>::uninit(os, x.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* xr = x.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) acc += xr[j];
    out.data()[r] = acc;
  }
  check_finite("sum_last", out);
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("sum_last", [xc, oc, rows, c]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += (*og)[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = Tensor<T>::uninit(shape, x.requires_grad());
  std::copy(x.data(), x.data() + x.numel(), out.data());
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("reshape", [xc, oc]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t i = 0; i < xc.numel(); ++i) gx[i] += (*og)[i];
    });
  }
  return out;
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  return st;
}

// Walks the output tensor of a permutation in row-major order and reports the
// matching source flat index.
template <class Fn>
void for_each_permuted(const Shape& out_shape, const std::vector<std::int64_t>& src_stride_for_out_axis, Fn fn) {
  const auto rank = static_cast<std::int64_t>(out_shape.size());
  const auto n = shape_numel(out_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    fn(flat, src);
    for (std::int64_t a = rank - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)]++;
      src += src_stride_for_out_axis[static_cast<std::size_t>(a)];
      if (idx[static_cast<std::size_t>(a)] < out_shape[static_cast<std::size_t>(a)]) break;
      src -= src_stride_for_out_axis[static_cast<std::size_t>(a)] * out_shape[static_cast<std::size_t>(a)];
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& axes) {
  const auto rank = x.rank();
  if (static_cast<std::int64_t>(axes.size()) != rank) throw ShapeError("permute: axes length must equal rank");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (auto a : axes) {
    if (a < 0 || a >= rank || seen[static_cast<std::size_t>(a)]) throw ShapeError("permute: invalid axes");
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape os(static_cast<std::size_t>(rank));
  const auto xst = row_major_strides(x.shape());
  std::vector<std::int64_t> src_stride(static_cast<std::size_t>(rank));
  for (std::int64_t i = 0; i < rank; ++i) {
    os[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    src_stride[static_cast<std::size_t>(i)] = xst[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  }
  auto out = Tensor<T>::uninit(os, x.requires_grad());
  for_each_permuted(os, src_stride, [&](std::int64_t dst, std::int64_t src) { out.data()[dst] = x.data()[src]; });
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("permute", [xc, oc, os, src_stride]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for_each_permuted(os, src_stride, [&](std::int64_t dst, std::int64_t src) { gx[src] += (*og)[dst]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape os = parts[0].shape();
  std::int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::int64_t a = 0; a < rank; ++a)
      if (a != axis && p.shape()[static_cast<std::size_t>(a)] != os[static_cast<std::size_t>(a)])
        throw ShapeError("concat: shape mismatch off the concat axis");
    total += p.dim(axis);
    rg = rg || p.requires_grad();
  }
  os[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (std::int64_t a = 0; a < axis; ++a) outer *= os[static_cast<std::size_t>(a)];
  for (std::int64_t a = axis + 1; a < rank; ++a) inner *= os[static_cast<std::size_t>(a)];

  auto out = Tensor<T>::uninit(os, rg);
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto ext = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* src = p.data() + o * ext * inner;
      T* dst = out.data() + (o * total + offset) * inner;
      std::copy(src, src + ext * inner, dst);
    }
    offset += ext;
  }
  if (auto* tape = Tape<T>::active(); tape && rg) {
    std::vector<Tensor<T>> pc = parts;
    Tensor<T> oc = out;
    tape->record("concat", [pc, oc, outer, inner, total, axis]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      std::int64_t offset = 0;
      for (auto& p : pc) {
        const auto ext = p.dim(axis);
        if (p.requires_grad()) {
          T* gx = p.grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* gsrc = og->data() + (o * total + offset) * inner;
            T* gdst = gx + o * ext * inner;
            for (std::int64_t i = 0; i < ext * inner; ++i) gdst[i] += gsrc[i];
          }
        }
        offset += ext;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, const std::vector<std::int64_t>& index_map) {
  const auto c = x.dim(-1);
  const auto rows = x.numel() / c;
  const auto l = static_cast<std::int64_t>(index_map.size());
  if (l == 0) throw ShapeError("gather_last: empty index map");
  for (auto i : index_map)
    if (i < 0 || i >= c) throw ShapeError("gather_last: index out of range");
  Shape os(x.shape().begin(), x.shape().end() - 1);
  os.push_back(l);
  auto out = Tensor<T>::uninit(os, x.requires_grad());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = out.data() + r * l;
    for (std::int64_t i = 0; i < l; ++i) yr[i] = xr[index_map[static_cast<std::size_t>(i)]];
  }
  if (auto* tape = Tape<T>::active(); tape && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    tape->record("gather_last", [xc, oc, index_map, rows, c, l]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = og->data() + r * l;
        for (std::int64_t i = 0; i < l; ++i) gx[r * c + index_map[static_cast<std::size_t>(i)]] += gr[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  const auto c = x.dim(-1);
  if (start < 0 || len <= 0 || start + len > c) throw ShapeError("slice_last: range out of bounds");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
  for (std::int64_t i = 0; i < len; ++i) idx[static_cast<std::size_t>(i)] = start + i;
  return gather_last(x, idx);
}

template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& s, std::int64_t h, std::int64_t w) {
  if (s.rank() != 4 || s.dim(2) != 1 || s.dim(3) != 1) throw ShapeError("broadcast_spatial expects [N,C,1,1]");
  const auto n = s.dim(0), c = s.dim(1);
  auto flat = reshape(s, {n, c, 1});
  std::vector<std::int64_t> idx(static_cast<std::size_t>(h * w), 0);
  return reshape(gather_last(flat, idx), {n, c, h, w});
}

template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& s, std::int64_t c) {
  if (s.rank() != 4 || s.dim(1) != 1) throw ShapeError("broadcast_channels expects [N,1,H,W]");
  const auto n = s.dim(0), h = s.dim(2), w = s.dim(3);
  auto flat = reshape(s, {n, h * w});
  std::vector<std::int64_t> idx(static_cast<std::size_t>(c * h * w));
  for (std::int64_t j = 0; j < c; ++j)
    for (std::int64_t p = 0; p < h * w; ++p) idx[static_cast<std::size_t>(j * h * w + p)] = p;
  return reshape(gather_last(flat, idx), {n, c, h, w});
}

#define TWM_INSTANTIATE_BASIC(T)                                                                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                    \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                       \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                       \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                    \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                        \
  template Tensor<T> sum_last<T>(const Tensor<T>&);                                                   \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::int64_t>&);                  \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::int64_t);                          \
  template Tensor<T> gather_last<T>(const Tensor<T>&, const std::vector<std::int64_t>&);              \
  template Tensor<T> slice_last<T>(const Tensor<T>&, std::int64_t, std::int64_t);                     \
  template Tensor<T> broadcast_spatial<T>(const Tensor<T>&, std::int64_t, std::int64_t);              \
  template Tensor<T> broadcast_channels<T>(const Tensor<T>&, std::int64_t);

TWM_INSTANTIATE_BASIC(float)
TWM_INSTANTIATE_BASIC(double)

#undef TWM_INSTANTIATE_BASIC

}  // namespace twm
