#include <algorithm>
#include <cmath>
#include <memory>

#include "topowmamba/ops.hpp"

namespace twm {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 std::int64_t stride, std::int64_t padding, std::int64_t groups) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects x[N,C,H,W] and w[Co,Ci/g,kH,kW]");
  if (stride < 1 || padding < 0 || groups < 1) throw ShapeError("conv2d: invalid stride/padding/groups");
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const auto cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (cin % groups != 0 || cout % groups != 0) throw ShapeError("conv2d: channels not divisible by groups");
  if (cg != cin / groups) throw ShapeError("conv2d: kernel input channels mismatch");
  if (b && (b->rank() != 1 || b->dim(0) != cout)) throw ShapeError("conv2d: bias must be [C_out]");
  const auto ho = (h + 2 * padding - kh) / stride + 1;
  const auto wo = (wdt + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || wdt + 2 * padding < kw || ho <= 0 || wo <= 0)
    throw ShapeError("conv2d: non-positive output extent");

  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  auto out = Tensor<T>::uninit({n, cout, ho, wo}, rg);
  const auto cpg = cout / groups;

  const T* xd = x.data();
  const T* wd = w.data();
  T* od = out.data();
  for (std::int64_t in = 0; in < n; ++in) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const auto g = co / cpg;
      const T* wco = wd + co * cg * kh * kw;
      const T bias = b ? b->data()[co] : T(0);
      for (std::int64_t oh = 0; oh < ho; ++oh) {
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          T acc = T(0);
          for (std::int64_t ci = 0; ci < cg; ++ci) {
            const T* xc = xd + ((in * cin + g * cg + ci) * h) * wdt;
            const T* wc = wco + ci * kh * kw;
            for (std::int64_t fh = 0; fh < kh; ++fh) {
              const auto ih = oh * stride - padding + fh;
              if (ih < 0 || ih >= h) continue;
              const T* xrow = xc + ih * wdt;
              const T* wrow = wc + fh * kw;
              for (std::int64_t fw = 0; fw < kw; ++fw) {
                const auto iw = ow * stride - padding + fw;
                if (iw < 0 || iw >= wdt) continue;
                acc += xrow[iw] * wrow[fw];
              }
            }
          }
          od[((in * cout + co) * ho + oh) * wo + ow] = acc + bias;
        }
      }
    }
  }
  check_finite("conv2d", out);

  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x, wc = w, oc = out;
    std::optional<Tensor<T>> bc = b;
    tape->record("conv2d", [xc, wc, bc, oc, stride, padding, groups, cpg]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      const auto n = xc.dim(0), cin = xc.dim(1), h = xc.dim(2), wdt = xc.dim(3);
      const auto cout = wc.dim(0), cg = wc.dim(1), kh = wc.dim(2), kw = wc.dim(3);
      const auto ho = oc.dim(2), wo = oc.dim(3);
      T* gx = xc.requires_grad() ? xc.grad() : nullptr;
      T* gw = wc.requires_grad() ? wc.grad() : nullptr;
      T* gb = (bc && bc->requires_grad()) ? bc->grad() : nullptr;
      const T* xd = xc.data();
      const T* wd = wc.data();
      for (std::int64_t in = 0; in < n; ++in) {
        for (std::int64_t co = 0; co < cout; ++co) {
          const auto g = co / cpg;
          for (std::int64_t oh = 0; oh < ho; ++oh) {
            for (std::int64_t ow = 0; ow < wo; ++ow) {
              const T go = (*og)[((in * cout + co) * ho + oh) * wo + ow];
              if (go == T(0)) continue;
              if (gb) gb[co] += go;
              for (std::int64_t ci = 0; ci < cg; ++ci) {
                const auto xbase = ((in * cin + g * cg + ci) * h) * wdt;
                const auto wbase = (co * cg + ci) * kh * kw;
                for (std::int64_t fh = 0; fh < kh; ++fh) {
                  const auto ih = oh * stride - padding + fh;
                  if (ih < 0 || ih >= h) continue;
                  for (std::int64_t fw = 0; fw < kw; ++fw) {
                    const auto iw = ow * stride - padding + fw;
                    if (iw < 0 || iw >= wdt) continue;
                    if (gx) gx[xbase + ih * wdt + iw] += go * wd[wbase + fh * kw + fw];
                    if (gw) gw[wbase + fh * kw + fw] += go * xd[xbase + ih * wdt + iw];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be [D_out, D_in]");
  const auto din = x.dim(-1);
  if (w.dim(1) != din)
    throw ShapeError("linear: input extent " + std::to_string(din) + " vs weight " + shape_str(w.shape()));
  const auto dout = w.dim(0);
  if (b && (b->rank() != 1 || b->dim(0) != dout)) throw ShapeError("linear: bias must be [D_out]");
  const auto rows = x.numel() / din;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  os.push_back(dout);
  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  auto out = Tensor<T>::uninit(os, rg);
  const T* xd = x.data();
  const T* wd = w.data();
  T* od = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * din;
    T* yr = od + r * dout;
    for (std::int64_t o = 0; o < dout; ++o) {
      const T* wr = wd + o * din;
      T acc = T(0);
      for (std::int64_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc + (b ? b->data()[o] : T(0));
    }
  }
  check_finite("linear", out);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x, wc = w, oc = out;
    std::optional<Tensor<T>> bc = b;
    tape->record("linear", [xc, wc, bc, oc, rows, din, dout]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.requires_grad() ? xc.grad() : nullptr;
      T* gw = wc.requires_grad() ? wc.grad() : nullptr;
      T* gb = (bc && bc->requires_grad()) ? bc->grad() : nullptr;
      const T* xd = xc.data();
      const T* wd = wc.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = og->data() + r * dout;
        const T* xr = xd + r * din;
        for (std::int64_t o = 0; o < dout; ++o) {
          const T go = gr[o];
          if (go == T(0)) continue;
          if (gb) gb[o] += go;
          const T* wr = wd + o * din;
          if (gx) {
            T* gxr = gx + r * din;
            for (std::int64_t i = 0; i < din; ++i) gxr[i] += go * wr[i];
          }
          if (gw) {
            T* gwr = gw + o * din;
            for (std::int64_t i = 0; i < din; ++i) gwr[i] += go * xr[i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const auto c = x.dim(-1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("layer_norm: affine params must be [C] with C = last extent");
  const auto rows = x.numel() / c;
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  auto out = Tensor<T>::uninit(x.shape(), rg);
  // xhat and 1/std are saved for the backward rule.
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T mean = T(0);
    for (std::int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    T* yr = out.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) {
      const T xh = (xr[j] - mean) * inv;
      (*xhat)[static_cast<std::size_t>(r * c + j)] = xh;
      yr[j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  check_finite("layer_norm", out);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    tape->record("layer_norm", [xc, gc, bc, oc, xhat, inv_std, rows, c]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.requires_grad() ? xc.grad() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad() : nullptr;
      T* gb = bc.requires_grad() ? bc.grad() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* g = og->data() + r * c;
        const T* xh = xhat->data() + r * c;
        if (gg || gb) {
          for (std::int64_t j = 0; j < c; ++j) {
            if (gg) gg[j] += g[j] * xh[j];
            if (gb) gb[j] += g[j];
          }
        }
        if (gx) {
          T m1 = T(0), m2 = T(0);
          for (std::int64_t j = 0; j < c; ++j) {
            const T gh = g[j] * gc.data()[j];
            m1 += gh;
            m2 += gh * xh[j];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          const T inv = (*inv_std)[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < c; ++j) {
            const T gh = g[j] * gc.data()[j];
            gx[r * c + j] += inv * (gh - m1 - xh[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pool_reduce(const Tensor<T>& x, PoolKind kind) {
  if (x.rank() != 4) throw ShapeError("pool_reduce expects [N,C,H,W]");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto hw = h * w;
  const bool rg = x.requires_grad();
  Tensor<T> out;
  // First-index argmax is recorded so backward tie-breaks deterministically.
  auto argmax = std::make_shared<std::vector<std::int64_t>>();

  switch (kind) {
    case PoolKind::GlobalMax: {
      out = Tensor<T>::uninit({n, c, 1, 1}, rg);
      argmax->resize(static_cast<std::size_t>(n * c));
      for (std::int64_t i = 0; i < n * c; ++i) {
        const T* xr = x.data() + i * hw;
        T best = xr[0];
        std::int64_t bi = 0;
        for (std::int64_t j = 1; j < hw; ++j)
          if (xr[j] > best) {
            best = xr[j];
            bi = j;
          }
        out.data()[i] = best;
        (*argmax)[static_cast<std::size_t>(i)] = bi;
      }
      break;
    }
    case PoolKind::GlobalAvg: {
      out = Tensor<T>::uninit({n, c, 1, 1}, rg);
      for (std::int64_t i = 0; i < n * c; ++i) {
        const T* xr = x.data() + i * hw;
        T acc = T(0);
        for (std::int64_t j = 0; j < hw; ++j) acc += xr[j];
        out.data()[i] = acc / static_cast<T>(hw);
      }
      break;
    }
    case PoolKind::ChannelMax: {
      out = Tensor<T>::uninit({n, 1, h, w}, rg);
      argmax->resize(static_cast<std::size_t>(n * hw));
      for (std::int64_t in = 0; in < n; ++in) {
        for (std::int64_t p = 0; p < hw; ++p) {
          T best = x.data()[(in * c) * hw + p];
          std::int64_t bi = 0;
          for (std::int64_t j = 1; j < c; ++j) {
            const T v = x.data()[(in * c + j) * hw + p];
            if (v > best) {
              best = v;
              bi = j;
            }
          }
          out.data()[in * hw + p] = best;
          (*argmax)[static_cast<std::size_t>(in * hw + p)] = bi;
        }
      }
      break;
    }
    case PoolKind::ChannelMean: {
      out = Tensor<T>::uninit({n, 1, h, w}, rg);
      for (std::int64_t in = 0; in < n; ++in) {
        for (std::int64_t p = 0; p < hw; ++p) {
          T acc = T(0);
          for (std::int64_t j = 0; j < c; ++j) acc += x.data()[(in * c + j) * hw + p];
          out.data()[in * hw + p] = acc / static_cast<T>(c);
        }
      }
      break;
    }
  }
  check_finite("pool_reduce", out);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x, oc = out;
    tape->record("pool_reduce", [xc, oc, kind, argmax, n, c, hw]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      switch (kind) {
        case PoolKind::GlobalMax:
          for (std::int64_t i = 0; i < n * c; ++i) gx[i * hw + (*argmax)[static_cast<std::size_t>(i)]] += (*og)[i];
          break;
        case PoolKind::GlobalAvg:
          for (std::int64_t i = 0; i < n * c; ++i) {
            const T g = (*og)[i] / static_cast<T>(hw);
            for (std::int64_t j = 0; j < hw; ++j) gx[i * hw + j] += g;
          }
          break;
        case PoolKind::ChannelMax:
          for (std::int64_t in = 0; in < n; ++in)
            for (std::int64_t p = 0; p < hw; ++p)
              gx[(in * c + (*argmax)[static_cast<std::size_t>(in * hw + p)]) * hw + p] += (*og)[in * hw + p];
          break;
        case PoolKind::ChannelMean:
          for (std::int64_t in = 0; in < n; ++in)
            for (std::int64_t p = 0; p < hw; ++p) {
              const T g = (*og)[in * hw + p] / static_cast<T>(c);
              for (std::int64_t j = 0; j < c; ++j) gx[(in * c + j) * hw + p] += g;
            }
          break;
      }
    });
  }
  return out;
}

namespace {

// Source coordinate and blend weight pair for one output row/col under the
// align_corners=false convention at scale 2.
inline void bilinear_src(std::int64_t o, std::int64_t extent, std::int64_t& i0, std::int64_t& i1, double& f) {
  const double src = 0.5 * static_cast<double>(o) - 0.25;
  const double fl = std::floor(src);
  f = src - fl;
  const auto i = static_cast<std::int64_t>(fl);
  i0 = std::clamp<std::int64_t>(i, 0, extent - 1);
  i1 = std::clamp<std::int64_t>(i + 1, 0, extent - 1);
}

}  // namespace

template <typename T>
Tensor<T> resample2d(const Tensor<T>& x, ResampleMode mode) {
  if (x.rank() != 4) throw ShapeError("resample2d expects [N,C,H,W]");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ho = 2 * h, wo = 2 * w;
  const bool rg = x.requires_grad();
  auto out = Tensor<T>::uninit({n, c, ho, wo}, rg);
  const auto planes = n * c;
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const T* xp = x.data() + pl * h * w;
    T* op = out.data() + pl * ho * wo;
    if (mode == ResampleMode::Nearest) {
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow) op[oh * wo + ow] = xp[(oh / 2) * w + ow / 2];
    } else {
      for (std::int64_t oh = 0; oh < ho; ++oh) {
        std::int64_t r0, r1;
        double fr;
        bilinear_src(oh, h, r0, r1, fr);
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          std::int64_t c0, c1;
          double fc;
          bilinear_src(ow, w, c0, c1, fc);
          const double v = (1 - fr) * ((1 - fc) * xp[r0 * w + c0] + fc * xp[r0 * w + c1]) +
                           fr * ((1 - fc) * xp[r1 * w + c0] + fc * xp[r1 * w + c1]);
          op[oh * wo + ow] = static_cast<T>(v);
        }
      }
    }
  }
  check_finite("resample2d", out);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x, oc = out;
    tape->record("resample2d", [xc, oc, mode, planes, h, w, ho, wo]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      T* gx = xc.grad();
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = og->data() + pl * ho * wo;
        T* gxp = gx + pl * h * w;
        if (mode == ResampleMode::Nearest) {
          for (std::int64_t oh = 0; oh < ho; ++oh)
            for (std::int64_t ow = 0; ow < wo; ++ow) gxp[(oh / 2) * w + ow / 2] += gp[oh * wo + ow];
        } else {
          for (std::int64_t oh = 0; oh < ho; ++oh) {
            std::int64_t r0, r1;
            double fr;
            bilinear_src(oh, h, r0, r1, fr);
            for (std::int64_t ow = 0; ow < wo; ++ow) {
              std::int64_t c0, c1;
              double fc;
              bilinear_src(ow, w, c0, c1, fc);
              const T g = gp[oh * wo + ow];
              gxp[r0 * w + c0] += static_cast<T>((1 - fr) * (1 - fc)) * g;
              gxp[r0 * w + c1] += static_cast<T>((1 - fr) * fc) * g;
              gxp[r1 * w + c0] += static_cast<T>(fr * (1 - fc)) * g;
              gxp[r1 * w + c1] += static_cast<T>(fr * fc) * g;
            }
          }
        }
      }
    });
  }
  return out;
}

#define TWM_INSTANTIATE_NN(T)                                                                                  \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,            \
                               std::int64_t, std::int64_t, std::int64_t);                                      \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);           \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                   \
  template Tensor<T> pool_reduce<T>(const Tensor<T>&, PoolKind);                                               \
  template Tensor<T> resample2d<T>(const Tensor<T>&, ResampleMode);

TWM_INSTANTIATE_NN(float)
TWM_INSTANTIATE_NN(double)

#undef TWM_INSTANTIATE_NN

}  // namespace twm
