#include "topowmamba/wavelet.hpp"

namespace twm {

namespace {

// plane-wise kernels; "raw" = no tape interaction, plain buffers
template <typename T>
void dwt2_plane(const T* x, std::int64_t h, std::int64_t w, T* ll, T* lh, T* hl, T* hh) {
  const auto h2 = h / 2, w2 = w / 2;
  for (std::int64_t r = 0; r < h2; ++r) {
    const T* top = x + (2 * r) * w;
    const T* bot = x + (2 * r + 1) * w;
    for (std::int64_t c = 0; c < w2; ++c) {
      const T a = top[2 * c], b = top[2 * c + 1], cc = bot[2 * c], d = bot[2 * c + 1];
      ll[r * w2 + c] = (a + b + cc + d) / T(2);
      lh[r * w2 + c] = (a + b - cc - d) / T(2);
      hl[r * w2 + c] = (a - b + cc - d) / T(2);
      hh[r * w2 + c] = (a - b - cc + d) / T(2);
    }
  }
}

template <typename T>
void iwt2_plane(const T* ll, const T* lh, const T* hl, const T* hh, std::int64_t h2, std::int64_t w2, T* x) {
  const auto w = 2 * w2;
  for (std::int64_t r = 0; r < h2; ++r) {
    T* top = x + (2 * r) * w;
    T* bot = x + (2 * r + 1) * w;
    for (std::int64_t c = 0; c < w2; ++c) {
      const T l = ll[r * w2 + c], v = lh[r * w2 + c], hz = hl[r * w2 + c], dg = hh[r * w2 + c];
      top[2 * c] = (l + v + hz + dg) / T(2);
      top[2 * c + 1] = (l + v - hz - dg) / T(2);
      bot[2 * c] = (l - v + hz - dg) / T(2);
      bot[2 * c + 1] = (l - v - hz + dg) / T(2);
    }
  }
}

template <typename T>
void iwt2_plane_acc(const T* ll, const T* lh, const T* hl, const T* hh, std::int64_t h2, std::int64_t w2, T* x) {
  const auto w = 2 * w2;
  for (std::int64_t r = 0; r < h2; ++r) {
    T* top = x + (2 * r) * w;
    T* bot = x + (2 * r + 1) * w;
    for (std::int64_t c = 0; c < w2; ++c) {
      const T l = ll[r * w2 + c], v = lh[r * w2 + c], hz = hl[r * w2 + c], dg = hh[r * w2 + c];
      top[2 * c] += (l + v + hz + dg) / T(2);
      top[2 * c + 1] += (l + v - hz - dg) / T(2);
      bot[2 * c] += (l - v + hz - dg) / T(2);
      bot[2 * c + 1] += (l - v - hz + dg) / T(2);
    }
  }
}

}  // namespace

template <typename T>
WaveletBands<T> dwt2(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("dwt2 expects [N,C,H,W]");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("dwt2 requires even extents, got " + shape_str(x.shape()) + "; pad before calling");
  const auto h2 = h / 2, w2 = w / 2;
  const bool rg = x.requires_grad();
  WaveletBands<T> out{Tensor<T>::uninit({n, c, h2, w2}, rg), Tensor<T>::uninit({n, c, h2, w2}, rg),
                      Tensor<T>::uninit({n, c, h2, w2}, rg), Tensor<T>::uninit({n, c, h2, w2}, rg)};
  for (std::int64_t p = 0; p < n * c; ++p)
    dwt2_plane(x.data() + p * h * w, h, w, out.ll.data() + p * h2 * w2, out.lh.data() + p * h2 * w2,
               out.hl.data() + p * h2 * w2, out.hh.data() + p * h2 * w2);
  check_finite("dwt2", out.ll);
  check_finite("dwt2", out.lh);
  check_finite("dwt2", out.hl);
  check_finite("dwt2", out.hh);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    Tensor<T> xc = x;
    WaveletBands<T> oc = out;
    tape->record("dwt2", [xc, oc, n, c, h2, w2]() mutable {
      // Orthogonal transform: grad_x accumulates iwt2 of the band grads.
      const bool any = oc.ll.has_grad() || oc.lh.has_grad() || oc.hl.has_grad() || oc.hh.has_grad();
      if (!any) return;
      std::vector<T> zeros(static_cast<std::size_t>(h2 * w2), T(0));
      T* gx = xc.grad();
      for (std::int64_t p = 0; p < n * c; ++p) {
        auto band = [&](Tensor<T>& t) -> const T* {
          return t.has_grad() ? t.grad() + p * h2 * w2 : zeros.data();
        };
        iwt2_plane_acc(band(oc.ll), band(oc.lh), band(oc.hl), band(oc.hh), h2, w2, gx + p * (4 * h2 * w2));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> iwt2(const WaveletBands<T>& bands) {
  if (bands.ll.rank() != 4) throw ShapeError("iwt2 expects [N,C,H/2,W/2] bands");
  const auto& shape = bands.ll.shape();
  if (bands.lh.shape() != shape || bands.hl.shape() != shape || bands.hh.shape() != shape)
    throw ShapeError("iwt2: band shapes disagree");
  const auto n = bands.ll.dim(0), c = bands.ll.dim(1), h2 = bands.ll.dim(2), w2 = bands.ll.dim(3);
  const bool rg = bands.ll.requires_grad() || bands.lh.requires_grad() || bands.hl.requires_grad() ||
                  bands.hh.requires_grad();
  auto out = Tensor<T>::uninit({n, c, 2 * h2, 2 * w2}, rg);
  for (std::int64_t p = 0; p < n * c; ++p)
    iwt2_plane(bands.ll.data() + p * h2 * w2, bands.lh.data() + p * h2 * w2, bands.hl.data() + p * h2 * w2,
               bands.hh.data() + p * h2 * w2, h2, w2, out.data() + p * 4 * h2 * w2);
  check_finite("iwt2", out);
  if (auto* tape = Tape<T>::active(); tape && rg) {
    WaveletBands<T> bc = bands;
    Tensor<T> oc = out;
    tape->record("iwt2", [bc, oc, n, c, h2, w2]() mutable {
      const auto* og = oc.grad_vec();
      if (!og) return;
      // Orthogonal inverse: band grads accumulate dwt2 of grad_out.
      std::vector<T> gll(static_cast<std::size_t>(h2 * w2)), glh = gll, ghl = gll, ghh = gll;
      for (std::int64_t p = 0; p < n * c; ++p) {
        dwt2_plane(og->data() + p * 4 * h2 * w2, 2 * h2, 2 * w2, gll.data(), glh.data(), ghl.data(), ghh.data());
        auto acc = [&](Tensor<T>& t, const std::vector<T>& g) {
          if (!t.requires_grad()) return;
          T* gt = t.grad() + p * h2 * w2;
          for (std::int64_t i = 0; i < h2 * w2; ++i) gt[i] += g[static_cast<std::size_t>(i)];
        };
        acc(bc.ll, gll);
        acc(bc.lh, glh);
        acc(bc.hl, ghl);
        acc(bc.hh, ghh);
      }
    });
  }
  return out;
}

template WaveletBands<float> dwt2<float>(const Tensor<float>&);
template WaveletBands<double> dwt2<double>(const Tensor<double>&);
template Tensor<float> iwt2<float>(const WaveletBands<float>&);
template Tensor<double> iwt2<double>(const WaveletBands<double>&);

}  // namespace twm
