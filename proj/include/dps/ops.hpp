#pragma once

#include "dps/tensor.hpp"

namespace dps {

/// 2-d convolution on a single (C,H,W) feature map with an (O,C,kh,kw) kernel.
/// Zero padding; output size floor((H + 2p - d*(k-1) - 1)/s) + 1. Differentiable
/// in input, kernel and bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1,
                     int pad = 0, int dilation = 1) {
  if (x.rank() != 3 || w.rank() != 4)
    shape_error("conv2d: expected (C,H,W) input and (O,C,kh,kw) kernel, got " +
                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1 || dilation < 1 || pad < 0) shape_error("conv2d: bad stride/pad/dilation");
  const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  const std::int64_t O = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != C)
    shape_error("conv2d: input " + shape_str(x.shape()) + " does not match kernel " +
                shape_str(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.size(0) != O))
    shape_error("conv2d: bias " + shape_str(b.shape()) + " does not match kernel " +
                shape_str(w.shape()));
  const std::int64_t OH = (H + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
  if (OH < 1 || OW < 1)
    shape_error("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " +
                shape_str(x.shape()));

  Tensor out = Tensor::zeros({O, OH, OW});
  const real* xv = x.data();
  const real* wv = w.data();
  real* ov = out.values().data();
  if (b.defined()) {
    const real* bv = b.data();
    for (std::int64_t o = 0; o < O; ++o)
      std::fill(ov + o * OH * OW, ov + (o + 1) * OH * OW, bv[o]);
  }

  // For each kernel tap, the output range with in-bounds input rows/cols.
  auto tap_range = [](std::int64_t off, std::int64_t extent, std::int64_t stride_,
                      std::int64_t limit) {
    // valid o: 0 <= o*stride + off < extent, 0 <= o < limit
    std::int64_t lo = off < 0 ? (-off + stride_ - 1) / stride_ : 0;
    std::int64_t hi = (extent - 1 - off) / stride_;  // inclusive
    hi = std::min(hi, limit - 1);
    return std::pair<std::int64_t, std::int64_t>(lo, hi);
  };

  for (std::int64_t o = 0; o < O; ++o)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t ky = 0; ky < kh; ++ky) {
        const std::int64_t offy = ky * dilation - pad;
        const auto [oy_lo, oy_hi] = tap_range(offy, H, stride, OH);
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const real wval = wv[((o * C + c) * kh + ky) * kw + kx];
          const std::int64_t offx = kx * dilation - pad;
          const auto [ox_lo, ox_hi] = tap_range(offx, W, stride, OW);
          for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const real* xrow = xv + (c * H + oy * stride + offy) * W + offx;
            real* orow = ov + (o * OH + oy) * OW;
            for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
              orow[ox] += wval * xrow[ox * stride];
          }
        }
      }

  Tape* tape = detail::common_tape({&x, &w, &b});
  if (tape) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    detail::record_op(tape, out, [xi, wi, bi, oi, C, H, W, O, kh, kw, OH, OW, stride, pad,
                                  dilation, tap_range] {
      const real* go = oi->grad.data();
      const real* xv2 = xi->value->data();
      const real* wv2 = wi->value->data();
      if (bi && !bi->grad.empty()) {
        real* gb = bi->grad.data();
        for (std::int64_t o = 0; o < O; ++o) {
          real acc = 0;
          const real* grow = go + o * OH * OW;
          for (std::int64_t i = 0; i < OH * OW; ++i) acc += grow[i];
          gb[o] += acc;
        }
      }
      const bool need_gx = !xi->grad.empty();
      const bool need_gw = !wi->grad.empty();
      if (!need_gx && !need_gw) return;
      real* gx = need_gx ? xi->grad.data() : nullptr;
      real* gw = need_gw ? wi->grad.data() : nullptr;
      for (std::int64_t o = 0; o < O; ++o)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t offy = ky * dilation - pad;
            const auto [oy_lo, oy_hi] = tap_range(offy, H, stride, OH);
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t widx = ((o * C + c) * kh + ky) * kw + kx;
              const real wval = wv2[widx];
              const std::int64_t offx = kx * dilation - pad;
              const auto [ox_lo, ox_hi] = tap_range(offx, W, stride, OW);
              real wacc = 0;
              for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                const std::int64_t xbase = (c * H + oy * stride + offy) * W + offx;
                const real* grow = go + (o * OH + oy) * OW;
                if (need_gx) {
                  real* gxrow = gx + xbase;
                  for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                    gxrow[ox * stride] += wval * grow[ox];
                }
                if (need_gw) {
                  const real* xrow = xv2 + xbase;
                  for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                    wacc += xrow[ox * stride] * grow[ox];
                }
              }
              if (need_gw) gw[widx] += wacc;
            }
          }
    });
  }
  return out;
}

/// Bilinear interpolation with half-pixel mapping; out size (C,oh,ow).
/// Resizing to the same extent is an exact identity.
inline Tensor resize_bilinear(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  if (x.rank() != 3) shape_error("resize_bilinear: expected (C,H,W), got " + shape_str(x.shape()));
  if (oh < 1 || ow < 1) shape_error("resize_bilinear: bad output size");
  const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  struct Axis {
    std::vector<std::int64_t> i0, i1;
    std::vector<real> f;
  };
  auto make_axis = [](std::int64_t in, std::int64_t outn) {
    Axis a;
    a.i0.resize(static_cast<std::size_t>(outn));
    a.i1.resize(static_cast<std::size_t>(outn));
    a.f.resize(static_cast<std::size_t>(outn));
    const double sc = static_cast<double>(in) / static_cast<double>(outn);
    for (std::int64_t o = 0; o < outn; ++o) {
      double s = (static_cast<double>(o) + 0.5) * sc - 0.5;
      s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
      const std::int64_t lo = static_cast<std::int64_t>(std::floor(s));
      a.i0[static_cast<std::size_t>(o)] = lo;
      a.i1[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
      a.f[static_cast<std::size_t>(o)] = static_cast<real>(s - static_cast<double>(lo));
    }
    return a;
  };
  const Axis ay = make_axis(H, oh), ax = make_axis(W, ow);
  Tensor out = Tensor::zeros({C, oh, ow});
  const real* xv = x.data();
  real* ov = out.values().data();
  for (std::int64_t c = 0; c < C; ++c) {
    const real* plane = xv + c * H * W;
    real* oplane = ov + c * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      const real fy = ay.f[static_cast<std::size_t>(y)];
      const real* r0 = plane + ay.i0[static_cast<std::size_t>(y)] * W;
      const real* r1 = plane + ay.i1[static_cast<std::size_t>(y)] * W;
      real* orow = oplane + y * ow;
      for (std::int64_t xcol = 0; xcol < ow; ++xcol) {
        const real fx = ax.f[static_cast<std::size_t>(xcol)];
        const std::int64_t x0 = ax.i0[static_cast<std::size_t>(xcol)];
        const std::int64_t x1 = ax.i1[static_cast<std::size_t>(xcol)];
        const real top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const real bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        orow[xcol] = top + fy * (bot - top);
      }
    }
  }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    auto pay = std::make_shared<Axis>(ay);
    auto pax = std::make_shared<Axis>(ax);
    detail::record_op(tape, out, [xi, oi, pay, pax, C, H, W, oh, ow] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t c = 0; c < C; ++c) {
        real* gplane = gx + c * H * W;
        const real* gorow0 = go + c * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          const real fy = pay->f[static_cast<std::size_t>(y)];
          real* g0 = gplane + pay->i0[static_cast<std::size_t>(y)] * W;
          real* g1 = gplane + pay->i1[static_cast<std::size_t>(y)] * W;
          const real* gorow = gorow0 + y * ow;
          for (std::int64_t xcol = 0; xcol < ow; ++xcol) {
            const real g = gorow[xcol];
            const real fx = pax->f[static_cast<std::size_t>(xcol)];
            const std::int64_t x0 = pax->i0[static_cast<std::size_t>(xcol)];
            const std::int64_t x1 = pax->i1[static_cast<std::size_t>(xcol)];
            g0[x0] += (1 - fy) * (1 - fx) * g;
            g0[x1] += (1 - fy) * fx * g;
            g1[x0] += fy * (1 - fx) * g;
            g1[x1] += fy * fx * g;
          }
        }
      }
    });
  }
  return out;
}

inline Tensor upsample_bilinear(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  return resize_bilinear(x, oh, ow);
}

/// Sample a (C,H,W) feature map at continuous (y,x) points given as an (N,2)
/// tensor, pixel centers on integers. Coordinates are clamped to the image
/// rectangle; the result is (C,N). Differentiable in the feature map and in
/// the coordinates (zero coordinate gradient where clamping saturates).
inline Tensor bilinear_sample(const Tensor& feat, const Tensor& points) {
  if (feat.rank() != 3) shape_error("bilinear_sample: feature must be (C,H,W), got " + shape_str(feat.shape()));
  if (points.rank() != 2 || points.size(1) != 2)
    shape_error("bilinear_sample: points must be (N,2), got " + shape_str(points.shape()));
  const std::int64_t C = feat.size(0), H = feat.size(1), W = feat.size(2);
  const std::int64_t N = points.size(0);
  Tensor out = Tensor::zeros({C, N});
  const real* fv = feat.data();
  const real* pv = points.data();
  real* ov = out.values().data();
  for (std::int64_t n = 0; n < N; ++n) {
    const real y = pv[2 * n], x = pv[2 * n + 1];
    const real cy = std::min(std::max(y, static_cast<real>(0)), static_cast<real>(H - 1));
    const real cx = std::min(std::max(x, static_cast<real>(0)), static_cast<real>(W - 1));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const std::int64_t x1 = std::min(x0 + 1, W - 1);
    const real fy = cy - static_cast<real>(y0);
    const real fx = cx - static_cast<real>(x0);
    for (std::int64_t c = 0; c < C; ++c) {
      const real* plane = fv + c * H * W;
      const real top = plane[y0 * W + x0] + fx * (plane[y0 * W + x1] - plane[y0 * W + x0]);
      const real bot = plane[y1 * W + x0] + fx * (plane[y1 * W + x1] - plane[y1 * W + x0]);
      ov[c * N + n] = top + fy * (bot - top);
    }
  }
  Tape* tape = detail::common_tape({&feat, &points});
  if (tape) {
    auto fi = feat.impl(), pi = points.impl(), oi = out.impl();
    detail::record_op(tape, out, [fi, pi, oi, C, H, W, N] {
      const real* go = oi->grad.data();
      const real* fv2 = fi->value->data();
      const real* pv2 = pi->value->data();
      real* gf = fi->grad.empty() ? nullptr : fi->grad.data();
      real* gp = pi->grad.empty() ? nullptr : pi->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        const real y = pv2[2 * n], x = pv2[2 * n + 1];
        const bool in_y = y >= 0 && y <= static_cast<real>(H - 1);
        const bool in_x = x >= 0 && x <= static_cast<real>(W - 1);
        const real cy = std::min(std::max(y, static_cast<real>(0)), static_cast<real>(H - 1));
        const real cx = std::min(std::max(x, static_cast<real>(0)), static_cast<real>(W - 1));
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
        const std::int64_t y1 = std::min(y0 + 1, H - 1);
        const std::int64_t x1 = std::min(x0 + 1, W - 1);
        const real fy = cy - static_cast<real>(y0);
        const real fx = cx - static_cast<real>(x0);
        real gy = 0, gxc = 0;
        for (std::int64_t c = 0; c < C; ++c) {
          const real g = go[c * N + n];
          const real* plane = fv2 + c * H * W;
          if (gf) {
            real* gplane = gf + c * H * W;
            gplane[y0 * W + x0] += (1 - fy) * (1 - fx) * g;
            gplane[y0 * W + x1] += (1 - fy) * fx * g;
            gplane[y1 * W + x0] += fy * (1 - fx) * g;
            gplane[y1 * W + x1] += fy * fx * g;
          }
          if (gp) {
            gy += g * ((1 - fx) * (plane[y1 * W + x0] - plane[y0 * W + x0]) +
                       fx * (plane[y1 * W + x1] - plane[y0 * W + x1]));
            gxc += g * ((1 - fy) * (plane[y0 * W + x1] - plane[y0 * W + x0]) +
                        fy * (plane[y1 * W + x1] - plane[y1 * W + x0]));
          }
        }
        if (gp) {
          if (in_y) gp[2 * n] += gy;
          if (in_x) gp[2 * n + 1] += gxc;
        }
      }
    });
  }
  return out;
}

/// Average pooling to a fixed (oh,ow) output; bin (i,j) averages input rows
/// [i*H/oh, ceil((i+1)*H/oh)) and the analogous columns.
inline Tensor adaptive_avg_pool(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  if (x.rank() != 3) shape_error("adaptive_avg_pool: expected (C,H,W), got " + shape_str(x.shape()));
  const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  if (oh < 1 || ow < 1) shape_error("adaptive_avg_pool: bad output size");
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t outn) { return (i * in) / outn; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t outn) {
    return ((i + 1) * in + outn - 1) / outn;
  };
  Tensor out = Tensor::zeros({C, oh, ow});
  const real* xv = x.data();
  real* ov = out.values().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < oh; ++y) {
      const std::int64_t y0 = lo(y, H, oh), y1 = hi(y, H, oh);
      for (std::int64_t xcol = 0; xcol < ow; ++xcol) {
        const std::int64_t x0 = lo(xcol, W, ow), x1 = hi(xcol, W, ow);
        real acc = 0;
        for (std::int64_t iy = y0; iy < y1; ++iy)
          for (std::int64_t ix = x0; ix < x1; ++ix) acc += xv[(c * H + iy) * W + ix];
        ov[(c * oh + y) * ow + xcol] =
            acc / static_cast<real>((y1 - y0) * (x1 - x0));
      }
    }
  Tape* tape = detail::common_tape({&x});
  if (tape) {
    auto xi = x.impl(), oi = out.impl();
    detail::record_op(tape, out, [xi, oi, C, H, W, oh, ow, lo, hi] {
      if (xi->grad.empty()) return;
      const real* go = oi->grad.data();
      real* gx = xi->grad.data();
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t y0 = lo(y, H, oh), y1 = hi(y, H, oh);
          for (std::int64_t xcol = 0; xcol < ow; ++xcol) {
            const std::int64_t x0 = lo(xcol, W, ow), x1 = hi(xcol, W, ow);
            const real g = go[(c * oh + y) * ow + xcol] /
                           static_cast<real>((y1 - y0) * (x1 - x0));
            for (std::int64_t iy = y0; iy < y1; ++iy)
              for (std::int64_t ix = x0; ix < x1; ++ix) gx[(c * H + iy) * W + ix] += g;
          }
        }
    });
  }
  return out;
}

}  // namespace dps
