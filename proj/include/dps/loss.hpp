#pragma once

#include "dps/ops.hpp"
#include "dps/tensor.hpp"

namespace dps {

/// Hard-pixel weights for the mask losses: 1 + 5*|boxmean31(gt) - gt|.
/// The 31x31 window is zero-padded (the divisor is always 31*31), computed
/// with an integral image. gt is ground truth, so the result is a constant.
inline Tensor weight_map(const Tensor& gt, int window = 31) {
  if (gt.rank() != 3 || gt.size(0) != 1)
    shape_error("weight_map: expected (1,H,W), got " + shape_str(gt.shape()));
  const std::int64_t H = gt.size(1), W = gt.size(2);
  const int r = window / 2;
  const real* g = gt.data();
  // summed-area table with a zero row/col border
  std::vector<double> sat(static_cast<std::size_t>((H + 1) * (W + 1)), 0.0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      sat[static_cast<std::size_t>((y + 1) * (W + 1) + (x + 1))] =
          static_cast<double>(g[y * W + x]) + sat[static_cast<std::size_t>(y * (W + 1) + (x + 1))] +
          sat[static_cast<std::size_t>((y + 1) * (W + 1) + x)] -
          sat[static_cast<std::size_t>(y * (W + 1) + x)];
  Tensor out = Tensor::zeros(gt.shape());
  real* ov = out.values().data();
  const double inv = 1.0 / (static_cast<double>(window) * static_cast<double>(window));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const std::int64_t y0 = std::max<std::int64_t>(0, y - r), y1 = std::min(H, y + r + 1);
      const std::int64_t x0 = std::max<std::int64_t>(0, x - r), x1 = std::min(W, x + r + 1);
      const double s = sat[static_cast<std::size_t>(y1 * (W + 1) + x1)] -
                       sat[static_cast<std::size_t>(y0 * (W + 1) + x1)] -
                       sat[static_cast<std::size_t>(y1 * (W + 1) + x0)] +
                       sat[static_cast<std::size_t>(y0 * (W + 1) + x0)];
      ov[y * W + x] = static_cast<real>(1.0 + 5.0 * std::abs(s * inv - static_cast<double>(g[y * W + x])));
    }
  return out;
}

namespace detail {

inline Tensor bce_pixels(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    shape_error("bce: prediction " + shape_str(pred.shape()) + " does not match target " +
                shape_str(gt.shape()));
  // affine squeeze into [1e-15, 1-1e-15]: finite loss at p = 0/1, and unlike
  // a hard clamp the gradient still flows through saturated pixels
  Tensor p = affine(pred, 1 - static_cast<real>(2e-15), static_cast<real>(1e-15));
  Tensor pos = mul(gt, log(p));
  Tensor neg = mul(affine(gt, -1, 1), log(affine(p, -1, 1)));
  return affine(add(pos, neg), -1, 0);
}

}  // namespace detail

struct MaskLoss {
  Tensor wbce;  // scalar
  Tensor wiou;  // scalar
};

/// Weighted BCE + weighted IoU of the mask prediction against a binary
/// ground truth, with the 31x31 hard-pixel weighting.
inline MaskLoss mask_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    shape_error("mask_loss: prediction " + shape_str(pred.shape()) + " does not match target " +
                shape_str(gt.shape()));
  Tensor w = weight_map(gt);
  double wsum = 0;
  for (real v : w.values()) wsum += static_cast<double>(v);
  Tensor bce = detail::bce_pixels(pred, gt);
  MaskLoss out;
  out.wbce = scale(sum_all(mul(w, bce)), static_cast<real>(1.0 / wsum));
  Tensor inter = sum_all(mul(w, mul(pred, gt)));
  Tensor uni = sum_all(mul(w, sub(add(pred, gt), mul(pred, gt))));
  out.wiou = affine(div(affine(inter, 1, 1), affine(uni, 1, 1)), -1, 1);
  return out;
}

/// Plain pixel-mean BCE of the boundary prediction against the (dilated)
/// ground-truth boundary.
inline Tensor boundary_loss(const Tensor& epred, const Tensor& egt_dilated) {
  return mean_all(detail::bce_pixels(epred, egt_dilated));
}

/// Morphological dilation with a square element of side 2*radius+1
/// (separable Chebyshev passes). Radius 0 is the identity.
inline Tensor dilate_boundary(const Tensor& e, int radius) {
  if (e.rank() != 3 || e.size(0) != 1)
    shape_error("dilate_boundary: expected (1,H,W), got " + shape_str(e.shape()));
  if (radius < 0) shape_error("dilate_boundary: negative radius");
  if (radius == 0) return e.clone_detached();
  const std::int64_t H = e.size(1), W = e.size(2);
  const real* src = e.data();
  std::vector<real> horiz(static_cast<std::size_t>(H * W), 0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      real m = 0;
      const std::int64_t x0 = std::max<std::int64_t>(0, x - radius);
      const std::int64_t x1 = std::min(W - 1, x + radius);
      for (std::int64_t i = x0; i <= x1 && m == 0; ++i) m = src[y * W + i] > 0 ? 1 : 0;
      horiz[static_cast<std::size_t>(y * W + x)] = m;
    }
  Tensor out = Tensor::zeros(e.shape());
  real* ov = out.values().data();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      real m = 0;
      const std::int64_t y0 = std::max<std::int64_t>(0, y - radius);
      const std::int64_t y1 = std::min(H - 1, y + radius);
      for (std::int64_t i = y0; i <= y1 && m == 0; ++i) m = horiz[static_cast<std::size_t>(i * W + x)];
      ov[y * W + x] = m;
    }
  return out;
}

struct LossReport {
  double total = 0;
  double mask_wbce = 0;
  double mask_wiou = 0;
  double boundary_bce = 0;
};

struct TotalLoss {
  Tensor value;  // scalar on the tape
  LossReport report;
};

/// Composite objective: mask wBCE + mask wIoU + boundary BCE. The boundary
/// prediction is upsampled to the ground-truth resolution before the BCE and
/// its ground truth is dilated by `dilation_radius`; when the boundary branch
/// is bypassed the term is zero.
inline TotalLoss total_loss(const Tensor& mask_pred, const Tensor& mask_gt, const Tensor& epred,
                            const Tensor& boundary_gt, int dilation_radius) {
  MaskLoss ml = mask_loss(mask_pred, mask_gt);
  TotalLoss out;
  if (epred.defined()) {
    Tensor ep = (epred.size(1) == boundary_gt.size(1) && epred.size(2) == boundary_gt.size(2))
                    ? epred
                    : resize_bilinear(epred, boundary_gt.size(1), boundary_gt.size(2));
    Tensor egt = dilate_boundary(boundary_gt, dilation_radius);
    Tensor bl = boundary_loss(ep, egt);
    out.value = add(add(ml.wbce, ml.wiou), bl);
    out.report.boundary_bce = static_cast<double>(bl.item());
  } else {
    out.value = add(ml.wbce, ml.wiou);
  }
  out.report.mask_wbce = static_cast<double>(ml.wbce.item());
  out.report.mask_wiou = static_cast<double>(ml.wiou.item());
  out.report.total = static_cast<double>(out.value.item());
  return out;
}

}  // namespace dps
