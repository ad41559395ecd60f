#pragma once

#include <cfloat>
#include <cmath>
#include <string>
#include <vector>

#include "dps/tensor.hpp"

namespace dps {

struct MetricsReport {
  double mae = 0;
  double s_measure = 0;
  double e_measure = 0;
  double weighted_f = 0;
};

enum class EmeasureThreshold { Adaptive, Mean, Half };

inline EmeasureThreshold emeasure_threshold_from_string(const std::string& s) {
  if (s == "adaptive") return EmeasureThreshold::Adaptive;
  if (s == "mean") return EmeasureThreshold::Mean;
  if (s == "half") return EmeasureThreshold::Half;
  shape_error("unknown e-measure threshold mode '" + s + "' (adaptive|mean|half)");
}

namespace metric_detail {

constexpr double kEps = DBL_EPSILON;

struct Image {
  std::vector<double> v;
  std::int64_t h = 0, w = 0;
  double& at(std::int64_t y, std::int64_t x) { return v[static_cast<std::size_t>(y * w + x)]; }
  double at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

inline Image to_image(const Tensor& t, const char* what) {
  if (t.rank() < 2) shape_error(std::string(what) + ": expected at least rank-2, got " + shape_str(t.shape()));
  Image im;
  im.h = t.size(t.rank() - 2);
  im.w = t.size(t.rank() - 1);
  if (im.h * im.w != t.numel())
    shape_error(std::string(what) + ": leading axes must be singleton, got " + shape_str(t.shape()));
  im.v.assign(t.values().begin(), t.values().end());
  return im;
}

inline double mean_of(const Image& im) {
  double s = 0;
  for (double x : im.v) s += x;
  return s / static_cast<double>(im.v.size());
}

// --- S-measure -------------------------------------------------------------

inline double object_score(const Image& pred, const Image& gt, bool fg) {
  // mean/std of the (masked) prediction inside the region, N-1 normalization
  double sum = 0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i)
    if ((gt.v[i] > 0.5) == fg) {
      sum += fg ? pred.v[i] : 1.0 - pred.v[i];
      ++n;
    }
  if (n == 0) return 0;
  const double x = sum / static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i)
    if ((gt.v[i] > 0.5) == fg) {
      const double d = (fg ? pred.v[i] : 1.0 - pred.v[i]) - x;
      var += d * d;
    }
  const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  return 2.0 * x / (x * x + 1.0 + sd + kEps);
}

inline double s_object(const Image& pred, const Image& gt) {
  const double u = mean_of(gt);
  return u * object_score(pred, gt, true) + (1.0 - u) * object_score(pred, gt, false);
}

inline double region_ssim(const Image& pred, const Image& gt, std::int64_t y0, std::int64_t y1,
                          std::int64_t x0, std::int64_t x1) {
  const std::int64_t n = (y1 - y0) * (x1 - x0);
  if (n <= 0) return 0;
  double mx = 0, my = 0;
  for (std::int64_t y = y0; y < y1; ++y)
    for (std::int64_t x = x0; x < x1; ++x) {
      mx += pred.at(y, x);
      my += gt.at(y, x);
    }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sx = 0, sy = 0, sxy = 0;
  for (std::int64_t y = y0; y < y1; ++y)
    for (std::int64_t x = x0; x < x1; ++x) {
      const double dx = pred.at(y, x) - mx, dy = gt.at(y, x) - my;
      sx += dx * dx;
      sy += dy * dy;
      sxy += dx * dy;
    }
  const double denom = static_cast<double>(n) - 1.0 + kEps;
  sx /= denom;
  sy /= denom;
  sxy /= denom;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sx + sy);
  if (alpha != 0.0) return alpha / (beta + kEps);
  if (beta == 0.0) return 1.0;
  return 0.0;
}

inline double s_region(const Image& pred, const Image& gt) {
  // centroid in 1-indexed coordinates, rounded half away from zero
  double total = 0, sx = 0, sy = 0;
  for (std::int64_t y = 0; y < gt.h; ++y)
    for (std::int64_t x = 0; x < gt.w; ++x)
      if (gt.at(y, x) > 0.5) {
        total += 1;
        sx += static_cast<double>(x + 1);
        sy += static_cast<double>(y + 1);
      }
  std::int64_t X, Y;
  if (total == 0) {
    X = static_cast<std::int64_t>(std::round(static_cast<double>(gt.w) / 2.0));
    Y = static_cast<std::int64_t>(std::round(static_cast<double>(gt.h) / 2.0));
  } else {
    X = static_cast<std::int64_t>(std::round(sx / total));
    Y = static_cast<std::int64_t>(std::round(sy / total));
  }
  const double area = static_cast<double>(gt.w * gt.h);
  const double w1 = static_cast<double>(X * Y) / area;
  const double w2 = static_cast<double>((gt.w - X) * Y) / area;
  const double w3 = static_cast<double>(X * (gt.h - Y)) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  const double q1 = region_ssim(pred, gt, 0, Y, 0, X);
  const double q2 = region_ssim(pred, gt, 0, Y, X, gt.w);
  const double q3 = region_ssim(pred, gt, Y, gt.h, 0, X);
  const double q4 = region_ssim(pred, gt, Y, gt.h, X, gt.w);
  return w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4;
}

// --- weighted F ------------------------------------------------------------

// Exact Euclidean distance transform (Felzenszwalb/Huttenlocher) that also
// returns, per background pixel, the linear index of its nearest foreground
// pixel.
inline void edt_with_index(const Image& gt, std::vector<double>& dist,
                           std::vector<std::int64_t>& index) {
  const std::int64_t h = gt.h, w = gt.w;
  const double kInf = 1e18;
  dist.assign(static_cast<std::size_t>(h * w), kInf);
  index.assign(static_cast<std::size_t>(h * w), -1);
  // pass 1: per column, squared distance to the nearest foreground row
  std::vector<double> d1(static_cast<std::size_t>(h * w), kInf);
  std::vector<std::int64_t> r1(static_cast<std::size_t>(h * w), -1);
  for (std::int64_t x = 0; x < w; ++x) {
    for (std::int64_t y = 0; y < h; ++y)
      if (gt.at(y, x) > 0.5) {
        d1[static_cast<std::size_t>(y * w + x)] = 0;
        r1[static_cast<std::size_t>(y * w + x)] = y;
      }
    // forward/backward sweeps are exact for 1-d distances
    for (std::int64_t y = 1; y < h; ++y) {
      const auto cur = static_cast<std::size_t>(y * w + x), prev = static_cast<std::size_t>((y - 1) * w + x);
      if (r1[prev] >= 0) {
        const double cand = static_cast<double>(y - r1[prev]) * static_cast<double>(y - r1[prev]);
        if (cand < d1[cur]) {
          d1[cur] = cand;
          r1[cur] = r1[prev];
        }
      }
    }
    for (std::int64_t y = h - 2; y >= 0; --y) {
      const auto cur = static_cast<std::size_t>(y * w + x), nxt = static_cast<std::size_t>((y + 1) * w + x);
      if (r1[nxt] >= 0) {
        const double cand = static_cast<double>(r1[nxt] - y) * static_cast<double>(r1[nxt] - y);
        if (cand < d1[cur]) {
          d1[cur] = cand;
          r1[cur] = r1[nxt];
        }
      }
    }
  }
  // pass 2: per row, lower envelope of parabolas rooted at (q, d1[q])
  std::vector<std::int64_t> vq(static_cast<std::size_t>(w));
  std::vector<double> z(static_cast<std::size_t>(w + 1));
  for (std::int64_t y = 0; y < h; ++y) {
    std::int64_t nv = 0;
    for (std::int64_t q = 0; q < w; ++q) {
      if (d1[static_cast<std::size_t>(y * w + q)] >= kInf) continue;
      const double fq = d1[static_cast<std::size_t>(y * w + q)];
      while (nv > 0) {
        const std::int64_t p = vq[static_cast<std::size_t>(nv - 1)];
        const double fp = d1[static_cast<std::size_t>(y * w + p)];
        const double s = ((fq + static_cast<double>(q * q)) - (fp + static_cast<double>(p * p))) /
                         (2.0 * static_cast<double>(q - p));
        if (s <= z[static_cast<std::size_t>(nv - 1)]) {
          --nv;
        } else {
          z[static_cast<std::size_t>(nv)] = s;
          break;
        }
      }
      if (nv == 0) z[0] = -kInf;
      vq[static_cast<std::size_t>(nv)] = q;
      ++nv;
      z[static_cast<std::size_t>(nv)] = kInf;
    }
    if (nv == 0) continue;  // no foreground anywhere in the image
    std::int64_t j = 0;
    for (std::int64_t x = 0; x < w; ++x) {
      while (j < nv - 1 && z[static_cast<std::size_t>(j + 1)] < static_cast<double>(x)) ++j;
      const std::int64_t q = vq[static_cast<std::size_t>(j)];
      const double dd = static_cast<double>(x - q) * static_cast<double>(x - q) +
                        d1[static_cast<std::size_t>(y * w + q)];
      dist[static_cast<std::size_t>(y * w + x)] = std::sqrt(dd);
      index[static_cast<std::size_t>(y * w + x)] =
          r1[static_cast<std::size_t>(y * w + q)] * w + q;
    }
  }
}

inline Image gauss7_sigma5(const Image& src) {
  // fspecial('gaussian',7,5): 7x7 kernel, sigma 5, normalized; zero padding
  double k1[7];
  double ksum = 0;
  for (int i = 0; i < 7; ++i) {
    const double d = static_cast<double>(i - 3);
    k1[i] = std::exp(-(d * d) / (2.0 * 25.0));
  }
  double kk[7][7];
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      kk[i][j] = k1[i] * k1[j];
      ksum += kk[i][j];
    }
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) kk[i][j] /= ksum;
  Image out;
  out.h = src.h;
  out.w = src.w;
  out.v.assign(src.v.size(), 0.0);
  for (std::int64_t y = 0; y < src.h; ++y)
    for (std::int64_t x = 0; x < src.w; ++x) {
      double acc = 0;
      for (int i = -3; i <= 3; ++i)
        for (int j = -3; j <= 3; ++j) {
          const std::int64_t yy = y + i, xx = x + j;
          if (yy < 0 || yy >= src.h || xx < 0 || xx >= src.w) continue;
          acc += kk[i + 3][j + 3] * src.at(yy, xx);
        }
      out.at(y, x) = acc;
    }
  return out;
}

}  // namespace metric_detail

inline double metric_mae(const Tensor& pred, const Tensor& gt) {
  const auto p = metric_detail::to_image(pred, "mae");
  const auto g = metric_detail::to_image(gt, "mae");
  if (p.h != g.h || p.w != g.w)
    shape_error("mae: prediction " + shape_str(pred.shape()) + " does not match target " +
                shape_str(gt.shape()));
  double s = 0;
  for (std::size_t i = 0; i < p.v.size(); ++i) s += std::abs(p.v[i] - g.v[i]);
  return s / static_cast<double>(p.v.size());
}

/// Structure measure, 0.5*S_object + 0.5*S_region, with the published
/// degenerate rules for an all-background or all-foreground ground truth.
inline double metric_s_measure(const Tensor& pred, const Tensor& gt) {
  using namespace metric_detail;
  const auto p = to_image(pred, "s_measure");
  const auto g = to_image(gt, "s_measure");
  if (p.h != g.h || p.w != g.w)
    shape_error("s_measure: shapes disagree: " + shape_str(pred.shape()) + " vs " +
                shape_str(gt.shape()));
  const double y = mean_of(g);
  if (y == 0.0) return 1.0 - mean_of(p);
  if (y == 1.0) return mean_of(p);
  const double q = 0.5 * s_object(p, g) + 0.5 * s_region(p, g);
  return q < 0 ? 0 : q;
}

/// Enhanced-alignment measure, mean of the enhanced alignment term over all
/// pixels, with the prediction binarized at the configured threshold.
inline double metric_e_measure(const Tensor& pred, const Tensor& gt,
                               EmeasureThreshold mode = EmeasureThreshold::Adaptive) {
  using namespace metric_detail;
  const auto p = to_image(pred, "e_measure");
  const auto g = to_image(gt, "e_measure");
  if (p.h != g.h || p.w != g.w)
    shape_error("e_measure: shapes disagree: " + shape_str(pred.shape()) + " vs " +
                shape_str(gt.shape()));
  double th = 0.5;
  if (mode == EmeasureThreshold::Adaptive) th = 2.0 * mean_of(p);
  if (mode == EmeasureThreshold::Mean) th = mean_of(p);
  const std::size_t n = p.v.size();
  std::vector<double> fm(n);
  for (std::size_t i = 0; i < n; ++i) fm[i] = p.v[i] > th ? 1.0 : 0.0;
  double gsum = 0, fsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    gsum += g.v[i] > 0.5 ? 1.0 : 0.0;
    fsum += fm[i];
  }
  double acc = 0;
  if (gsum == 0.0) {
    for (std::size_t i = 0; i < n; ++i) acc += 1.0 - fm[i];
  } else if (gsum == static_cast<double>(n)) {
    for (std::size_t i = 0; i < n; ++i) acc += fm[i];
  } else {
    const double mu_f = fsum / static_cast<double>(n);
    const double mu_g = gsum / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double df = fm[i] - mu_f;
      const double dg = (g.v[i] > 0.5 ? 1.0 : 0.0) - mu_g;
      const double align = 2.0 * dg * df / (dg * dg + df * df + kEps);
      acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
  }
  return acc / static_cast<double>(n);
}

/// Weighted F-measure (beta^2 = 1): errors are smoothed by dependency
/// (nearest-foreground substitution + 7x7 sigma-5 Gaussian) and decayed by
/// distance from the foreground before forming precision/recall.
inline double metric_weighted_f(const Tensor& pred, const Tensor& gt) {
  using namespace metric_detail;
  const auto p = to_image(pred, "weighted_f");
  const auto g = to_image(gt, "weighted_f");
  if (p.h != g.h || p.w != g.w)
    shape_error("weighted_f: shapes disagree: " + shape_str(pred.shape()) + " vs " +
                shape_str(gt.shape()));
  const std::size_t n = p.v.size();
  double gsum = 0, psum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    gsum += g.v[i] > 0.5 ? 1.0 : 0.0;
    psum += p.v[i];
  }
  // ground truth without foreground: score 1 only for an empty prediction
  if (gsum == 0.0) return psum == 0.0 ? 1.0 : 0.0;

  std::vector<double> dist;
  std::vector<std::int64_t> index;
  edt_with_index(g, dist, index);

  Image E;
  E.h = p.h;
  E.w = p.w;
  E.v.resize(n);
  for (std::size_t i = 0; i < n; ++i) E.v[i] = std::abs(p.v[i] - (g.v[i] > 0.5 ? 1.0 : 0.0));
  Image Et = E;
  for (std::size_t i = 0; i < n; ++i)
    if (g.v[i] <= 0.5 && index[i] >= 0) Et.v[i] = E.v[static_cast<std::size_t>(index[i])];
  const Image EA = gauss7_sigma5(Et);
  std::vector<double> min_e_ea(n);
  for (std::size_t i = 0; i < n; ++i)
    min_e_ea[i] = (g.v[i] > 0.5 && EA.v[i] < E.v[i]) ? EA.v[i] : E.v[i];
  const double decay = std::log(0.5) / 5.0;
  double ew_fg = 0, ew_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (g.v[i] > 0.5) {
      ew_fg += min_e_ea[i];
    } else {
      const double b = 2.0 - std::exp(decay * dist[i]);
      ew_bg += min_e_ea[i] * b;
    }
  }
  const double tpw = gsum - ew_fg;
  const double recall = 1.0 - ew_fg / gsum;
  const double precision = tpw / (kEps + tpw + ew_bg);
  return 2.0 * recall * precision / (kEps + recall + precision);
}

inline MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt,
                                     EmeasureThreshold mode = EmeasureThreshold::Adaptive) {
  MetricsReport r;
  r.mae = metric_mae(pred, gt);
  r.s_measure = metric_s_measure(pred, gt);
  r.e_measure = metric_e_measure(pred, gt, mode);
  r.weighted_f = metric_weighted_f(pred, gt);
  return r;
}

}  // namespace dps
