// Reference implementation of the four mask-quality metrics, written as a
// direct transcription of the published definitions (structure measure,
// enhanced-alignment measure, weighted F-measure with beta^2=1, MAE) on 2-d
// arrays with 1-indexed centroid arithmetic and a brute-force nearest-
// foreground search. Used once to freeze golden values for the hand cases in
// the test suite; kept here so the numbers can be regenerated.

#include <cfloat>
#include <cmath>
#include <cstdio>
#include <vector>

namespace {

const double EPS = DBL_EPSILON;

struct Img {
  int h, w;
  std::vector<double> a;
  double& operator()(int y, int x) { return a[static_cast<std::size_t>(y * w + x)]; }
  double operator()(int y, int x) const { return a[static_cast<std::size_t>(y * w + x)]; }
};

double mean2(const Img& m) {
  double s = 0;
  for (double v : m.a) s += v;
  return s / static_cast<double>(m.a.size());
}

double mae(const Img& pred, const Img& gt) {
  double s = 0;
  for (std::size_t i = 0; i < pred.a.size(); ++i) s += std::fabs(pred.a[i] - gt.a[i]);
  return s / static_cast<double>(pred.a.size());
}

// ---------- S-measure ----------

double object_part(const Img& masked, const Img& region) {
  // mean and (N-1) std of masked values inside the region
  double sum = 0;
  int n = 0;
  for (int y = 0; y < masked.h; ++y)
    for (int x = 0; x < masked.w; ++x)
      if (region(y, x) > 0.5) {
        sum += masked(y, x);
        ++n;
      }
  if (n == 0) return 0;
  double mean = sum / n;
  double var = 0;
  for (int y = 0; y < masked.h; ++y)
    for (int x = 0; x < masked.w; ++x)
      if (region(y, x) > 0.5) {
        double d = masked(y, x) - mean;
        var += d * d;
      }
  double sd = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  return 2.0 * mean / (mean * mean + 1.0 + sd + EPS);
}

double s_object(const Img& pred, const Img& gt) {
  Img fg = pred, bg = pred, inv = gt;
  for (int y = 0; y < pred.h; ++y)
    for (int x = 0; x < pred.w; ++x) {
      fg(y, x) = gt(y, x) > 0.5 ? pred(y, x) : 0.0;
      bg(y, x) = gt(y, x) > 0.5 ? 0.0 : 1.0 - pred(y, x);
      inv(y, x) = gt(y, x) > 0.5 ? 0.0 : 1.0;
    }
  double u = mean2(gt);
  return u * object_part(fg, gt) + (1.0 - u) * object_part(bg, inv);
}

double ssim_quadrant(const Img& pred, const Img& gt, int y0, int y1, int x0, int x1) {
  int n = (y1 - y0) * (x1 - x0);
  if (n <= 0) return 0;
  double mx = 0, my = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      mx += pred(y, x);
      my += gt(y, x);
    }
  mx /= n;
  my /= n;
  double sx = 0, sy = 0, sxy = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      sx += (pred(y, x) - mx) * (pred(y, x) - mx);
      sy += (gt(y, x) - my) * (gt(y, x) - my);
      sxy += (pred(y, x) - mx) * (gt(y, x) - my);
    }
  sx /= n - 1 + EPS;
  sy /= n - 1 + EPS;
  sxy /= n - 1 + EPS;
  double alpha = 4.0 * mx * my * sxy;
  double beta = (mx * mx + my * my) * (sx + sy);
  if (alpha != 0.0) return alpha / (beta + EPS);
  if (beta == 0.0) return 1.0;
  return 0.0;
}

double s_region(const Img& pred, const Img& gt) {
  double total = 0, sx = 0, sy = 0;
  for (int y = 0; y < gt.h; ++y)
    for (int x = 0; x < gt.w; ++x)
      if (gt(y, x) > 0.5) {
        total += 1;
        sx += x + 1;  // 1-indexed
        sy += y + 1;
      }
  int X, Y;
  if (total == 0) {
    X = static_cast<int>(std::round(gt.w / 2.0));
    Y = static_cast<int>(std::round(gt.h / 2.0));
  } else {
    X = static_cast<int>(std::round(sx / total));
    Y = static_cast<int>(std::round(sy / total));
  }
  double area = static_cast<double>(gt.w * gt.h);
  double w1 = (X * Y) / area;
  double w2 = ((gt.w - X) * Y) / area;
  double w3 = (X * (gt.h - Y)) / area;
  double w4 = 1.0 - w1 - w2 - w3;
  double q1 = ssim_quadrant(pred, gt, 0, Y, 0, X);
  double q2 = ssim_quadrant(pred, gt, 0, Y, X, gt.w);
  double q3 = ssim_quadrant(pred, gt, Y, gt.h, 0, X);
  double q4 = ssim_quadrant(pred, gt, Y, gt.h, X, gt.w);
  return w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4;
}

double s_measure(const Img& pred, const Img& gt) {
  double y = mean2(gt);
  if (y == 0.0) return 1.0 - mean2(pred);
  if (y == 1.0) return mean2(pred);
  double q = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt);
  return q < 0 ? 0 : q;
}

// ---------- E-measure ----------

double e_measure(const Img& pred, const Img& gt) {
  double th = 2.0 * mean2(pred);
  int n = pred.h * pred.w;
  std::vector<double> fm(static_cast<std::size_t>(n));
  double fsum = 0, gsum = 0;
  for (int i = 0; i < n; ++i) {
    fm[static_cast<std::size_t>(i)] = pred.a[static_cast<std::size_t>(i)] > th ? 1.0 : 0.0;
    fsum += fm[static_cast<std::size_t>(i)];
    gsum += gt.a[static_cast<std::size_t>(i)] > 0.5 ? 1.0 : 0.0;
  }
  double acc = 0;
  if (gsum == 0) {
    for (int i = 0; i < n; ++i) acc += 1.0 - fm[static_cast<std::size_t>(i)];
  } else if (gsum == n) {
    for (int i = 0; i < n; ++i) acc += fm[static_cast<std::size_t>(i)];
  } else {
    double mf = fsum / n, mg = gsum / n;
    for (int i = 0; i < n; ++i) {
      double df = fm[static_cast<std::size_t>(i)] - mf;
      double dg = (gt.a[static_cast<std::size_t>(i)] > 0.5 ? 1.0 : 0.0) - mg;
      double align = 2.0 * dg * df / (dg * dg + df * df + EPS);
      acc += (align + 1.0) * (align + 1.0) / 4.0;
    }
  }
  return acc / n;  // mean over pixels
}

// ---------- weighted F ----------

double weighted_f(const Img& pred, const Img& gt) {
  int h = pred.h, w = pred.w, n = h * w;
  double gsum = 0, psum = 0;
  for (int i = 0; i < n; ++i) {
    gsum += gt.a[static_cast<std::size_t>(i)] > 0.5 ? 1.0 : 0.0;
    psum += pred.a[static_cast<std::size_t>(i)];
  }
  if (gsum == 0) return psum == 0 ? 1.0 : 0.0;

  // brute-force nearest foreground pixel per background pixel
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
  std::vector<int> idx(static_cast<std::size_t>(n), -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (gt(y, x) > 0.5) continue;
      double best = 1e30;
      int bi = -1;
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
          if (gt(yy, xx) > 0.5) {
            double d = static_cast<double>((y - yy) * (y - yy) + (x - xx) * (x - xx));
            if (d < best) {
              best = d;
              bi = yy * w + xx;
            }
          }
      dist[static_cast<std::size_t>(y * w + x)] = std::sqrt(best);
      idx[static_cast<std::size_t>(y * w + x)] = bi;
    }

  std::vector<double> E(static_cast<std::size_t>(n)), Et(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    E[static_cast<std::size_t>(i)] =
        std::fabs(pred.a[static_cast<std::size_t>(i)] - (gt.a[static_cast<std::size_t>(i)] > 0.5 ? 1.0 : 0.0));
  Et = E;
  for (int i = 0; i < n; ++i)
    if (gt.a[static_cast<std::size_t>(i)] <= 0.5 && idx[static_cast<std::size_t>(i)] >= 0)
      Et[static_cast<std::size_t>(i)] = E[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];

  // fspecial('gaussian', 7, 5), zero-padded correlation
  double k[7][7], ksum = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      k[i][j] = std::exp(-((i - 3) * (i - 3) + (j - 3) * (j - 3)) / 50.0);
      ksum += k[i][j];
    }
  std::vector<double> EA(static_cast<std::size_t>(n), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -3; i <= 3; ++i)
        for (int j = -3; j <= 3; ++j) {
          int yy = y + i, xx = x + j;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += k[i + 3][j + 3] / ksum * Et[static_cast<std::size_t>(yy * w + xx)];
        }
      EA[static_cast<std::size_t>(y * w + x)] = acc;
    }

  double ew_fg = 0, ew_bg = 0;
  for (int i = 0; i < n; ++i) {
    bool fg = gt.a[static_cast<std::size_t>(i)] > 0.5;
    double me = E[static_cast<std::size_t>(i)];
    if (fg && EA[static_cast<std::size_t>(i)] < me) me = EA[static_cast<std::size_t>(i)];
    if (fg) {
      ew_fg += me;
    } else {
      double b = 2.0 - std::exp(std::log(0.5) / 5.0 * dist[static_cast<std::size_t>(i)]);
      ew_bg += me * b;
    }
  }
  double tpw = gsum - ew_fg;
  double r = 1.0 - ew_fg / gsum;
  double p = tpw / (EPS + tpw + ew_bg);
  return 2.0 * r * p / (EPS + r + p);
}

void report(const char* name, const Img& pred, const Img& gt) {
  std::printf("%s:\n", name);
  std::printf("  mae        = %.17g\n", mae(pred, gt));
  std::printf("  s_measure  = %.17g\n", s_measure(pred, gt));
  std::printf("  e_measure  = %.17g\n", e_measure(pred, gt));
  std::printf("  weighted_f = %.17g\n", weighted_f(pred, gt));
}

}  // namespace

int main() {
  // case 1: gt = left half of an 8x8 image, pred = uniform 0.5
  Img gt{8, 8, std::vector<double>(64, 0.0)};
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 4; ++x) gt(y, x) = 1.0;
  Img pred{8, 8, std::vector<double>(64, 0.5)};
  report("left-half / uniform 0.5", pred, gt);

  // case 2: 3x3 square gt, deterministic pseudo-random prediction
  Img gt2{8, 8, std::vector<double>(64, 0.0)};
  for (int y = 2; y <= 4; ++y)
    for (int x = 3; x <= 5; ++x) gt2(y, x) = 1.0;
  Img pred2{8, 8, std::vector<double>(64, 0.0)};
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) pred2(y, x) = static_cast<double>((y * 31 + x * 17) % 101) / 100.0;
  report("3x3-square / pseudo pred", pred2, gt2);
  return 0;
}
