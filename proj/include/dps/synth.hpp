#pragma once

#include <algorithm>

#include "dps/rng.hpp"
#include "dps/tensor.hpp"

namespace dps {

/// One co-registered training sample: RGB image, binary mask, binary
/// inner-contour boundary.
struct Sample {
  Tensor image;     // (3,H,W) in [0,1]
  Tensor mask;      // (1,H,W) in {0,1}
  Tensor boundary;  // (1,H,W) in {0,1}
  std::uint64_t seed = 0;
};

/// Inner contour: mask pixels with at least one in-image 4-neighbor outside
/// the mask. Always a subset of the mask.
inline Tensor boundary_from_mask(const Tensor& mask) {
  if (mask.rank() != 3 || mask.size(0) != 1)
    shape_error("boundary_from_mask: expected (1,H,W), got " + shape_str(mask.shape()));
  const std::int64_t H = mask.size(1), W = mask.size(2);
  const real* m = mask.data();
  Tensor out = Tensor::zeros(mask.shape());
  real* o = out.values().data();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      if (m[y * W + x] <= 0.5) continue;
      const bool edge = (y > 0 && m[(y - 1) * W + x] <= 0.5) ||
                        (y + 1 < H && m[(y + 1) * W + x] <= 0.5) ||
                        (x > 0 && m[y * W + x - 1] <= 0.5) ||
                        (x + 1 < W && m[y * W + x + 1] <= 0.5);
      if (edge) o[y * W + x] = 1;
    }
  return out;
}

namespace synth_detail {

struct Wave {
  double fy, fx, phase, amp;
};

inline Wave draw_wave(CounterRng& rng, double fmin, double fmax) {
  Wave w;
  w.fy = rng.uniform(fmin, fmax) * (rng.next_double() < 0.5 ? 1.0 : -1.0);
  w.fx = rng.uniform(fmin, fmax) * (rng.next_double() < 0.5 ? 1.0 : -1.0);
  w.phase = rng.uniform(0.0, 6.28318530717958647693);
  w.amp = rng.uniform(0.5, 1.0);
  return w;
}

inline double wave_at(const Wave& w, double y, double x, std::int64_t H, std::int64_t W) {
  return w.amp * portable_sin(6.28318530717958647693 *
                                  (w.fy * y / static_cast<double>(H) +
                                   w.fx * x / static_cast<double>(W)) +
                              w.phase);
}

}  // namespace synth_detail

/// Deterministic synthetic camouflage sample. The mask is a smooth random
/// blob (radial bump plus low-frequency sinusoids) thresholded at a per-seed
/// quantile, so its positive fraction always lands in [6%, 36%]. The
/// foreground texture is interpolated toward the background texture by
/// `difficulty`; at difficulty 1 only a faint ripple along the boundary
/// band separates them. The whole pipeline avoids platform-dependent
/// transcendentals, so samples are bit-identical everywhere.
inline Sample generate_sample(std::uint64_t seed, std::int64_t H, std::int64_t W,
                              double difficulty) {
  if (H % 32 != 0 || W % 32 != 0 || H <= 0 || W <= 0)
    shape_error("generate_sample: size " + std::to_string(H) + "x" + std::to_string(W) +
                " must be a positive multiple of 32");
  if (difficulty < 0 || difficulty > 1)
    shape_error("generate_sample: difficulty must be in [0,1]");
  using synth_detail::Wave;
  using synth_detail::draw_wave;
  using synth_detail::wave_at;

  CounterRng base(seed);
  CounterRng rf = base.fork(1);   // blob field
  CounterRng rb = base.fork(2);   // background texture
  CounterRng rg = base.fork(3);   // foreground texture
  CounterRng rn = base.fork(4);   // per-pixel noise

  Sample s;
  s.seed = seed;

  // --- mask field ---
  const double cy = static_cast<double>(H) * rf.uniform(0.30, 0.70);
  const double cx = static_cast<double>(W) * rf.uniform(0.30, 0.70);
  const double r0 = static_cast<double>(std::min(H, W)) * rf.uniform(0.16, 0.30);
  constexpr int kWaves = 6;
  Wave fw[kWaves];
  for (auto& w : fw) w = draw_wave(rf, 0.5, 2.5);
  const double target_fraction = rf.uniform(0.06, 0.36);
  const double band_phase = rf.uniform(0.0, 6.28318530717958647693);

  std::vector<double> field(static_cast<std::size_t>(H * W));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const double dy = (static_cast<double>(y) - cy) / r0;
      const double dx = (static_cast<double>(x) - cx) / r0;
      double v = 1.3 / (1.0 + dy * dy + dx * dx);
      double waves = 0;
      for (const auto& w : fw) waves += wave_at(w, static_cast<double>(y), static_cast<double>(x), H, W);
      field[static_cast<std::size_t>(y * W + x)] = v + 0.40 * waves / kWaves;
    }
  // threshold at the (1 - target_fraction) quantile so the mask fraction is
  // pinned by construction
  std::vector<double> sorted = field;
  const std::int64_t kth = static_cast<std::int64_t>(
      static_cast<double>(H * W) * (1.0 - target_fraction));
  const std::int64_t kidx = std::min<std::int64_t>(std::max<std::int64_t>(kth, 0), H * W - 1);
  std::nth_element(sorted.begin(), sorted.begin() + kidx, sorted.end());
  const double thresh = sorted[static_cast<std::size_t>(kidx)];

  s.mask = Tensor::zeros({1, H, W});
  real* mv = s.mask.values().data();
  for (std::int64_t i = 0; i < H * W; ++i)
    mv[i] = field[static_cast<std::size_t>(i)] > thresh ? 1 : 0;
  s.boundary = boundary_from_mask(s.mask);

  // --- textures ---
  double bg_base[3], fg_base[3];
  for (int c = 0; c < 3; ++c) bg_base[c] = rb.uniform(0.15, 0.85);
  Wave bw[3][2];
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 2; ++k) bw[c][k] = draw_wave(rb, 1.0, 4.0);
  for (int c = 0; c < 3; ++c) fg_base[c] = bg_base[c] + (bg_base[c] < 0.5 ? 0.5 : -0.5);
  Wave gw[3][2];
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 2; ++k) gw[c][k] = draw_wave(rg, 1.0, 4.0);

  const std::int64_t n = H * W;
  std::vector<double> noise_bg(static_cast<std::size_t>(3 * n)), noise_fg(static_cast<std::size_t>(3 * n));
  for (auto& v : noise_bg) v = rn.next_double() - 0.5;
  for (auto& v : noise_fg) v = rn.next_double() - 0.5;

  // boundary band: within Chebyshev distance 1 of the inner contour
  std::vector<char> band(static_cast<std::size_t>(n), 0);
  const real* bv = s.boundary.data();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      if (bv[y * W + x] <= 0.5) continue;
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < H && xx >= 0 && xx < W) band[static_cast<std::size_t>(yy * W + xx)] = 1;
        }
    }

  s.image = Tensor::zeros({3, H, W});
  real* iv = s.image.values().data();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t i = y * W + x;
        const double yd = static_cast<double>(y), xd = static_cast<double>(x);
        double bg = bg_base[c];
        for (int k = 0; k < 2; ++k) bg += 0.05 * wave_at(bw[c][k], yd, xd, H, W);
        bg += 0.04 * noise_bg[static_cast<std::size_t>(c * n + i)];
        double px = bg;
        if (mv[i] > 0.5) {
          double fg = fg_base[c];
          for (int k = 0; k < 2; ++k) fg += 0.05 * wave_at(gw[c][k], yd, xd, H, W);
          fg += 0.04 * noise_fg[static_cast<std::size_t>(c * n + i)];
          px = fg + difficulty * (bg - fg);
        }
        if (band[static_cast<std::size_t>(i)])
          px += 0.06 * portable_sin(0.9 * xd + 1.3 * yd + band_phase);
        iv[c * n + i] = static_cast<real>(std::min(std::max(px, 0.0), 1.0));
      }
  return s;
}

inline Tensor hflip_tensor(const Tensor& t) {
  const std::int64_t C = t.size(0), H = t.size(1), W = t.size(2);
  Tensor out = Tensor::zeros(t.shape());
  const real* src = t.data();
  real* dst = out.values().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x)
        dst[(c * H + y) * W + x] = src[(c * H + y) * W + (W - 1 - x)];
  return out;
}

inline Sample hflip(const Sample& s) {
  Sample out;
  out.image = hflip_tensor(s.image);
  out.mask = hflip_tensor(s.mask);
  out.boundary = hflip_tensor(s.boundary);
  out.seed = s.seed;
  return out;
}

/// Samples i = 0..count-1 use seeds base_seed + i.
inline std::vector<Sample> generate_dataset(std::uint64_t base_seed, int count, std::int64_t H,
                                            std::int64_t W, double difficulty) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_sample(base_seed + static_cast<std::uint64_t>(i), H, W, difficulty));
  return out;
}

}  // namespace dps
