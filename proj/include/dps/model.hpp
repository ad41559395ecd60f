#pragma once

#include <array>

#include "dps/nn.hpp"

namespace dps {

struct NetConfig {
  int channels = 64;          // unified width C
  int patches = 12;           // N_p patches per side
  int refpoints = 3;          // N_r reference points per side
  double offset_bound = 1.0;  // s, in patch-normalized units
  int heads = 4;
  // 384 is the smallest multiple of 32 whose stride-32 grid tiles into the
  // default 12x12 patches; 352 needs an 11x11 grid instead
  int input_h = 384;
  int input_w = 384;
  std::array<int, 4> stage_channels{32, 64, 96, 128};
  bool gwap_normalized = false;  // normalize global pooling by the mask sum
  bool use_mffm = true;
  bool use_dps = true;
  bool use_boundary = true;
  bool use_bfm = true;

  void validate() const {
    if (channels < 1 || patches < 1 || refpoints < 1 || heads < 1)
      shape_error("config: channels/patches/refpoints/heads must be positive");
    if (channels % heads != 0)
      shape_error("config: channels (" + std::to_string(channels) + ") not divisible by heads (" +
                  std::to_string(heads) + ")");
    if (offset_bound < 0) shape_error("config: offset bound must be non-negative");
    if (input_h % 32 != 0 || input_w % 32 != 0)
      shape_error("config: input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                  " must be divisible by 32");
    if ((input_h / 32) % patches != 0 || (input_w / 32) % patches != 0)
      shape_error("config: stage-4 size " + std::to_string(input_h / 32) + "x" +
                  std::to_string(input_w / 32) + " must tile exactly into " +
                  std::to_string(patches) + "x" + std::to_string(patches) +
                  " patches (e.g. 384x384 input for 12 patches per side)");
    if (use_bfm && !use_boundary)
      shape_error("config: boundary fusion requires the boundary decoder");
  }
};

/// Sequential dilated-convolution fusion (rates 6/12/18). Each dilated branch
/// is added to the running feature and mixed by a 1x1 convolution.
struct Mffm {
  Conv2dLayer entry, d6, d12, d18, f1, f2, f3;

  Mffm() = default;
  Mffm(int in, int out, CounterRng& rng)
      : entry(in, out, 1, 1, 0, 1, rng),
        d6(out, out, 3, 1, 6, 6, rng),
        d12(out, out, 3, 1, 12, 12, rng),
        d18(out, out, 3, 1, 18, 18, rng),
        f1(out, out, 1, 1, 0, 1, rng),
        f2(out, out, 1, 1, 0, 1, rng),
        f3(out, out, 1, 1, 0, 1, rng) {}

  Tensor operator()(const Tensor& x) const {
    Tensor r = entry(x);
    r = f1(add(r, d6(r)));
    r = f2(add(r, d12(r)));
    r = f3(add(r, d18(r)));
    return r;
  }

  void params(const std::string& p, const ParamVisitor& v) {
    entry.params(p + ".entry", v);
    d6.params(p + ".d6", v);
    d12.params(p + ".d12", v);
    d18.params(p + ".d18", v);
    f1.params(p + ".f1", v);
    f2.params(p + ".f2", v);
    f3.params(p + ".f3", v);
  }
};

/// Global templates T_g (C x C): per channel, a spatial softmax turns the
/// channel into a soft region mask, and the masked feature is pooled over all
/// positions. Row i is the template generated by channel i's mask.
inline Tensor global_extractor_forward(const Tensor& x, bool normalized = false) {
  if (x.rank() != 3) shape_error("global extractor: expected (C,H,W), got " + shape_str(x.shape()));
  const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  Tensor flat = reshape(x, {C, H * W});
  Tensor soft = softmax(flat, 1);
  Tensor tg = matmul(soft, transpose(flat));
  // literal form: plain spatial mean of the masked feature; the normalized
  // variant divides by the mask sum, which the softmax already makes 1
  if (!normalized) tg = scale(tg, static_cast<real>(1.0 / static_cast<double>(H * W)));
  return tg;
}

/// Deformable point sampling over an N_p x N_p patch grid. A small offset
/// encoder (conv-GeLU-conv, pooled to the reference grid, tanh * s) displaces
/// each reference point; features are read back by bilinear interpolation.
struct LocalExtractor {
  Conv2dLayer conv1, conv2;
  int patches = 1, refpoints = 1;
  real bound = 1;

  struct Output {
    Tensor templates;  // (C, N_p^2, N_r^2)
    Tensor offsets;    // (N_p^2, 2, N_r, N_r), every value in (-s, +s)
  };

  LocalExtractor() = default;
  LocalExtractor(const NetConfig& cfg, CounterRng& rng)
      : conv1(cfg.channels, cfg.channels, 3, 1, 1, 1, rng),
        conv2(Conv2dLayer::zeroed(cfg.channels, 2, 3, 1, 1, 1)),
        patches(cfg.patches),
        refpoints(cfg.refpoints),
        bound(static_cast<real>(cfg.offset_bound)) {}

  Output operator()(const Tensor& x) const {
    const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
    const std::int64_t np = patches, nr = refpoints;
    if (H % np != 0 || W % np != 0)
      shape_error("local extractor: " + shape_str(x.shape()) + " does not split into " +
                  std::to_string(np) + "x" + std::to_string(np) + " patches");
    const std::int64_t ph = H / np, pw = W / np, R = nr * nr;
    std::vector<Tensor> tparts, oparts;
    tparts.reserve(static_cast<std::size_t>(np * np));
    oparts.reserve(static_cast<std::size_t>(np * np));
    for (std::int64_t pi = 0; pi < np; ++pi)
      for (std::int64_t pj = 0; pj < np; ++pj) {
        Tensor xp = slice(slice(x, 1, pi * ph, ph), 2, pj * pw, pw);
        Tensor field = conv2(gelu(conv1(xp)));
        Tensor off = scale(tanh_act(adaptive_avg_pool(field, nr, nr)), bound);  // (2,nr,nr)
        oparts.push_back(reshape(off, {1, 2, nr, nr}));
        // patch-normalized offsets to pixel displacements
        Tensor omat = permute(reshape(off, {2, R}), {1, 0});  // (R,2) rows (dy,dx)
        Tensor extent = Tensor::from({1, 2}, {static_cast<real>(ph), static_cast<real>(pw)});
        std::vector<real> base;
        base.reserve(static_cast<std::size_t>(2 * R));
        for (std::int64_t ry = 0; ry < nr; ++ry)
          for (std::int64_t rx = 0; rx < nr; ++rx) {
            base.push_back(static_cast<real>(pi * ph - 0.5 +
                                             (static_cast<double>(ry) + 0.5) * ph / static_cast<double>(nr)));
            base.push_back(static_cast<real>(pj * pw - 0.5 +
                                             (static_cast<double>(rx) + 0.5) * pw / static_cast<double>(nr)));
          }
        Tensor pts = add(Tensor::from({R, 2}, base), mul(omat, extent));
        Tensor samp = bilinear_sample(x, pts);  // (C,R)
        tparts.push_back(reshape(samp, {C, 1, R}));
      }
    Output out;
    out.templates = concat(tparts, 1);
    out.offsets = concat(oparts, 0);
    return out;
  }

  void params(const std::string& p, const ParamVisitor& v) {
    conv1.params(p + ".conv1", v);
    conv2.params(p + ".conv2", v);
  }
};

/// Fuses global and local templates into the aggregated templates T_a (C x C).
struct Aggregator {
  MultiHeadSelfAttention mhsa_g, mhsa_l;
  AttentivePool ap_inter, ap_intra;
  Mlp mlp_g, mlp_inter, mlp_intra, mlp2_inter, mlp2_intra, fuse;

  Aggregator() = default;
  Aggregator(const NetConfig& cfg, CounterRng& rng)
      : mhsa_g(cfg.channels, cfg.heads, rng),
        mhsa_l(cfg.channels, cfg.heads, rng),
        ap_inter(cfg.channels, rng),
        ap_intra(cfg.channels, rng),
        mlp_g(cfg.channels, cfg.channels, cfg.channels, rng),
        mlp_inter(cfg.channels, cfg.channels, cfg.channels, rng),
        mlp_intra(cfg.channels, cfg.channels, cfg.channels, rng),
        mlp2_inter(cfg.channels, cfg.channels, cfg.channels, rng),
        mlp2_intra(cfg.channels, cfg.channels, cfg.channels, rng),
        fuse(2 * cfg.channels, cfg.channels, cfg.channels, rng) {
    // damp the fused-template output so correlation kernels start small
    for (auto& v : fuse.l2.w.values()) v *= static_cast<real>(0.25);
  }

  struct Scores {
    Tensor s_inter;  // (C, N_r^2)
    Tensor s_intra;  // (C, N_p^2)
  };

  Tensor operator()(const Tensor& tg, const Tensor& tl, Scores* scores = nullptr) const {
    const std::int64_t C = tg.size(0), P = tl.size(1), R = tl.size(2);
    if (tg.size(1) != C || tl.size(0) != C)
      shape_error("aggregator: templates " + shape_str(tg.shape()) + " / " + shape_str(tl.shape()) +
                  " disagree on the channel count");
    Tensor g = mhsa_g(tg);
    Tensor lseq = reshape(permute(tl, {1, 2, 0}), {P * R, C});
    Tensor l = reshape(mhsa_l(lseq), {P, R, C});
    Tensor inter = ap_inter(l, 0);  // (R,C): pooled over patches
    Tensor intra = ap_intra(l, 1);  // (P,C): pooled over reference points
    Tensor gm = mlp_g(g);
    Tensor s_inter = softmax(matmul(gm, transpose(mlp_inter(inter))), 1);  // (C,R)
    Tensor s_intra = softmax(matmul(gm, transpose(mlp_intra(intra))), 1);  // (C,P)
    if (scores) {
      scores->s_inter = s_inter;
      scores->s_intra = s_intra;
    }
    Tensor ta_inter = matmul(s_inter, mlp2_inter(inter));  // (C,C)
    Tensor ta_intra = matmul(s_intra, mlp2_intra(intra));  // (C,C)
    return fuse(concat({ta_inter, ta_intra}, 1));
  }

  void params(const std::string& p, const ParamVisitor& v) {
    mhsa_g.params(p + ".mhsa_g", v);
    mhsa_l.params(p + ".mhsa_l", v);
    ap_inter.params(p + ".ap_inter", v);
    ap_intra.params(p + ".ap_intra", v);
    mlp_g.params(p + ".mlp_g", v);
    mlp_inter.params(p + ".mlp_inter", v);
    mlp_intra.params(p + ".mlp_intra", v);
    mlp2_inter.params(p + ".mlp2_inter", v);
    mlp2_intra.params(p + ".mlp2_intra", v);
    fuse.params(p + ".fuse", v);
  }
};

/// Applies the aggregated templates as 1x1 convolution kernels and mixes the
/// correlation response back with the input.
struct CorrelationMapGenerator {
  Conv2dLayer reduce_conv;  // 2C -> C, 1x1

  CorrelationMapGenerator() = default;
  CorrelationMapGenerator(int channels, CounterRng& rng)
      : reduce_conv(2 * channels, channels, 1, 1, 0, 1, rng) {
    for (auto& v : reduce_conv.w.values()) v *= static_cast<real>(0.25);
  }

  static Tensor correlation(const Tensor& ta, const Tensor& x) {
    const std::int64_t C = x.size(0), H = x.size(1), W = x.size(2);
    if (ta.rank() != 2 || ta.size(0) != C || ta.size(1) != C)
      shape_error("correlation: templates " + shape_str(ta.shape()) + " do not match feature " +
                  shape_str(x.shape()));
    return reshape(matmul(ta, reshape(x, {C, H * W})), {C, H, W});
  }

  Tensor operator()(const Tensor& ta, const Tensor& x) const {
    return reduce_conv(concat({correlation(ta, x), x}, 0));
  }

  void params(const std::string& p, const ParamVisitor& v) {
    reduce_conv.params(p + ".reduce", v);
  }
};

struct DpsTransformer {
  LocalExtractor local;
  Aggregator agg;
  CorrelationMapGenerator corr;
  bool normalized_gwap = false;
  bool enabled = true;

  DpsTransformer() = default;
  DpsTransformer(const NetConfig& cfg, CounterRng& rng)
      : local(cfg, rng), agg(cfg, rng), corr(cfg.channels, rng), normalized_gwap(cfg.gwap_normalized) {}

  Tensor operator()(const Tensor& x) const {
    if (!enabled) return x;
    Tensor tg = global_extractor_forward(x, normalized_gwap);
    LocalExtractor::Output lo = local(x);
    Tensor ta = agg(tg, lo.templates);
    return corr(ta, x);
  }

  void params(const std::string& p, const ParamVisitor& v) {
    local.params(p + ".local", v);
    agg.params(p + ".agg", v);
    corr.params(p + ".corr", v);
  }
};

/// Four-stage boundary decoder: per-stage 3x3 convolution, upsampling to the
/// stride-4 grid, concatenation and a sigmoid head.
struct BoundaryDecoder {
  std::array<Conv2dLayer, 4> convs;
  Conv2dLayer fuse;

  BoundaryDecoder() = default;
  BoundaryDecoder(int channels, CounterRng& rng)
      : convs{Conv2dLayer(channels, channels, 3, 1, 1, 1, rng),
              Conv2dLayer(channels, channels, 3, 1, 1, 1, rng),
              Conv2dLayer(channels, channels, 3, 1, 1, 1, rng),
              Conv2dLayer(channels, channels, 3, 1, 1, 1, rng)},
        fuse(4 * channels, 1, 3, 1, 1, 1, rng) {}

  Tensor operator()(const std::array<Tensor, 4>& xa) const {
    const std::int64_t h4 = xa[0].size(1), w4 = xa[0].size(2);
    std::vector<Tensor> ups;
    ups.reserve(4);
    for (int i = 0; i < 4; ++i) ups.push_back(resize_bilinear(convs[static_cast<std::size_t>(i)](xa[static_cast<std::size_t>(i)]), h4, w4));
    return sigmoid(fuse(concat(ups, 0)));
  }

  void params(const std::string& p, const ParamVisitor& v) {
    for (int i = 0; i < 4; ++i) convs[static_cast<std::size_t>(i)].params(p + ".conv" + std::to_string(i + 1), v);
    fuse.params(p + ".fuse", v);
  }
};

/// Boundary fusion: the predicted boundary map gates the feature, a weighted
/// global pooling under the same map drives a per-channel attention vector,
/// and the boundary-guided context is folded back onto the input.
struct BoundaryFusion {
  Mlp mlp;
  Conv2dLayer out_conv;

  BoundaryFusion() = default;
  BoundaryFusion(int channels, CounterRng& rng)
      : mlp(channels, channels, channels, rng), out_conv(channels, channels, 1, 1, 0, 1, rng) {}

  Tensor operator()(const Tensor& xa, const Tensor& epred) const {
    const std::int64_t C = xa.size(0), H = xa.size(1), W = xa.size(2);
    Tensor e = (epred.size(1) == H && epred.size(2) == W) ? epred : resize_bilinear(epred, H, W);
    Tensor xm = mul(xa, e);
    Tensor num = reduce_sum(mul(xm, e), {1, 2});                  // (C)
    Tensor den = affine(reduce_sum(e, {1, 2}), 1.0, static_cast<real>(1e-12));  // (1)
    Tensor fa = mlp(reshape(div(num, den), {1, C}));
    Tensor ctx = mul(xm, reshape(fa, {C, 1, 1}));
    return out_conv(add(ctx, xa));
  }

  void params(const std::string& p, const ParamVisitor& v) {
    mlp.params(p + ".mlp", v);
    out_conv.params(p + ".out", v);
  }
};

/// Plain 4-stage CNN encoder with strides 4/8/16/32 (stands in for the
/// pretrained backbones).
struct Encoder {
  struct Stage {
    Conv2dLayer c1, c2;
  };
  std::array<Stage, 4> stages;

  Encoder() = default;
  Encoder(const std::array<int, 4>& ch, CounterRng& rng) {
    stages[0].c1 = Conv2dLayer(3, ch[0], 3, 2, 1, 1, rng);
    stages[0].c2 = Conv2dLayer(ch[0], ch[0], 3, 2, 1, 1, rng);
    for (int i = 1; i < 4; ++i) {
      stages[static_cast<std::size_t>(i)].c1 =
          Conv2dLayer(ch[static_cast<std::size_t>(i - 1)], ch[static_cast<std::size_t>(i)], 3, 2, 1, 1, rng);
      stages[static_cast<std::size_t>(i)].c2 =
          Conv2dLayer(ch[static_cast<std::size_t>(i)], ch[static_cast<std::size_t>(i)], 3, 1, 1, 1, rng);
    }
  }

  std::array<Tensor, 4> operator()(const Tensor& img) const {
    std::array<Tensor, 4> out;
    Tensor x = img;
    for (int i = 0; i < 4; ++i) {
      const auto& st = stages[static_cast<std::size_t>(i)];
      x = gelu(st.c2(gelu(st.c1(x))));
      out[static_cast<std::size_t>(i)] = x;
    }
    return out;
  }

  void params(const std::string& p, const ParamVisitor& v) {
    for (int i = 0; i < 4; ++i) {
      stages[static_cast<std::size_t>(i)].c1.params(p + ".s" + std::to_string(i + 1) + ".c1", v);
      stages[static_cast<std::size_t>(i)].c2.params(p + ".s" + std::to_string(i + 1) + ".c2", v);
    }
  }
};

/// Top-down FPN decoder with lateral 1x1 connections and a sigmoid head,
/// upsampled to the requested resolution.
struct FpnDecoder {
  std::array<Conv2dLayer, 4> lateral;
  std::array<Conv2dLayer, 3> smooth;
  Conv2dLayer head;

  FpnDecoder() = default;
  FpnDecoder(int in_channels, int channels, CounterRng& rng)
      : lateral{Conv2dLayer(in_channels, channels, 1, 1, 0, 1, rng),
                Conv2dLayer(in_channels, channels, 1, 1, 0, 1, rng),
                Conv2dLayer(in_channels, channels, 1, 1, 0, 1, rng),
                Conv2dLayer(in_channels, channels, 1, 1, 0, 1, rng)},
        smooth{Conv2dLayer(channels, channels, 3, 1, 1, 1, rng),
               Conv2dLayer(channels, channels, 3, 1, 1, 1, rng),
               Conv2dLayer(channels, channels, 3, 1, 1, 1, rng)},
        head(channels, 1, 1, 1, 0, 1, rng) {}

  Tensor operator()(const std::array<Tensor, 4>& xf, std::int64_t out_h, std::int64_t out_w) const {
    Tensor p = lateral[3](xf[3]);
    for (int i = 2; i >= 0; --i) {
      const auto ui = static_cast<std::size_t>(i);
      Tensor up = resize_bilinear(p, xf[ui].size(1), xf[ui].size(2));
      p = smooth[ui](add(lateral[ui](xf[ui]), up));
    }
    return resize_bilinear(sigmoid(head(p)), out_h, out_w);
  }

  void params(const std::string& p, const ParamVisitor& v) {
    for (int i = 0; i < 4; ++i) lateral[static_cast<std::size_t>(i)].params(p + ".lateral" + std::to_string(i + 1), v);
    for (int i = 0; i < 3; ++i) smooth[static_cast<std::size_t>(i)].params(p + ".smooth" + std::to_string(i + 1), v);
    head.params(p + ".head", v);
  }
};

struct DpsNet {
  NetConfig cfg;
  Encoder encoder;
  std::array<Mffm, 4> mffm;
  std::array<Conv2dLayer, 4> proj;  // stage projection when the MFFM is bypassed
  std::array<DpsTransformer, 4> dps;
  BoundaryDecoder bdec;
  std::array<BoundaryFusion, 4> bfm;
  FpnDecoder decoder;

  struct Output {
    Tensor mask;      // (1,H,W)
    Tensor boundary;  // (1,H/4,W/4); undefined when the boundary decoder is bypassed
  };

  DpsNet() = default;

  DpsNet(const NetConfig& c, CounterRng& rng) : cfg(c) {
    cfg.validate();
    encoder = Encoder(cfg.stage_channels, rng);
    for (int i = 0; i < 4; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (cfg.use_mffm)
        mffm[ui] = Mffm(cfg.stage_channels[ui], cfg.channels, rng);
      else
        proj[ui] = Conv2dLayer(cfg.stage_channels[ui], cfg.channels, 1, 1, 0, 1, rng);
    }
    if (cfg.use_dps)
      for (int i = 0; i < 4; ++i) dps[static_cast<std::size_t>(i)] = DpsTransformer(cfg, rng);
    if (cfg.use_boundary) bdec = BoundaryDecoder(cfg.channels, rng);
    if (cfg.use_bfm)
      for (int i = 0; i < 4; ++i) bfm[static_cast<std::size_t>(i)] = BoundaryFusion(cfg.channels, rng);
    const int dec_in = cfg.channels + ((cfg.use_boundary && !cfg.use_bfm) ? 1 : 0);
    decoder = FpnDecoder(dec_in, cfg.channels, rng);
  }

  Output operator()(const Tensor& img) const {
    if (img.rank() != 3 || img.size(0) != 3)
      shape_error("net: expected a (3,H,W) image, got " + shape_str(img.shape()));
    const std::int64_t H = img.size(1), W = img.size(2);
    if (H % 32 != 0 || W % 32 != 0)
      shape_error("net: input " + shape_str(img.shape()) + " is not divisible by 32");
    if ((H / 32) % cfg.patches != 0 || (W / 32) % cfg.patches != 0)
      shape_error("net: input " + shape_str(img.shape()) + " does not tile into " +
                  std::to_string(cfg.patches) + "x" + std::to_string(cfg.patches) + " patches");
    auto raw = encoder(img);
    std::array<Tensor, 4> xa;
    for (int i = 0; i < 4; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      Tensor xi = cfg.use_mffm ? mffm[ui](raw[ui]) : proj[ui](raw[ui]);
      xa[ui] = cfg.use_dps ? dps[ui](xi) : xi;
    }
    Output out;
    if (cfg.use_boundary) out.boundary = bdec(xa);
    std::array<Tensor, 4> xf;
    for (int i = 0; i < 4; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (cfg.use_bfm) {
        xf[ui] = bfm[ui](xa[ui], out.boundary);
      } else if (cfg.use_boundary) {
        // without the fusion module the boundary map rides along as an
        // extra channel into the decoder
        Tensor e = resize_bilinear(out.boundary, xa[ui].size(1), xa[ui].size(2));
        xf[ui] = concat({xa[ui], e}, 0);
      } else {
        xf[ui] = xa[ui];
      }
    }
    out.mask = decoder(xf, H, W);
    return out;
  }

  void params(const ParamVisitor& v) {
    encoder.params("encoder", v);
    for (int i = 0; i < 4; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const std::string tag = std::to_string(i + 1);
      if (cfg.use_mffm)
        mffm[ui].params("mffm" + tag, v);
      else
        proj[ui].params("proj" + tag, v);
    }
    if (cfg.use_dps)
      for (int i = 0; i < 4; ++i) dps[static_cast<std::size_t>(i)].params("dps" + std::to_string(i + 1), v);
    if (cfg.use_boundary) bdec.params("bdec", v);
    if (cfg.use_bfm)
      for (int i = 0; i < 4; ++i) bfm[static_cast<std::size_t>(i)].params("bfm" + std::to_string(i + 1), v);
    decoder.params("decoder", v);
  }
};

/// Copy of the net whose parameter handles share the master's value buffers
/// but carry their own gradients on the given tape. The master stays
/// untouched and read-only, so shadows of it can run on parallel threads.
inline DpsNet shadow_for_tape(const DpsNet& net, Tape& tape) {
  DpsNet copy = net;
  copy.params([&tape](const std::string&, Tensor& t) {
    t = t.shared_value_leaf();
    tape.watch(t);
  });
  return copy;
}

inline std::int64_t count_params(DpsNet& net) {
  std::int64_t n = 0;
  net.params([&n](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

}  // namespace dps
