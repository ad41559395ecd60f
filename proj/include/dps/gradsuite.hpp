#pragma once

#include "dps/gradcheck.hpp"
#include "dps/loss.hpp"
#include "dps/model.hpp"
#include "dps/synth.hpp"

namespace dps {

namespace gradsuite_detail {

inline Tensor projection(const Tensor& like, std::uint64_t seed) {
  CounterRng rng(seed ^ 0x5eedbeefull);
  return Tensor::uniform(like.shape(), rng, -1, 1);
}

template <typename Block>
std::vector<Tensor> with_params(const Tensor& input, Block& block) {
  std::vector<Tensor> vars{input};
  block.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
  return vars;
}

template <typename Block>
Block reseated(const Block& block, const std::vector<Tensor>& vars) {
  Block b = block;
  std::size_t i = 1;
  b.params("p", [&](const std::string&, Tensor& t) { t = vars[i++]; });
  return b;
}

inline void randomize(Tensor& t, CounterRng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = static_cast<real>(rng.uniform(lo, hi));
}

}  // namespace gradsuite_detail

/// Finite-difference suites for every differentiable tensor op and every
/// network block, at toy shapes. Step 1e-5 in double precision; the result
/// list carries the worst relative error per check.
inline std::vector<GradCheckResult> run_gradient_suite(int seeds = 5, bool blocks_too = true,
                                                       std::uint64_t base_seed = 0) {
  using namespace gradsuite_detail;
  std::vector<GradCheckResult> results;
  auto proj_loss = [](const Tensor& out, std::uint64_t seed) {
    return sum_all(mul(out, projection(out, seed)));
  };

  for (int si = 1; si <= seeds; ++si) {
    const auto seed = base_seed + static_cast<std::uint64_t>(si);
    CounterRng rng(seed * 7919);
    const std::string tag = "[seed " + std::to_string(si) + "]";

    // --- tensor-core ops ---
    {
      Tensor a = Tensor::uniform({3, 4}, rng, -1, 1);
      Tensor b = Tensor::uniform({3, 1}, rng, 0.5, 1.5);
      results.push_back(check_gradients("op:add" + tag, {a, b},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(add(v[0], v[1]), seed);
                                        }));
      results.push_back(check_gradients("op:mul" + tag, {a, b},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(mul(v[0], v[1]), seed);
                                        }));
      results.push_back(check_gradients("op:div" + tag, {a, b},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(div(v[0], v[1]), seed);
                                        }));
      results.push_back(check_gradients("op:affine" + tag, {a},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(affine(v[0], 2.5, -0.75), seed);
                                        }));
    }
    {
      Tensor x = Tensor::uniform({9}, rng, 0.05, 0.95);
      results.push_back(check_gradients("op:log-clamp" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          return sum_all(log(clamp(v[0], 1e-7, 1 - 1e-7)));
                                        }));
    }
    {
      Tensor a = Tensor::uniform({4, 5}, rng, -1, 1);
      Tensor b = Tensor::uniform({5, 3}, rng, -1, 1);
      results.push_back(check_gradients("op:matmul" + tag, {a, b},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(matmul(v[0], v[1]), seed);
                                        }));
    }
    {
      Tensor x = Tensor::uniform({3, 6}, rng, -2, 2);
      results.push_back(check_gradients("op:softmax" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(softmax(v[0], 1), seed);
                                        }));
      for (Act kind : {Act::Sigmoid, Act::Tanh, Act::Gelu, Act::Relu}) {
        results.push_back(check_gradients("op:activation" + tag, {x},
                                          [&](const std::vector<Tensor>& v) {
                                            return proj_loss(activation(kind, v[0]), seed);
                                          }));
      }
    }
    {
      Tensor x = Tensor::uniform({3, 4, 2}, rng, -1, 1);
      for (Reduce kind : {Reduce::Sum, Reduce::Mean, Reduce::Max})
        results.push_back(check_gradients("op:reduce" + tag, {x},
                                          [&](const std::vector<Tensor>& v) {
                                            return proj_loss(reduce(kind, v[0], {1}), seed);
                                          }));
      results.push_back(check_gradients("op:permute-reshape" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          Tensor p = permute(v[0], {2, 0, 1});
                                          return proj_loss(reshape(p, {2, 12}), seed);
                                        }));
      Tensor y = Tensor::uniform({3, 2, 2}, rng, -1, 1);
      results.push_back(check_gradients("op:concat-slice" + tag, {x, y},
                                        [&](const std::vector<Tensor>& v) {
                                          Tensor c = concat({v[0], v[1]}, 1);
                                          return proj_loss(slice(c, 1, 1, 4), seed);
                                        }));
    }
    {
      Tensor x = Tensor::uniform({2, 8, 8}, rng, -1, 1);
      Tensor w = Tensor::uniform({3, 2, 3, 3}, rng, -0.5, 0.5);
      Tensor b = Tensor::uniform({3}, rng, -0.2, 0.2);
      for (auto [s, p, d] : {std::array<int, 3>{1, 1, 1}, std::array<int, 3>{2, 1, 1},
                             std::array<int, 3>{1, 2, 2}})
        results.push_back(check_gradients(
            "op:conv2d" + tag, {x, w, b}, [&, s = s, p = p, d = d](const std::vector<Tensor>& v) {
              return proj_loss(conv2d(v[0], v[1], v[2], s, p, d), seed);
            }));
      results.push_back(check_gradients("op:resize_bilinear" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(resize_bilinear(v[0], 5, 11), seed);
                                        }));
      results.push_back(check_gradients("op:adaptive_avg_pool" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(adaptive_avg_pool(v[0], 3, 3), seed);
                                        }));
      std::vector<real> coords;
      for (int i = 0; i < 6; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
          double c = rng.uniform(0.6, 6.4);
          const double fr = c - std::floor(c);
          if (fr < 0.2) c += 0.25;
          if (fr > 0.8) c -= 0.25;
          coords.push_back(static_cast<real>(c));
        }
      }
      Tensor pts = Tensor::from({6, 2}, coords);
      results.push_back(check_gradients("op:bilinear_sample" + tag, {x, pts},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(bilinear_sample(v[0], v[1]), seed);
                                        }));
    }

    if (!blocks_too) continue;

    // --- network blocks, toy config: C=4, heads 2, N_p=3, N_r=2 ---
    NetConfig toy;
    toy.channels = 4;
    toy.heads = 2;
    toy.patches = 3;
    toy.refpoints = 2;
    toy.input_h = toy.input_w = 96;
    toy.stage_channels = {4, 6, 8, 10};
    CounterRng init(seed * 271);

    {
      Mffm mffm(3, 4, init);
      Tensor x = Tensor::uniform({3, 8, 8}, rng, -1, 1);
      auto vars = with_params(x, mffm);
      results.push_back(check_gradients(
          "block:mffm" + tag, vars,
          [&](const std::vector<Tensor>& v) { return proj_loss(reseated(mffm, v)(v[0]), seed); },
          1e-5, 512, 16));
    }
    {
      Tensor x = Tensor::uniform({4, 6, 6}, rng, -1, 1);
      results.push_back(check_gradients("block:global_extractor" + tag, {x},
                                        [&](const std::vector<Tensor>& v) {
                                          return proj_loss(global_extractor_forward(v[0]), seed);
                                        }));
    }
    {
      LocalExtractor le(toy, init);
      // non-zero offset encoder so the coordinate path carries gradient
      randomize(le.conv2.w, init, -0.3, 0.3);
      randomize(le.conv2.b, init, -0.1, 0.1);
      Tensor x = Tensor::uniform({4, 12, 12}, rng, -1, 1);
      auto vars = with_params(x, le);
      results.push_back(check_gradients(
          "block:local_extractor" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            return proj_loss(reseated(le, v)(v[0]).templates, seed);
          },
          1e-5, 512, 16));
    }
    {
      Aggregator agg(toy, init);
      CounterRng r2(seed * 31 + 5);
      Tensor tg = Tensor::uniform({4, 4}, r2, -1, 1);
      Tensor tl = Tensor::uniform({4, 9, 4}, r2, -1, 1);
      std::vector<Tensor> vars{tg, tl};
      agg.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients(
          "block:aggregator" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            Aggregator a = agg;
            std::size_t i = 2;
            a.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            return proj_loss(a(v[0], v[1]), seed);
          },
          1e-5, 512, 16));
    }
    {
      CorrelationMapGenerator corr(4, init);
      CounterRng r2(seed * 77 + 3);
      Tensor ta = Tensor::uniform({4, 4}, r2, -1, 1);
      Tensor x = Tensor::uniform({4, 5, 5}, r2, -1, 1);
      std::vector<Tensor> vars{ta, x};
      corr.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients(
          "block:correlation_map" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            CorrelationMapGenerator c = corr;
            std::size_t i = 2;
            c.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            return proj_loss(c(v[0], v[1]), seed);
          },
          1e-5, 512, 16));
    }
    {
      DpsTransformer dps(toy, init);
      randomize(dps.local.conv2.w, init, -0.2, 0.2);
      Tensor x = Tensor::uniform({4, 12, 12}, rng, -1, 1);
      auto vars = with_params(x, dps);
      results.push_back(check_gradients(
          "block:dps_transformer" + tag, vars,
          [&](const std::vector<Tensor>& v) { return proj_loss(reseated(dps, v)(v[0]), seed); },
          1e-5, 256, 8));
    }
    {
      BoundaryDecoder bd(4, init);
      CounterRng r2(seed * 13 + 1);
      std::array<Tensor, 4> xs{
          Tensor::uniform({4, 8, 8}, r2, -1, 1), Tensor::uniform({4, 4, 4}, r2, -1, 1),
          Tensor::uniform({4, 2, 2}, r2, -1, 1), Tensor::uniform({4, 1, 1}, r2, -1, 1)};
      std::vector<Tensor> vars{xs[0], xs[1], xs[2], xs[3]};
      bd.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients(
          "block:boundary_decoder" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            BoundaryDecoder b = bd;
            std::size_t i = 4;
            b.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            return proj_loss(b({v[0], v[1], v[2], v[3]}), seed);
          },
          1e-5, 256, 8));
    }
    {
      BoundaryFusion bfm(4, init);
      CounterRng r2(seed * 17 + 9);
      Tensor xa = Tensor::uniform({4, 6, 6}, r2, -1, 1);
      Tensor ep = Tensor::uniform({1, 6, 6}, r2, 0.05, 0.95);
      std::vector<Tensor> vars{xa, ep};
      bfm.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients(
          "block:bfm" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            BoundaryFusion b = bfm;
            std::size_t i = 2;
            b.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            return proj_loss(b(v[0], v[1]), seed);
          },
          1e-5, 256, 8));
    }
    {
      Encoder enc(toy.stage_channels, init);
      Tensor img = Tensor::uniform({3, 32, 32}, rng, 0, 1);
      auto vars = with_params(img, enc);
      results.push_back(check_gradients(
          "block:encoder" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            Encoder e = enc;
            std::size_t i = 1;
            e.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            auto st = e(v[0]);
            return proj_loss(st[3], seed) + proj_loss(st[0], seed + 1);
          },
          1e-5, 256, 8));
    }
    {
      FpnDecoder dec(4, 4, init);
      CounterRng r2(seed * 23 + 2);
      std::array<Tensor, 4> xf{
          Tensor::uniform({4, 8, 8}, r2, -1, 1), Tensor::uniform({4, 4, 4}, r2, -1, 1),
          Tensor::uniform({4, 2, 2}, r2, -1, 1), Tensor::uniform({4, 1, 1}, r2, -1, 1)};
      std::vector<Tensor> vars{xf[0], xf[1], xf[2], xf[3]};
      dec.params("p", [&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients(
          "block:fpn_decoder" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            FpnDecoder d = dec;
            std::size_t i = 4;
            d.params("p", [&](const std::string&, Tensor& t) { t = v[i++]; });
            return proj_loss(d({v[0], v[1], v[2], v[3]}, 32, 32), seed);
          },
          1e-5, 256, 8));
    }
    {
      // losses against a fixed binary target
      CounterRng r2(seed * 29 + 4);
      Tensor pred = Tensor::uniform({1, 8, 8}, r2, 0.1, 0.9);
      Tensor gt = Tensor::zeros({1, 8, 8});
      for (std::int64_t i = 0; i < 64; ++i)
        gt.values()[static_cast<std::size_t>(i)] = r2.next_double() < 0.4 ? 1 : 0;
      results.push_back(check_gradients("block:mask_loss" + tag, {pred},
                                        [&](const std::vector<Tensor>& v) {
                                          MaskLoss ml = mask_loss(v[0], gt);
                                          return add(ml.wbce, ml.wiou);
                                        }));
      results.push_back(check_gradients("block:boundary_loss" + tag, {pred},
                                        [&](const std::vector<Tensor>& v) {
                                          return boundary_loss(v[0], gt);
                                        }));
    }
    {
      // whole network at a 64x64 toy config, probed at 20 parameter coords
      NetConfig small = toy;
      small.input_h = small.input_w = 64;
      small.patches = 2;
      CounterRng netrng(seed * 997);
      DpsNet net(small, netrng);
      net.params([&](const std::string& n, Tensor& t) {
        if (n.find("local.conv2") != std::string::npos) randomize(t, netrng, -0.2, 0.2);
      });
      CounterRng r2(seed * 41 + 8);
      Sample s = generate_sample(seed, 64, 64, 0.5);
      std::vector<Tensor> vars;
      net.params([&vars](const std::string&, Tensor& t) { vars.push_back(t); });
      results.push_back(check_gradients_global(
          "block:full_net" + tag, vars,
          [&](const std::vector<Tensor>& v) {
            DpsNet n2 = net;
            std::size_t i = 0;
            n2.params([&](const std::string&, Tensor& t) { t = v[i++]; });
            DpsNet::Output o = n2(s.image);
            TotalLoss tl = total_loss(o.mask, s.mask, o.boundary, s.boundary, 1);
            return tl.value;
          },
          20, 1e-5, seed * 5 + 3));
    }
  }
  return results;
}

inline bool gradient_suite_passes(const std::vector<GradCheckResult>& results, double tol,
                                  double full_net_tol, std::string* worst_name = nullptr,
                                  double* worst_err = nullptr) {
  bool ok = true;
  double worst = -1;
  for (const auto& r : results) {
    const double t = r.name.rfind("block:full_net", 0) == 0 ? full_net_tol : tol;
    if (!r.pass(t)) ok = false;
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      if (worst_name) *worst_name = r.name;
    }
  }
  if (worst_err) *worst_err = worst;
  return ok;
}

}  // namespace dps
