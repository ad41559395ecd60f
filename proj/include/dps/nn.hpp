#pragma once

#include <functional>
#include <string>

#include "dps/ops.hpp"
#include "dps/tensor.hpp"

namespace dps {

/// Visitor over named parameters; the visit order is the canonical parameter
/// order used by the optimizer and the checkpoint format.
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

namespace init {

inline Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, CounterRng& rng) {
  const real bound = static_cast<real>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

// For pure linear maps (attention projections, MLP outputs, pooling scores):
// with no normalization layers anywhere in the network, Kaiming's ReLU gain
// doubles the variance at every such layer and saturates the heads.
inline Tensor xavier_uniform(Shape shape, std::int64_t fan_in, std::int64_t fan_out,
                             CounterRng& rng) {
  const real bound =
      static_cast<real>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace init

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 0, dil = 1;

  Conv2dLayer() = default;
  Conv2dLayer(int in, int out, int k, int stride_, int pad_, int dil_, CounterRng& rng)
      : w(init::kaiming_uniform({out, in, k, k}, static_cast<std::int64_t>(in) * k * k, rng)),
        b(Tensor::zeros({out})),
        stride(stride_),
        pad(pad_),
        dil(dil_) {}

  static Conv2dLayer zeroed(int in, int out, int k, int stride_, int pad_, int dil_) {
    Conv2dLayer l;
    l.w = Tensor::zeros({out, in, k, k});
    l.b = Tensor::zeros({out});
    l.stride = stride_;
    l.pad = pad_;
    l.dil = dil_;
    return l;
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad, dil); }

  void params(const std::string& p, const ParamVisitor& v) {
    v(p + ".w", w);
    v(p + ".b", b);
  }
};

struct Linear {
  Tensor w, b;  // w: (in,out)

  Linear() = default;
  Linear(int in, int out, CounterRng& rng)
      : w(init::xavier_uniform({in, out}, in, out, rng)), b(Tensor::zeros({1, out})) {}

  /// x: (N,in) -> (N,out); rank-3 inputs are flattened over leading axes.
  Tensor operator()(const Tensor& x) const {
    if (x.rank() == 2) return add(matmul(x, w), b);
    Shape s = x.shape();
    const std::int64_t in = s.back();
    std::int64_t lead = 1;
    for (std::size_t d = 0; d + 1 < s.size(); ++d) lead *= s[d];
    Tensor flat = reshape(x, {lead, in});
    Tensor y = add(matmul(flat, w), b);
    Shape os = s;
    os.back() = w.size(1);
    return reshape(y, os);
  }

  void params(const std::string& p, const ParamVisitor& v) {
    v(p + ".w", w);
    v(p + ".b", b);
  }
};

/// Two linear layers with a GeLU between them.
struct Mlp {
  Linear l1, l2;

  Mlp() = default;
  Mlp(int in, int hidden, int out, CounterRng& rng) : l1(in, hidden, rng), l2(hidden, out, rng) {}

  Tensor operator()(const Tensor& x) const { return l2(gelu(l1(x))); }

  void params(const std::string& p, const ParamVisitor& v) {
    l1.params(p + ".l1", v);
    l2.params(p + ".l2", v);
  }
};

/// Standard scaled dot-product multi-head self-attention over a (N,C)
/// sequence, with a residual connection around the attention output.
struct MultiHeadSelfAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(int dim, int heads_, CounterRng& rng)
      : wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng), heads(heads_) {
    if (dim % heads_ != 0) shape_error("attention: dim must be divisible by heads");
  }

  Tensor operator()(const Tensor& x) const {
    const std::int64_t c = x.size(1);
    const std::int64_t d = c / heads;
    Tensor q = wq(x), k = wk(x), v = wv(x);
    const real sc = static_cast<real>(1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice(q, 1, h * d, d);
      Tensor kh = slice(k, 1, h * d, d);
      Tensor vh = slice(v, 1, h * d, d);
      Tensor attn = softmax(scale(matmul(qh, transpose(kh)), sc), 1);  // (N,N)
      outs.push_back(matmul(attn, vh));
    }
    Tensor merged = heads == 1 ? outs[0] : concat(outs, 1);
    return add(x, wo(merged));
  }

  void params(const std::string& p, const ParamVisitor& v) {
    wq.params(p + ".q", v);
    wk.params(p + ".k", v);
    wv.params(p + ".v", v);
    wo.params(p + ".o", v);
  }
};

/// Attentive pooling: a shared linear transform scores every element, scores
/// are softmaxed over the pooled axis, and the elements are summed under
/// those weights. Input (P,R,C); pool_axis 0 gives (R,C), 1 gives (P,C).
struct AttentivePool {
  Linear score;

  AttentivePool() = default;
  AttentivePool(int dim, CounterRng& rng) : score(dim, dim, rng) {}

  Tensor operator()(const Tensor& x, int pool_axis) const {
    if (x.rank() != 3) shape_error("attentive_pool: expected rank-3 input, got " + shape_str(x.shape()));
    if (pool_axis != 0 && pool_axis != 1) shape_error("attentive_pool: axis must be 0 or 1");
    Tensor s = score(x);                    // (P,R,C) per-dimension scores
    Tensor a = softmax(s, pool_axis);       // weights along the pooled axis
    return reduce_sum(mul(a, x), {pool_axis});
  }

  void params(const std::string& p, const ParamVisitor& v) { score.params(p + ".score", v); }
};

}  // namespace dps
