#pragma once

// Layer zoo: grouped 1-D convolution, batch/layer normalization, global
// attention, stochastic depth, downsampling stems, and the composed
// attention block layer. All layers run on [B,C,T] activations (embedding
// head pieces accept [B,C]).

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/na_kernel.hpp"
#include "pcfnat/rng.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

template <class T>
struct FwdCtx {
  Tape<T>* tape = nullptr;
  bool training = false;
  Rng* rng = nullptr;
};

template <class T>
class ParamRegistry {
 public:
  Tensor<T> add_param(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
  }
  Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
    buffers_.emplace_back(name, t);
    return t;
  }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const { return buffers_; }
  std::vector<std::pair<std::string, Tensor<T>>>& buffers() { return buffers_; }
  index_t param_count() const {
    index_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }
  index_t param_count_with_prefix(const std::string& prefix) const {
    index_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
};

// ---------------------------------------------------------------------------
// Grouped 1-D convolution (fused op)
// ---------------------------------------------------------------------------

// x [B,Cin,T], weight [Cout, Cin/g, K], bias [Cout] -> [B, Cout, T'] with
// T' = floor((T-K)/stride) + 1. Each output group reads only its input group.
template <class T>
Tensor<T> conv1d_grouped(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         int stride, int groups, Tape<T>* tape = nullptr) {
  if (x.ndim() != 3) throw dim_error("conv1d_grouped: input must be [B,C,T]");
  const index_t B = x.dim(0), cin = x.dim(1), tin = x.dim(2);
  const index_t cout = weight.dim(0), cin_g = weight.dim(1), K = weight.dim(2);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0)
    throw config_error(strcat_msg("conv1d_grouped: channels (", cin, "->", cout,
                                  ") not divisible by groups ", groups));
  if (cin / groups != cin_g)
    throw dim_error(strcat_msg("conv1d_grouped: weight expects ", cin_g * groups,
                               " input channels, got ", cin));
  if (tin < K)
    throw contract_error(strcat_msg("conv1d_grouped: sequence length ", tin,
                                    " shorter than kernel ", K));
  const index_t tout = (tin - K) / stride + 1;
  const index_t oc_per_g = cout / groups;

  Tensor<T> out = Tensor<T>::uninitialized({B, cout, tout});
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = bias.data().data();
  T* po = out.data().data();
  for (index_t b = 0; b < B; ++b) {
    for (index_t oc = 0; oc < cout; ++oc) {
      const index_t ic0 = (oc / oc_per_g) * cin_g;
      T* orow = po + (b * cout + oc) * tout;
      std::fill(orow, orow + tout, pb[oc]);
      for (index_t ic = 0; ic < cin_g; ++ic) {
        const T* xrow = px + (b * cin + ic0 + ic) * tin;
        const T* wrow = pw + (oc * cin_g + ic) * K;
        for (index_t kk = 0; kk < K; ++kk) {
          const T wv = wrow[kk];
          if (stride == 1) {
            const T* xs = xrow + kk;
            for (index_t t = 0; t < tout; ++t) orow[t] += wv * xs[t];
          } else {
            for (index_t t = 0; t < tout; ++t) orow[t] += wv * xrow[t * stride + kk];
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv1d_grouped");

  if (tape && (x.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([x1 = x, w1 = weight, b1 = bias, o1 = out, stride, B, cin, tin, cout, cin_g, K,
                  tout, oc_per_g]() mutable {
      if (!o1.has_grad()) return;
      const T* go = o1.grad().data();
      const T* px1 = x1.data().data();
      const T* pw1 = w1.data().data();
      T* gx = x1.requires_grad() ? x1.grad_accum().data() : nullptr;
      T* gw = w1.requires_grad() ? w1.grad_accum().data() : nullptr;
      T* gb = b1.requires_grad() ? b1.grad_accum().data() : nullptr;
      for (index_t b = 0; b < B; ++b) {
        for (index_t oc = 0; oc < cout; ++oc) {
          const index_t ic0 = (oc / oc_per_g) * cin_g;
          const T* gorow = go + (b * cout + oc) * tout;
          if (gb) {
            T acc = 0;
            for (index_t t = 0; t < tout; ++t) acc += gorow[t];
            gb[oc] += acc;
          }
          for (index_t ic = 0; ic < cin_g; ++ic) {
            const T* xrow = px1 + (b * cin + ic0 + ic) * tin;
            const T* wrow = pw1 + (oc * cin_g + ic) * K;
            T* gxrow = gx ? gx + (b * cin + ic0 + ic) * tin : nullptr;
            T* gwrow = gw ? gw + (oc * cin_g + ic) * K : nullptr;
            for (index_t kk = 0; kk < K; ++kk) {
              const T wv = wrow[kk];
              T wacc = 0;
              for (index_t t = 0; t < tout; ++t) {
                const index_t xi = t * stride + kk;
                if (gxrow) gxrow[xi] += wv * gorow[t];
                wacc += gorow[t] * xrow[xi];
              }
              if (gwrow) gwrow[kk] += wacc;
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
class GroupConv1d {
 public:
  GroupConv1d(ParamRegistry<T>& reg, const std::string& name, int in_ch, int out_ch, int kernel,
              int stride, int groups, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), groups_(groups) {
    if (groups < 1 || in_ch % groups != 0 || out_ch % groups != 0)
      throw config_error(strcat_msg("GroupConv1d ", name, ": channels ", in_ch, "->", out_ch,
                                    " not divisible by groups ", groups));
    const int cin_g = in_ch / groups;
    const T stddev = std::sqrt(T(2) / static_cast<T>(cin_g * kernel));
    weight_ = reg.add_param(name + ".weight",
                            Tensor<T>::randn({out_ch, cin_g, kernel}, rng, stddev));
    bias_ = reg.add_param(name + ".bias", Tensor<T>::zeros({out_ch}));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
    return conv1d_grouped(x, weight_, bias_, stride_, groups_, tape);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int groups() const { return groups_; }
  index_t param_count() const { return weight_.numel() + bias_.numel(); }

 private:
  int in_ch_, out_ch_, kernel_, stride_, groups_;
  Tensor<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

enum class NormKind { batch, layer };

// Batch normalization over (batch, time) per channel; accepts [B,C,T] and
// [B,C]. Running statistics follow the usual momentum update (0.1) with the
// unbiased variance estimate; normalization itself uses the biased batch
// variance.
template <class T>
class BatchNorm1d {
 public:
  BatchNorm1d(ParamRegistry<T>& reg, const std::string& name, int channels)
      : channels_(channels) {
    gamma_ = reg.add_param(name + ".gamma", Tensor<T>::ones({channels}));
    beta_ = reg.add_param(name + ".beta", Tensor<T>::zeros({channels}));
    running_mean_ = reg.add_buffer(name + ".running_mean", Tensor<T>::zeros({channels}));
    running_var_ = reg.add_buffer(name + ".running_var", Tensor<T>::ones({channels}));
  }

  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    const bool temporal = x.ndim() == 3;
    if (!temporal && x.ndim() != 2) throw dim_error("BatchNorm1d: input must be [B,C] or [B,C,T]");
    if (x.dim(1) != channels_)
      throw dim_error(strcat_msg("BatchNorm1d: expected ", channels_, " channels, got ",
                                 x.dim(1)));
    Tape<T>* tape = ctx.tape;
    Tensor<T> m, v;
    if (ctx.training) {
      if (temporal) {
        m = mean(mean(x, 2, true, tape), 0, true, tape);  // [1,C,1]
        auto xc = sub(x, m, tape);
        v = mean(mean(mul(xc, xc, tape), 2, true, tape), 0, true, tape);
      } else {
        m = mean(x, 0, true, tape);  // [1,C]
        auto xc = sub(x, m, tape);
        v = mean(mul(xc, xc, tape), 0, true, tape);
      }
      update_running(m, v, temporal ? x.dim(0) * x.dim(2) : x.dim(0));
    } else {
      m = temporal ? reshape(running_mean_, {channels_, 1}) : running_mean_;
      v = temporal ? reshape(running_var_, {channels_, 1}) : running_var_;
    }
    auto xn = mul(sub(x, m, tape), power(add_scalar(v, eps_, tape), T(-0.5), tape), tape);
    auto g = temporal ? reshape(gamma_, {channels_, 1}, tape) : gamma_;
    auto b = temporal ? reshape(beta_, {channels_, 1}, tape) : beta_;
    return add(mul(xn, g, tape), b, tape);
  }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  std::span<T> running_mean() { return running_mean_.data(); }
  std::span<T> running_var() { return running_var_.data(); }

 private:
  void update_running(const Tensor<T>& m, const Tensor<T>& v, index_t n) const {
    auto rm = running_mean_.data();
    auto rv = running_var_.data();
    auto md = m.data();
    auto vd = v.data();
    const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T(1);
    for (index_t c = 0; c < channels_; ++c) {
      rm[static_cast<std::size_t>(c)] =
          (T(1) - momentum_) * rm[static_cast<std::size_t>(c)] + momentum_ * md[static_cast<std::size_t>(c)];
      rv[static_cast<std::size_t>(c)] =
          (T(1) - momentum_) * rv[static_cast<std::size_t>(c)] +
          momentum_ * vd[static_cast<std::size_t>(c)] * unbias;
    }
  }

  index_t channels_;
  T momentum_ = T(0.1);
  T eps_ = T(1e-5);
  Tensor<T> gamma_, beta_;
  mutable Tensor<T> running_mean_, running_var_;
};

// Layer normalization over the channel axis per frame (the Table-3
// "with LayerNorm" ablation). Same parameter count as BatchNorm1d.
template <class T>
class LayerNorm1d {
 public:
  LayerNorm1d(ParamRegistry<T>& reg, const std::string& name, int channels)
      : channels_(channels) {
    gamma_ = reg.add_param(name + ".gamma", Tensor<T>::ones({channels}));
    beta_ = reg.add_param(name + ".beta", Tensor<T>::zeros({channels}));
  }

  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    if (x.ndim() != 3 && x.ndim() != 2) throw dim_error("LayerNorm1d: input must be [B,C] or [B,C,T]");
    if (x.dim(1) != channels_)
      throw dim_error(strcat_msg("LayerNorm1d: expected ", channels_, " channels, got ", x.dim(1)));
    Tape<T>* tape = ctx.tape;
    auto m = mean(x, 1, true, tape);
    auto xc = sub(x, m, tape);
    auto v = mean(mul(xc, xc, tape), 1, true, tape);
    auto xn = mul(xc, power(add_scalar(v, eps_, tape), T(-0.5), tape), tape);
    const bool temporal = x.ndim() == 3;
    auto g = temporal ? reshape(gamma_, {channels_, 1}, tape) : gamma_;
    auto b = temporal ? reshape(beta_, {channels_, 1}, tape) : beta_;
    return add(mul(xn, g, tape), b, tape);
  }

 private:
  index_t channels_;
  T eps_ = T(1e-5);
  Tensor<T> gamma_, beta_;
};

template <class T>
class Norm1d {
 public:
  Norm1d(ParamRegistry<T>& reg, const std::string& name, int channels, NormKind kind) {
    if (kind == NormKind::batch)
      bn_.emplace(reg, name, channels);
    else
      ln_.emplace(reg, name, channels);
  }
  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    return bn_ ? bn_->forward(x, ctx) : ln_->forward(x, ctx);
  }
  BatchNorm1d<T>* batch_norm() { return bn_ ? &*bn_ : nullptr; }

 private:
  std::optional<BatchNorm1d<T>> bn_;
  std::optional<LayerNorm1d<T>> ln_;
};

// ---------------------------------------------------------------------------
// Attention layers
// ---------------------------------------------------------------------------

// Unmasked scaled dot-product attention over the whole sequence, [G,T,d].
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               Tape<T>* tape = nullptr) {
  const index_t d = q.dim(2);
  auto kt = permute(k, {0, 2, 1}, tape);
  auto logits = scale(bmm(q, kt, tape), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))),
                      tape);
  auto attn = softmax(logits, 2, tape);
  return bmm(attn, v, tape);
}

namespace layer_detail {

// [B,C,T] -> [B*H, T, d]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads, Tape<T>* tape) {
  const index_t B = x.dim(0), C = x.dim(1), seq = x.dim(2);
  const index_t d = C / heads;
  auto r = reshape(x, {B * heads, d, seq}, tape);
  return permute(r, {0, 2, 1}, tape);
}

// [B*H, T, d] -> [B,C,T]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, index_t batch, Tape<T>* tape) {
  const index_t BH = x.dim(0), seq = x.dim(1), d = x.dim(2);
  auto p = permute(x, {0, 2, 1}, tape);
  return reshape(p, {batch, (BH / batch) * d, seq}, tape);
}

}  // namespace layer_detail

// Multi-head global attention with grouped kernel-1 qkv/output projections.
template <class T>
class GlobalAttention {
 public:
  GlobalAttention(ParamRegistry<T>& reg, const std::string& name, int channels, int heads,
                  int groups, Rng& rng)
      : channels_(channels),
        heads_(heads),
        q_(reg, name + ".q", channels, channels, 1, 1, groups, rng),
        k_(reg, name + ".k", channels, channels, 1, 1, groups, rng),
        v_(reg, name + ".v", channels, channels, 1, 1, groups, rng),
        out_(reg, name + ".out", channels, channels, 1, 1, groups, rng) {
    if (channels % heads != 0)
      throw config_error(strcat_msg("GlobalAttention: channels ", channels,
                                    " not divisible by heads ", heads));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
    const index_t B = x.dim(0);
    auto qh = layer_detail::split_heads(q_.forward(x, tape), heads_, tape);
    auto kh = layer_detail::split_heads(k_.forward(x, tape), heads_, tape);
    auto vh = layer_detail::split_heads(v_.forward(x, tape), heads_, tape);
    auto ctx = scaled_dot_attention(qh, kh, vh, tape);
    return out_.forward(layer_detail::merge_heads(ctx, B, tape), tape);
  }

  GroupConv1d<T>& out_proj() { return out_; }

 private:
  int channels_, heads_;
  GroupConv1d<T> q_, k_, v_, out_;
};

// Neighborhood attention layer: grouped projections around the windowed
// attention kernel (blocked path for padded mode, naive for clamped).
template <class T>
class NeighborhoodAttentionLayer {
 public:
  NeighborhoodAttentionLayer(ParamRegistry<T>& reg, const std::string& name, const NaConfig& cfg,
                             int groups, Rng& rng)
      : cfg_(cfg),
        q_(reg, name + ".q", cfg.channels, cfg.channels, 1, 1, groups, rng),
        k_(reg, name + ".k", cfg.channels, cfg.channels, 1, 1, groups, rng),
        v_(reg, name + ".v", cfg.channels, cfg.channels, 1, 1, groups, rng),
        out_(reg, name + ".out", cfg.channels, cfg.channels, 1, 1, groups, rng) {
    cfg_.validate();
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
    const index_t B = x.dim(0);
    auto qh = layer_detail::split_heads(q_.forward(x, tape), cfg_.heads, tape);
    auto kh = layer_detail::split_heads(k_.forward(x, tape), cfg_.heads, tape);
    auto vh = layer_detail::split_heads(v_.forward(x, tape), cfg_.heads, tape);
    const NaImpl impl = cfg_.padding == NaPadding::padded ? NaImpl::blocked : NaImpl::naive;
    auto res = neighborhood_attention(qh, kh, vh, cfg_, impl, TileShape{}, tape);
    return out_.forward(layer_detail::merge_heads(res.out, B, tape), tape);
  }

  GroupConv1d<T>& out_proj() { return out_; }
  const NaConfig& config() const { return cfg_; }

 private:
  NaConfig cfg_;
  GroupConv1d<T> q_, k_, v_, out_;
};

// ---------------------------------------------------------------------------
// Stochastic depth
// ---------------------------------------------------------------------------

// Train mode: zero the branch per sample with probability p and rescale
// survivors by 1/(1-p). Eval mode: identity.
template <class T>
Tensor<T> drop_path(const Tensor<T>& x, double p, const FwdCtx<T>& ctx) {
  if (p < 0.0 || p >= 1.0)
    throw config_error(strcat_msg("drop_path: probability ", p, " outside [0,1)"));
  if (!ctx.training || p == 0.0) return x;
  if (!ctx.rng) throw contract_error("drop_path: training mode needs an RNG");
  const index_t B = x.dim(0);
  std::vector<T> mask(static_cast<std::size_t>(B));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (index_t b = 0; b < B; ++b)
    mask[static_cast<std::size_t>(b)] = ctx.rng->bernoulli(p) ? T(0) : keep_scale;
  std::vector<index_t> mshape(static_cast<std::size_t>(x.ndim()), 1);
  mshape[0] = B;
  auto m = Tensor<T>::from_data(mshape, std::move(mask));
  return mul(x, m, ctx.tape);
}

// ---------------------------------------------------------------------------
// NA/GA block layer
// ---------------------------------------------------------------------------

// Pre-norm residual wiring:
//   y = x + DropPath(AttnProj(Attn(Norm(x))))
//   z = y + DropPath(FFN(Norm(y))),  FFN = conv1(C->h) -> GELU -> conv1(h->C)
template <class T>
class AttentionBlockLayer {
 public:
  struct Spec {
    int channels = 256;
    int ffn_hidden = 1024;
    int groups = 1;
    bool is_global = false;
    int ga_heads = 4;
    NaConfig na;  // used when !is_global
    double drop_path_p = 0.0;
    NormKind norm = NormKind::batch;
  };

  AttentionBlockLayer(ParamRegistry<T>& reg, const std::string& name, const Spec& spec, Rng& rng)
      : spec_(spec),
        norm1_(reg, name + ".norm1", spec.channels, spec.norm),
        norm2_(reg, name + ".norm2", spec.channels, spec.norm),
        ffn1_(reg, name + ".ffn1", spec.channels, spec.ffn_hidden, 1, 1, spec.groups, rng),
        ffn2_(reg, name + ".ffn2", spec.ffn_hidden, spec.channels, 1, 1, spec.groups, rng) {
    if (spec.is_global)
      ga_.emplace(reg, name + ".ga", spec.channels, spec.ga_heads, spec.groups, rng);
    else
      na_.emplace(reg, name + ".na", spec.na, spec.groups, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    Tape<T>* tape = ctx.tape;
    auto attn_in = norm1_.forward(x, ctx);
    auto attn_out = spec_.is_global ? ga_->forward(attn_in, tape) : na_->forward(attn_in, tape);
    auto y = add(x, drop_path(attn_out, spec_.drop_path_p, ctx), tape);
    auto h = ffn1_.forward(norm2_.forward(y, ctx), tape);
    auto f = ffn2_.forward(gelu(h, tape), tape);
    return add(y, drop_path(f, spec_.drop_path_p, ctx), tape);
  }

  bool is_global() const { return spec_.is_global; }
  const Spec& spec() const { return spec_; }
  GroupConv1d<T>& attn_out_proj() { return spec_.is_global ? ga_->out_proj() : na_->out_proj(); }
  GroupConv1d<T>& ffn_out_proj() { return ffn2_; }

 private:
  Spec spec_;
  Norm1d<T> norm1_, norm2_;
  std::optional<GlobalAttention<T>> ga_;
  std::optional<NeighborhoodAttentionLayer<T>> na_;
  GroupConv1d<T> ffn1_, ffn2_;
};

// ---------------------------------------------------------------------------
// Downsampling stem: conv(kernel 2, stride 2) + normalization
// ---------------------------------------------------------------------------

template <class T>
class Downsample {
 public:
  Downsample(ParamRegistry<T>& reg, const std::string& name, int in_ch, int out_ch, int groups,
             NormKind norm, Rng& rng)
      : conv_(reg, name + ".conv", in_ch, out_ch, 2, 2, groups, rng),
        norm_(reg, name + ".norm", out_ch, norm) {}

  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    if (x.dim(2) < 2)
      throw contract_error(strcat_msg("downsample: needs T >= 2, got T=", x.dim(2)));
    return norm_.forward(conv_.forward(x, ctx.tape), ctx);
  }

 private:
  GroupConv1d<T> conv_;
  Norm1d<T> norm_;
};

}  // namespace pcfnat
