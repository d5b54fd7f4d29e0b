#pragma once

// End-to-end speaker embedding extractors: MFA-NAT (single stem, sequential
// blocks) and PCF-NAT (four grouped stems with inter-block additive fusion),
// multi-level feature aggregation, attentive statistics pooling, the
// embedding head, and the AAM + K-subcenter softmax training objective.

#include <array>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pcfnat/layers.hpp"

namespace pcfnat {

enum class Variant { mfa, pcf };

inline const char* variant_name(Variant v) { return v == Variant::mfa ? "mfa" : "pcf"; }

struct ModelConfig {
  Variant variant = Variant::pcf;
  int layers_per_block = 3;
  int channels = 256;
  int na_heads = 16;
  int ga_heads = 4;
  int window = 27;
  int mfa_channels = 1536;
  int embedding_dim = 192;
  int feat_dim = 80;
  int ffn_mult = 4;        // FFN hidden = ffn_mult * channels
  int asp_bottleneck = 128;
  double drop_path_coefficient = -1.0;  // < 0: variant/depth default

  // ablation switches (Table-3 variants)
  bool na_padding = true;
  bool use_ga = true;
  bool four_gas = false;
  bool layernorm = false;
  bool use_mfa = true;
  bool use_asp = true;
  bool use_drop_path = true;
  bool mfa_post_norm_act = true;

  std::array<int, 4> group_schedule() const {
    return variant == Variant::pcf ? std::array<int, 4>{8, 4, 2, 1}
                                   : std::array<int, 4>{1, 1, 1, 1};
  }

  // MFA-NAT uses 1.0 at every depth; PCF-NAT (3..6)x4 use 1.0/1.1/1.2/1.3.
  double effective_drop_path_coefficient() const {
    if (drop_path_coefficient >= 0.0) return drop_path_coefficient;
    if (variant == Variant::mfa) return 1.0;
    return 1.0 + 0.1 * (layers_per_block - 3);
  }

  // GA placement: last layer of blocks 2/4 (MFA) or 1/3 (PCF); the four-GA
  // ablation turns the last layer of every block global, w/o-GA turns all
  // layers into neighborhood attention. Blocks are numbered 1..4.
  bool is_ga_layer(int block, int layer) const {
    if (!use_ga) return false;
    if (layer != layers_per_block - 1) return false;
    if (four_gas) return true;
    if (variant == Variant::mfa) return block == 2 || block == 4;
    return block == 1 || block == 3;
  }

  void validate() const {
    if (layers_per_block < 1) throw config_error("layers_per_block must be >= 1");
    if (channels < 1 || channels % na_heads != 0)
      throw config_error(strcat_msg("channels ", channels, " not divisible by na_heads ",
                                    na_heads));
    if (channels % ga_heads != 0)
      throw config_error(strcat_msg("channels ", channels, " not divisible by ga_heads ",
                                    ga_heads));
    if (window < 1 || window % 2 == 0) throw config_error("window must be odd and positive");
    for (int g : group_schedule()) {
      if (feat_dim % g != 0)
        throw config_error(strcat_msg("feat_dim ", feat_dim, " not divisible by stem groups ", g));
      if (channels % g != 0)
        throw config_error(strcat_msg("channels ", channels, " not divisible by groups ", g));
      if ((ffn_mult * channels) % g != 0)
        throw config_error("ffn hidden not divisible by groups");
    }
    if (mfa_channels < 1 || embedding_dim < 1 || asp_bottleneck < 1)
      throw config_error("mfa_channels/embedding_dim/asp_bottleneck must be positive");
    const double c = effective_drop_path_coefficient();
    if (c / 10.0 >= 1.0)
      throw config_error(strcat_msg("drop path coefficient ", c, " maps to probability >= 1"));
  }
};

// ---------------------------------------------------------------------------
// Linear (used by the embedding head)
// ---------------------------------------------------------------------------

template <class T>
class Linear {
 public:
  Linear(ParamRegistry<T>& reg, const std::string& name, int in_dim, int out_dim, Rng& rng) {
    const T stddev = std::sqrt(T(2) / static_cast<T>(in_dim));
    weight_ = reg.add_param(name + ".weight", Tensor<T>::randn({in_dim, out_dim}, rng, stddev));
    bias_ = reg.add_param(name + ".bias", Tensor<T>::zeros({out_dim}));
  }
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) const {
    return add(matmul(x, weight_, tape), bias_, tape);
  }

 private:
  Tensor<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Attentive statistics pooling
// ---------------------------------------------------------------------------

// Channel-dependent attention with global-context concatenation: each frame
// is scored from [x ; mean(x) ; std(x)] through a tanh bottleneck, weights
// softmax over time per channel, output is weighted mean || weighted std.
// With attention disabled this degrades to plain temporal mean+std.
template <class T>
class AspPooling {
 public:
  AspPooling(ParamRegistry<T>& reg, const std::string& name, int channels, int bottleneck,
             bool use_attention, Rng& rng)
      : channels_(channels), use_attention_(use_attention) {
    if (use_attention_) {
      att1_.emplace(reg, name + ".att1", 3 * channels, bottleneck, 1, 1, 1, rng);
      att2_.emplace(reg, name + ".att2", bottleneck, channels, 1, 1, 1, rng);
    }
  }

  // x [B,D,T] -> [B,2D]
  Tensor<T> forward(const Tensor<T>& x, const FwdCtx<T>& ctx) const {
    if (x.ndim() != 3 || x.dim(1) != channels_)
      throw dim_error(strcat_msg("AspPooling: expected [B,", channels_, ",T], got ",
                                 shape_str(x.shape())));
    Tape<T>* tape = ctx.tape;
    const index_t frames = x.dim(2);
    Tensor<T> w;
    if (use_attention_) {
      auto mu = mean(x, 2, true, tape);
      auto ex2 = mean(mul(x, x, tape), 2, true, tape);
      auto sg = sqrt(clamp_min(sub(ex2, mul(mu, mu, tape), tape), T(1e-9), tape), tape);
      auto ones_t = Tensor<T>::ones({1, 1, frames});
      auto global_ctx = concat<T>({x, mul(mu, ones_t, tape), mul(sg, ones_t, tape)}, 1, tape);
      auto scores = att2_->forward(tanh(att1_->forward(global_ctx, tape), tape), tape);
      w = softmax(scores, 2, tape);  // [B,D,T], rows sum to 1 over time
    } else {
      w = Tensor<T>::filled({1, 1, frames}, T(1) / static_cast<T>(frames));
    }
    auto mu_w = sum(mul(x, w, tape), 2, false, tape);                  // [B,D]
    auto ex2_w = sum(mul(mul(x, x, tape), w, tape), 2, false, tape);   // [B,D]
    auto var_w = clamp_min(sub(ex2_w, mul(mu_w, mu_w, tape), tape), T(1e-9), tape);
    auto sigma_w = sqrt(var_w, tape);
    return concat<T>({mu_w, sigma_w}, 1, tape);  // [B,2D]
  }

  bool uses_attention() const { return use_attention_; }

 private:
  index_t channels_;
  bool use_attention_;
  std::optional<GroupConv1d<T>> att1_, att2_;
};

// ---------------------------------------------------------------------------
// AAM + K-subcenter softmax head
// ---------------------------------------------------------------------------

template <class T>
class AamSubcenterHead {
 public:
  AamSubcenterHead(int classes, int subcenters, T margin, T scale_factor, int emb_dim, Rng& rng)
      : classes_(classes), subcenters_(subcenters), margin_(margin), scale_(scale_factor) {
    if (classes < 2 || subcenters < 1) throw config_error("head needs >= 2 classes, >= 1 subcenter");
    weight_ = Tensor<T>::randn({static_cast<index_t>(classes) * subcenters, emb_dim}, rng,
                               T(0.05));
    weight_.set_requires_grad(true);
  }

  // Per-class cosine: max over the k subcenters of cos(embedding, center).
  Tensor<T> cosine_logits(const Tensor<T>& emb, Tape<T>* tape = nullptr) const {
    const index_t B = emb.dim(0);
    auto e_n = normalize_rows(emb, tape);
    auto w_n = normalize_rows(weight_, tape);
    auto cos_all = matmul(e_n, permute(w_n, {1, 0}, tape), tape);  // [B, S*k]
    auto cos3 = reshape(cos_all, {B, classes_, subcenters_}, tape);
    return max_along(cos3, 2, false, tape);  // [B,S]
  }

  Tensor<T> loss(const Tensor<T>& emb, const std::vector<int>& labels,
                 Tape<T>* tape = nullptr) const {
    const index_t B = emb.dim(0);
    if (static_cast<index_t>(labels.size()) != B)
      throw contract_error("AamSubcenterHead: label count mismatch");
    for (int y : labels)
      if (y < 0 || y >= classes_)
        throw contract_error(strcat_msg("AamSubcenterHead: label ", y, " out of range [0,",
                                        classes_, ")"));
    auto cosv = cosine_logits(emb, tape);  // [B,S]

    // Additive angular margin on the target class, with the standard
    // cos(theta) - m*sin(m) substitution once theta+m leaves [0, pi].
    const T cos_m = std::cos(margin_);
    const T sin_m = std::sin(margin_);
    const T fallback_shift = margin_ * sin_m;
    const T threshold = std::cos(static_cast<T>(M_PI) - margin_);

    auto sin_v = sqrt(clamp_min(sub(Tensor<T>::ones({1}),
                                    mul(cosv, cosv, tape), tape), T(1e-12), tape), tape);
    auto phi = sub(scale(cosv, cos_m, tape), scale(sin_v, sin_m, tape), tape);
    auto easy = add_scalar(cosv, -fallback_shift, tape);

    // piecewise select via constant masks read off the forward values
    std::vector<T> onehot(static_cast<std::size_t>(B * classes_), T(0));
    std::vector<T> use_phi(static_cast<std::size_t>(B * classes_), T(0));
    for (index_t b = 0; b < B; ++b) {
      const index_t s = labels[static_cast<std::size_t>(b)];
      onehot[static_cast<std::size_t>(b * classes_ + s)] = T(1);
      if (cosv.at({b, s}) > threshold)
        use_phi[static_cast<std::size_t>(b * classes_ + s)] = T(1);
    }
    auto oh = Tensor<T>::from_data({B, classes_}, std::move(onehot));
    auto mp = Tensor<T>::from_data({B, classes_}, std::move(use_phi));
    auto me = sub(oh, mp, tape);  // one-hot lanes past the monotone region

    auto target_val = add(mul(mp, phi, tape), mul(me, easy, tape), tape);
    auto off_target = mul(sub(Tensor<T>::ones({1}), oh, tape), cosv, tape);
    auto logits = scale(add(off_target, target_val, tape), scale_, tape);
    return cross_entropy(logits, labels, tape);
  }

  Tensor<T>& weight() { return weight_; }
  int classes() const { return classes_; }
  int subcenters() const { return subcenters_; }

 private:
  static Tensor<T> normalize_rows(const Tensor<T>& m, Tape<T>* tape) {
    auto sq = sum(mul(m, m, tape), 1, true, tape);
    auto inv = power(clamp_min(sq, T(1e-12), tape), T(-0.5), tape);
    return mul(m, inv, tape);
  }

  index_t classes_;
  index_t subcenters_;
  T margin_, scale_;
  Tensor<T> weight_;
};

// ---------------------------------------------------------------------------
// Speaker model
// ---------------------------------------------------------------------------

template <class T>
class SpeakerModel {
 public:
  SpeakerModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto groups = cfg_.group_schedule();
    const NormKind norm = cfg_.layernorm ? NormKind::layer : NormKind::batch;
    const int n_stems = cfg_.variant == Variant::pcf ? 4 : 1;
    for (int i = 0; i < n_stems; ++i)
      stems_.emplace_back(reg_, strcat_msg("stem", i), cfg_.feat_dim, cfg_.channels,
                          groups[static_cast<std::size_t>(i)], norm, rng);

    const int total_layers = 4 * cfg_.layers_per_block;
    const double peak = cfg_.effective_drop_path_coefficient() / 10.0;
    int depth_index = 0;
    for (int b = 1; b <= 4; ++b) {
      blocks_.emplace_back();
      for (int l = 0; l < cfg_.layers_per_block; ++l, ++depth_index) {
        typename AttentionBlockLayer<T>::Spec spec;
        spec.channels = cfg_.channels;
        spec.ffn_hidden = cfg_.ffn_mult * cfg_.channels;
        spec.groups = groups[static_cast<std::size_t>(b - 1)];
        spec.is_global = cfg_.is_ga_layer(b, l);
        spec.ga_heads = cfg_.ga_heads;
        spec.na.window = cfg_.window;
        spec.na.heads = cfg_.na_heads;
        spec.na.channels = cfg_.channels;
        spec.na.padding = cfg_.na_padding ? NaPadding::padded : NaPadding::clamped;
        spec.drop_path_p =
            cfg_.use_drop_path ? peak * (depth_index + 1) / total_layers : 0.0;
        spec.norm = norm;
        blocks_.back().emplace_back(reg_, strcat_msg("block", b, ".l", l), spec, rng);
      }
    }

    const int mfa_in = cfg_.use_mfa ? 4 * cfg_.channels : cfg_.channels;
    mfa_dense_.emplace(reg_, "mfa.dense", mfa_in, cfg_.mfa_channels, 1, 1, 1, rng);
    if (cfg_.mfa_post_norm_act) mfa_norm_.emplace(reg_, "mfa.norm", cfg_.mfa_channels);
    asp_.emplace(reg_, "asp", cfg_.mfa_channels, cfg_.asp_bottleneck, cfg_.use_asp, rng);
    pre_emb_norm_.emplace(reg_, "embed.prenorm", 2 * cfg_.mfa_channels);
    emb_linear_.emplace(reg_, "embed.linear", 2 * cfg_.mfa_channels, cfg_.embedding_dim, rng);
    emb_norm_.emplace(reg_, "embed.norm", cfg_.embedding_dim);
  }

  // Four stem outputs [B,C,T/2] (PCF) or the single stem output (MFA).
  std::vector<Tensor<T>> stem_forward(const Tensor<T>& fbank, const FwdCtx<T>& ctx) const {
    check_input(fbank);
    std::vector<Tensor<T>> outs;
    for (const auto& stem : stems_) outs.push_back(stem.forward(fbank, ctx));
    return outs;
  }

  // The four block outputs.
  std::vector<Tensor<T>> backbone_forward(const Tensor<T>& fbank, const FwdCtx<T>& ctx) const {
    auto stems = stem_forward(fbank, ctx);
    std::vector<Tensor<T>> outs;
    Tensor<T> x;
    for (int b = 0; b < 4; ++b) {
      if (b == 0)
        x = stems[0];
      else if (cfg_.variant == Variant::pcf)
        x = add(stems[static_cast<std::size_t>(b)], x, ctx.tape);
      for (const auto& layer : blocks_[static_cast<std::size_t>(b)]) x = layer.forward(x, ctx);
      outs.push_back(x);
    }
    return outs;
  }

  Tensor<T> mfa_forward(const std::vector<Tensor<T>>& block_outputs, const FwdCtx<T>& ctx) const {
    Tensor<T> cat = cfg_.use_mfa ? concat(block_outputs, 1, ctx.tape) : block_outputs.back();
    auto y = mfa_dense_->forward(cat, ctx.tape);
    if (mfa_norm_) y = relu(mfa_norm_->forward(y, ctx), ctx.tape);
    return y;
  }

  Tensor<T> asp_forward(const Tensor<T>& features, const FwdCtx<T>& ctx) const {
    return asp_->forward(features, ctx);
  }

  Tensor<T> embed_head(const Tensor<T>& pooled, const FwdCtx<T>& ctx) const {
    auto y = pre_emb_norm_->forward(pooled, ctx);
    y = emb_linear_->forward(y, ctx.tape);
    return emb_norm_->forward(y, ctx);
  }

  // fbank [B,feat,T] -> embedding [B,emb_dim]
  Tensor<T> forward_embedding(const Tensor<T>& fbank, const FwdCtx<T>& ctx) const {
    auto blocks = backbone_forward(fbank, ctx);
    auto agg = mfa_forward(blocks, ctx);
    auto pooled = asp_forward(agg, ctx);
    return embed_head(pooled, ctx);
  }

  // 'N'/'G' per layer, outer index = block (1..4).
  std::vector<std::string> attention_schedule() const {
    std::vector<std::string> sched;
    for (const auto& block : blocks_) {
      std::string s;
      for (const auto& layer : block) s += layer.is_global() ? 'G' : 'N';
      sched.push_back(s);
    }
    return sched;
  }

  int ga_layer_count() const {
    int n = 0;
    for (const auto& block : blocks_)
      for (const auto& layer : block) n += layer.is_global() ? 1 : 0;
    return n;
  }

  std::vector<double> drop_path_schedule() const {
    std::vector<double> p;
    for (const auto& block : blocks_)
      for (const auto& layer : block) p.push_back(layer.spec().drop_path_p);
    return p;
  }

  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  const ModelConfig& config() const { return cfg_; }
  index_t parameter_count() const { return reg_.param_count(); }

 private:
  void check_input(const Tensor<T>& fbank) const {
    if (fbank.ndim() != 3 || fbank.dim(1) != cfg_.feat_dim)
      throw dim_error(strcat_msg("model input must be [B,", cfg_.feat_dim, ",T], got ",
                                 shape_str(fbank.shape())));
  }

  ModelConfig cfg_;
  ParamRegistry<T> reg_;
  std::vector<Downsample<T>> stems_;
  std::vector<std::vector<AttentionBlockLayer<T>>> blocks_;
  std::optional<GroupConv1d<T>> mfa_dense_;
  std::optional<BatchNorm1d<T>> mfa_norm_;
  std::optional<AspPooling<T>> asp_;
  std::optional<BatchNorm1d<T>> pre_emb_norm_;
  std::optional<Linear<T>> emb_linear_;
  std::optional<BatchNorm1d<T>> emb_norm_;
};

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

// Trainable parameters of the embedding extractor (classification head
// excluded), grouped per module.
struct ParamBreakdown {
  std::vector<std::pair<std::string, index_t>> rows;
  index_t total = 0;
};

inline ParamBreakdown count_parameters(const ModelConfig& cfg) {
  Rng rng(0);
  SpeakerModel<float> model(cfg, rng);
  ParamBreakdown out;
  std::map<std::string, index_t> by_module;
  std::vector<std::string> order;
  for (const auto& [name, t] : model.registry().params()) {
    const std::string module = name.substr(0, name.find('.'));
    if (!by_module.count(module)) order.push_back(module);
    by_module[module] += t.numel();
    out.total += t.numel();
  }
  for (const auto& m : order) out.rows.emplace_back(m, by_module[m]);
  return out;
}

inline std::string parameter_table(const ModelConfig& cfg) {
  const ParamBreakdown b = count_parameters(cfg);
  std::ostringstream os;
  os << "module            params\n";
  for (const auto& [module, n] : b.rows)
    os << std::left << std::setw(16) << module << ' ' << std::right << std::setw(10) << n << '\n';
  os << std::left << std::setw(16) << "total" << ' ' << std::right << std::setw(10) << b.total
     << "  (" << std::fixed << std::setprecision(2) << static_cast<double>(b.total) / 1e6
     << "M)\n";
  return os.str();
}

}  // namespace pcfnat
