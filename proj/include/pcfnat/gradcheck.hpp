#pragma once

// Central finite-difference verification of every differentiable component,
// run in double precision. Backs the `gradcheck` CLI command; the unit
// tests carry their own copy of the difference machinery so this one is not
// self-certifying.

#include <functional>
#include <string>
#include <vector>

#include "pcfnat/model.hpp"

namespace pcfnat {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  long coords = 0;
  bool passed = false;
};

namespace gradcheck_detail {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

inline GradCheckCase check(const std::string& name,
                           std::vector<Tensor<double>> params,
                           const std::function<Tensor<double>(Tape<double>*)>& make_loss,
                           double tolerance, long coords_per_param, Rng& rng) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape<double> tape;
  auto loss = make_loss(&tape);
  tape.backward(loss);

  GradCheckCase result;
  result.name = name;
  result.tolerance = tolerance;
  const double h = 1e-5;
  for (auto& p : params) {
    const index_t n = p.numel();
    std::vector<index_t> coords;
    if (coords_per_param < 0 || coords_per_param >= n)
      for (index_t i = 0; i < n; ++i) coords.push_back(i);
    else
      for (long i = 0; i < coords_per_param; ++i)
        coords.push_back(static_cast<index_t>(rng.uniform_index(static_cast<std::uint64_t>(n))));
    for (index_t ci : coords) {
      double* x = &p.data()[static_cast<std::size_t>(ci)];
      const double orig = *x;
      *x = orig + h;
      const double fp = make_loss(nullptr).item();
      *x = orig - h;
      const double fm = make_loss(nullptr).item();
      *x = orig;
      const double fd = (fp - fm) / (2.0 * h);
      result.max_rel_err =
          std::max(result.max_rel_err, rel_err(p.grad()[static_cast<std::size_t>(ci)], fd));
      ++result.coords;
    }
  }
  result.passed = result.max_rel_err < tolerance;
  return result;
}

}  // namespace gradcheck_detail

// The full suite: NA (naive and blocked), global attention, grouped conv,
// batch norm, ASP, the AAM-subcenter loss, and a miniature end-to-end model.
inline std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed = 7) {
  using gradcheck_detail::check;
  std::vector<GradCheckCase> cases;
  Rng rng(seed);

  {
    NaConfig cfg;
    cfg.window = 5;
    cfg.heads = 2;
    cfg.channels = 8;
    auto q = Tensor<double>::randn({2, 11, 4}, rng);
    auto k = Tensor<double>::randn({2, 11, 4}, rng);
    auto v = Tensor<double>::randn({2, 11, 4}, rng);
    auto w = Tensor<double>::randn({2, 11, 4}, rng);
    for (auto impl : {NaImpl::naive, NaImpl::blocked}) {
      cases.push_back(check(
          impl == NaImpl::naive ? "na_naive" : "na_blocked", {q, k, v},
          [&, impl](Tape<double>* tape) {
            auto res = neighborhood_attention(q, k, v, cfg, impl, TileShape{}, tape);
            return sum_all(mul(res.out, w, tape), tape);
          },
          1e-4, -1, rng));
    }
    NaConfig clamped = cfg;
    clamped.padding = NaPadding::clamped;
    cases.push_back(check(
        "na_clamped", {q, k, v},
        [&](Tape<double>* tape) {
          auto res = neighborhood_attention(q, k, v, clamped, NaImpl::naive, TileShape{}, tape);
          return sum_all(mul(res.out, w, tape), tape);
        },
        1e-4, -1, rng));
  }
  {
    ParamRegistry<double> reg;
    GlobalAttention<double> ga(reg, "ga", 8, 2, 2, rng);
    auto x = Tensor<double>::randn({2, 8, 7}, rng);
    auto w = Tensor<double>::randn({2, 8, 7}, rng);
    std::vector<Tensor<double>> params = {x};
    for (auto& [name, p] : reg.params()) params.push_back(p);
    cases.push_back(check(
        "global_attention", params,
        [&](Tape<double>* tape) {
          return sum_all(mul(ga.forward(x, tape), w, tape), tape);
        },
        1e-4, -1, rng));
  }
  {
    ParamRegistry<double> reg;
    GroupConv1d<double> conv(reg, "conv", 6, 4, 2, 2, 2, rng);
    auto x = Tensor<double>::randn({2, 6, 9}, rng);
    cases.push_back(check(
        "grouped_conv", {x, conv.weight(), conv.bias()},
        [&](Tape<double>* tape) {
          auto y = conv.forward(x, tape);
          return sum_all(mul(y, y, tape), tape);
        },
        1e-4, -1, rng));
  }
  {
    ParamRegistry<double> reg;
    BatchNorm1d<double> bn(reg, "bn", 4);
    auto x = Tensor<double>::randn({3, 4, 6}, rng);
    auto w = Tensor<double>::randn({3, 4, 6}, rng);
    cases.push_back(check(
        "batch_norm", {x, bn.gamma(), bn.beta()},
        [&](Tape<double>* tape) {
          FwdCtx<double> ctx{tape, true, nullptr};
          return sum_all(mul(bn.forward(x, ctx), w, tape), tape);
        },
        1e-4, -1, rng));
  }
  {
    ParamRegistry<double> reg;
    AspPooling<double> asp(reg, "asp", 5, 4, true, rng);
    auto x = Tensor<double>::randn({2, 5, 9}, rng);
    auto w = Tensor<double>::randn({2, 10}, rng);
    std::vector<Tensor<double>> params = {x};
    for (auto& [name, p] : reg.params()) params.push_back(p);
    cases.push_back(check(
        "asp_pooling", params,
        [&](Tape<double>* tape) {
          FwdCtx<double> ctx{tape, false, nullptr};
          return sum_all(mul(asp.forward(x, ctx), w, tape), tape);
        },
        1e-4, -1, rng));
  }
  {
    AamSubcenterHead<double> head(4, 3, 0.2, 32.0, 5, rng);
    auto emb = Tensor<double>::randn({3, 5}, rng);
    std::vector<int> labels = {1, 0, 3};
    cases.push_back(check(
        "aam_subcenter_loss", {emb, head.weight()},
        [&](Tape<double>* tape) { return head.loss(emb, labels, tape); },
        1e-4, -1, rng));
  }
  {
    // miniature end-to-end model: C=16, L=1, W=3, H=2, T=20
    ModelConfig cfg;
    cfg.variant = Variant::pcf;
    cfg.layers_per_block = 1;
    cfg.channels = 16;
    cfg.na_heads = 2;
    cfg.ga_heads = 2;
    cfg.window = 3;
    cfg.mfa_channels = 24;
    cfg.embedding_dim = 12;
    cfg.feat_dim = 8;
    cfg.ffn_mult = 2;
    cfg.asp_bottleneck = 8;
    cfg.use_drop_path = false;
    SpeakerModel<double> model(cfg, rng);
    AamSubcenterHead<double> head(3, 2, 0.2, 32.0, cfg.embedding_dim, rng);
    auto x = Tensor<double>::randn({2, 8, 20}, rng);
    std::vector<int> labels = {0, 2};
    std::vector<Tensor<double>> params = {x, head.weight()};
    for (auto& [name, p] : model.registry().params()) params.push_back(p);
    cases.push_back(check(
        "full_model", params,
        [&](Tape<double>* tape) {
          FwdCtx<double> ctx{tape, true, nullptr};
          auto emb = model.forward_embedding(x, ctx);
          return head.loss(emb, labels, tape);
        },
        1e-3, 5, rng));
  }
  return cases;
}

}  // namespace pcfnat
