#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pcfnat/model.hpp"
#include "testutil.hpp"

using namespace pcfnat;
using testutil::grad_check;
using testutil::max_abs_diff;

namespace {

ModelConfig mini_config(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
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
  return cfg;
}

template <class T>
FwdCtx<T> eval_ctx() {
  return FwdCtx<T>{nullptr, false, nullptr};
}

}  // namespace

TEST_CASE("PCF stems: shapes and parameter counts") {
  ModelConfig cfg;  // defaults = PCF-NAT 3x4
  Rng rng(1);
  SpeakerModel<float> model(cfg, rng);
  auto x = Tensor<float>::randn({1, 80, 300}, rng);
  auto stems = model.stem_forward(x, eval_ctx<float>());
  REQUIRE(stems.size() == 4);
  for (auto& s : stems) {
    CHECK(s.dim(1) == 256);
    CHECK(s.dim(2) == 150);
  }
  // conv weight counts per group count g: 256*(80/g)*2
  const index_t expect[4] = {5376, 10496, 20736, 41216};
  for (int i = 0; i < 4; ++i) {
    const auto& reg = model.registry();
    index_t conv_params = 0;
    for (const auto& [name, t] : reg.params())
      if (name.rfind(strcat_msg("stem", i, ".conv"), 0) == 0) conv_params += t.numel();
    CHECK(conv_params == expect[i]);
  }
}

TEST_CASE("backbone structure: MFA is sequential, PCF keeps stem signal") {
  Rng rng(2);
  auto x = Tensor<float>::randn({1, 8, 40}, rng);

  // MFA: zeroing block-1 parameters changes block-4 output
  {
    SpeakerModel<float> model(mini_config(Variant::mfa), rng);
    auto base = model.backbone_forward(x, eval_ctx<float>());
    for (auto& [name, t] : model.registry().params())
      if (name.rfind("block1.", 0) == 0)
        std::fill(t.data().begin(), t.data().end(), 0.0f);
    auto zeroed = model.backbone_forward(x, eval_ctx<float>());
    CHECK(max_abs_diff(base[3], zeroed[3]) > 1e-6);
  }
  // PCF: with block-1 output forced dead, block 2 still receives its own stem
  {
    SpeakerModel<float> model(mini_config(Variant::pcf), rng);
    for (auto& [name, t] : model.registry().params())
      if (name.rfind("block1.", 0) == 0 || name.rfind("stem0.", 0) == 0)
        std::fill(t.data().begin(), t.data().end(), 0.0f);
    auto outs = model.backbone_forward(x, eval_ctx<float>());
    double mag = 0;
    for (float v : outs[1].data()) mag = std::max(mag, std::abs(static_cast<double>(v)));
    CHECK(mag > 1e-6);
  }
}

TEST_CASE("backbone shapes and eval determinism") {
  Rng rng(3);
  SpeakerModel<float> model(mini_config(Variant::pcf), rng);
  auto x = Tensor<float>::randn({2, 8, 60}, rng);
  auto outs = model.backbone_forward(x, eval_ctx<float>());
  for (auto& o : outs) {
    CHECK(o.dim(1) == 16);
    CHECK(o.dim(2) == 30);
  }
  auto outs2 = model.backbone_forward(x, eval_ctx<float>());
  CHECK(max_abs_diff(outs[3], outs2[3]) == 0.0);
}

TEST_CASE("MFA aggregation: shape, parameter count, order sensitivity") {
  Rng rng(4);
  ModelConfig cfg;  // full-size PCF
  SpeakerModel<float> model(cfg, rng);
  index_t dense_params = 0;
  for (const auto& [name, t] : model.registry().params())
    if (name.rfind("mfa.dense", 0) == 0) dense_params += t.numel();
  CHECK(dense_params == 1024 * 1536 + 1536);

  SpeakerModel<float> mini(mini_config(Variant::mfa), rng);
  auto x = Tensor<float>::randn({1, 8, 20}, rng);
  auto blocks = mini.backbone_forward(x, eval_ctx<float>());
  auto y1 = mini.mfa_forward(blocks, eval_ctx<float>());
  CHECK(y1.dim(1) == 24);
  CHECK(y1.dim(2) == 10);
  std::swap(blocks[0], blocks[2]);
  auto y2 = mini.mfa_forward(blocks, eval_ctx<float>());
  CHECK(max_abs_diff(y1, y2) > 1e-6);  // concat is order-sensitive
}

TEST_CASE("ASP: degenerate constant input and single frame") {
  Rng rng(5);
  ParamRegistry<float> reg;
  AspPooling<float> asp(reg, "asp", 6, 4, true, rng);
  auto ctx = eval_ctx<float>();

  std::vector<float> data;
  for (index_t c = 0; c < 6; ++c)
    for (index_t t = 0; t < 9; ++t) data.push_back(static_cast<float>(c) - 2.5f);
  auto x = Tensor<float>::from_data({1, 6, 9}, data);
  auto y = asp.forward(x, ctx);
  REQUIRE(y.shape() == std::vector<index_t>{1, 12});
  for (index_t c = 0; c < 6; ++c) {
    CHECK_THAT(y.at({0, c}), Catch::Matchers::WithinAbs(static_cast<double>(c) - 2.5, 1e-5));
    CHECK(y.at({0, 6 + c}) >= 0.0f);
    CHECK(y.at({0, 6 + c}) < 1e-3f);
  }

  auto one_frame = Tensor<float>::randn({1, 6, 1}, rng);
  auto y1 = asp.forward(one_frame, ctx);
  for (index_t c = 0; c < 6; ++c) {
    CHECK_THAT(y1.at({0, c}), Catch::Matchers::WithinAbs(one_frame.at({0, c, 0}), 1e-5));
    CHECK(y1.at({0, 6 + c}) < 1e-3f);
  }
}

TEST_CASE("ASP: time-permutation invariance") {
  Rng rng(6);
  ParamRegistry<float> reg;
  AspPooling<float> asp(reg, "asp", 5, 4, true, rng);
  auto x = Tensor<float>::randn({2, 5, 11}, rng);
  auto y = asp.forward(x, eval_ctx<float>());

  // shuffle frames with a fixed permutation
  std::vector<index_t> perm = {4, 9, 1, 7, 0, 10, 3, 6, 2, 8, 5};
  auto xs = Tensor<float>::uninitialized(x.shape());
  for (index_t b = 0; b < 2; ++b)
    for (index_t c = 0; c < 5; ++c)
      for (index_t t = 0; t < 11; ++t)
        xs.data()[static_cast<std::size_t>((b * 5 + c) * 11 + t)] =
            x.at({b, c, perm[static_cast<std::size_t>(t)]});
  auto ys = asp.forward(xs, eval_ctx<float>());
  CHECK(max_abs_diff(y, ys) < 1e-6);
}

TEST_CASE("ASP attention weights sum to one over time") {
  Rng rng(7);
  ParamRegistry<float> reg;
  AspPooling<float> asp(reg, "asp", 4, 4, true, rng);
  // probe via uniform value trick: weighted mean of all-ones input is 1
  auto x = Tensor<float>::ones({1, 4, 13});
  auto y = asp.forward(x, eval_ctx<float>());
  for (index_t c = 0; c < 4; ++c)
    CHECK_THAT(y.at({0, c}), Catch::Matchers::WithinAbs(1.0, 1e-6));
}

TEST_CASE("embedding head: shape, parameter count, determinism") {
  Rng rng(8);
  ModelConfig cfg;
  SpeakerModel<float> model(cfg, rng);
  index_t linear_params = 0;
  for (const auto& [name, t] : model.registry().params())
    if (name.rfind("embed.linear", 0) == 0) linear_params += t.numel();
  CHECK(linear_params == 3072 * 192 + 192);

  SpeakerModel<float> mini(mini_config(Variant::pcf), rng);
  auto pooled = Tensor<float>::randn({3, 48}, rng);
  auto e1 = mini.embed_head(pooled, eval_ctx<float>());
  REQUIRE(e1.shape() == std::vector<index_t>{3, 12});
  auto e2 = mini.embed_head(pooled, eval_ctx<float>());
  CHECK(max_abs_diff(e1, e2) == 0.0);
}

TEST_CASE("embedding extraction is independent of batch composition") {
  Rng rng(9);
  SpeakerModel<float> model(mini_config(Variant::pcf), rng);
  auto a = Tensor<float>::randn({1, 8, 40}, rng);
  auto b = Tensor<float>::randn({1, 8, 40}, rng);
  auto both = concat<float>({a, b}, 0);
  auto e_pair = model.forward_embedding(both, eval_ctx<float>());
  auto e_a = model.forward_embedding(a, eval_ctx<float>());
  for (index_t j = 0; j < 12; ++j)
    CHECK_THAT(e_pair.at({0, j}), Catch::Matchers::WithinAbs(e_a.at({0, j}), 1e-5));
}

TEST_CASE("AAM head: zero margin single subcenter reduces to softmax CE") {
  Rng rng(10);
  AamSubcenterHead<double> head(4, 1, 0.0, 32.0, 6, rng);
  auto emb = Tensor<double>::randn({3, 6}, rng);
  std::vector<int> labels = {0, 2, 3};
  const double loss = head.loss(emb, labels).item();

  // direct: scaled cosine logits into cross-entropy
  auto cosv = head.cosine_logits(emb);
  double expect = 0;
  for (index_t b = 0; b < 3; ++b) {
    double mx = -1e30, denom = 0;
    for (index_t s = 0; s < 4; ++s) mx = std::max(mx, 32.0 * cosv.at({b, s}));
    for (index_t s = 0; s < 4; ++s) denom += std::exp(32.0 * cosv.at({b, s}) - mx);
    expect -= 32.0 * cosv.at({b, labels[static_cast<std::size_t>(b)]}) - mx - std::log(denom);
  }
  expect /= 3.0;
  CHECK_THAT(loss, Catch::Matchers::WithinAbs(expect, 1e-10));
}

TEST_CASE("AAM head: margin penalizes the target class") {
  Rng rng(11);
  AamSubcenterHead<double> plain(4, 1, 0.0, 32.0, 6, rng);
  Rng rng2(11);
  AamSubcenterHead<double> margined(4, 1, 0.2, 32.0, 6, rng2);
  auto emb = Tensor<double>::randn({5, 6}, rng);
  std::vector<int> labels = {0, 1, 2, 3, 0};
  CHECK(margined.loss(emb, labels).item() > plain.loss(emb, labels).item());
  CHECK_THROWS_AS(plain.loss(emb, std::vector<int>{0, 1, 2, 3, 9}), contract_error);
}

TEST_CASE("AAM head: loss decreases on a separable synthetic set") {
  Rng rng(12);
  const int S = 8, E = 16, per_class = 2;
  AamSubcenterHead<double> head(S, 3, 0.2, 32.0, E, rng);
  std::vector<double> data;
  std::vector<int> labels;
  for (int s = 0; s < S; ++s) {
    for (int i = 0; i < per_class; ++i) {
      for (int e = 0; e < E; ++e) {
        const double base = (e == 2 * s || e == 2 * s + 1) ? 1.0 : 0.0;
        data.push_back(base + 0.05 * rng.normal());
      }
      labels.push_back(s);
    }
  }
  auto emb = Tensor<double>::from_data({S * per_class, E}, data);
  double prev = 1e30;
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    head.weight().zero_grad();
    Tape<double> tape;
    auto loss = head.loss(emb, labels, &tape);
    tape.backward(loss);
    const double lv = loss.item();
    if (step == 0) first = lv;
    last = lv;
    CHECK(lv <= prev + 1e-6);  // monotone under small-step descent
    prev = lv;
    auto w = head.weight().data();
    auto g = head.weight().grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.01 * g[i];
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("AAM head gradient vs finite differences (B=3, S=4, k=3)") {
  Rng rng(13);
  AamSubcenterHead<double> head(4, 3, 0.2, 32.0, 5, rng);
  auto emb = Tensor<double>::randn({3, 5}, rng);
  std::vector<int> labels = {1, 0, 3};
  auto rep = grad_check({emb, head.weight()}, [&](Tape<double>* tape) {
    return head.loss(emb, labels, tape);
  });
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("parameter counts reproduce the published sizes within 5%") {
  struct Row {
    Variant v;
    int layers;
    double published_m;
  };
  const Row rows[] = {{Variant::mfa, 3, 12.6}, {Variant::mfa, 6, 22.1},
                      {Variant::pcf, 3, 7.6}, {Variant::pcf, 6, 12.0}};
  index_t mfa3 = 0, pcf3 = 0;
  for (const auto& row : rows) {
    ModelConfig cfg;
    cfg.variant = row.v;
    cfg.layers_per_block = row.layers;
    const auto breakdown = count_parameters(cfg);
    const double count_m = static_cast<double>(breakdown.total) / 1e6;
    INFO(variant_name(row.v) << " " << row.layers << "x4: " << breakdown.total);
    CHECK(std::abs(count_m - row.published_m) / row.published_m < 0.05);
    if (row.v == Variant::mfa && row.layers == 3) mfa3 = breakdown.total;
    if (row.v == Variant::pcf && row.layers == 3) pcf3 = breakdown.total;

    // self-consistency: breakdown rows sum to the total
    index_t sum = 0;
    for (const auto& [module, n] : breakdown.rows) sum += n;
    CHECK(sum == breakdown.total);
  }
  CHECK(pcf3 < mfa3);  // grouped projections strictly cheaper at equal depth
}

TEST_CASE("attention schedule per variant and ablations") {
  {
    ModelConfig cfg = mini_config(Variant::mfa);
    cfg.layers_per_block = 3;
    Rng rng(14);
    SpeakerModel<float> m(cfg, rng);
    auto sched = m.attention_schedule();
    CHECK(sched == std::vector<std::string>{"NNN", "NNG", "NNN", "NNG"});
    CHECK(m.ga_layer_count() == 2);
  }
  {
    ModelConfig cfg = mini_config(Variant::pcf);
    cfg.layers_per_block = 3;
    Rng rng(15);
    SpeakerModel<float> m(cfg, rng);
    CHECK(m.attention_schedule() == std::vector<std::string>{"NNG", "NNN", "NNG", "NNN"});
    CHECK(m.ga_layer_count() == 2);
  }
  {
    ModelConfig cfg = mini_config(Variant::mfa);
    cfg.four_gas = true;
    Rng rng(16);
    SpeakerModel<float> m(cfg, rng);
    CHECK(m.ga_layer_count() == 4);
  }
  {
    ModelConfig cfg = mini_config(Variant::mfa);
    cfg.use_ga = false;
    Rng rng(17);
    SpeakerModel<float> m(cfg, rng);
    CHECK(m.ga_layer_count() == 0);
  }
}

TEST_CASE("drop path schedule scales with depth from the coefficient") {
  ModelConfig cfg = mini_config(Variant::pcf);
  cfg.layers_per_block = 2;
  cfg.use_drop_path = true;
  cfg.drop_path_coefficient = 1.2;
  Rng rng(18);
  SpeakerModel<float> m(cfg, rng);
  auto p = m.drop_path_schedule();
  REQUIRE(p.size() == 8);
  CHECK_THAT(p.back(), Catch::Matchers::WithinAbs(0.12, 1e-12));  // peak = c/10
  for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] > p[i - 1]);
  CHECK_THAT(p[0], Catch::Matchers::WithinAbs(0.12 / 8, 1e-12));
}

TEST_CASE("default drop path coefficients by variant and depth") {
  ModelConfig cfg;
  cfg.variant = Variant::pcf;
  for (int L = 3; L <= 6; ++L) {
    cfg.layers_per_block = L;
    CHECK_THAT(cfg.effective_drop_path_coefficient(),
               Catch::Matchers::WithinAbs(1.0 + 0.1 * (L - 3), 1e-12));
  }
  cfg.variant = Variant::mfa;
  for (int L = 3; L <= 6; ++L) {
    cfg.layers_per_block = L;
    CHECK(cfg.effective_drop_path_coefficient() == 1.0);
  }
}

TEST_CASE("group schedule: MFA uses ungrouped projections") {
  ModelConfig cfg;
  cfg.variant = Variant::mfa;
  CHECK(cfg.group_schedule() == std::array<int, 4>{1, 1, 1, 1});
  cfg.variant = Variant::pcf;
  CHECK(cfg.group_schedule() == std::array<int, 4>{8, 4, 2, 1});
}
