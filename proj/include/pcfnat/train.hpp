#pragma once

// Training loop: SGD with momentum and weight decay, linear warmup to the
// peak rate across epoch 1 followed by cosine annealing back to the initial
// rate, fixed-length 3-second crops, deterministic under a fixed seed.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "pcfnat/checkpoint.hpp"
#include "pcfnat/dataset.hpp"
#include "pcfnat/io_formats.hpp"
#include "pcfnat/model.hpp"

namespace pcfnat {

struct TrainConfig {
  int batch_size = 64;
  int epochs = 10;
  int max_steps = 0;  // 0 = run the full epoch schedule
  double lr_init = 1e-4;
  double lr_peak = 0.5;
  int warmup_epochs = 1;
  int cosine_epochs = 9;
  double weight_decay = 1e-5;
  double momentum = 0.9;
  double crop_seconds = 3.0;
  int subcenters = 3;
  double margin = 0.2;
  double loss_scale = 32.0;
  std::uint64_t seed = 1234;
  int log_every = 10;

  void validate() const {
    if (!(lr_peak > lr_init && lr_init > 0))
      throw config_error("train: need lr_peak > lr_init > 0");
    if (batch_size < 2) throw config_error("train: batch_size must be >= 2");
    if (warmup_epochs < 1 || cosine_epochs < 1 || epochs < 1)
      throw config_error("train: epoch counts must be positive");
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"batch_size", "epochs", "max_steps", "lr_init", "lr_peak", "warmup_epochs",
                 "cosine_epochs", "weight_decay", "momentum", "crop_seconds", "subcenters",
                 "margin", "loss_scale", "seed", "log_every"},
             "train");
  TrainConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("batch_size", cfg.batch_size);
  get("epochs", cfg.epochs);
  get("max_steps", cfg.max_steps);
  get("lr_init", cfg.lr_init);
  get("lr_peak", cfg.lr_peak);
  get("warmup_epochs", cfg.warmup_epochs);
  get("cosine_epochs", cfg.cosine_epochs);
  get("weight_decay", cfg.weight_decay);
  get("momentum", cfg.momentum);
  get("crop_seconds", cfg.crop_seconds);
  get("subcenters", cfg.subcenters);
  get("margin", cfg.margin);
  get("loss_scale", cfg.loss_scale);
  get("seed", cfg.seed);
  get("log_every", cfg.log_every);
  cfg.validate();
  return cfg;
}

// Linear warmup from lr_init to lr_peak across the warmup epochs (the peak
// lands on the first step after epoch 1 ends), then cosine annealing back
// to lr_init across the following cosine epochs, constant afterwards.
inline double lr_schedule(long step, long steps_per_epoch, const TrainConfig& cfg) {
  if (step < 0) throw contract_error("lr_schedule: negative step");
  const long warm = cfg.warmup_epochs * steps_per_epoch;
  const long cosine = cfg.cosine_epochs * steps_per_epoch;
  if (step <= warm) {
    if (warm == 0) return cfg.lr_peak;
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * static_cast<double>(step) /
                             static_cast<double>(warm);
  }
  const long s = step - warm;
  if (s >= cosine) return cfg.lr_init;
  const double progress = static_cast<double>(s) / static_cast<double>(cosine);
  return cfg.lr_init +
         0.5 * (cfg.lr_peak - cfg.lr_init) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// SGD with momentum and (coupled) weight decay
// ---------------------------------------------------------------------------

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<std::pair<std::string, Tensor<float>>> params, double momentum,
               double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto& [name, p] : params_)
      velocity_.emplace_back(name + ".velocity",
                             Tensor<float>::zeros(p.shape()));
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i].second.data();
      auto g = params_[i].second.grad();
      auto v = velocity_[i].second.data();
      const float mom = static_cast<float>(momentum_);
      const float wd = static_cast<float>(weight_decay_);
      const float lrf = static_cast<float>(lr);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const float grad = g[k] + wd * p[k];
        v[k] = mom * v[k] + grad;
        p[k] -= lrf * v[k];
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  const std::vector<std::pair<std::string, Tensor<float>>>& state() const { return velocity_; }
  std::vector<std::pair<std::string, Tensor<float>>>& state() { return velocity_; }

 private:
  std::vector<std::pair<std::string, Tensor<float>>> params_;
  std::vector<std::pair<std::string, Tensor<float>>> velocity_;
  double momentum_, weight_decay_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  long steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
};

// Assembles a [B, feat, crop] batch of fixed-length crops; utterances
// shorter than the crop are tiled.
inline Tensor<float> crop_batch(const SyntheticSpeakerDataset& data,
                                const std::vector<std::pair<int, int>>& items, index_t crop,
                                Rng& rng) {
  const int feat = data.config().feat_dim;
  Tensor<float> batch = Tensor<float>::uninitialized(
      {static_cast<index_t>(items.size()), feat, crop});
  float* dst = batch.data().data();
  for (std::size_t b = 0; b < items.size(); ++b) {
    auto feats = data.features(items[b].first, items[b].second);
    const index_t frames = feats.dim(1);
    const index_t start =
        frames > crop ? static_cast<index_t>(rng.uniform_index(
                            static_cast<std::uint64_t>(frames - crop + 1)))
                      : 0;
    const float* src = feats.data().data();
    for (int c = 0; c < feat; ++c)
      for (index_t t = 0; t < crop; ++t)
        dst[(static_cast<index_t>(b) * feat + c) * crop + t] =
            src[c * frames + (start + t) % frames];
  }
  return batch;
}

inline TrainResult train(SpeakerModel<float>& model, AamSubcenterHead<float>& head,
                         const SyntheticSpeakerDataset& data, const TrainConfig& cfg,
                         std::ostream* log_stream = nullptr, Rng* rng_io = nullptr,
                         SgdOptimizer* opt_io = nullptr) {
  cfg.validate();
  const long steps_per_epoch = std::max<long>(1, data.size() / cfg.batch_size);
  const long total_steps =
      cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * cfg.epochs;
  const index_t crop =
      static_cast<index_t>(cfg.crop_seconds * data.config().frames_per_second);

  Rng local_rng(cfg.seed);
  Rng& rng = rng_io ? *rng_io : local_rng;

  auto trainables = model.registry().params();
  trainables.emplace_back("head.weight", head.weight());
  SgdOptimizer local_opt(trainables, cfg.momentum, cfg.weight_decay);
  SgdOptimizer& opt = opt_io ? *opt_io : local_opt;

  TrainResult result;
  for (long step = 0; step < total_steps; ++step) {
    std::vector<std::pair<int, int>> items;
    std::vector<int> labels;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int spk = static_cast<int>(rng.uniform_index(data.num_speakers()));
      const int utt = static_cast<int>(rng.uniform_index(data.utterances_per_speaker()));
      items.emplace_back(spk, utt);
      labels.push_back(spk);
    }
    auto batch = crop_batch(data, items, crop, rng);

    Tape<float> tape;
    FwdCtx<float> ctx{&tape, true, &rng};
    auto emb = model.forward_embedding(batch, ctx);
    auto loss = head.loss(emb, labels, &tape);
    const double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v))
      throw std::runtime_error(strcat_msg("training diverged: loss ", loss_v, " at step ", step,
                                          " (lr ", lr_schedule(step, steps_per_epoch, cfg), ")"));
    opt.zero_grad();
    tape.backward(loss);
    const double lr = lr_schedule(step, steps_per_epoch, cfg);
    opt.step(lr);

    if (step == 0) result.first_loss = loss_v;
    result.final_loss = loss_v;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == total_steps - 1)) {
      result.log.push_back({step, lr, loss_v});
      if (log_stream)
        (*log_stream) << "step " << step << " lr " << lr << " loss " << loss_v << "\n";
    }
  }
  result.steps = total_steps;
  return result;
}

}  // namespace pcfnat
