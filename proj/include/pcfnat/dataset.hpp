#pragma once

// Synthetic speaker corpus: each speaker owns a random spectral envelope;
// utterances are that envelope under slow temporal modulation plus noise.
// Everything derives from (seed, speaker, utterance), so any item is
// reproducible in isolation and bit-identical across runs.

#include <cmath>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/rng.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

struct DatasetConfig {
  int num_speakers = 32;
  int utterances_per_speaker = 10;
  int feat_dim = 80;
  double min_seconds = 3.0;
  double max_seconds = 5.0;
  double frames_per_second = 100.0;  // matches the 10 ms feature shift
  double signature_scale = 1.0;
  double noise_level = 0.3;
  std::uint64_t seed = 1234;

  void validate() const {
    if (num_speakers < 1 || utterances_per_speaker < 1)
      throw config_error("dataset: need at least one speaker and one utterance");
    if (min_seconds <= 0 || max_seconds < min_seconds)
      throw config_error("dataset: invalid duration range");
  }
};

class SyntheticSpeakerDataset {
 public:
  explicit SyntheticSpeakerDataset(const DatasetConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  int num_speakers() const { return cfg_.num_speakers; }
  int utterances_per_speaker() const { return cfg_.utterances_per_speaker; }
  int size() const { return cfg_.num_speakers * cfg_.utterances_per_speaker; }
  const DatasetConfig& config() const { return cfg_; }

  // Smooth per-speaker envelope over the feature bins.
  std::vector<double> signature(int speaker) const {
    Rng rng(Rng::mix(cfg_.seed, 0x5157 + static_cast<std::uint64_t>(speaker)));
    std::vector<double> sig(static_cast<std::size_t>(cfg_.feat_dim));
    double walk = rng.normal();
    for (int c = 0; c < cfg_.feat_dim; ++c) {
      walk = 0.7 * walk + 0.5 * rng.normal();
      sig[static_cast<std::size_t>(c)] = walk;
    }
    // unit RMS so signature_scale sets the signal level
    double ms = 0;
    for (double v : sig) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / cfg_.feat_dim + 1e-12);
    for (double& v : sig) v *= inv;
    return sig;
  }

  double duration_seconds(int speaker, int utterance) const {
    Rng rng(item_seed(speaker, utterance));
    return cfg_.min_seconds + (cfg_.max_seconds - cfg_.min_seconds) * rng.uniform();
  }

  index_t frames_of(int speaker, int utterance) const {
    return static_cast<index_t>(duration_seconds(speaker, utterance) * cfg_.frames_per_second);
  }

  // [feat_dim, T] pseudo-fbank features.
  Tensor<float> features(int speaker, int utterance) const {
    check_index(speaker, utterance);
    Rng rng(item_seed(speaker, utterance));
    const double dur = cfg_.min_seconds + (cfg_.max_seconds - cfg_.min_seconds) * rng.uniform();
    const index_t frames = static_cast<index_t>(dur * cfg_.frames_per_second);
    const auto sig = signature(speaker);

    const double period = 40.0 + 40.0 * rng.uniform();  // frames per modulation cycle
    const double phase = rng.uniform();
    const double gain = 0.8 + 0.4 * rng.uniform();
    Tensor<float> out = Tensor<float>::uninitialized({cfg_.feat_dim, frames});
    float* p = out.data().data();
    for (int c = 0; c < cfg_.feat_dim; ++c) {
      const double sc = cfg_.signature_scale * gain * sig[static_cast<std::size_t>(c)];
      for (index_t t = 0; t < frames; ++t) {
        const double mod = 1.0 + 0.25 * std::sin(2.0 * 3.14159265358979 *
                                                 (t / period + phase + 0.03 * c));
        p[c * frames + t] = static_cast<float>(sc * mod + cfg_.noise_level * rng.normal());
      }
    }
    return out;
  }

 private:
  std::uint64_t item_seed(int speaker, int utterance) const {
    return Rng::mix(Rng::mix(cfg_.seed, static_cast<std::uint64_t>(speaker) + 1),
                    static_cast<std::uint64_t>(utterance) + 1);
  }
  void check_index(int speaker, int utterance) const {
    if (speaker < 0 || speaker >= cfg_.num_speakers || utterance < 0 ||
        utterance >= cfg_.utterances_per_speaker)
      throw contract_error(strcat_msg("dataset index out of range: speaker ", speaker,
                                      " utterance ", utterance));
  }

  DatasetConfig cfg_;
};

}  // namespace pcfnat
