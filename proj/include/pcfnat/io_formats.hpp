#pragma once

// File formats:
//   feature matrix  binary: u32 rows, u32 cols, row-major little-endian f32
//   embeddings      text:   "<id> v1 v2 ... vN" per line
//   trial list      text:   "<label 0|1> <enroll_id> <test_id>" per line
//   score file      text:   "<enroll_id> <test_id> <raw> <normalized>" per line
//   config          JSON, strict keys (unknown keys are rejected)

#include <bit>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcfnat/common.hpp"
#include "pcfnat/dataset.hpp"
#include "pcfnat/fbank.hpp"
#include "pcfnat/model.hpp"
#include "pcfnat/scoring.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

// ---------------------------------------------------------------------------
// Feature matrices
// ---------------------------------------------------------------------------

inline void write_feature_file(const std::string& path, const Tensor<float>& feats) {
  if (feats.ndim() != 2) throw dim_error("write_feature_file: features must be 2-D");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw parse_error("cannot write feature file: " + path);
  const std::uint32_t rows = static_cast<std::uint32_t>(feats.dim(0));
  const std::uint32_t cols = static_cast<std::uint32_t>(feats.dim(1));
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  out.write(reinterpret_cast<const char*>(feats.data().data()),
            static_cast<std::streamsize>(feats.numel() * sizeof(float)));
}

inline Tensor<float> read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open feature file: " + path);
  std::uint32_t rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  if (!in || rows == 0 || cols == 0)
    throw parse_error(path + ": malformed feature header");
  std::vector<float> data(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw parse_error(path + ": truncated feature data");
  return Tensor<float>::from_data({static_cast<index_t>(rows), static_cast<index_t>(cols)},
                                  std::move(data));
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

inline void write_embeddings(const std::string& path,
                             const std::vector<std::pair<std::string, std::vector<double>>>& embs) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot write embedding file: " + path);
  out << std::setprecision(10);
  for (const auto& [id, vec] : embs) {
    out << id;
    for (double v : vec) out << ' ' << v;
    out << '\n';
  }
}

inline std::map<std::string, std::vector<double>> read_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open embedding file: " + path);
  std::map<std::string, std::vector<double>> embs;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    ls >> id;
    std::vector<double> vec;
    double v;
    while (ls >> v) vec.push_back(v);
    if (!ls.eof()) throw parse_error(path + ": malformed embedding value", line_no);
    if (vec.empty()) throw parse_error(path + ": embedding with no values", line_no);
    if (!embs.empty() && embs.begin()->second.size() != vec.size())
      throw parse_error(path + ": inconsistent embedding dimension", line_no);
    embs[id] = std::move(vec);
  }
  return embs;
}

// ---------------------------------------------------------------------------
// Trials and scores
// ---------------------------------------------------------------------------

inline TrialScoreSet read_trials(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open trial list: " + path);
  TrialScoreSet trials;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    int label = -1;
    Trial t;
    if (!(ls >> label >> t.enroll >> t.test) || (label != 0 && label != 1))
      throw parse_error(path + ": expected '<0|1> <enroll> <test>'", line_no);
    t.label = label;
    trials.push_back(std::move(t));
  }
  if (trials.empty()) throw parse_error(path + ": empty trial list");
  return trials;
}

inline void write_scores(const std::string& path, const TrialScoreSet& trials) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot write score file: " + path);
  out << std::setprecision(10);
  for (const auto& t : trials)
    out << t.enroll << ' ' << t.test << ' ' << t.raw << ' ' << t.normalized << '\n';
}

// Joins a score file back onto a trial list by (enroll, test).
inline void attach_scores(TrialScoreSet& trials, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open score file: " + path);
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> table;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string e, t;
    double raw, norm;
    if (!(ls >> e >> t >> raw >> norm))
      throw parse_error(path + ": expected '<enroll> <test> <raw> <normalized>'", line_no);
    table[{e, t}] = {raw, norm};
  }
  for (auto& trial : trials) {
    auto it = table.find({trial.enroll, trial.test});
    if (it == table.end())
      throw contract_error(strcat_msg("no score for trial ", trial.enroll, " ", trial.test));
    trial.raw = it->second.first;
    trial.normalized = it->second.second;
  }
}

// ---------------------------------------------------------------------------
// Config files (JSON, versioned, strict keys)
// ---------------------------------------------------------------------------

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw parse_error(strcat_msg("unknown key '", key, "' in ", where,
                                   " config (allowed: ", [&] {
                                     std::string s;
                                     for (const auto& k : allowed) s += k + " ";
                                     return s;
                                   }(), ")"));
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"variant", "layers_per_block", "channels", "na_heads", "ga_heads", "window",
                 "mfa_channels", "embedding_dim", "feat_dim", "ffn_mult", "asp_bottleneck",
                 "drop_path_coefficient", "na_padding", "use_ga", "four_gas", "layernorm",
                 "use_mfa", "use_asp", "use_drop_path", "mfa_post_norm_act"},
             "model");
  ModelConfig cfg;
  if (j.contains("variant")) {
    const std::string v = j["variant"];
    if (v == "mfa")
      cfg.variant = Variant::mfa;
    else if (v == "pcf")
      cfg.variant = Variant::pcf;
    else
      throw parse_error("model.variant must be 'mfa' or 'pcf', got '" + v + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("layers_per_block", cfg.layers_per_block);
  get("channels", cfg.channels);
  get("na_heads", cfg.na_heads);
  get("ga_heads", cfg.ga_heads);
  get("window", cfg.window);
  get("mfa_channels", cfg.mfa_channels);
  get("embedding_dim", cfg.embedding_dim);
  get("feat_dim", cfg.feat_dim);
  get("ffn_mult", cfg.ffn_mult);
  get("asp_bottleneck", cfg.asp_bottleneck);
  get("drop_path_coefficient", cfg.drop_path_coefficient);
  get("na_padding", cfg.na_padding);
  get("use_ga", cfg.use_ga);
  get("four_gas", cfg.four_gas);
  get("layernorm", cfg.layernorm);
  get("use_mfa", cfg.use_mfa);
  get("use_asp", cfg.use_asp);
  get("use_drop_path", cfg.use_drop_path);
  get("mfa_post_norm_act", cfg.mfa_post_norm_act);
  cfg.validate();
  return cfg;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"variant", variant_name(cfg.variant)},
                        {"layers_per_block", cfg.layers_per_block},
                        {"channels", cfg.channels},
                        {"na_heads", cfg.na_heads},
                        {"ga_heads", cfg.ga_heads},
                        {"window", cfg.window},
                        {"mfa_channels", cfg.mfa_channels},
                        {"embedding_dim", cfg.embedding_dim},
                        {"feat_dim", cfg.feat_dim},
                        {"ffn_mult", cfg.ffn_mult},
                        {"asp_bottleneck", cfg.asp_bottleneck},
                        {"drop_path_coefficient", cfg.drop_path_coefficient},
                        {"na_padding", cfg.na_padding},
                        {"use_ga", cfg.use_ga},
                        {"four_gas", cfg.four_gas},
                        {"layernorm", cfg.layernorm},
                        {"use_mfa", cfg.use_mfa},
                        {"use_asp", cfg.use_asp},
                        {"use_drop_path", cfg.use_drop_path},
                        {"mfa_post_norm_act", cfg.mfa_post_norm_act}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"num_speakers", "utterances_per_speaker", "feat_dim", "min_seconds",
                 "max_seconds", "signature_scale", "noise_level", "seed"},
             "dataset");
  DatasetConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("num_speakers", cfg.num_speakers);
  get("utterances_per_speaker", cfg.utterances_per_speaker);
  get("feat_dim", cfg.feat_dim);
  get("min_seconds", cfg.min_seconds);
  get("max_seconds", cfg.max_seconds);
  get("signature_scale", cfg.signature_scale);
  get("noise_level", cfg.noise_level);
  get("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

inline FbankConfig fbank_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"sample_rate", "window_ms", "shift_ms", "mel_bins",
                 "cepstral_mean_subtraction"},
             "fbank");
  FbankConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("sample_rate", cfg.sample_rate);
  get("window_ms", cfg.window_ms);
  get("shift_ms", cfg.shift_ms);
  get("mel_bins", cfg.mel_bins);
  get("cepstral_mean_subtraction", cfg.cepstral_mean_subtraction);
  cfg.validate();
  return cfg;
}

// Parses a whole config file with line-accurate errors.
inline nlohmann::json parse_config_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    long line = 1;
    for (std::size_t i = 0; i < std::min(text.size(), static_cast<std::size_t>(e.byte)); ++i)
      if (text[i] == '\n') ++line;
    throw parse_error(origin + ": " + e.what(), line);
  }
}

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  auto j = parse_config_text(ss.str(), path);
  check_keys(j, {"version", "model", "train", "dataset", "fbank", "scoring"}, "top-level");
  if (j.contains("version") && j["version"].get<int>() != 1)
    throw parse_error(path + ": unsupported config version");
  return j;
}

}  // namespace pcfnat
