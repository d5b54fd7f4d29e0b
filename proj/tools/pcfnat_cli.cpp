// Command-line surface for the PCF-NAT / MFA-NAT toolkit:
//   params     parameter count table for a model configuration
//   gradcheck  finite-difference verification suite (nonzero exit on failure)
//   na-bench   naive vs blocked neighborhood-attention timings
//   train      synthetic-speaker training run producing a checkpoint
//   embed      wav / feature files -> embedding file
//   score      trial list + embeddings (+ optional cohort) -> score file
//   metrics    score file + trial list -> EER / minDCF report
//   ablate     ablation-variant configuration summary

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pcfnat/checkpoint.hpp"
#include "pcfnat/dataset.hpp"
#include "pcfnat/fbank.hpp"
#include "pcfnat/gradcheck.hpp"
#include "pcfnat/io_formats.hpp"
#include "pcfnat/model.hpp"
#include "pcfnat/na_kernel.hpp"
#include "pcfnat/scoring.hpp"
#include "pcfnat/train.hpp"

namespace {

using namespace pcfnat;

struct CommonOpts {
  std::string config_path;
  std::string out_path;
  std::uint64_t seed = 42;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file");
  cmd->add_option("--out", opts.out_path, "output path");
  cmd->add_option("--seed", opts.seed, "random seed");
}

nlohmann::json load_config_or_empty(const CommonOpts& opts) {
  if (opts.config_path.empty()) return nlohmann::json::object();
  return load_config_file(opts.config_path);
}

ModelConfig model_config_of(const nlohmann::json& j) {
  if (j.contains("model")) return model_config_from_json(j["model"]);
  return ModelConfig{};
}

void emit(const CommonOpts& opts, const std::string& text) {
  if (opts.out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(opts.out_path);
  if (!out) throw parse_error("cannot write " + opts.out_path);
  out << text;
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

int cmd_params(const CommonOpts& opts, const std::string& variant, int layers) {
  auto j = load_config_or_empty(opts);
  ModelConfig cfg = model_config_of(j);
  if (!variant.empty()) {
    if (variant == "pcf")
      cfg.variant = Variant::pcf;
    else if (variant == "mfa")
      cfg.variant = Variant::mfa;
    else
      throw parse_error("--variant must be pcf or mfa, got '" + variant + "'");
  }
  if (layers > 0) cfg.layers_per_block = layers;
  std::ostringstream os;
  os << variant_name(cfg.variant) << "-nat (" << cfg.layers_per_block << "x4)\n"
     << parameter_table(cfg);
  emit(opts, os.str());
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(const CommonOpts& opts) {
  auto cases = run_gradient_suite(opts.seed);
  std::ostringstream os;
  bool all_ok = true;
  for (const auto& c : cases) {
    os << (c.passed ? "PASS" : "FAIL") << "  " << c.name << "  max_rel_err " << c.max_rel_err
       << "  (tolerance " << c.tolerance << ", " << c.coords << " coords)\n";
    all_ok = all_ok && c.passed;
  }
  os << (all_ok ? "gradient suite passed\n" : "gradient suite FAILED\n");
  emit(opts, os.str());
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// na-bench
// ---------------------------------------------------------------------------

TileShape parse_tile(const std::string& text) {
  TileShape tile;
  if (!text.empty()) {
    char x1 = 0, x2 = 0;
    std::istringstream ls(text);
    if (!(ls >> tile.m >> x1 >> tile.n >> x2 >> tile.k) || x1 != 'x' || x2 != 'x')
      throw parse_error("--tile expects MxNxK, e.g. 16x8x16, got '" + text + "'");
  }
  tile.validate();
  return tile;
}

int cmd_na_bench(const CommonOpts& opts, index_t seq, int heads, int channels, int window,
                 const std::string& tile_text, int iters) {
  const TileShape tile = parse_tile(tile_text);
  NaConfig cfg;
  cfg.window = window;
  cfg.heads = heads;
  cfg.channels = channels;
  cfg.validate();
  const index_t d = cfg.head_dim();

  Rng rng(opts.seed);
  auto q = Tensor<float>::randn({heads, seq, d}, rng);
  auto k = Tensor<float>::randn({heads, seq, d}, rng);
  auto v = Tensor<float>::randn({heads, seq, d}, rng);
  auto out = Tensor<float>::zeros({heads, seq, d});
  auto attn = Tensor<float>::zeros({heads, seq, window});

  auto time_ms = [&](auto&& fn) {
    fn();  // warmup
    double best = 1e300;
    for (int i = 0; i < iters; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
  };
  const double naive_ms = time_ms([&] {
    na_forward_naive(q.data().data(), k.data().data(), v.data().data(), out.data().data(),
                     attn.data().data(), heads, seq, d, cfg);
  });
  const double blocked_ms = time_ms([&] {
    na_forward_blocked(q.data().data(), k.data().data(), v.data().data(), out.data().data(),
                       attn.data().data(), heads, seq, d, cfg, tile);
  });

  std::ostringstream os;
  os << "shape: T=" << seq << " H=" << heads << " C=" << channels << " W=" << window
     << " tile M" << tile.m << "N" << tile.n << "K" << tile.k << "\n"
     << "kernel    time_ms\n"
     << "naive     " << naive_ms << "\n"
     << "blocked   " << blocked_ms << "\n"
     << "speedup   " << naive_ms / blocked_ms << "x\n"
     << effective_ratio_report(tile.m, tile.n, window) << "\n";
  emit(opts, os.str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonOpts& opts, const std::string& metrics_log, bool seed_given) {
  auto j = load_config_or_empty(opts);
  ModelConfig mc = model_config_of(j);
  TrainConfig tc = j.contains("train") ? train_config_from_json(j["train"]) : TrainConfig{};
  DatasetConfig dc =
      j.contains("dataset") ? dataset_config_from_json(j["dataset"]) : DatasetConfig{};
  dc.feat_dim = mc.feat_dim;
  if (seed_given) tc.seed = opts.seed;

  SyntheticSpeakerDataset data(dc);
  Rng init(Rng::mix(tc.seed, 0x1217));
  SpeakerModel<float> model(mc, init);
  AamSubcenterHead<float> head(dc.num_speakers, tc.subcenters, static_cast<float>(tc.margin),
                               static_cast<float>(tc.loss_scale), mc.embedding_dim, init);

  std::ofstream log_file;
  std::ostream* log_stream = &std::cout;
  if (!metrics_log.empty()) {
    log_file.open(metrics_log);
    if (!log_file) throw parse_error("cannot write metrics log: " + metrics_log);
    log_stream = &log_file;
  }

  Rng train_rng(tc.seed);
  auto trainables = model.registry().params();
  trainables.emplace_back("head.weight", head.weight());
  SgdOptimizer opt(trainables, tc.momentum, tc.weight_decay);
  auto result = train(model, head, data, tc, log_stream, &train_rng, &opt);
  std::cout << "trained " << result.steps << " steps, loss " << result.first_loss << " -> "
            << result.final_loss << "\n";

  if (!opts.out_path.empty()) {
    Checkpoint ckpt;
    nlohmann::json meta;
    meta["model"] = model_config_to_json(mc);
    meta["classes"] = head.classes();
    meta["subcenters"] = head.subcenters();
    ckpt.config_json = meta.dump(2);
    for (const auto& [name, t] : model.registry().params()) ckpt.tensors.emplace_back(name, t);
    for (const auto& [name, t] : model.registry().buffers()) ckpt.tensors.emplace_back(name, t);
    ckpt.tensors.emplace_back("head.weight", head.weight());
    ckpt.optimizer_state = opt.state();
    ckpt.step = static_cast<std::uint64_t>(result.steps);
    ckpt.rng_state = train_rng.serialize();
    save_checkpoint(opts.out_path, ckpt);
    std::cout << "checkpoint written to " << opts.out_path << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

struct LoadedModel {
  ModelConfig config;
  std::unique_ptr<SpeakerModel<float>> model;
};

LoadedModel make_model(const CommonOpts& opts, const std::string& checkpoint_path) {
  LoadedModel lm;
  if (!checkpoint_path.empty()) {
    auto ckpt = load_checkpoint(checkpoint_path);
    auto meta = parse_config_text(ckpt.config_json, checkpoint_path);
    lm.config = model_config_from_json(meta.contains("model") ? meta["model"] : meta);
    Rng init(0);
    lm.model = std::make_unique<SpeakerModel<float>>(lm.config, init);
    restore_tensors(lm.model->registry().params(), ckpt.tensors, "parameter");
    restore_tensors(lm.model->registry().buffers(), ckpt.tensors, "buffer");
  } else {
    auto j = load_config_or_empty(opts);
    lm.config = model_config_of(j);
    Rng init(Rng::mix(opts.seed, 0x1217));
    lm.model = std::make_unique<SpeakerModel<float>>(lm.config, init);
  }
  return lm;
}

int cmd_embed(const CommonOpts& opts, const std::string& list_path,
              const std::string& checkpoint_path) {
  if (opts.out_path.empty()) throw parse_error("embed: --out is required");
  auto j = load_config_or_empty(opts);
  FbankConfig fb = j.contains("fbank") ? fbank_config_from_json(j["fbank"]) : FbankConfig{};
  auto lm = make_model(opts, checkpoint_path);

  std::ifstream list(list_path);
  if (!list) throw parse_error("cannot open list file: " + list_path);

  const FwdCtx<float> eval{nullptr, false, nullptr};
  auto extractor = [&](const Tensor<float>& feats) {
    auto batch = reshape(feats, {1, feats.dim(0), feats.dim(1)});
    auto emb = lm.model->forward_embedding(batch, eval);
    std::vector<double> out(static_cast<std::size_t>(emb.numel()));
    for (index_t i = 0; i < emb.numel(); ++i)
      out[static_cast<std::size_t>(i)] = static_cast<double>(emb.data()[static_cast<std::size_t>(i)]);
    return out;
  };

  std::vector<std::pair<std::string, std::vector<double>>> embeddings;
  std::string line;
  long line_no = 0;
  while (std::getline(list, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, path;
    if (!(ls >> id >> path)) throw parse_error(list_path + ": expected '<id> <path>'", line_no);
    Tensor<float> feats;
    double duration = 0.0;
    if (path.size() > 4 && path.substr(path.size() - 4) == ".wav") {
      auto samples = load_wav_checked(path, fb);
      duration = static_cast<double>(samples.size()) / fb.sample_rate;
      feats = extract_fbank(samples, fb);
    } else {
      feats = read_feature_file(path);
      duration = static_cast<double>(feats.dim(1)) * fb.shift_ms / 1000.0;
    }
    embeddings.emplace_back(id, segment_and_average(feats, duration, extractor));
  }
  write_embeddings(opts.out_path, embeddings);
  std::cout << "wrote " << embeddings.size() << " embeddings to " << opts.out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

int cmd_score(const CommonOpts& opts, const std::string& trials_path,
              const std::string& embeddings_path, const std::string& cohort_path, int top_n) {
  if (opts.out_path.empty()) throw parse_error("score: --out is required");
  auto trials = read_trials(trials_path);
  auto embs = read_embeddings(embeddings_path);
  for (auto& t : trials) {
    auto e = embs.find(t.enroll);
    auto s = embs.find(t.test);
    if (e == embs.end() || s == embs.end())
      throw contract_error(strcat_msg("missing embedding for trial ", t.enroll, " ", t.test));
    t.raw = raw_score(e->second, s->second);
    t.normalized = t.raw;  // overwritten below when a cohort is given
  }
  if (!cohort_path.empty()) {
    auto cohort_embs = read_embeddings(cohort_path);
    std::vector<std::vector<double>> rows;
    for (auto& [id, vec] : cohort_embs) rows.push_back(vec);
    auto cohort = Cohort::from_embeddings(rows, top_n);
    adaptive_snorm(trials, embs, cohort, top_n);
  }
  write_scores(opts.out_path, trials);
  std::cout << "wrote " << trials.size() << " scores to " << opts.out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

int cmd_metrics(const CommonOpts& opts, const std::string& scores_path,
                const std::string& trials_path, double p_target, bool use_raw) {
  auto trials = read_trials(trials_path);
  attach_scores(trials, scores_path);
  const bool use_norm = !use_raw;
  const double eer = compute_eer(trials, use_norm);
  const double dcf = compute_min_dcf(trials, p_target, 1.0, 1.0, use_norm);
  std::ostringstream os;
  os << "trials " << trials.size() << "\n"
     << "score_column " << (use_norm ? "normalized" : "raw") << "\n"
     << "eer " << eer << "\n"
     << "eer_percent " << 100.0 * eer << "\n"
     << "min_dcf_p" << p_target << " " << dcf << "\n";
  emit(opts, os.str());
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const CommonOpts& opts) {
  ModelConfig base;
  base.variant = Variant::mfa;
  base.layers_per_block = 4;
  struct Row {
    std::string name;
    ModelConfig cfg;
    std::string note;
  };
  std::vector<Row> rows;
  rows.push_back({"baseline mfa-nat (4x4)", base, ""});
  {
    Row r{"w/o fbank norm", base, "feature-side switch: fbank.cepstral_mean_subtraction=false"};
    rows.push_back(r);
  }
  {
    Row r{"w/o na padding", base, "clamped windows"};
    r.cfg.na_padding = false;
    rows.push_back(r);
  }
  {
    Row r{"w/o ga", base, ""};
    r.cfg.use_ga = false;
    rows.push_back(r);
  }
  {
    Row r{"with four gas", base, ""};
    r.cfg.four_gas = true;
    rows.push_back(r);
  }
  {
    Row r{"with layernorm", base, "norms before aggregation become layer norm"};
    r.cfg.layernorm = true;
    rows.push_back(r);
  }
  {
    Row r{"w/o drop path", base, ""};
    r.cfg.use_drop_path = false;
    rows.push_back(r);
  }
  {
    Row r{"w/o mfa", base, "dense layer fed by block 4 only"};
    r.cfg.use_mfa = false;
    rows.push_back(r);
  }
  {
    Row r{"w/o asp", base, "plain temporal mean+std pooling"};
    r.cfg.use_asp = false;
    rows.push_back(r);
  }
  {
    Row r{"w/o as-norm", base, "scoring-side switch: omit --cohort when scoring"};
    rows.push_back(r);
  }

  const index_t base_params = count_parameters(base).total;
  std::ostringstream os;
  os << std::left << std::setw(26) << "variant" << std::right << std::setw(10) << "params"
     << std::setw(10) << "delta" << std::setw(5) << "ga" << "  schedule  note\n";
  for (auto& row : rows) {
    const auto breakdown = count_parameters(row.cfg);
    Rng rng(0);
    SpeakerModel<float> model(row.cfg, rng);
    std::string sched;
    for (const auto& s : model.attention_schedule()) sched += s + " ";
    os << std::left << std::setw(26) << row.name << std::right << std::setw(10) << breakdown.total
       << std::setw(10) << breakdown.total - base_params << std::setw(5)
       << model.ga_layer_count() << "  " << sched << " " << row.note << "\n";
  }
  emit(opts, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PCF-NAT / MFA-NAT speaker embedding toolkit"};
  app.require_subcommand(1);

  CommonOpts params_opts, grad_opts, bench_opts, train_opts, embed_opts, score_opts,
      metrics_opts, ablate_opts;

  auto* params_cmd = app.add_subcommand("params", "print the parameter count table");
  std::string params_variant;
  int params_layers = 0;
  params_cmd->add_option("--variant", params_variant, "pcf or mfa");
  params_cmd->add_option("--layers", params_layers, "attention layers per block");
  add_common(params_cmd, params_opts);

  auto* grad_cmd = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  add_common(grad_cmd, grad_opts);

  auto* bench_cmd = app.add_subcommand("na-bench", "time naive vs blocked neighborhood attention");
  index_t bench_seq = 1024;
  int bench_heads = 16, bench_channels = 256, bench_window = 27, bench_iters = 5;
  std::string bench_tile = "16x8x16";
  bench_cmd->add_option("--seq", bench_seq, "sequence length");
  bench_cmd->add_option("--heads", bench_heads, "attention heads");
  bench_cmd->add_option("--channels", bench_channels, "model channels");
  bench_cmd->add_option("--window", bench_window, "attention window");
  bench_cmd->add_option("--tile", bench_tile, "tile shape MxNxK");
  bench_cmd->add_option("--iters", bench_iters, "timing repetitions");
  add_common(bench_cmd, bench_opts);

  auto* train_cmd = app.add_subcommand("train", "train on the synthetic speaker corpus");
  std::string train_metrics_log;
  train_cmd->add_option("--metrics-log", train_metrics_log, "per-step metrics log file");
  add_common(train_cmd, train_opts);

  auto* embed_cmd = app.add_subcommand("embed", "extract embeddings for a file list");
  std::string embed_list, embed_ckpt;
  embed_cmd->add_option("--list", embed_list, "text file of '<id> <wav-or-feature-path>' lines")
      ->required();
  embed_cmd->add_option("--checkpoint", embed_ckpt, "model checkpoint");
  add_common(embed_cmd, embed_opts);

  auto* score_cmd = app.add_subcommand("score", "score a trial list");
  std::string score_trials, score_embs, score_cohort;
  int score_topn = 300;
  score_cmd->add_option("--trials", score_trials, "trial list file")->required();
  score_cmd->add_option("--embeddings", score_embs, "embedding file")->required();
  score_cmd->add_option("--cohort", score_cohort, "cohort embedding file (enables AS-norm)");
  score_cmd->add_option("--top-n", score_topn, "cohort top-N size");
  add_common(score_cmd, score_opts);

  auto* metrics_cmd = app.add_subcommand("metrics", "EER and minDCF from a score file");
  std::string metrics_scores, metrics_trials;
  double metrics_ptarget = 0.01;
  bool metrics_use_raw = false;
  metrics_cmd->add_option("--scores", metrics_scores, "score file")->required();
  metrics_cmd->add_option("--trials", metrics_trials, "trial list file")->required();
  metrics_cmd->add_option("--p-target", metrics_ptarget, "minDCF target prior");
  metrics_cmd->add_flag("--use-raw", metrics_use_raw, "evaluate raw instead of normalized scores");
  add_common(metrics_cmd, metrics_opts);

  auto* ablate_cmd = app.add_subcommand("ablate", "ablation variants of mfa-nat (4x4)");
  add_common(ablate_cmd, ablate_opts);

  CLI11_PARSE(app, argc, argv);
  try {
    if (params_cmd->parsed()) return cmd_params(params_opts, params_variant, params_layers);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_opts);
    if (bench_cmd->parsed())
      return cmd_na_bench(bench_opts, bench_seq, bench_heads, bench_channels, bench_window,
                          bench_tile, bench_iters);
    if (train_cmd->parsed())
      return cmd_train(train_opts, train_metrics_log, train_cmd->count("--seed") > 0);
    if (embed_cmd->parsed()) return cmd_embed(embed_opts, embed_list, embed_ckpt);
    if (score_cmd->parsed())
      return cmd_score(score_opts, score_trials, score_embs, score_cohort, score_topn);
    if (metrics_cmd->parsed())
      return cmd_metrics(metrics_opts, metrics_scores, metrics_trials, metrics_ptarget,
                         metrics_use_raw);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
