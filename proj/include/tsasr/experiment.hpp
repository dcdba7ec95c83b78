// Copyright 2025 The tsasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment orchestration: deterministic training runs, greedy-decode
// evaluation under matched and mismatched enrollment, prompt-separation
// scoring, and the ablation grids.

#pragma once

#include <ctime>
#include <filesystem>
#include <iomanip>

#include "tsasr/train.hpp"

namespace tsasr {

struct TrainConfig {
  int epochs = 8;
  int batch_size = 8;
  double peak_lr = 3e-3;
  int warmup_steps = 100;
  LrDecay lr_decay = LrDecay::kInvSqrt;
  uint64_t seed = 1;
  int average_best_k = 5;
  std::string select_metric = "loss";  // loss | wer
  AdamConfig adam;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs/batch_size must be >= 1");
    if (peak_lr <= 0.0) throw ConfigError("peak_lr must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (average_best_k < 1) throw ConfigError("average_best_k must be >= 1");
    if (select_metric != "loss" && select_metric != "wer")
      throw ConfigError("select_metric must be loss|wer, got: " + select_metric);
  }

  // Reference values of the source training recipe; desk runs use smaller
  // settings.
  static TrainConfig paper_preset() {
    TrainConfig t;
    t.epochs = 10;
    t.peak_lr = 5e-5;
    t.warmup_steps = 1500;
    t.average_best_k = 5;
    return t;
  }
};

struct DataView {
  std::vector<TrainRecord> train, dev, test;
  std::vector<TrainRecord> test_mismatched;  // empty when < 3 speakers
  int n_mels = 20;
  int vocab = 16;  // transcript vocabulary size
};

inline DataView make_view(const Corpus& c, uint64_t mismatch_seed = 0xD15Cu) {
  DataView v;
  v.train = c.records("train");
  v.dev = c.records("dev");
  v.test = c.records("test");
  if (c.cfg.n_speakers >= 3) {
    Rng rng(mismatch_seed);
    v.test_mismatched = c.mismatched_records("test", rng);
  }
  v.n_mels = c.cfg.features.n_mels;
  v.vocab = c.cfg.vocab;
  return v;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_ce = 0.0;
  double train_contrastive = 0.0;
  double val_loss = 0.0;
  double val_wer = -1.0;
  double lr_last = 0.0;
};

struct TrainOutput {
  std::vector<EpochStats> epochs;
  std::vector<Checkpoint> checkpoints;
  Checkpoint averaged;
  int64_t steps = 0;
};

inline double mean_ce(const TsAsrModel& model, const std::vector<TrainRecord>& recs) {
  if (recs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : recs) total += model.sample_ce(r).value();
  return total / static_cast<double>(recs.size());
}

inline WerCounts score_records(const TsAsrModel& model,
                               const std::vector<TrainRecord>& recs,
                               std::vector<std::vector<int>>* hyps = nullptr) {
  WerCounts agg;
  for (const auto& r : recs) {
    std::vector<int> hyp = model.transcribe(r);
    agg += wer(r.tokens, hyp);
    if (hyps) hyps->push_back(std::move(hyp));
  }
  return agg;
}

// Deterministic: the seed fixes batch order; the model seed fixed its
// initialization; every reported number follows.
inline TrainOutput train_model(TsAsrModel& model, const DataView& data,
                               const TrainConfig& tc, uint64_t config_hash,
                               const std::string& config_text) {
  tc.validate();
  if (data.train.empty()) throw DataError("training split is empty");
  ParamList params = model.params();
  Adam opt(tc.adam);
  Rng shuffle_rng = Rng(tc.seed).fork(0xBA7C4);

  TrainOutput out;
  int64_t step = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<size_t> order(data.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    double ep_loss = 0.0, ep_ce = 0.0, ep_con = 0.0;
    int batches = 0;
    double lr = 0.0;
    for (size_t pos = 0; pos < order.size(); pos += tc.batch_size) {
      std::vector<const TrainRecord*> batch;
      for (size_t k = pos; k < std::min(order.size(), pos + tc.batch_size); ++k)
        batch.push_back(&data.train[order[k]]);
      auto loss = model.batch_loss(batch);
      double value = loss.total.value();
      if (!std::isfinite(value))
        throw NumericError("NaN/inf loss at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step + 1));
      loss.total.backward();
      ++step;
      lr = lr_at(step, tc.peak_lr, tc.warmup_steps, tc.lr_decay);
      opt.step(params, lr);
      ep_loss += value;
      ep_ce += loss.ce;
      ep_con += loss.contrastive;
      ++batches;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = ep_loss / batches;
    st.train_ce = ep_ce / batches;
    st.train_contrastive = ep_con / batches;
    st.lr_last = lr;
    st.val_loss = mean_ce(model, data.dev);
    if (tc.select_metric == "wer") st.val_wer = score_records(model, data.dev).rate();
    out.epochs.push_back(st);

    double metric = (tc.select_metric == "wer") ? st.val_wer : st.val_loss;
    out.checkpoints.push_back(
        snapshot_params(params, config_hash, config_text, epoch, metric));
  }
  out.steps = step;

  // Best-k by validation metric (lower is better), ties to earlier epochs.
  std::vector<size_t> idx(out.checkpoints.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    return out.checkpoints[a].val_metric < out.checkpoints[b].val_metric;
  });
  size_t k = std::min<size_t>(static_cast<size_t>(tc.average_best_k), idx.size());
  std::vector<Checkpoint> best;
  for (size_t i = 0; i < k; ++i) best.push_back(out.checkpoints[idx[i]]);
  out.averaged = average_checkpoints(best);
  restore_params(params, out.averaged);
  return out;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  TsAsrConfig model;
  TrainConfig train;
};

inline std::string config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  const TsAsrConfig& m = c.model;
  os << "d_model=" << m.backbone.d_model << "\nn_heads=" << m.backbone.n_heads
     << "\nd_ffn=" << m.backbone.d_ffn << "\nenc_blocks=" << m.backbone.n_enc_blocks
     << "\ndec_blocks=" << m.backbone.n_dec_blocks
     << "\nn_mels=" << m.backbone.n_mels << "\nvocab=" << m.backbone.vocab_size
     << "\nmax_target_len=" << m.backbone.max_target_len
     << "\nadapter=" << adapter_name(m.adapter) << "\nd_e=" << m.d_e
     << "\nspeaker_query=" << (m.use_speaker_query ? 1 : 0)
     << "\nsq_blocks=" << m.squery.n_blocks << "\nsq_heads=" << m.squery.n_heads
     << "\nd_q=" << m.squery.d_q << "\nnum_queries=" << m.squery.l_q
     << "\nenc_prompt=" << (m.enc_prompt ? 1 : 0)
     << "\ndec_prompt=" << (m.dec_prompt ? 1 : 0) << "\nalpha=" << m.contrastive.alpha
     << "\nkappa=" << m.contrastive.kappa
     << "\nnegatives=" << m.contrastive.max_negatives
     << "\nlora=" << (m.use_lora ? 1 : 0) << "\nlora_rank=" << m.lora.rank
     << "\ninit_seed=" << m.init_seed << "\nepochs=" << c.train.epochs
     << "\nbatch_size=" << c.train.batch_size << "\npeak_lr=" << c.train.peak_lr
     << "\nwarmup_steps=" << c.train.warmup_steps << "\nlr_decay="
     << (c.train.lr_decay == LrDecay::kInvSqrt ? "inv-sqrt" : "none")
     << "\nseed=" << c.train.seed << "\naverage_best_k=" << c.train.average_best_k
     << "\nselect_metric=" << c.train.select_metric << "\n";
  return os.str();
}

struct ExperimentResult {
  std::vector<EpochStats> epochs;
  WerCounts matched;
  WerCounts mismatched;
  bool has_mismatched = false;
  double separation = std::nan("");
  ParamReport params;
  uint64_t config_hash = 0;
  int64_t steps = 0;
  int negatives_recorded = 0;
  std::vector<std::vector<int>> matched_hyps;
  std::vector<std::vector<int>> mismatched_hyps;
  Checkpoint final_checkpoint;
};

inline double separation_of(const TsAsrModel& model,
                            const std::vector<TrainRecord>& recs) {
  std::map<std::string, std::vector<std::vector<Real>>> groups;
  for (const auto& r : recs)
    groups[r.enrollment_speaker].push_back(model.prompt_vector(r));
  return prompt_separation_metric(groups);
}

inline ExperimentResult run_experiment(TsAsrModel& model, const DataView& data,
                                       const ExperimentConfig& cfg,
                                       bool eval_mismatched = true) {
  ExperimentResult res;
  std::string text = config_text(cfg);
  res.config_hash = fnv1a64(text);
  TrainOutput tr = train_model(model, data, cfg.train, res.config_hash, text);
  res.epochs = tr.epochs;
  res.steps = tr.steps;
  res.final_checkpoint = tr.averaged;

  res.matched = score_records(model, data.test, &res.matched_hyps);
  if (eval_mismatched && !data.test_mismatched.empty()) {
    res.mismatched = score_records(model, data.test_mismatched, &res.mismatched_hyps);
    res.has_mismatched = true;
  }
  if (model.cfg.use_speaker_query && !data.test.empty()) {
    std::set<std::string> spk;
    for (const auto& r : data.test) spk.insert(r.enrollment_speaker);
    if (spk.size() >= 2) res.separation = separation_of(model, data.test);
  }
  res.params = trainable_param_report(model.params());
  return res;
}

inline ExperimentResult run_experiment(const DataView& data, const ExperimentConfig& cfg,
                                       bool eval_mismatched = true) {
  TsAsrModel model = TsAsrModel::make(cfg.model);
  return run_experiment(model, data, cfg, eval_mismatched);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline void write_report(const std::string& dir, const ExperimentConfig& cfg,
                         const ExperimentResult& res, bool with_timestamp = true) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ofstream rep(fs::path(dir) / "report.txt");
  rep.setf(std::ios::fixed);
  rep.precision(6);
  if (with_timestamp) {
    std::time_t now = std::time(nullptr);
    rep << "generated_at=" << now << "\n";
  }
  rep << "config_hash=" << std::hex << res.config_hash << std::dec << "\n";
  rep << "seed=" << cfg.train.seed << "\n";
  for (const auto& e : res.epochs) {
    rep << "epoch=" << e.epoch << " train_loss=" << e.train_loss
        << " train_ce=" << e.train_ce << " train_contrastive=" << e.train_contrastive
        << " val_loss=" << e.val_loss;
    if (e.val_wer >= 0.0) rep << " val_wer=" << e.val_wer;
    rep << " lr=" << std::setprecision(8) << e.lr_last << std::setprecision(6) << "\n";
  }
  rep << "steps=" << res.steps << "\n";
  rep << "matched_wer=" << res.matched.rate() << " sub=" << res.matched.sub
      << " del=" << res.matched.del << " ins=" << res.matched.ins << "\n";
  if (res.has_mismatched)
    rep << "mismatched_wer=" << res.mismatched.rate() << " sub=" << res.mismatched.sub
        << " del=" << res.mismatched.del << " ins=" << res.mismatched.ins << "\n";
  if (!std::isnan(res.separation)) rep << "separation=" << res.separation << "\n";
  rep << "params_total=" << res.params.total
      << " params_trainable=" << res.params.trainable << "\n";

  std::ofstream sum(fs::path(dir) / "summary.txt");
  sum.setf(std::ios::fixed);
  sum.precision(6);
  sum << "config_hash=" << std::hex << res.config_hash << std::dec << "\n"
      << "matched_wer=" << res.matched.rate() << "\n";
  if (res.has_mismatched) sum << "mismatched_wer=" << res.mismatched.rate() << "\n";
  if (!std::isnan(res.separation)) sum << "separation=" << res.separation << "\n";
  sum << "params_trainable=" << res.params.trainable << "\n"
      << "steps=" << res.steps << "\n";

  std::ofstream cfgf(fs::path(dir) / "config.txt");
  cfgf << config_text(cfg);

  std::ofstream par(fs::path(dir) / "params.txt");
  par << res.params.table();

  std::ofstream hyp(fs::path(dir) / "hyp_matched.txt");
  for (const auto& h : res.matched_hyps) {
    for (size_t i = 0; i < h.size(); ++i) {
      if (i) hyp << ' ';
      hyp << h[i];
    }
    hyp << '\n';
  }
}

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string label;
  ExperimentResult result;
};

// Suites mirror the harness's ablation capabilities: query-count sweep,
// contrastive on/off, the 2x2 prompt grid, and the enrollment-mismatch probe.
inline std::vector<AblationCell> ablation_suite(const std::string& name,
                                                const DataView& data,
                                                const ExperimentConfig& base) {
  std::vector<AblationCell> cells;
  auto run_cell = [&](const std::string& label, ExperimentConfig cfg,
                      bool eval_mismatched) {
    AblationCell cell;
    cell.label = label;
    cell.result = run_experiment(data, cfg, eval_mismatched);
    cells.push_back(std::move(cell));
  };

  if (name == "queries") {
    for (int lq : {1, 2, 4, 8, 16}) {
      ExperimentConfig cfg = base;
      cfg.model.squery.l_q = lq;
      run_cell("num_queries=" + std::to_string(lq), cfg, false);
    }
  } else if (name == "contrastive") {
    for (double alpha : {base.model.contrastive.alpha, 0.0}) {
      ExperimentConfig cfg = base;
      cfg.model.contrastive.alpha = alpha;
      std::ostringstream label;
      label << "alpha=" << alpha;
      run_cell(label.str(), cfg, false);
    }
  } else if (name == "prompt_scheme") {
    struct GridCell {
      bool enc, dec;
    };
    for (GridCell g : {GridCell{false, false}, GridCell{true, false},
                       GridCell{false, true}, GridCell{true, true}}) {
      ExperimentConfig cfg = base;
      cfg.model.enc_prompt = g.enc;
      cfg.model.dec_prompt = g.dec;
      cfg.model.use_speaker_query = g.enc || g.dec;
      std::string label = std::string("enc=") + (g.enc ? "y" : "n") + " dec=" +
                          (g.dec ? "y" : "n");
      run_cell(label, cfg, false);
    }
  } else if (name == "mismatch") {
    run_cell("matched_vs_mismatched", base, true);
  } else {
    throw ConfigError("unknown ablation suite: " + name +
                      " (want queries|contrastive|prompt_scheme|mismatch)");
  }
  return cells;
}

inline std::string ablation_table(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "cell\tmatched_ter\tmismatched_ter\tseparation\ttrainable_params\n";
  for (const auto& c : cells) {
    os << c.label << '\t' << c.result.matched.rate() << '\t';
    if (c.result.has_mismatched)
      os << c.result.mismatched.rate();
    else
      os << "-";
    os << '\t';
    if (!std::isnan(c.result.separation))
      os << c.result.separation;
    else
      os << "-";
    os << '\t' << c.result.params.trainable << '\n';
  }
  return os.str();
}

}  // namespace tsasr
