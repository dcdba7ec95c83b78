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

// Full target-speaker ASR model: conv front end -> optional TSE adapter ->
// encoder; speaker-query prompts injected at the encoder input and/or the
// decoder embedding stream; combined CE + contrastive objective over a batch.

#pragma once

#include <optional>
#include <set>

#include "tsasr/adapters.hpp"
#include "tsasr/lora.hpp"
#include "tsasr/mixsim.hpp"
#include "tsasr/speaker_query.hpp"

namespace tsasr {

struct TsAsrConfig {
  ModelConfig backbone;
  AdapterKind adapter = AdapterKind::kNone;
  int d_e = 32;  // adapter speaker-embedding dimension
  bool use_speaker_query = true;
  SpeakerQueryConfig squery;
  bool enc_prompt = true;
  bool dec_prompt = true;
  ContrastiveConfig contrastive;
  bool use_lora = false;
  LoRAConfig lora;
  uint64_t init_seed = 1234;

  // Dimensions the speaker-query module inherits from the backbone.
  void finalize() {
    squery.d_enroll = backbone.n_mels;
    squery.d_h = backbone.d_model;
    backbone.validate();
    if (use_speaker_query) squery.validate();
    contrastive.validate();
    if (use_lora) lora.validate();
    int64_t stream = 3 + backbone.max_target_len + 2 +
                     (use_speaker_query && dec_prompt ? squery.l_q + 1 : 0);
    if (stream > backbone.max_positions)
      throw ConfigError("max_positions " + std::to_string(backbone.max_positions) +
                        " too small for decoder stream of " + std::to_string(stream));
  }
};

class TsAsrModel {
 public:
  TsAsrConfig cfg;
  Backbone backbone;
  SpeakerEmbedder embedder;
  std::optional<AddAdapter> add_adapter;
  std::optional<CatAdapter> cat_adapter;
  std::optional<FilmAdapter> film_adapter;
  std::optional<ClnAdapter> cln_adapter;
  std::optional<SpeakerQueryModule> squery;

  static TsAsrModel make(TsAsrConfig cfg) {
    cfg.finalize();
    TsAsrModel m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    Rng rng_backbone = rng.fork(1);
    m.backbone = Backbone::make(cfg.backbone, rng_backbone);
    m.embedder = SpeakerEmbedder(cfg.backbone.n_mels, cfg.d_e);
    switch (cfg.adapter) {
      case AdapterKind::kAdd:
        m.add_adapter = AddAdapter::make(cfg.d_e, cfg.backbone.d_model);
        break;
      case AdapterKind::kCat:
        m.cat_adapter = CatAdapter::make(cfg.d_e, cfg.backbone.d_model);
        break;
      case AdapterKind::kFilm:
        m.film_adapter = FilmAdapter::make(cfg.d_e, cfg.backbone.d_model);
        break;
      case AdapterKind::kCln:
        m.cln_adapter = ClnAdapter::make(cfg.d_e, cfg.backbone.d_model);
        break;
      case AdapterKind::kNone:
        break;
    }
    if (cfg.use_speaker_query) {
      Rng rng_sq = rng.fork(2);
      m.squery = SpeakerQueryModule::make(cfg.squery, rng_sq);
    }
    if (cfg.use_lora) {
      Rng rng_lora = rng.fork(3);
      apply_lora(m.backbone, cfg.lora, rng_lora);
    }
    return m;
  }

  bool uses_enrollment() const {
    return cfg.adapter != AdapterKind::kNone ||
           (cfg.use_speaker_query && (cfg.enc_prompt || cfg.dec_prompt));
  }

  struct SampleForward {
    Tensor h_enc;
    Tensor dec_prompt;      // undefined when the decoder gets no prompt
    Tensor pooled_prompt;   // defined when the query module ran
    Tensor pooled_enroll;   // transformed-enrollment pooled vector
    std::vector<AttnRecord> attn;
  };

  // Encoder-side work shared by training and decoding.
  SampleForward encode_sample(const TrainRecord& r, bool record_attn = false) const {
    SampleForward out;
    Tensor h_conv = backbone.conv_forward(r.mixture->frames);

    Tensor cln_g1, cln_g2;
    const Tensor* g1 = nullptr;
    const Tensor* g2 = nullptr;
    if (cfg.adapter != AdapterKind::kNone) {
      SpeakerEmbedding e = embedder.embed(r.enrollment_speaker, *r.enrollment);
      if (add_adapter) h_conv = add_adapter->forward(h_conv, e.vector);
      if (cat_adapter) h_conv = cat_adapter->forward(h_conv, e.vector);
      if (film_adapter) h_conv = film_adapter->forward(h_conv, e.vector);
      if (cln_adapter) {
        cln_g1 = cln_adapter->gamma1(e.vector, backbone.enc_blocks[0].ln1.gamma);
        cln_g2 = cln_adapter->gamma2(e.vector, backbone.enc_blocks[0].ln2.gamma);
        g1 = &cln_g1;
        g2 = &cln_g2;
      }
    }

    Tensor enc_prompt_rows;
    if (cfg.use_speaker_query) {
      SpeakerPrompt sp =
          squery->forward(*r.enrollment, h_conv, record_attn ? &out.attn : nullptr);
      out.pooled_prompt = sp.pooled;
      out.pooled_enroll = sp.enroll_pooled;
      if (cfg.enc_prompt) enc_prompt_rows = sp.projected;
      if (cfg.dec_prompt) out.dec_prompt = sp.projected;
    }
    out.h_enc = backbone.encode_hconv(h_conv, enc_prompt_rows, g1, g2);
    return out;
  }

  Tensor sample_ce(const TrainRecord& r, SampleForward* fwd_out = nullptr) const {
    SampleForward fwd = encode_sample(r);
    Tensor logits = backbone.decode_logits(fwd.h_enc, r.tokens, fwd.dec_prompt);
    TokenSequence targets = backbone.make_targets(
        r.tokens, fwd.dec_prompt.defined() ? fwd.dec_prompt.dim(0) : 0);
    Tensor ce = backbone.compute_loss(logits, targets);
    if (fwd_out) *fwd_out = std::move(fwd);
    return ce;
  }

  struct BatchLoss {
    Tensor total;  // scalar graph node
    double ce = 0.0;
    double contrastive = 0.0;
    int negatives_used = 0;  // actual K of the first anchor with negatives
    bool contrastive_active = false;
  };

  // Mean CE over the batch plus alpha times the mean contrastive loss.
  // Negatives for anchor i are the pooled transformed enrollments of batch
  // entries whose enrollment speaker differs, capped at max_negatives.
  BatchLoss batch_loss(const std::vector<const TrainRecord*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    std::vector<Tensor> ces;
    std::vector<SampleForward> fwds(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
      ces.push_back(reshape(sample_ce(*batch[i], &fwds[i]), {1}));
    Tensor ce_mean = mean_all(concat(ces, 0));

    BatchLoss out;
    out.ce = ce_mean.value();
    bool use_con = cfg.use_speaker_query && cfg.contrastive.alpha > 0.0;
    if (use_con) {
      std::vector<Tensor> cons;
      for (size_t i = 0; i < batch.size(); ++i) {
        std::vector<Tensor> negs;
        for (size_t j = 0; j < batch.size(); ++j) {
          if (j == i) continue;
          if (batch[j]->enrollment_speaker == batch[i]->enrollment_speaker) continue;
          if (static_cast<int>(negs.size()) >= cfg.contrastive.max_negatives) break;
          negs.push_back(fwds[j].pooled_enroll);
        }
        out.negatives_used = std::max(out.negatives_used, static_cast<int>(negs.size()));
        cons.push_back(reshape(
            speaker_contrastive_loss(fwds[i].pooled_prompt, fwds[i].pooled_enroll,
                                     negs, cfg.contrastive.kappa),
            {1}));
      }
      Tensor con_mean = mean_all(concat(cons, 0));
      out.contrastive = con_mean.value();
      out.contrastive_active = true;
      out.total = combined_loss(ce_mean, con_mean, cfg.contrastive.alpha);
    } else {
      out.total = ce_mean;
    }
    return out;
  }

  std::vector<int> transcribe(const TrainRecord& r,
                              std::vector<AttnRecord>* attn = nullptr) const {
    SampleForward fwd = encode_sample(r, attn != nullptr);
    if (attn) *attn = fwd.attn;
    return backbone.greedy_decode(fwd.h_enc, fwd.dec_prompt,
                                  cfg.backbone.max_target_len);
  }

  // Pooled prompt vector for separation metrics (no grad use).
  std::vector<Real> prompt_vector(const TrainRecord& r) const {
    if (!cfg.use_speaker_query)
      throw std::invalid_argument("prompt_vector: model has no speaker-query module");
    SampleForward fwd = encode_sample(r);
    return fwd.pooled_prompt.data();
  }

  ParamList params() const {
    ParamList out;
    backbone.collect("backbone", out);
    if (add_adapter) add_adapter->collect("adapter", out);
    if (cat_adapter) cat_adapter->collect("adapter", out);
    if (film_adapter) film_adapter->collect("adapter", out);
    if (cln_adapter) cln_adapter->collect("adapter", out);
    if (squery) squery->collect("squery", out);
    std::set<std::string> seen;
    for (const auto& p : out)
      if (!seen.insert(p.name).second)
        throw std::logic_error("duplicate parameter name: " + p.name);
    return out;
  }
};

}  // namespace tsasr
