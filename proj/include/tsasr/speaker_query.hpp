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

// Speaker-query module: trainable query vectors learn the target speaker
// from enrollment (joint self-attention), search the mixture for matching
// frames (cross-attention), and transform both streams with dedicated FFNs.
// The resulting prompt rows steer the backbone at the encoder input and in
// the decoder embedding stream; a contrastive loss over pooled prompts and
// enrollments keeps prompts speaker-discriminative.

#pragma once

#include <map>

#include "tsasr/features.hpp"
#include "tsasr/nn.hpp"

namespace tsasr {

struct SpeakerQueryConfig {
  int n_blocks = 2;
  int n_heads = 4;
  int d_q = 64;
  int l_q = 4;
  int d_enroll = 20;  // enrollment feature dimension
  int d_h = 64;       // backbone hidden dimension

  void validate() const {
    if (l_q < 1) throw ConfigError("num queries must be >= 1");
    if (n_blocks < 1) throw ConfigError("speaker-query blocks must be >= 1");
    if (d_q % n_heads != 0)
      throw ConfigError("query dim " + std::to_string(d_q) +
                        " not divisible by heads " + std::to_string(n_heads));
  }
};

struct ContrastiveConfig {
  double kappa = 0.1;  // temperature
  int max_negatives = 10;
  double alpha = 20.0;

  void validate() const {
    if (kappa <= 0.0) throw ConfigError("kappa must be positive");
    if (max_negatives < 1) throw ConfigError("negatives must be >= 1");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
  }
};

struct SpeakerPrompt {
  Tensor prompt;         // [L_q, D_q]
  Tensor pooled;         // column mean of prompt, [D_q]
  Tensor projected;      // [L_q, D_h], shared projection for both injection sites
  Tensor enroll_pooled;  // pooled transformed enrollment stream, [D_q]
};

struct SpeakerQueryBlock {
  LayerNormModule ln_joint, ln_search, ln_ffn_q, ln_ffn_e;
  MultiHeadAttention self_attn, cross_attn;
  Linear kv_proj;  // D_h -> D_q
  FeedForward ffn_q, ffn_e;

  static SpeakerQueryBlock make(Rng& rng, const SpeakerQueryConfig& cfg) {
    SpeakerQueryBlock b;
    b.ln_joint = LayerNormModule::make(cfg.d_q);
    b.ln_search = LayerNormModule::make(cfg.d_q);
    b.ln_ffn_q = LayerNormModule::make(cfg.d_q);
    b.ln_ffn_e = LayerNormModule::make(cfg.d_q);
    b.self_attn = MultiHeadAttention::make(rng, cfg.d_q, cfg.n_heads);
    b.cross_attn = MultiHeadAttention::make(rng, cfg.d_q, cfg.n_heads);
    b.kv_proj = Linear::make(rng, cfg.d_h, cfg.d_q);
    b.ffn_q = FeedForward::make(rng, cfg.d_q, 4 * cfg.d_q);
    b.ffn_e = FeedForward::make(rng, cfg.d_q, 4 * cfg.d_q);
    return b;
  }

  // Joint self-attention over the length-concatenation [queries ; enrollment],
  // split back at the query boundary afterwards.
  std::pair<Tensor, Tensor> learn(const Tensor& queries, const Tensor& enroll) const {
    int64_t l_q = queries.dim(0);
    Tensor joint = concat({queries, enroll}, 0);
    Tensor n = ln_joint.forward(joint);
    joint = add(joint, self_attn.forward(n, n, false));
    return {slice(joint, 0, 0, l_q), slice(joint, 0, l_q, joint.dim(0))};
  }

  // The raw cross-attention read: queries attend over kv_proj(H_conv).
  Tensor search_attention(const Tensor& queries, const Tensor& h_conv,
                          AttnRecord* rec = nullptr) const {
    if (h_conv.dim(0) < 1)
      throw std::invalid_argument("search: empty mixture representation");
    return cross_attn.forward(queries, kv_proj.forward(h_conv), false, rec);
  }

  Tensor search(const Tensor& queries, const Tensor& h_conv,
                AttnRecord* rec = nullptr) const {
    return add(queries, search_attention(ln_search.forward(queries), h_conv, rec));
  }

  // Row-wise FFNs with residuals; zero FFN weights leave both streams intact.
  std::pair<Tensor, Tensor> transform(const Tensor& prompts, const Tensor& enroll) const {
    Tensor p = add(prompts, ffn_q.forward(ln_ffn_q.forward(prompts)));
    Tensor e = add(enroll, ffn_e.forward(ln_ffn_e.forward(enroll)));
    return {p, e};
  }

  std::pair<Tensor, Tensor> forward(const Tensor& queries, const Tensor& enroll,
                                    const Tensor& h_conv,
                                    AttnRecord* rec = nullptr) const {
    auto [q1, e1] = learn(queries, enroll);
    Tensor p = search(q1, h_conv, rec);
    return transform(p, e1);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln_joint.collect(prefix + ".ln_joint", out);
    self_attn.collect(prefix + ".self_attn", out);
    ln_search.collect(prefix + ".ln_search", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    kv_proj.collect(prefix + ".kv_proj", out);
    ln_ffn_q.collect(prefix + ".ln_ffn_q", out);
    ffn_q.collect(prefix + ".ffn_q", out);
    ln_ffn_e.collect(prefix + ".ln_ffn_e", out);
    ffn_e.collect(prefix + ".ffn_e", out);
  }
};

class SpeakerQueryModule {
 public:
  SpeakerQueryConfig cfg;
  Tensor queries;      // [L_q, D_q]
  Linear enroll_proj;  // D_e -> D_q
  std::vector<SpeakerQueryBlock> blocks;
  LayerNormModule ln_post_q, ln_post_e;
  Linear prompt_proj;  // D_q -> D_h, shared by encoder and decoder injection

  static SpeakerQueryModule make(const SpeakerQueryConfig& cfg, Rng& rng) {
    cfg.validate();
    SpeakerQueryModule m;
    m.cfg = cfg;
    m.queries = Tensor::randn({cfg.l_q, cfg.d_q}, rng, 0.02, true);
    m.enroll_proj = Linear::make(rng, cfg.d_enroll, cfg.d_q);
    for (int i = 0; i < cfg.n_blocks; ++i)
      m.blocks.push_back(SpeakerQueryBlock::make(rng, cfg));
    m.ln_post_q = LayerNormModule::make(cfg.d_q);
    m.ln_post_e = LayerNormModule::make(cfg.d_q);
    m.prompt_proj = Linear::make(rng, cfg.d_q, cfg.d_h);
    return m;
  }

  // First-block view of the Learn step on raw enrollment features.
  std::pair<Tensor, Tensor> learn_step(const Tensor& q, const Tensor& enroll_raw) const {
    if (enroll_raw.dim(0) < 1) throw std::invalid_argument("learn: empty enrollment");
    return blocks[0].learn(q, enroll_proj.forward(enroll_raw));
  }

  SpeakerPrompt forward(const FeatureMatrix& enrollment, const Tensor& h_conv,
                        std::vector<AttnRecord>* records = nullptr) const {
    if (enrollment.num_frames() < 1)
      throw std::invalid_argument("speaker query: empty enrollment");
    Tensor es = enroll_proj.forward(enrollment.frames);
    Tensor qs = queries;
    for (size_t i = 0; i < blocks.size(); ++i) {
      AttnRecord* rec = nullptr;
      if (records) {
        records->emplace_back();
        rec = &records->back();
      }
      std::tie(qs, es) = blocks[i].forward(qs, es, h_conv, rec);
    }
    SpeakerPrompt p;
    p.prompt = ln_post_q.forward(qs);
    p.pooled = mean_rows(p.prompt);
    p.enroll_pooled = mean_rows(ln_post_e.forward(es));
    p.projected = prompt_proj.forward(p.prompt);
    return p;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".queries", queries});
    enroll_proj.collect(prefix + ".enroll_proj", out);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    ln_post_q.collect(prefix + ".ln_post_q", out);
    ln_post_e.collect(prefix + ".ln_post_e", out);
    prompt_proj.collect(prefix + ".prompt_proj", out);
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("cosine: dimension mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Tensor num = sum_all(mul(a, b));
  Tensor na = sqrt_elem(sum_all(mul(a, a)));
  Tensor nb = sqrt_elem(sum_all(mul(b, b)));
  if (na.value() == 0.0 || nb.value() == 0.0)
    throw NumericError("cosine: zero-norm vector");
  return div(num, mul(na, nb));
}

// -log exp(cos(p, pos)/kappa) / sum over {pos} + negatives. Implemented as a
// softmax cross entropy over the similarity row with the positive at index 0.
inline Tensor speaker_contrastive_loss(const Tensor& pooled_prompt,
                                       const Tensor& positive,
                                       const std::vector<Tensor>& negatives,
                                       double kappa) {
  if (kappa <= 0.0) throw ConfigError("kappa must be positive");
  std::vector<Tensor> sims;
  sims.push_back(reshape(cosine_similarity(pooled_prompt, positive), {1}));
  for (const auto& n : negatives)
    sims.push_back(reshape(cosine_similarity(pooled_prompt, n), {1}));
  Tensor row = reshape(concat(sims, 0), {1, static_cast<int64_t>(sims.size())});
  return cross_entropy(scale(row, 1.0 / kappa), {0}, {true});
}

inline Tensor combined_loss(const Tensor& ce, const Tensor& contrastive, double alpha) {
  if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
  return add(ce, scale(contrastive, alpha));
}

// ---------------------------------------------------------------------------
// Prompt separation (silhouette over pooled prompts, cosine distance)
// ---------------------------------------------------------------------------

inline double prompt_separation_metric(
    const std::map<std::string, std::vector<std::vector<Real>>>& groups) {
  if (groups.size() < 2)
    throw std::invalid_argument("prompt separation: need >= 2 speakers");
  auto cos_dist = [](const std::vector<Real>& u, const std::vector<Real>& v) {
    Real num = 0.0, nu = 0.0, nv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
      num += u[i] * v[i];
      nu += u[i] * u[i];
      nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw NumericError("prompt separation: zero vector");
    return 1.0 - num / (std::sqrt(nu) * std::sqrt(nv));
  };

  std::vector<std::string> keys;
  for (const auto& [k, v] : groups) {
    if (v.empty()) throw std::invalid_argument("prompt separation: empty group " + k);
    keys.push_back(k);
  }

  double total = 0.0;
  size_t count = 0;
  for (const auto& key : keys) {
    const auto& own = groups.at(key);
    for (size_t i = 0; i < own.size(); ++i) {
      double s = 0.0;
      if (own.size() >= 2) {
        double a = 0.0;
        for (size_t j = 0; j < own.size(); ++j)
          if (j != i) a += cos_dist(own[i], own[j]);
        a /= static_cast<double>(own.size() - 1);
        double b = 1e300;
        for (const auto& other : keys) {
          if (other == key) continue;
          const auto& them = groups.at(other);
          double d = 0.0;
          for (const auto& v : them) d += cos_dist(own[i], v);
          b = std::min(b, d / static_cast<double>(them.size()));
        }
        double m = std::max(a, b);
        s = (m > 0.0) ? (b - a) / m : 0.0;
      }
      total += s;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Cross-attention dumps
// ---------------------------------------------------------------------------

// Mean over blocks of head-averaged weights; rows stay convex combinations.
inline std::vector<std::vector<Real>> average_attention(
    const std::vector<AttnRecord>& records) {
  if (records.empty()) throw std::invalid_argument("no attention records");
  int64_t rows = records[0].rows, cols = records[0].cols;
  std::vector<std::vector<Real>> grid(static_cast<size_t>(rows),
                                      std::vector<Real>(static_cast<size_t>(cols), 0.0));
  for (const auto& r : records) {
    if (r.rows != rows || r.cols != cols)
      throw std::invalid_argument("attention record shapes differ");
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j)
        grid[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
            r.avg_weights[static_cast<size_t>(i * cols + j)] /
            static_cast<Real>(records.size());
  }
  return grid;
}

inline void write_attention_grid(const std::string& path,
                                 const std::vector<std::vector<Real>>& grid) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write attention grid: " + path);
  f.setf(std::ios::fixed);
  f.precision(6);
  for (const auto& row : grid) {
    for (size_t j = 0; j < row.size(); ++j) {
      if (j) f << ' ';
      f << row[j];
    }
    f << '\n';
  }
}

}  // namespace tsasr
