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

// Whisper-shaped encoder-decoder at configurable desk scale: a two-layer
// conv front end (second layer stride 2), pre-norm transformer blocks,
// sinusoidal encoder positions, learned decoder positions, and the special
// token protocol <sot> <lang> <task> ... <eot> with optional speaker-prompt
// rows injected on either side.

#pragma once

#include "tsasr/features.hpp"
#include "tsasr/nn.hpp"

namespace tsasr {

struct SpecialTokens {
  int sot = 16;
  int eot = 17;
  int prev = 18;
  int lang = 19;
  int task = 20;
};

struct ModelConfig {
  int n_mels = 20;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 256;
  int n_enc_blocks = 2;
  int n_dec_blocks = 2;
  int vocab_size = 21;  // transcript tokens plus the five specials
  int max_target_len = 24;
  SpecialTokens specials;
  int max_positions = 96;
  // Prompt-row handling in the encoder; the source protocol leaves both
  // unspecified, so they are explicit switches.
  bool enc_prompt_prepend = true;
  bool enc_keep_prompt_rows = true;

  void validate() const {
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    std::vector<int> ids = {specials.sot, specials.eot, specials.prev,
                            specials.lang, specials.task};
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= vocab_size)
        throw ConfigError("special token id " + std::to_string(ids[i]) +
                          " outside vocab of size " + std::to_string(vocab_size));
      for (size_t j = i + 1; j < ids.size(); ++j)
        if (ids[i] == ids[j]) throw ConfigError("special token ids must be distinct");
    }
  }

  bool is_transcript_token(int id) const {
    return id >= 0 && id < vocab_size && id != specials.sot && id != specials.eot &&
           id != specials.prev && id != specials.lang && id != specials.task;
  }

  // Desk-scale preset used throughout the tests.
  static ModelConfig desk(int text_vocab = 16, int n_mels = 20) {
    ModelConfig c;
    c.n_mels = n_mels;
    c.vocab_size = text_vocab + 5;
    c.specials = {text_vocab, text_vocab + 1, text_vocab + 2, text_vocab + 3,
                  text_vocab + 4};
    return c;
  }

  // Reference dimensions of the multilingual medium model; used for
  // parameter-count audits only, never instantiated here.
  static ModelConfig whisper_medium() {
    ModelConfig c;
    c.n_mels = 80;
    c.d_model = 1024;
    c.n_heads = 16;
    c.d_ffn = 4096;
    c.n_enc_blocks = 24;
    c.n_dec_blocks = 24;
    c.vocab_size = 51865;
    c.max_target_len = 448;
    c.specials = {50258, 50257, 50361, 50259, 50359};
    c.max_positions = 448;
    return c;
  }
};

// Target ids and loss mask aligned with decoder logit positions.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<bool> loss_mask;
};

struct EncoderBlock {
  LayerNormModule ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ffn;

  static EncoderBlock make(Rng& rng, const ModelConfig& cfg) {
    EncoderBlock b;
    b.ln1 = LayerNormModule::make(cfg.d_model);
    b.ln2 = LayerNormModule::make(cfg.d_model);
    b.attn = MultiHeadAttention::make(rng, cfg.d_model, cfg.n_heads);
    b.ffn = FeedForward::make(rng, cfg.d_model, cfg.d_ffn);
    return b;
  }

  // Conditional layer-norm hook: when gamma overrides are given they replace
  // this block's LN scale vectors (the CLN adaptation path).
  Tensor forward(const Tensor& x, const Tensor* gamma1 = nullptr,
                 const Tensor* gamma2 = nullptr) const {
    Tensor n1 = layer_norm(x, gamma1 ? *gamma1 : ln1.gamma, ln1.beta, ln1.eps);
    Tensor h = add(x, attn.forward(n1, n1, false));
    Tensor n2 = layer_norm(h, gamma2 ? *gamma2 : ln2.gamma, ln2.beta, ln2.eps);
    return add(h, ffn.forward(n2));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

struct DecoderBlock {
  LayerNormModule ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;

  static DecoderBlock make(Rng& rng, const ModelConfig& cfg) {
    DecoderBlock b;
    b.ln1 = LayerNormModule::make(cfg.d_model);
    b.ln2 = LayerNormModule::make(cfg.d_model);
    b.ln3 = LayerNormModule::make(cfg.d_model);
    b.self_attn = MultiHeadAttention::make(rng, cfg.d_model, cfg.n_heads);
    b.cross_attn = MultiHeadAttention::make(rng, cfg.d_model, cfg.n_heads);
    b.ffn = FeedForward::make(rng, cfg.d_model, cfg.d_ffn);
    return b;
  }

  Tensor forward(const Tensor& x, const Tensor& h_enc,
                 AttnRecord* cross_rec = nullptr) const {
    Tensor n1 = ln1.forward(x);
    Tensor h = add(x, self_attn.forward(n1, n1, true));
    h = add(h, cross_attn.forward(ln2.forward(h), h_enc, false, cross_rec));
    return add(h, ffn.forward(ln3.forward(h)));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    self_attn.collect(prefix + ".self_attn", out);
    ln2.collect(prefix + ".ln2", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    ln3.collect(prefix + ".ln3", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

class Backbone {
 public:
  ModelConfig cfg;
  Tensor conv1_k, conv1_b;  // [3, n_mels, D], [D]
  Tensor conv2_k, conv2_b;  // [3, D, D], [D]
  std::vector<EncoderBlock> enc_blocks;
  LayerNormModule enc_ln_post;
  Tensor token_emb;  // [V, D]
  Tensor pos_emb;    // [max_positions, D]
  std::vector<DecoderBlock> dec_blocks;
  LayerNormModule dec_ln_post;
  Linear head;  // D -> V

  static Backbone make(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone m;
    m.cfg = cfg;
    Real conv1_std = 1.0 / std::sqrt(3.0 * cfg.n_mels);
    Real conv2_std = 1.0 / std::sqrt(3.0 * cfg.d_model);
    m.conv1_k = Tensor::randn({3, cfg.n_mels, cfg.d_model}, rng, conv1_std, true);
    m.conv1_b = Tensor::zeros({cfg.d_model}, true);
    m.conv2_k = Tensor::randn({3, cfg.d_model, cfg.d_model}, rng, conv2_std, true);
    m.conv2_b = Tensor::zeros({cfg.d_model}, true);
    for (int i = 0; i < cfg.n_enc_blocks; ++i)
      m.enc_blocks.push_back(EncoderBlock::make(rng, cfg));
    m.enc_ln_post = LayerNormModule::make(cfg.d_model);
    m.token_emb = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.1, true);
    m.pos_emb = Tensor::randn({cfg.max_positions, cfg.d_model}, rng, 0.01, true);
    for (int i = 0; i < cfg.n_dec_blocks; ++i)
      m.dec_blocks.push_back(DecoderBlock::make(rng, cfg));
    m.dec_ln_post = LayerNormModule::make(cfg.d_model);
    m.head = Linear::make(rng, cfg.d_model, cfg.vocab_size);
    return m;
  }

  // ConvBlock: width-3 stride-1 conv, GeLU, width-3 stride-2 conv, GeLU.
  Tensor conv_forward(const Tensor& features) const {
    if (features.dim(1) != cfg.n_mels)
      throw std::invalid_argument("conv_forward: feature dim " +
                                  std::to_string(features.dim(1)) + " != n_mels " +
                                  std::to_string(cfg.n_mels));
    Tensor h = gelu(conv1d(features, conv1_k, conv1_b, 1, 1));
    return gelu(conv1d(h, conv2_k, conv2_b, 2, 1));
  }

  // Encoder over post-conv rows; prompt rows (if any) join the sequence
  // before positions are added, so they own their slots' encodings.
  // gamma overrides feed the first block's conditional layer norms.
  Tensor encode_hconv(const Tensor& h_conv, const Tensor& enc_prompt = Tensor(),
                      const Tensor* cln_gamma1 = nullptr,
                      const Tensor* cln_gamma2 = nullptr) const {
    Tensor x = h_conv;
    int64_t prompt_rows = 0;
    if (enc_prompt.defined()) {
      prompt_rows = enc_prompt.dim(0);
      x = cfg.enc_prompt_prepend ? concat({enc_prompt, h_conv}, 0)
                                 : concat({h_conv, enc_prompt}, 0);
    }
    x = add(x, sinusoid_positions(x.dim(0), cfg.d_model));
    for (size_t i = 0; i < enc_blocks.size(); ++i) {
      if (i == 0)
        x = enc_blocks[i].forward(x, cln_gamma1, cln_gamma2);
      else
        x = enc_blocks[i].forward(x);
    }
    x = enc_ln_post.forward(x);
    if (prompt_rows > 0 && !cfg.enc_keep_prompt_rows) {
      int64_t n = x.dim(0);
      x = cfg.enc_prompt_prepend ? slice(x, 0, prompt_rows, n)
                                 : slice(x, 0, 0, n - prompt_rows);
    }
    return x;
  }

  Tensor encode(const FeatureMatrix& features, const Tensor& enc_prompt = Tensor()) const {
    return encode_hconv(conv_forward(features.frames), enc_prompt);
  }

  // Decoder slot layout. Token id -1 marks a prompt row.
  std::vector<int> stream_slots(const std::vector<int>& transcript,
                                int64_t prompt_rows) const {
    std::vector<int> slots;
    if (prompt_rows > 0) {
      slots.push_back(cfg.specials.prev);
      for (int64_t i = 0; i < prompt_rows; ++i) slots.push_back(-1);
    }
    slots.push_back(cfg.specials.sot);
    slots.push_back(cfg.specials.lang);
    slots.push_back(cfg.specials.task);
    for (int y : transcript) slots.push_back(y);
    return slots;
  }

  // Teacher-forcing targets: position i predicts slot i+1; only transcript
  // tokens and the final <eot> contribute to the loss.
  TokenSequence make_targets(const std::vector<int>& transcript,
                             int64_t prompt_rows) const {
    std::vector<int> slots = stream_slots(transcript, prompt_rows);
    TokenSequence seq;
    size_t n = slots.size();
    seq.ids.resize(n);
    seq.loss_mask.resize(n);
    for (size_t i = 0; i < n; ++i) {
      int next = (i + 1 < n) ? slots[i + 1] : cfg.specials.eot;
      bool is_pred_target = (i + 1 == n) || cfg.is_transcript_token(next);
      seq.ids[i] = (next >= 0) ? next : cfg.specials.eot;
      seq.loss_mask[i] = is_pred_target;
    }
    return seq;
  }

  // Per-position vocabulary logits for an assembled decoder stream.
  // dec_prompt, when given, is the [L_q, D] prompt block inserted between
  // <prev> and <sot>.
  Tensor decode_logits(const Tensor& h_enc, const std::vector<int>& transcript,
                       const Tensor& dec_prompt = Tensor()) const {
    for (int y : transcript)
      if (!cfg.is_transcript_token(y))
        throw std::invalid_argument("decode_logits: id " + std::to_string(y) +
                                    " is not a transcript token");
    int64_t prompt_rows = dec_prompt.defined() ? dec_prompt.dim(0) : 0;
    std::vector<int> slots = stream_slots(transcript, prompt_rows);
    int64_t n = static_cast<int64_t>(slots.size());
    if (n > cfg.max_positions)
      throw std::invalid_argument("decoder stream length " + std::to_string(n) +
                                  " exceeds max_positions " +
                                  std::to_string(cfg.max_positions));

    Tensor x;
    if (prompt_rows > 0) {
      Tensor pre = embedding(token_emb, {cfg.specials.prev});
      std::vector<int> post_ids(slots.begin() + 1 + prompt_rows, slots.end());
      Tensor post = embedding(token_emb, post_ids);
      x = concat({pre, dec_prompt, post}, 0);
    } else {
      x = embedding(token_emb, slots);
    }
    x = add(x, slice(pos_emb, 0, 0, n));
    for (const auto& b : dec_blocks) x = b.forward(x, h_enc);
    x = dec_ln_post.forward(x);
    return head.forward(x);
  }

  Tensor compute_loss(const Tensor& logits, const TokenSequence& targets,
                      bool* all_masked = nullptr) const {
    return cross_entropy(logits, targets.ids, targets.loss_mask, all_masked);
  }

  // Argmax decoding; ties resolve to the lowest token id. Returns transcript
  // tokens only (no specials).
  std::vector<int> greedy_decode(const Tensor& h_enc, const Tensor& dec_prompt,
                                 int max_len) const {
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
      Tensor logits = decode_logits(h_enc, out, dec_prompt);
      int64_t last = logits.dim(0) - 1;
      int64_t v_count = logits.dim(1);
      const Real* row = logits.data().data() + last * v_count;
      int best = 0;
      for (int vv = 1; vv < v_count; ++vv)
        if (row[vv] > row[best]) best = vv;
      if (best == cfg.specials.eot) break;
      if (!cfg.is_transcript_token(best)) break;  // degenerate model; stop
      out.push_back(best);
    }
    return out;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".conv1.weight", conv1_k});
    out.push_back({prefix + ".conv1.bias", conv1_b});
    out.push_back({prefix + ".conv2.weight", conv2_k});
    out.push_back({prefix + ".conv2.bias", conv2_b});
    for (size_t i = 0; i < enc_blocks.size(); ++i)
      enc_blocks[i].collect(prefix + ".encoder.block" + std::to_string(i), out);
    enc_ln_post.collect(prefix + ".encoder.ln_post", out);
    out.push_back({prefix + ".decoder.token_emb", token_emb});
    out.push_back({prefix + ".decoder.pos_emb", pos_emb});
    for (size_t i = 0; i < dec_blocks.size(); ++i)
      dec_blocks[i].collect(prefix + ".decoder.block" + std::to_string(i), out);
    dec_ln_post.collect(prefix + ".decoder.ln_post", out);
    head.collect(prefix + ".decoder.head", out);
  }
};

}  // namespace tsasr
