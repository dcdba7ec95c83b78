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

// Speaker-conditioning adapters between the conv front end and the encoder
// blocks: Add, Cat, FiLM, and conditional layer norm. All are initialized to
// exact identity so training starts from the unadapted backbone. The
// embedding provider is a fixed seeded projection, deterministic per speaker
// enrollment.

#pragma once

#include "tsasr/backbone.hpp"

namespace tsasr {

struct SpeakerEmbedding {
  Tensor vector;  // [D_e], unit L2 norm
  std::string speaker_id;
};

// Deterministic replacement for an external speaker-verification model: the
// enrollment's mean feature vector through a fixed random projection,
// L2-normalized.
class SpeakerEmbedder {
 public:
  SpeakerEmbedder() = default;
  SpeakerEmbedder(int n_mels, int d_e, uint64_t seed = 0xE3bEDu) {
    Rng rng(seed);
    proj_ = Tensor::randn({n_mels, d_e}, rng, 1.0 / std::sqrt(static_cast<Real>(n_mels)));
  }

  SpeakerEmbedding embed(const std::string& speaker_id,
                         const FeatureMatrix& enrollment) const {
    if (enrollment.num_frames() == 0)
      throw std::invalid_argument("embed_speaker: empty enrollment");
    int64_t t = enrollment.frames.dim(0), d = enrollment.frames.dim(1);
    if (d != proj_.dim(0))
      throw std::invalid_argument("embed_speaker: feature dim " + std::to_string(d) +
                                  " != projection input " + std::to_string(proj_.dim(0)));
    std::vector<Real> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < d; ++j)
        mean[static_cast<size_t>(j)] += enrollment.frames.data()[static_cast<size_t>(i * d + j)];
    for (auto& v : mean) v /= static_cast<Real>(t);

    int64_t de = proj_.dim(1);
    std::vector<Real> out(static_cast<size_t>(de), 0.0);
    for (int64_t j = 0; j < d; ++j)
      for (int64_t k = 0; k < de; ++k)
        out[static_cast<size_t>(k)] +=
            mean[static_cast<size_t>(j)] * proj_.data()[static_cast<size_t>(j * de + k)];
    Real norm = 0.0;
    for (Real v : out) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("embed_speaker: zero-norm embedding");
    for (auto& v : out) v /= norm;
    return {Tensor::from({de}, std::move(out)), speaker_id};
  }

  int d_e() const { return static_cast<int>(proj_.dim(1)); }

 private:
  Tensor proj_;
};

enum class AdapterKind { kNone, kAdd, kCat, kFilm, kCln };

inline AdapterKind parse_adapter(const std::string& s) {
  if (s == "none") return AdapterKind::kNone;
  if (s == "add") return AdapterKind::kAdd;
  if (s == "cat") return AdapterKind::kCat;
  if (s == "film") return AdapterKind::kFilm;
  if (s == "cln") return AdapterKind::kCln;
  throw ConfigError("adapter must be add|cat|film|cln|none, got: " + s);
}

inline std::string adapter_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::kNone: return "none";
    case AdapterKind::kAdd: return "add";
    case AdapterKind::kCat: return "cat";
    case AdapterKind::kFilm: return "film";
    case AdapterKind::kCln: return "cln";
  }
  return "?";
}

// e as a row vector through a projection, back to a flat [D_out] vector.
inline Tensor project_vec(const Linear& l, const Tensor& e) {
  return reshape(l.forward(reshape(e, {1, e.numel()})), {l.d_out()});
}

// H + repeat_T(w(e)); w starts at zero, so the adapter starts as identity.
struct AddAdapter {
  Linear w;  // D_e -> D_h

  static AddAdapter make(int64_t d_e, int64_t d_h) {
    AddAdapter a;
    a.w = Linear::zero(d_e, d_h);
    return a;
  }
  Tensor forward(const Tensor& h_conv, const Tensor& e) const {
    return add(h_conv, project_vec(w, e));  // [D_h] broadcasts over rows
  }
  void collect(const std::string& prefix, ParamList& out) const {
    w.collect(prefix + ".w", out);
  }
};

// w([H, repeat_T(e)]_f); the weight starts as [I; 0] so the output starts
// as H_conv.
struct CatAdapter {
  Linear w;  // (D_h + D_e) -> D_h

  static CatAdapter make(int64_t d_e, int64_t d_h) {
    CatAdapter a;
    a.w = Linear::zero(d_h + d_e, d_h);
    for (int64_t i = 0; i < d_h; ++i)
      a.w.w.data()[static_cast<size_t>(i * d_h + i)] = 1.0;
    return a;
  }
  Tensor forward(const Tensor& h_conv, const Tensor& e) const {
    Tensor et = tile_rows(e, h_conv.dim(0));
    return w.forward(concat({h_conv, et}, 1));
  }
  void collect(const std::string& prefix, ParamList& out) const {
    w.collect(prefix + ".w", out);
  }
};

// w(e) o H + b(e), broadcast over time. Starts at scale 1, shift 0.
struct FilmAdapter {
  Linear w, b;  // D_e -> D_h each

  static FilmAdapter make(int64_t d_e, int64_t d_h) {
    FilmAdapter a;
    a.w = Linear::zero(d_e, d_h);
    std::fill(a.w.b.data().begin(), a.w.b.data().end(), 1.0);
    a.b = Linear::zero(d_e, d_h);
    return a;
  }
  Tensor forward(const Tensor& h_conv, const Tensor& e) const {
    return add(mul(h_conv, project_vec(w, e)), project_vec(b, e));
  }
  void collect(const std::string& prefix, ParamList& out) const {
    w.collect(prefix + ".scale", out);
    b.collect(prefix + ".shift", out);
  }
};

// gamma_tgt = w(e) o gamma + b(e); with w(e)=1, b(e)=0 this is the standard
// layer norm. In the assembled model the two LNs of the first encoder block
// each get their own modulation pair.
struct ClnAdapter {
  Linear w1, b1;  // for the block's first LN
  Linear w2, b2;  // for the block's second LN

  static ClnAdapter make(int64_t d_e, int64_t d_h) {
    ClnAdapter a;
    auto film_pair = [&](Linear& w, Linear& b) {
      w = Linear::zero(d_e, d_h);
      std::fill(w.b.data().begin(), w.b.data().end(), 1.0);
      b = Linear::zero(d_e, d_h);
    };
    film_pair(a.w1, a.b1);
    film_pair(a.w2, a.b2);
    return a;
  }

  Tensor gamma_target(const Linear& w, const Linear& b, const Tensor& e,
                      const Tensor& gamma) const {
    return add(mul(project_vec(w, e), gamma), project_vec(b, e));
  }
  Tensor gamma1(const Tensor& e, const Tensor& gamma) const {
    return gamma_target(w1, b1, e, gamma);
  }
  Tensor gamma2(const Tensor& e, const Tensor& gamma) const {
    return gamma_target(w2, b2, e, gamma);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    w1.collect(prefix + ".ln1.scale", out);
    b1.collect(prefix + ".ln1.shift", out);
    w2.collect(prefix + ".ln2.scale", out);
    b2.collect(prefix + ".ln2.shift", out);
  }
};

// Standalone conditional layer norm over H_conv, the first-LN view.
inline Tensor adapt_cln(const Tensor& h_conv, const Tensor& e, const ClnAdapter& a,
                        const Tensor& gamma, const Tensor& beta, Real eps = 1e-5) {
  return layer_norm(h_conv, a.gamma1(e, gamma), beta, eps);
}

}  // namespace tsasr
