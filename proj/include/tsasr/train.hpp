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

// Training loop pieces: Adam, warm-up learning-rate schedule, edit-distance
// scoring, and the checkpoint container (float32 payload, bit-exact round
// trips, best-k averaging).

#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "tsasr/model.hpp"

namespace tsasr {

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warm-up to the peak, then (by default)
// inverse-square-root decay, continuous at the warm-up boundary.
// ---------------------------------------------------------------------------

enum class LrDecay { kNone, kInvSqrt };

inline LrDecay parse_lr_decay(const std::string& s) {
  if (s == "none") return LrDecay::kNone;
  if (s == "inv-sqrt") return LrDecay::kInvSqrt;
  throw ConfigError("lr decay must be none|inv-sqrt, got: " + s);
}

inline double lr_at(int64_t step, double peak_lr, int64_t warmup_steps,
                    LrDecay decay = LrDecay::kInvSqrt) {
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step <= warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (decay == LrDecay::kNone) return peak_lr;
  return peak_lr * std::sqrt(static_cast<double>(warmup_steps) /
                             static_cast<double>(step));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Parameters must be passed in a stable order across steps. Frozen
  // parameters are skipped entirely; gradients are consumed and cleared.
  void step(const ParamList& params, double lr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].t.data().size(), 0.0);
        v_[i].assign(params[i].t.data().size(), 0.0);
      }
    }
    if (m_.size() != params.size())
      throw std::invalid_argument("Adam: parameter list changed size");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i].t;
      if (p.frozen() || !p.requires_grad()) continue;
      if (!p.has_grad()) continue;
      auto& g = p.grad();
      auto& d = p.data();
      for (size_t k = 0; k < d.size(); ++k) {
        double gk = g[k] + cfg_.weight_decay * d[k];
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * gk;
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * gk * gk;
        double mhat = m_[i][k] / bc1;
        double vhat = v_[i][k] / bc2;
        d[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// WER / token error rate
// ---------------------------------------------------------------------------

struct WerCounts {
  int sub = 0, del = 0, ins = 0;
  int ref_len = 0;
  bool empty_ref_convention = false;  // rate divided by 1 instead of 0

  int errors() const { return sub + del + ins; }
  double rate() const {
    if (ref_len > 0) return static_cast<double>(errors()) / ref_len;
    return static_cast<double>(errors());  // the flagged I/1 convention
  }
};

// Unit-cost Levenshtein alignment. On cost ties the alignment prefers
// match/substitution, then deletion, then insertion; counts are propagated
// cell by cell so the decomposition is deterministic.
inline WerCounts wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  size_t nr = ref.size(), nh = hyp.size();
  struct Cell {
    int cost, sub, del, ins;
  };
  std::vector<Cell> prev(nh + 1), cur(nh + 1);
  for (size_t j = 0; j <= nh; ++j) prev[j] = {static_cast<int>(j), 0, 0, static_cast<int>(j)};
  for (size_t i = 1; i <= nr; ++i) {
    cur[0] = {static_cast<int>(i), 0, static_cast<int>(i), 0};
    for (size_t j = 1; j <= nh; ++j) {
      bool match = (ref[i - 1] == hyp[j - 1]);
      int diag_cost = prev[j - 1].cost + (match ? 0 : 1);
      int del_cost = prev[j].cost + 1;
      int ins_cost = cur[j - 1].cost + 1;
      int best = std::min(diag_cost, std::min(del_cost, ins_cost));
      if (diag_cost == best) {
        cur[j] = prev[j - 1];
        cur[j].cost = best;
        if (!match) ++cur[j].sub;
      } else if (del_cost == best) {
        cur[j] = prev[j];
        cur[j].cost = best;
        ++cur[j].del;
      } else {
        cur[j] = cur[j - 1];
        cur[j].cost = best;
        ++cur[j].ins;
      }
    }
    std::swap(prev, cur);
  }
  WerCounts w;
  w.sub = prev[nh].sub;
  w.del = prev[nh].del;
  w.ins = prev[nh].ins;
  w.ref_len = static_cast<int>(nr);
  w.empty_ref_convention = (nr == 0 && nh > 0);
  return w;
}

inline WerCounts& operator+=(WerCounts& a, const WerCounts& b) {
  a.sub += b.sub;
  a.del += b.del;
  a.ins += b.ins;
  a.ref_len += b.ref_len;
  a.empty_ref_convention = a.empty_ref_convention || b.empty_ref_convention;
  return a;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  // name -> (shape, float32 payload), insertion-ordered via map for
  // deterministic files.
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
  uint64_t config_hash = 0;
  std::string config_text;
  int epoch = 0;
  double val_metric = 0.0;
  std::vector<int> source_epochs;
};

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline Checkpoint snapshot_params(const ParamList& params, uint64_t config_hash,
                                  const std::string& config_text, int epoch,
                                  double val_metric) {
  Checkpoint ck;
  ck.config_hash = config_hash;
  ck.config_text = config_text;
  ck.epoch = epoch;
  ck.val_metric = val_metric;
  ck.source_epochs = {epoch};
  for (const auto& p : params) {
    std::vector<float> buf(p.t.data().size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p.t.data()[i]);
    ck.tensors[p.name] = {p.t.shape(), std::move(buf)};
  }
  return ck;
}

// LoRA-only snapshot: just the side-path tensors plus the config hash.
inline Checkpoint snapshot_lora(const ParamList& params, uint64_t config_hash,
                                const std::string& config_text, int epoch,
                                double val_metric) {
  ParamList lora_only;
  for (const auto& p : params)
    if (component_of(p.name) == "lora") lora_only.push_back(p);
  return snapshot_params(lora_only, config_hash, config_text, epoch, val_metric);
}

inline void restore_params(const ParamList& params, const Checkpoint& ck,
                           bool allow_partial = false) {
  std::map<std::string, Tensor> by_name;
  for (const auto& p : params) by_name.emplace(p.name, p.t);
  size_t applied = 0;
  for (const auto& [name, payload] : ck.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (allow_partial) continue;
      throw DataError("checkpoint tensor " + name + " not present in model");
    }
    Tensor t = it->second;
    if (t.shape() != payload.first)
      throw DataError("checkpoint tensor " + name + " has shape " +
                      shape_str(payload.first) + ", model expects " +
                      shape_str(t.shape()));
    for (size_t i = 0; i < payload.second.size(); ++i)
      t.data()[i] = static_cast<double>(payload.second[i]);
    ++applied;
  }
  if (!allow_partial && applied != by_name.size())
    throw DataError("checkpoint covers " + std::to_string(applied) + " of " +
                    std::to_string(by_name.size()) + " model tensors");
}

constexpr char kCheckpointMagic[8] = {'T', 'S', 'C', 'K', 'P', 'T', '0', '1'};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto w64 = [&](uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
  f.write(kCheckpointMagic, 8);
  w64(ck.config_hash);
  w32(static_cast<uint32_t>(ck.epoch));
  double vm = ck.val_metric;
  f.write(reinterpret_cast<const char*>(&vm), 8);
  w32(static_cast<uint32_t>(ck.source_epochs.size()));
  for (int e : ck.source_epochs) w32(static_cast<uint32_t>(e));
  w32(static_cast<uint32_t>(ck.config_text.size()));
  f.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  w32(static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, payload] : ck.tensors) {
    w32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    w32(static_cast<uint32_t>(payload.first.size()));
    for (int64_t d : payload.first) w32(static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(payload.second.data()),
            static_cast<std::streamsize>(payload.second.size() * sizeof(float)));
  }
  if (!f) throw DataError("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("bad checkpoint header: " + path);
  auto r32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto r64 = [&]() {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  Checkpoint ck;
  ck.config_hash = r64();
  ck.epoch = static_cast<int>(r32());
  f.read(reinterpret_cast<char*>(&ck.val_metric), 8);
  uint32_t n_src = r32();
  for (uint32_t i = 0; i < n_src; ++i) ck.source_epochs.push_back(static_cast<int>(r32()));
  uint32_t text_len = r32();
  ck.config_text.resize(text_len);
  f.read(ck.config_text.data(), text_len);
  uint32_t n = r32();
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t name_len = r32();
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    uint32_t ndim = r32();
    Shape shape(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<int64_t>(r32());
      numel *= shape[d];
    }
    std::vector<float> buf(static_cast<size_t>(numel));
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw DataError("truncated checkpoint: " + path);
    ck.tensors[name] = {std::move(shape), std::move(buf)};
  }
  return ck;
}

// Arithmetic mean per tensor over the best-k checkpoints (accumulated in
// double, stored back as float32). Metadata records the source epochs.
inline Checkpoint average_checkpoints(const std::vector<Checkpoint>& cks) {
  if (cks.empty()) throw std::invalid_argument("average_checkpoints: no inputs");
  Checkpoint out = cks[0];
  out.source_epochs.clear();
  std::map<std::string, std::vector<double>> acc;
  for (const auto& [name, payload] : out.tensors)
    acc[name].assign(payload.second.size(), 0.0);
  for (const auto& ck : cks) {
    if (ck.config_hash != out.config_hash)
      throw DataError("average_checkpoints: config hashes differ");
    if (ck.tensors.size() != out.tensors.size())
      throw DataError("average_checkpoints: tensor sets differ");
    for (const auto& [name, payload] : ck.tensors) {
      auto it = out.tensors.find(name);
      if (it == out.tensors.end() || it->second.first != payload.first)
        throw DataError("average_checkpoints: shape mismatch for " + name);
      auto& a = acc[name];
      for (size_t i = 0; i < a.size(); ++i) a[i] += payload.second[i];
    }
    out.source_epochs.push_back(ck.epoch);
  }
  double inv = 1.0 / static_cast<double>(cks.size());
  double best = cks[0].val_metric;
  for (const auto& ck : cks) best = std::min(best, ck.val_metric);
  out.val_metric = best;
  for (auto& [name, payload] : out.tensors) {
    const auto& a = acc[name];
    for (size_t i = 0; i < a.size(); ++i)
      payload.second[i] = static_cast<float>(a[i] * inv);
  }
  return out;
}

}  // namespace tsasr
