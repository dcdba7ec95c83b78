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

// LoRA fine-tuning policy: freeze the whole backbone, then wrap the chosen
// attention projections with rank-R side paths. Encoder blocks expose one
// attention (4 projections), decoder blocks two (8 projections). No extra
// scaling factor is applied to the side path.

#pragma once

#include <map>
#include <sstream>

#include "tsasr/backbone.hpp"

namespace tsasr {

struct LoRAConfig {
  int rank = 16;
  bool wrap_query = true;
  bool wrap_key = true;
  bool wrap_value = true;
  bool wrap_output = true;
  enum class Scope { kEncoder, kDecoder, kBoth };
  Scope scope = Scope::kBoth;

  int projections_per_attention() const {
    return (wrap_query ? 1 : 0) + (wrap_key ? 1 : 0) + (wrap_value ? 1 : 0) +
           (wrap_output ? 1 : 0);
  }
  void validate() const {
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    if (projections_per_attention() == 0)
      throw ConfigError("lora: no target projections selected");
  }
};

inline LoRAConfig::Scope parse_lora_scope(const std::string& s) {
  if (s == "encoder") return LoRAConfig::Scope::kEncoder;
  if (s == "decoder") return LoRAConfig::Scope::kDecoder;
  if (s == "both") return LoRAConfig::Scope::kBoth;
  throw ConfigError("lora scope must be encoder|decoder|both, got: " + s);
}

inline void freeze_params(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.t;
    t.set_frozen(true);
  }
}

// Freeze every backbone weight, then attach trainable side paths.
inline void apply_lora(Backbone& model, const LoRAConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamList all;
  model.collect("backbone", all);
  freeze_params(all);

  auto wrap_attention = [&](MultiHeadAttention& a) {
    if (cfg.wrap_query) wrap_lora(a.q, cfg.rank, rng);
    if (cfg.wrap_key) wrap_lora(a.k, cfg.rank, rng);
    if (cfg.wrap_value) wrap_lora(a.v, cfg.rank, rng);
    if (cfg.wrap_output) wrap_lora(a.o, cfg.rank, rng);
  };
  if (cfg.scope != LoRAConfig::Scope::kDecoder)
    for (auto& b : model.enc_blocks) wrap_attention(b.attn);
  if (cfg.scope != LoRAConfig::Scope::kEncoder)
    for (auto& b : model.dec_blocks) {
      wrap_attention(b.self_attn);
      wrap_attention(b.cross_attn);
    }
}

// Added parameters for one wrapped projection: R * (D_in + D_out);
// 2*R*D for a square projection.
inline int64_t lora_params_per_projection(int64_t d_in, int64_t d_out, int64_t rank) {
  return rank * (d_in + d_out);
}

// Closed-form added-parameter count for a backbone configuration. All
// wrapped projections are square D x D.
inline int64_t lora_added_param_count(const ModelConfig& m, const LoRAConfig& c) {
  int64_t per_proj = lora_params_per_projection(m.d_model, m.d_model, c.rank);
  int64_t per_attn = c.projections_per_attention() * per_proj;
  int64_t enc = (c.scope != LoRAConfig::Scope::kDecoder)
                    ? static_cast<int64_t>(m.n_enc_blocks) * per_attn
                    : 0;
  int64_t dec = (c.scope != LoRAConfig::Scope::kEncoder)
                    ? static_cast<int64_t>(m.n_dec_blocks) * 2 * per_attn
                    : 0;
  return enc + dec;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamReportRow {
  std::string name;
  int64_t count = 0;
  bool frozen = false;
};

struct ParamReport {
  std::vector<ParamReportRow> rows;
  std::map<std::string, int64_t> total_by_component;
  std::map<std::string, int64_t> trainable_by_component;
  int64_t total = 0;
  int64_t trainable = 0;

  std::string table() const {
    std::ostringstream os;
    os << "name\tcount\tfrozen\n";
    for (const auto& r : rows)
      os << r.name << '\t' << r.count << '\t' << (r.frozen ? "yes" : "no") << '\n';
    for (const auto& [c, n] : total_by_component) {
      int64_t tr = trainable_by_component.count(c) ? trainable_by_component.at(c) : 0;
      os << "component " << c << ": total=" << n << " trainable=" << tr << '\n';
    }
    os << "total=" << total << " trainable=" << trainable << '\n';
    return os.str();
  }
};

// LoRA tensors report as their own component regardless of where they live.
inline std::string component_of(const std::string& name) {
  if (name.size() >= 7 && (name.rfind(".lora_a") == name.size() - 7 ||
                           name.rfind(".lora_b") == name.size() - 7))
    return "lora";
  auto dot = name.find('.');
  return (dot == std::string::npos) ? name : name.substr(0, dot);
}

inline ParamReport trainable_param_report(const ParamList& params) {
  ParamReport rep;
  for (const auto& p : params) {
    ParamReportRow row;
    row.name = p.name;
    row.count = p.t.numel();
    row.frozen = p.t.frozen();
    std::string comp = component_of(p.name);
    rep.total_by_component[comp] += row.count;
    rep.total += row.count;
    if (!row.frozen) {
      rep.trainable_by_component[comp] += row.count;
      rep.trainable += row.count;
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace tsasr
