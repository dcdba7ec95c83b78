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

// Seeded synthetic two-speaker corpus generation. Every vocabulary token is a
// fixed 100 ms tone complex; which partial stack carries a token depends on
// the speaker's timbre (fundamental range + harmonic amplitudes), so reading
// the target transcript out of a mixture genuinely requires separating the
// speakers with the enrollment clue.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "tsasr/features.hpp"

namespace tsasr {

// ---------------------------------------------------------------------------
// Synthetic speakers
// ---------------------------------------------------------------------------

struct SpeakerTimbre {
  double f0_lo = 220.0;
  double f0_hi = 380.0;
  std::array<double, 3> harmonic_amps{1.0, 0.5, 0.25};
  std::array<double, 3> phases{0.0, 0.0, 0.0};
};

class SyntheticSpeaker {
 public:
  static constexpr double kTokenDurationMs = 100.0;
  static constexpr double kRampMs = 5.0;

  SyntheticSpeaker() = default;

  // Speakers are laid out over log-spaced fundamental bands with a seeded
  // jitter; harmonic colors come from the per-speaker stream. Bands of
  // neighbouring speakers overlap, the harmonic profile disambiguates.
  static SyntheticSpeaker make(int index, int total, int vocab, uint64_t seed,
                               int sample_rate) {
    SyntheticSpeaker s;
    std::ostringstream name;
    name << "spk" << (index < 10 ? "0" : "") << index;
    s.id_ = name.str();
    s.vocab_ = vocab;
    s.sample_rate_ = sample_rate;
    Rng rng = Rng(seed).fork(0x5eedu).fork(static_cast<uint64_t>(index));
    double lo = 230.0, hi = 900.0;
    double frac = (total > 1) ? static_cast<double>(index) / (total - 1) : 0.0;
    double base = lo * std::pow(hi / lo, frac);
    base *= 1.0 + 0.04 * (rng.uniform() - 0.5);
    s.timbre_.f0_lo = base;
    s.timbre_.f0_hi = base * std::pow(2.0, 0.8);  // ~0.8 octave per speaker
    double norm = 0.0;
    for (auto& a : s.timbre_.harmonic_amps) {
      a = rng.uniform(0.25, 1.0);
      norm += a * a;
    }
    for (auto& a : s.timbre_.harmonic_amps) a /= std::sqrt(norm);
    for (auto& p : s.timbre_.phases) p = rng.uniform(0.0, 2.0 * M_PI);
    return s;
  }

  double token_freq(int token) const {
    if (token < 0 || token >= vocab_)
      throw std::invalid_argument("token " + std::to_string(token) +
                                  " outside vocabulary of size " + std::to_string(vocab_));
    if (vocab_ == 1) return timbre_.f0_lo;
    double r = static_cast<double>(token) / (vocab_ - 1);
    return timbre_.f0_lo * std::pow(timbre_.f0_hi / timbre_.f0_lo, r);
  }

  // Same (speaker, token sequence) always renders the identical waveform.
  Waveform render(const std::vector<int>& tokens) const {
    int seg = static_cast<int>(sample_rate_ * kTokenDurationMs / 1000.0);
    int ramp = static_cast<int>(sample_rate_ * kRampMs / 1000.0);
    Waveform w;
    w.sample_rate = sample_rate_;
    w.samples.assign(tokens.size() * static_cast<size_t>(seg), 0.0);
    for (size_t ti = 0; ti < tokens.size(); ++ti) {
      double f0 = token_freq(tokens[ti]);
      Real* dst = w.samples.data() + ti * static_cast<size_t>(seg);
      for (int n = 0; n < seg; ++n) {
        double t = static_cast<double>(n) / sample_rate_;
        double v = 0.0;
        for (int h = 0; h < 3; ++h)
          v += timbre_.harmonic_amps[static_cast<size_t>(h)] *
               std::sin(2.0 * M_PI * f0 * (h + 1) * t +
                        timbre_.phases[static_cast<size_t>(h)]);
        double env = 1.0;
        if (n < ramp) env = 0.5 - 0.5 * std::cos(M_PI * n / ramp);
        if (n >= seg - ramp) env = 0.5 - 0.5 * std::cos(M_PI * (seg - 1 - n) / ramp);
        dst[n] = 0.3 * env * v;
      }
    }
    return w;
  }

  const std::string& id() const { return id_; }
  const SpeakerTimbre& timbre() const { return timbre_; }
  int vocab() const { return vocab_; }

 private:
  std::string id_;
  int vocab_ = 0;
  int sample_rate_ = 16000;
  SpeakerTimbre timbre_;
};

// ---------------------------------------------------------------------------
// SNR sampling and mixing
// ---------------------------------------------------------------------------

enum class MixCondition { kClean, kNoisy };
enum class MixMode { kMin, kMax };

inline MixCondition parse_condition(const std::string& s) {
  if (s == "clean") return MixCondition::kClean;
  if (s == "noisy") return MixCondition::kNoisy;
  throw ConfigError("condition must be clean|noisy, got: " + s);
}
inline MixMode parse_mode(const std::string& s) {
  if (s == "min") return MixMode::kMin;
  if (s == "max") return MixMode::kMax;
  throw ConfigError("mode must be min|max, got: " + s);
}

// Clean mixtures: N(0 dB, 4.1 dB); noisy mixtures: N(-2 dB, 3.6 dB).
inline double sample_snr(MixCondition condition, Rng& rng) {
  return condition == MixCondition::kClean ? rng.gaussian(0.0, 4.1)
                                           : rng.gaussian(-2.0, 3.6);
}

struct MixResult {
  Waveform mixture;
  double realized_snr_db = 0.0;
  double interferer_scale = 1.0;
};

// Scale the interferer so the target/interferer energy ratio over the
// overlapped region equals snr_db. Min mode truncates to the shorter source,
// max mode zero-pads to the longer one.
inline MixResult mix_at_snr(const Waveform& target, const Waveform& interferer,
                            double snr_db, MixMode mode) {
  if (target.sample_rate != interferer.sample_rate)
    throw std::invalid_argument("mix_at_snr: sample rates differ");
  size_t nt = target.samples.size(), ni = interferer.samples.size();
  size_t overlap = std::min(nt, ni);
  Real et = 0.0, ei = 0.0;
  for (size_t n = 0; n < overlap; ++n) {
    et += target.samples[n] * target.samples[n];
    ei += interferer.samples[n] * interferer.samples[n];
  }
  if (et <= 0.0 || ei <= 0.0)
    throw std::invalid_argument("mix_at_snr: zero-energy input over overlap");
  double scale = std::sqrt(et / (ei * std::pow(10.0, snr_db / 10.0)));

  MixResult res;
  res.interferer_scale = scale;
  size_t out_len = (mode == MixMode::kMin) ? overlap : std::max(nt, ni);
  res.mixture.sample_rate = target.sample_rate;
  res.mixture.samples.assign(out_len, 0.0);
  for (size_t n = 0; n < out_len; ++n) {
    Real v = 0.0;
    if (n < nt) v += target.samples[n];
    if (n < ni) v += scale * interferer.samples[n];
    res.mixture.samples[n] = v;
  }
  // Audit value recomputed from the actually mixed pair.
  Real ei_scaled = 0.0;
  for (size_t n = 0; n < overlap; ++n) {
    Real s = scale * interferer.samples[n];
    ei_scaled += s * s;
  }
  res.realized_snr_db = 10.0 * std::log10(et / ei_scaled);
  return res;
}

inline void add_white_noise_at_snr(Waveform& w, double ref_energy, double snr_db,
                                   Rng& rng) {
  size_t n = w.samples.size();
  if (n == 0) return;
  double noise_energy = ref_energy * std::pow(10.0, -snr_db / 10.0);
  double sigma = std::sqrt(noise_energy / static_cast<double>(n));
  for (auto& s : w.samples) s += sigma * rng.gaussian();
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct CorpusConfig {
  int n_speakers = 4;
  int utts_per_speaker = 10;
  int vocab = 16;  // transcript tokens; special ids live above this range
  int min_tokens = 3;
  int max_tokens = 6;
  uint64_t seed = 1;
  MixCondition condition = MixCondition::kClean;
  MixMode mode = MixMode::kMax;
  int train_mixtures = 240;
  int dev_mixtures = 40;
  int test_mixtures = 60;
  double train_utt_fraction = 0.75;
  FeatureConfig features;
};

struct Utterance {
  int speaker = 0;
  int index = 0;  // per-speaker utterance number
  std::vector<int> tokens;
  Waveform wave;
  FeatureMatrix feats;
  bool train_pool = true;
  std::string path;  // relative, e.g. utt/spk00_003.fbin
};

// One two-speaker mixture with its enrollment pointer.
struct MixtureSample {
  FeatureMatrix mixture;
  int enrollment_utt = -1;  // index into Corpus::utterances
  std::vector<int> target_tokens;
  std::string target_speaker_id;
  std::string interferer_speaker_id;
  double snr_db = 0.0;        // requested
  double realized_snr = 0.0;  // audited
  MixMode mode = MixMode::kMax;
  std::string split;  // train|dev|test
  int target_utt = -1, interferer_utt = -1;
  std::string path;  // relative mixture feature path
};

// A record in the form the trainer consumes. `enrollment` may be swapped for
// mismatched-condition probes.
struct TrainRecord {
  const FeatureMatrix* mixture = nullptr;
  const FeatureMatrix* enrollment = nullptr;
  std::vector<int> tokens;
  std::string target_speaker;
  std::string interferer_speaker;
  std::string enrollment_speaker;
  std::string split;
};

class Corpus {
 public:
  CorpusConfig cfg;
  std::vector<SyntheticSpeaker> speakers;
  std::vector<Utterance> utterances;
  std::vector<MixtureSample> samples;

  static Corpus build(const CorpusConfig& cfg) {
    if (cfg.n_speakers < 2) throw ConfigError("corpus: need >= 2 speakers");
    if (cfg.utts_per_speaker < 2)
      throw DataError("corpus: a speaker with a single utterance cannot supply enrollment");
    if (cfg.vocab < 2) throw ConfigError("corpus: vocab must be >= 2");
    if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens)
      throw ConfigError("corpus: bad token-length range");

    Corpus c;
    c.cfg = cfg;
    FeatureExtractor fx(cfg.features);
    Rng base(cfg.seed);

    for (int s = 0; s < cfg.n_speakers; ++s)
      c.speakers.push_back(SyntheticSpeaker::make(s, cfg.n_speakers, cfg.vocab,
                                                  cfg.seed, cfg.features.sample_rate));

    int train_utts = std::max(
        1, static_cast<int>(std::lround(cfg.utts_per_speaker * cfg.train_utt_fraction)));
    if (train_utts >= cfg.utts_per_speaker) train_utts = cfg.utts_per_speaker - 1;

    for (int s = 0; s < cfg.n_speakers; ++s) {
      for (int u = 0; u < cfg.utts_per_speaker; ++u) {
        Rng ur = base.fork(hash_mix(0x077u, hash_mix(static_cast<uint64_t>(s),
                                                     static_cast<uint64_t>(u))));
        Utterance utt;
        utt.speaker = s;
        utt.index = u;
        int len = static_cast<int>(ur.uniform_int(cfg.min_tokens, cfg.max_tokens));
        for (int k = 0; k < len; ++k)
          utt.tokens.push_back(static_cast<int>(ur.uniform_int(0, cfg.vocab - 1)));
        utt.wave = c.speakers[static_cast<size_t>(s)].render(utt.tokens);
        utt.feats = fx.extract(utt.wave);
        utt.train_pool = (u < train_utts);
        std::ostringstream p;
        p << "utt/" << c.speakers[static_cast<size_t>(s)].id() << "_";
        p.fill('0');
        p.width(3);
        p << u;
        utt.path = p.str() + ".fbin";
        c.utterances.push_back(std::move(utt));
      }
    }

    int total = cfg.train_mixtures + cfg.dev_mixtures + cfg.test_mixtures;
    for (int i = 0; i < total; ++i) {
      std::string split = (i < cfg.train_mixtures) ? "train"
                          : (i < cfg.train_mixtures + cfg.dev_mixtures) ? "dev"
                                                                        : "test";
      c.samples.push_back(c.make_mixture(i, split, fx, base));
    }
    return c;
  }

  const Utterance& utt(int speaker, int index) const {
    return utterances[static_cast<size_t>(speaker * cfg.utts_per_speaker + index)];
  }

  std::vector<TrainRecord> records(const std::string& split_filter = "") const {
    std::vector<TrainRecord> out;
    for (const auto& m : samples) {
      if (!split_filter.empty() && m.split != split_filter) continue;
      TrainRecord r;
      r.mixture = &m.mixture;
      r.enrollment = &utterances[static_cast<size_t>(m.enrollment_utt)].feats;
      r.tokens = m.target_tokens;
      r.target_speaker = m.target_speaker_id;
      r.interferer_speaker = m.interferer_speaker_id;
      r.enrollment_speaker = m.target_speaker_id;
      r.split = m.split;
      out.push_back(std::move(r));
    }
    return out;
  }

  // Every enrollment replaced by an utterance of a speaker absent from the
  // mixture. Needs >= 3 speakers.
  std::vector<TrainRecord> mismatched_records(const std::string& split_filter,
                                              Rng& rng) const {
    if (cfg.n_speakers < 3)
      throw DataError("mismatched enrollment: impossible with < 3 speakers");
    std::vector<TrainRecord> out = records(split_filter);
    for (auto& r : out) {
      std::vector<int> eligible;
      for (int s = 0; s < cfg.n_speakers; ++s) {
        const std::string& id = speakers[static_cast<size_t>(s)].id();
        if (id != r.target_speaker && id != r.interferer_speaker)
          eligible.push_back(s);
      }
      int s = eligible[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(eligible.size()) - 1))];
      int u = static_cast<int>(rng.uniform_int(0, cfg.utts_per_speaker - 1));
      r.enrollment = &utt(s, u).feats;
      r.enrollment_speaker = speakers[static_cast<size_t>(s)].id();
    }
    return out;
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "utt");
    fs::create_directories(fs::path(dir) / "mix");
    for (const auto& u : utterances)
      save_feature_matrix((fs::path(dir) / u.path).string(), u.feats);
    for (const auto& m : samples)
      save_feature_matrix((fs::path(dir) / m.path).string(), m.mixture);

    std::ofstream mf(fs::path(dir) / "manifest.tsv");
    if (!mf) throw DataError("cannot write manifest in " + dir);
    for (const auto& m : samples) {
      mf << m.path << '\t' << utterances[static_cast<size_t>(m.enrollment_utt)].path
         << '\t';
      for (size_t k = 0; k < m.target_tokens.size(); ++k) {
        if (k) mf << ' ';
        mf << m.target_tokens[k];
      }
      mf << '\t' << m.target_speaker_id << '\t' << m.split << '\n';
    }

    std::ofstream info(fs::path(dir) / "corpus_info.txt");
    info << "n_speakers=" << cfg.n_speakers << "\n"
         << "utts_per_speaker=" << cfg.utts_per_speaker << "\n"
         << "vocab=" << cfg.vocab << "\n"
         << "seed=" << cfg.seed << "\n"
         << "condition=" << (cfg.condition == MixCondition::kClean ? "clean" : "noisy")
         << "\n"
         << "mode=" << (cfg.mode == MixMode::kMin ? "min" : "max") << "\n"
         << "n_mels=" << cfg.features.n_mels << "\n"
         << "speakers_shared_across_splits=true\n";

    std::ofstream audit(fs::path(dir) / "mixinfo.tsv");
    audit.setf(std::ios::fixed);
    audit.precision(6);
    for (size_t i = 0; i < samples.size(); ++i) {
      const auto& m = samples[i];
      audit << i << '\t' << m.target_speaker_id << '\t' << m.interferer_speaker_id
            << '\t' << m.target_utt << '\t' << m.interferer_utt << '\t' << m.snr_db
            << '\t' << m.realized_snr << '\t'
            << (m.mode == MixMode::kMin ? "min" : "max") << '\n';
    }
  }

 private:
  MixtureSample make_mixture(int index, const std::string& split,
                             const FeatureExtractor& fx, const Rng& base) const {
    Rng rng = base.fork(hash_mix(0x31337u, static_cast<uint64_t>(index)));
    bool eval_split = (split != "train");

    int tgt = static_cast<int>(rng.uniform_int(0, cfg.n_speakers - 1));
    int intf = static_cast<int>(rng.uniform_int(0, cfg.n_speakers - 2));
    if (intf >= tgt) ++intf;

    auto pick_utt = [&](int speaker) {
      std::vector<int> pool;
      for (int u = 0; u < cfg.utts_per_speaker; ++u)
        if (utt(speaker, u).train_pool != eval_split) pool.push_back(u);
      if (pool.empty())
        for (int u = 0; u < cfg.utts_per_speaker; ++u) pool.push_back(u);
      return pool[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
    };
    int tgt_utt = pick_utt(tgt);
    int intf_utt = pick_utt(intf);

    // Enrollment: another utterance of the target speaker, preferring the
    // training pool like the source protocol.
    std::vector<int> enroll_pool;
    for (int u = 0; u < cfg.utts_per_speaker; ++u)
      if (u != tgt_utt && utt(tgt, u).train_pool) enroll_pool.push_back(u);
    if (enroll_pool.empty())
      for (int u = 0; u < cfg.utts_per_speaker; ++u)
        if (u != tgt_utt) enroll_pool.push_back(u);
    if (enroll_pool.empty())
      throw DataError("speaker " + std::to_string(tgt) +
                      " has a single utterance; cannot supply enrollment");
    int enr_utt = enroll_pool[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(enroll_pool.size()) - 1))];

    double snr = sample_snr(cfg.condition, rng);
    MixResult mixed =
        mix_at_snr(utt(tgt, tgt_utt).wave, utt(intf, intf_utt).wave, snr, cfg.mode);
    if (cfg.condition == MixCondition::kNoisy) {
      Real e_t = 0.0, e_i = 0.0;
      for (Real s : utt(tgt, tgt_utt).wave.samples) e_t += s * s;
      for (Real s : utt(intf, intf_utt).wave.samples) e_i += s * s;
      double louder = std::max(e_t, e_i * mixed.interferer_scale *
                                        mixed.interferer_scale);
      add_white_noise_at_snr(mixed.mixture, louder, snr, rng);
    }

    MixtureSample m;
    m.mixture = fx.extract(mixed.mixture);
    m.enrollment_utt = tgt * cfg.utts_per_speaker + enr_utt;
    m.target_tokens = utt(tgt, tgt_utt).tokens;
    m.target_speaker_id = speakers[static_cast<size_t>(tgt)].id();
    m.interferer_speaker_id = speakers[static_cast<size_t>(intf)].id();
    m.snr_db = snr;
    m.realized_snr = mixed.realized_snr_db;
    m.mode = cfg.mode;
    m.split = split;
    m.target_utt = tgt_utt;
    m.interferer_utt = intf_utt;
    std::ostringstream p;
    p << "mix/" << split << "_";
    p.fill('0');
    p.width(5);
    p << index;
    p << "__" << m.target_speaker_id << "__" << m.interferer_speaker_id << "__u";
    p.fill('0');
    p.width(3);
    p << tgt_utt;
    m.path = p.str() + ".fbin";
    return m;
  }
};

// ---------------------------------------------------------------------------
// Manifest files (tab-separated: mixture_path, enrollment_path, transcript,
// target_speaker_id, split)
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string mixture_path;
  std::string enrollment_path;
  std::vector<int> transcript;
  std::string target_speaker_id;
  std::string split;
};

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 5)
      throw DataError("manifest line with " + std::to_string(cols.size()) +
                      " columns (want 5): " + line);
    ManifestRecord r;
    r.mixture_path = cols[0];
    r.enrollment_path = cols[1];
    std::istringstream ts(cols[2]);
    int tok;
    while (ts >> tok) r.transcript.push_back(tok);
    r.target_speaker_id = cols[3];
    r.split = cols[4];
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestRecord>& records) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  for (const auto& r : records) {
    f << r.mixture_path << '\t' << r.enrollment_path << '\t';
    for (size_t k = 0; k < r.transcript.size(); ++k) {
      if (k) f << ' ';
      f << r.transcript[k];
    }
    f << '\t' << r.target_speaker_id << '\t' << r.split << '\n';
  }
}

// Speaker id embedded in utterance paths: utt/<spk>_<idx>.fbin
inline std::string speaker_of_utt_path(const std::string& path) {
  auto slash = path.find_last_of('/');
  std::string name = (slash == std::string::npos) ? path : path.substr(slash + 1);
  auto us = name.find_last_of('_');
  if (us == std::string::npos) throw DataError("cannot parse speaker from: " + path);
  return name.substr(0, us);
}

// Mixture paths carry target and interferer ids: mix/<split>_<i>__<tgt>__<intf>__u<k>.fbin
inline std::pair<std::string, std::string> speakers_of_mix_path(const std::string& path) {
  auto a = path.find("__");
  if (a == std::string::npos) throw DataError("cannot parse mixture path: " + path);
  auto b = path.find("__", a + 2);
  if (b == std::string::npos) throw DataError("cannot parse mixture path: " + path);
  auto c = path.find("__", b + 2);
  if (c == std::string::npos) throw DataError("cannot parse mixture path: " + path);
  return {path.substr(a + 2, b - a - 2), path.substr(b + 2, c - b - 2)};
}

// File-level mismatched-enrollment variant of a manifest.
inline std::vector<ManifestRecord> mismatched_enrollment_variant(
    const std::vector<ManifestRecord>& records, Rng& rng) {
  std::map<std::string, std::vector<std::string>> utts_by_speaker;
  for (const auto& r : records)
    utts_by_speaker[speaker_of_utt_path(r.enrollment_path)].push_back(r.enrollment_path);
  for (auto& [spk, v] : utts_by_speaker) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  if (utts_by_speaker.size() < 3)
    throw DataError("mismatched enrollment: impossible with < 3 speakers");
  std::vector<ManifestRecord> out = records;
  for (auto& r : out) {
    auto [tgt, intf] = speakers_of_mix_path(r.mixture_path);
    std::vector<std::string> eligible;
    for (const auto& [spk, v] : utts_by_speaker)
      if (spk != tgt && spk != intf) eligible.push_back(spk);
    if (eligible.empty())
      throw DataError("no eligible replacement speaker for " + r.mixture_path);
    const std::string& spk = eligible[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(eligible.size()) - 1))];
    const auto& pool = utts_by_speaker[spk];
    r.enrollment_path = pool[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
  }
  return out;
}

}  // namespace tsasr
