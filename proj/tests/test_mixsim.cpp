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

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <set>

#include "tsasr/mixsim.hpp"

using namespace tsasr;

namespace {

// Small, fast front end for corpus-level tests.
FeatureConfig tiny_features() {
  FeatureConfig f;
  f.frame_len = 200;
  f.frame_shift = 80;
  f.n_mels = 12;
  return f;
}

CorpusConfig tiny_corpus(int speakers, int utts, int train, int dev, int test) {
  CorpusConfig c;
  c.n_speakers = speakers;
  c.utts_per_speaker = utts;
  c.vocab = 8;
  c.min_tokens = 2;
  c.max_tokens = 4;
  c.seed = 77;
  c.train_mixtures = train;
  c.dev_mixtures = dev;
  c.test_mixtures = test;
  c.features = tiny_features();
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

}  // namespace

TEST_CASE("snr sampling statistics and determinism") {
  Rng rng(12345);
  double sum = 0.0, sq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    double v = sample_snr(MixCondition::kClean, rng);
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double stddev = std::sqrt(sq / n - mean * mean);
  REQUIRE(std::fabs(mean - 0.0) <= 0.13);      // 3 sigma of the mean
  REQUIRE(std::fabs(stddev - 4.1) <= 0.12);

  Rng rng2(54321);
  sum = sq = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = sample_snr(MixCondition::kNoisy, rng2);
    sum += v;
    sq += v * v;
  }
  mean = sum / n;
  stddev = std::sqrt(sq / n - mean * mean);
  REQUIRE(std::fabs(mean - (-2.0)) <= 0.12);
  REQUIRE(std::fabs(stddev - 3.6) <= 0.11);

  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i)
    REQUIRE(sample_snr(MixCondition::kClean, a) == sample_snr(MixCondition::kClean, b));
}

TEST_CASE("mix_at_snr closed forms") {
  Waveform t, i;
  t.samples = {0.5, -0.5, 0.5, -0.5};
  i.samples = {-0.5, 0.5, -0.5, 0.5};
  auto r0 = mix_at_snr(t, i, 0.0, MixMode::kMin);
  REQUIRE(r0.interferer_scale == Catch::Approx(1.0).margin(1e-12));

  auto r20 = mix_at_snr(t, i, 20.0, MixMode::kMin);
  REQUIRE(r20.interferer_scale == Catch::Approx(0.1).margin(1e-12));

  Waveform z;
  z.samples = {0, 0, 0};
  REQUIRE_THROWS_AS(mix_at_snr(t, z, 0.0, MixMode::kMin), std::invalid_argument);
  REQUIRE_THROWS_AS(mix_at_snr(z, i, 0.0, MixMode::kMin), std::invalid_argument);
}

TEST_CASE("mix_at_snr realized ratio and mode lengths") {
  Rng rng(4242);
  for (int trial = 0; trial < 200; ++trial) {
    size_t nt = static_cast<size_t>(rng.uniform_int(200, 900));
    size_t ni = static_cast<size_t>(rng.uniform_int(200, 900));
    Waveform t, i;
    t.samples.resize(nt);
    i.samples.resize(ni);
    for (auto& s : t.samples) s = rng.gaussian();
    for (auto& s : i.samples) s = rng.gaussian();
    double snr = rng.uniform(-10.0, 10.0);
    for (MixMode mode : {MixMode::kMin, MixMode::kMax}) {
      auto r = mix_at_snr(t, i, snr, mode);
      size_t want = (mode == MixMode::kMin) ? std::min(nt, ni) : std::max(nt, ni);
      REQUIRE(r.mixture.samples.size() == want);

      // Independent recomputation of the energy ratio over the overlap.
      size_t ov = std::min(nt, ni);
      double et = 0.0, ei = 0.0;
      for (size_t n = 0; n < ov; ++n) {
        et += t.samples[n] * t.samples[n];
        double s = r.interferer_scale * i.samples[n];
        ei += s * s;
      }
      double measured = 10.0 * std::log10(et / ei);
      REQUIRE(std::fabs(measured - snr) <= 0.1);
      REQUIRE(std::fabs(r.realized_snr_db - snr) <= 0.1);

      // Max mode preserves both sources outside the overlap.
      if (mode == MixMode::kMax && nt != ni) {
        size_t longer = std::max(nt, ni);
        for (size_t n = ov; n < longer; ++n) {
          double want_tail = (nt > ni) ? t.samples[n]
                                       : r.interferer_scale * i.samples[n];
          REQUIRE(r.mixture.samples[n] == Catch::Approx(want_tail).margin(1e-12));
        }
      }
    }
  }
}

TEST_CASE("corpus boundary case: two speakers, two utterances") {
  auto cfg = tiny_corpus(2, 2, 8, 2, 2);
  Corpus c = Corpus::build(cfg);
  REQUIRE(c.samples.size() == 12);
  for (const auto& m : c.samples) {
    REQUIRE(m.target_speaker_id != m.interferer_speaker_id);
    // Enrollment must be a different utterance of the target speaker.
    const auto& enr = c.utterances[static_cast<size_t>(m.enrollment_utt)];
    REQUIRE(c.speakers[static_cast<size_t>(enr.speaker)].id() == m.target_speaker_id);
    REQUIRE(enr.index != m.target_utt);
  }

  auto bad = cfg;
  bad.utts_per_speaker = 1;
  REQUIRE_THROWS_AS(Corpus::build(bad), DataError);
}

TEST_CASE("corpus manifests are byte-identical across rebuilds") {
  namespace fs = std::filesystem;
  auto cfg = tiny_corpus(3, 3, 10, 2, 4);
  auto d1 = fs::temp_directory_path() / "tsasr_corpus_a";
  auto d2 = fs::temp_directory_path() / "tsasr_corpus_b";
  Corpus::build(cfg).save(d1.string());
  Corpus::build(cfg).save(d2.string());
  REQUIRE(slurp((d1 / "manifest.tsv").string()) ==
          slurp((d2 / "manifest.tsv").string()));
  REQUIRE(slurp((d1 / "mixinfo.tsv").string()) == slurp((d2 / "mixinfo.tsv").string()));
  REQUIRE(!slurp((d1 / "manifest.tsv").string()).empty());

  auto records = read_manifest((d1 / "manifest.tsv").string());
  REQUIRE(records.size() == 16);
  for (const auto& r : records) {
    REQUIRE(fs::exists(d1 / r.mixture_path));
    REQUIRE(fs::exists(d1 / r.enrollment_path));
    REQUIRE(speaker_of_utt_path(r.enrollment_path) == r.target_speaker_id);
  }
}

TEST_CASE("mixture lengths follow the mode rule sample by sample") {
  for (MixMode mode : {MixMode::kMax, MixMode::kMin}) {
    auto cfg = tiny_corpus(4, 4, 180, 10, 10);
    cfg.mode = mode;
    Corpus c = Corpus::build(cfg);
    REQUIRE(c.samples.size() == 200);
    for (const auto& m : c.samples) {
      int tgt = -1, intf = -1;
      for (int s = 0; s < cfg.n_speakers; ++s) {
        if (c.speakers[static_cast<size_t>(s)].id() == m.target_speaker_id) tgt = s;
        if (c.speakers[static_cast<size_t>(s)].id() == m.interferer_speaker_id) intf = s;
      }
      size_t lt = c.utt(tgt, m.target_utt).wave.samples.size();
      size_t li = c.utt(intf, m.interferer_utt).wave.samples.size();
      size_t want_samples = (mode == MixMode::kMin) ? std::min(lt, li) : std::max(lt, li);
      int64_t want_frames = 0;
      if (want_samples >= static_cast<size_t>(cfg.features.frame_len))
        want_frames = static_cast<int64_t>(
            (want_samples - cfg.features.frame_len) / cfg.features.frame_shift + 1);
      REQUIRE(m.mixture.num_frames() == want_frames);
    }
  }
}

TEST_CASE("mismatched enrollment variant avoids mixture speakers") {
  auto cfg = tiny_corpus(3, 3, 20, 0, 10);
  Corpus c = Corpus::build(cfg);
  Rng rng(5);
  auto recs = c.mismatched_records("", rng);
  for (const auto& r : recs) {
    REQUIRE(r.enrollment_speaker != r.target_speaker);
    REQUIRE(r.enrollment_speaker != r.interferer_speaker);
  }
  Rng r1(9), r2(9);
  auto a = c.mismatched_records("test", r1);
  auto b = c.mismatched_records("test", r2);
  for (size_t i = 0; i < a.size(); ++i)
    REQUIRE(a[i].enrollment_speaker == b[i].enrollment_speaker);

  CorpusConfig two = tiny_corpus(2, 3, 4, 0, 2);
  Corpus c2 = Corpus::build(two);
  Rng r3(1);
  REQUIRE_THROWS_AS(c2.mismatched_records("", r3), DataError);
}

TEST_CASE("manifest-level mismatched variant is uniform over eligible speakers") {
  // Synthetic manifest, no audio needed.
  const int n_speakers = 5;
  std::vector<ManifestRecord> records;
  Rng gen(31);
  for (int i = 0; i < 1000; ++i) {
    int tgt = static_cast<int>(gen.uniform_int(0, n_speakers - 1));
    int intf = static_cast<int>(gen.uniform_int(0, n_speakers - 2));
    if (intf >= tgt) ++intf;
    ManifestRecord r;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "mix/test_%05d__spk%02d__spk%02d__u000.fbin", i,
                  tgt, intf);
    r.mixture_path = buf;
    std::snprintf(buf, sizeof(buf), "utt/spk%02d_000.fbin", tgt);
    r.enrollment_path = buf;
    r.transcript = {1, 2, 3};
    std::snprintf(buf, sizeof(buf), "spk%02d", tgt);
    r.target_speaker_id = buf;
    r.split = "test";
    records.push_back(r);
  }
  // Make sure every speaker owns some utterances in the pool.
  for (int s = 0; s < n_speakers; ++s) {
    ManifestRecord r = records[0];
    char buf[64];
    std::snprintf(buf, sizeof(buf), "utt/spk%02d_001.fbin", s);
    r.enrollment_path = buf;
    std::snprintf(buf, sizeof(buf), "spk%02d", s);
    r.target_speaker_id = buf;
    std::snprintf(buf, sizeof(buf), "mix/test_x__spk%02d__spk%02d__u000.fbin", s,
                  (s + 1) % n_speakers);
    r.mixture_path = buf;
    records.push_back(r);
  }

  Rng rng(77);
  auto variant = mismatched_enrollment_variant(records, rng);
  REQUIRE(variant.size() == records.size());

  std::map<std::string, double> expected;
  std::map<std::string, int> observed;
  for (size_t i = 0; i < records.size(); ++i) {
    auto [tgt, intf] = speakers_of_mix_path(records[i].mixture_path);
    std::vector<std::string> eligible;
    for (int s = 0; s < n_speakers; ++s) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "spk%02d", s);
      if (buf != tgt && buf != intf) eligible.push_back(buf);
    }
    for (const auto& e : eligible) expected[e] += 1.0 / eligible.size();
    std::string got = speaker_of_utt_path(variant[i].enrollment_path);
    REQUIRE(got != tgt);
    REQUIRE(got != intf);
    observed[got]++;
  }
  double chi2 = 0.0;
  for (const auto& [spk, exp] : expected) {
    double obs = observed[spk];
    chi2 += (obs - exp) * (obs - exp) / exp;
  }
  // df = 4, alpha = 0.01 -> critical value 13.277
  REQUIRE(chi2 < 13.277);
}
