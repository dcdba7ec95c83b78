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

#include "oracles.hpp"
#include "tsasr/features.hpp"

using namespace tsasr;

namespace {

Waveform sine_wave(double freq, int n, int rate = 16000, double amp = 1.0) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w.samples[static_cast<size_t>(i)] = amp * std::sin(2.0 * M_PI * freq * i / rate);
  return w;
}

}  // namespace

TEST_CASE("frame counts and boundaries") {
  Waveform w;
  w.samples.assign(400, 0.1);
  REQUIRE(frame_signal(w, 400, 160).size() == 1);
  w.samples.assign(720, 0.1);
  REQUIRE(frame_signal(w, 400, 160).size() == 3);
  w.samples.assign(399, 0.1);
  REQUIRE(frame_signal(w, 400, 160).empty());
  REQUIRE_THROWS_AS(frame_signal(w, 100, 0), std::invalid_argument);

  // Boundaries against brute-force index enumeration.
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    int n = static_cast<int>(rng.uniform_int(50, 2000));
    int fl = static_cast<int>(rng.uniform_int(20, 200));
    int sh = static_cast<int>(rng.uniform_int(5, fl));
    Waveform x;
    x.samples.resize(static_cast<size_t>(n));
    for (auto& s : x.samples) s = rng.gaussian();
    auto frames = frame_signal(x, fl, sh);
    auto starts = oracle::frame_starts(static_cast<size_t>(n),
                                       static_cast<size_t>(fl),
                                       static_cast<size_t>(sh));
    REQUIRE(frames.size() == starts.size());
    auto window = hann_window(fl);
    for (size_t f = 0; f < frames.size(); ++f)
      for (int i = 0; i < fl; ++i)
        REQUIRE(frames[f][static_cast<size_t>(i)] ==
                x.samples[starts[f] + static_cast<size_t>(i)] *
                    window[static_cast<size_t>(i)]);
  }
}

TEST_CASE("power spectrum of zero, sine, and Parseval identity") {
  std::vector<Real> zero(256, 0.0);
  for (Real p : power_spectrum(zero)) REQUIRE(p == 0.0);

  // Bin-centered rectangular sine: all energy lands in its bin.
  int n = 256, k = 19;
  std::vector<Real> frame(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    frame[static_cast<size_t>(i)] = std::sin(2.0 * M_PI * k * i / n);
  auto p = power_spectrum(frame);
  Real total = std::accumulate(p.begin(), p.end(), 0.0);
  REQUIRE(p[static_cast<size_t>(k)] / total > 0.99);

  // Hann-windowed sine: the main lobe (k-1..k+1) holds >= 90% and peaks at k.
  auto win = hann_window(n);
  std::vector<Real> wframe(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) wframe[static_cast<size_t>(i)] = frame[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
  auto pw = power_spectrum(wframe);
  Real wtotal = std::accumulate(pw.begin(), pw.end(), 0.0);
  Real lobe = pw[static_cast<size_t>(k - 1)] + pw[static_cast<size_t>(k)] +
              pw[static_cast<size_t>(k + 1)];
  REQUIRE(lobe / wtotal > 0.90);
  REQUIRE(std::max_element(pw.begin(), pw.end()) - pw.begin() == k);

  // Parseval over the half spectrum: (X0^2 + 2*mid + X_{N/2}^2)/N == energy.
  Rng rng(7);
  std::vector<Real> rf(static_cast<size_t>(n));
  for (auto& v : rf) v = rng.gaussian();
  auto pr = power_spectrum(rf);
  Real spectral = pr[0] + pr[static_cast<size_t>(n / 2)];
  for (int i = 1; i < n / 2; ++i) spectral += 2.0 * pr[static_cast<size_t>(i)];
  spectral /= n;
  Real energy = 0.0;
  for (Real v : rf) energy += v * v;
  REQUIRE(std::fabs(spectral - energy) / energy < 1e-6);
}

TEST_CASE("mel filterbank construction and response") {
  int n_bins = 201;
  MelFilterbank fb(20, n_bins, 16000, 0.0, 8000.0);

  // Nonnegative weights peaking next to each filter's center frequency.
  double bin_hz = 8000.0 / (n_bins - 1);
  for (int j = 0; j < 20; ++j) {
    int best = 0;
    Real bw = -1.0;
    for (int k = 0; k < n_bins; ++k) {
      REQUIRE(fb.weight(j, k) >= 0.0);
      if (fb.weight(j, k) > bw) {
        bw = fb.weight(j, k);
        best = k;
      }
    }
    REQUIRE(bw > 0.0);
    REQUIRE(std::fabs(best * bin_hz - fb.center_hz(j)) <= bin_hz);
  }

  // Silence maps every filter to ln(floor).
  std::vector<Real> silence(static_cast<size_t>(n_bins), 0.0);
  for (Real v : fb.apply_log(silence, 1e-10))
    REQUIRE(v == Catch::Approx(std::log(1e-10)).margin(1e-12));

  // A sinusoid at filter j's center frequency wins filter j.
  for (int j : {4, 8, 12, 16}) {
    Waveform w = sine_wave(fb.center_hz(j), 400);
    auto frames = frame_signal(w, 400, 160);
    auto mel = fb.apply_log(power_spectrum(frames[0]), 1e-10);
    REQUIRE(std::max_element(mel.begin(), mel.end()) - mel.begin() == j);
  }

  REQUIRE_THROWS_AS(MelFilterbank(20, n_bins, 16000, 4000.0, 1000.0),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(MelFilterbank(20, n_bins, 16000, 0.0, 9000.0),
                    std::invalid_argument);
}

TEST_CASE("log-mel is monotone in signal scale and deterministic") {
  FeatureExtractor fx;
  Rng rng(33);
  for (int trial = 0; trial < 5; ++trial) {
    Waveform w;
    w.samples.resize(1600);
    for (auto& s : w.samples) s = 0.1 * rng.gaussian();
    Waveform ww = w;
    double c = rng.uniform(1.5, 4.0);
    for (auto& s : ww.samples) s *= c;
    FeatureMatrix a = fx.extract(w);
    FeatureMatrix b = fx.extract(ww);
    for (size_t i = 0; i < a.frames.data().size(); ++i)
      REQUIRE(b.frames.data()[i] >= a.frames.data()[i]);
  }

  Waveform w = sine_wave(440.0, 3200);
  FeatureMatrix f1 = FeatureExtractor().extract(w);
  FeatureMatrix f2 = FeatureExtractor().extract(w);
  REQUIRE(f1.frames.data() == f2.frames.data());

  // Floor keeps every entry bounded below.
  for (Real v : f1.frames.data()) REQUIRE(v >= std::log(1e-10) - 1e-12);
}

TEST_CASE("feature container round trip") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "tsasr_feat_test";
  fs::create_directories(dir);
  auto path = (dir / "x.fbin").string();

  Waveform w = sine_wave(700.0, 2400);
  FeatureMatrix m = FeatureExtractor().extract(w);
  save_feature_matrix(path, m);
  FeatureMatrix r = load_feature_matrix(path);
  REQUIRE(r.frames.shape() == m.frames.shape());
  for (size_t i = 0; i < m.frames.data().size(); ++i)
    REQUIRE(r.frames.data()[i] ==
            static_cast<double>(static_cast<float>(m.frames.data()[i])));

  // Saved-loaded-saved bytes are identical.
  auto path2 = (dir / "y.fbin").string();
  save_feature_matrix(path2, r);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  REQUIRE(b1 == b2);

  std::ofstream bad(dir / "bad.fbin", std::ios::binary);
  bad << "garbage";
  bad.close();
  REQUIRE_THROWS_AS(load_feature_matrix((dir / "bad.fbin").string()), DataError);
  REQUIRE_THROWS_AS(load_feature_matrix((dir / "missing.fbin").string()), DataError);
}
