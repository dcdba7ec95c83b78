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

// Log Mel-filterbank front end over synthetic waveforms. The DFT is a plain
// O(N^2) transform with precomputed twiddle tables; desk-scale inputs do not
// justify an FFT dependency.

#pragma once

#include <array>
#include <cstring>
#include <fstream>

#include "tsasr/tensor.hpp"

namespace tsasr {

struct Waveform {
  std::vector<Real> samples;
  int sample_rate = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
  Real energy() const {
    Real e = 0.0;
    for (Real s : samples) e += s * s;
    return e;
  }
};

struct FeatureMatrix {
  Tensor frames;        // [T, n_mels], no grad
  double frame_shift_s = 0.010;
  int n_mels = 0;

  int64_t num_frames() const { return frames.defined() ? frames.dim(0) : 0; }
};

struct FeatureConfig {
  int sample_rate = 16000;
  int frame_len = 400;    // 25 ms
  int frame_shift = 160;  // 10 ms
  int n_mels = 20;
  double fmin = 0.0;
  double fmax = 8000.0;
  double energy_floor = 1e-10;
};

inline std::vector<Real> hann_window(int n) {
  std::vector<Real> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * M_PI * i / (n - 1));
  return w;
}

// Hann-windowed frames; a signal shorter than one frame yields none.
inline std::vector<std::vector<Real>> frame_signal(const Waveform& w,
                                                   int frame_len,
                                                   int frame_shift) {
  if (frame_shift <= 0 || frame_len < frame_shift)
    throw std::invalid_argument("frame_signal: need frame_len >= frame_shift > 0");
  std::vector<std::vector<Real>> frames;
  if (w.samples.size() < static_cast<size_t>(frame_len)) return frames;
  std::vector<Real> window = hann_window(frame_len);
  size_t count = (w.samples.size() - frame_len) / frame_shift + 1;
  frames.reserve(count);
  for (size_t f = 0; f < count; ++f) {
    std::vector<Real> fr(static_cast<size_t>(frame_len));
    size_t base = f * frame_shift;
    for (int i = 0; i < frame_len; ++i)
      fr[static_cast<size_t>(i)] = w.samples[base + i] * window[static_cast<size_t>(i)];
    frames.push_back(std::move(fr));
  }
  return frames;
}

// |DFT|^2 for bins 0..N/2 of an already-windowed frame.
class Dft {
 public:
  explicit Dft(int n) : n_(n), bins_(n / 2 + 1) {
    cos_.resize(static_cast<size_t>(bins_ * n_));
    sin_.resize(static_cast<size_t>(bins_ * n_));
    for (int k = 0; k < bins_; ++k)
      for (int t = 0; t < n_; ++t) {
        double ang = 2.0 * M_PI * k * t / n_;
        cos_[static_cast<size_t>(k * n_ + t)] = std::cos(ang);
        sin_[static_cast<size_t>(k * n_ + t)] = std::sin(ang);
      }
  }

  std::vector<Real> power(const std::vector<Real>& frame) const {
    if (static_cast<int>(frame.size()) != n_)
      throw std::invalid_argument("Dft: frame length " + std::to_string(frame.size()) +
                                  " != " + std::to_string(n_));
    std::vector<Real> out(static_cast<size_t>(bins_));
    for (int k = 0; k < bins_; ++k) {
      const Real* c = cos_.data() + k * n_;
      const Real* s = sin_.data() + k * n_;
      Real re = 0.0, im = 0.0;
      for (int t = 0; t < n_; ++t) {
        re += frame[static_cast<size_t>(t)] * c[t];
        im -= frame[static_cast<size_t>(t)] * s[t];
      }
      out[static_cast<size_t>(k)] = re * re + im * im;
    }
    return out;
  }

  int bins() const { return bins_; }

 private:
  int n_;
  int bins_;
  std::vector<Real> cos_, sin_;
};

inline std::vector<Real> power_spectrum(const std::vector<Real>& frame) {
  return Dft(static_cast<int>(frame.size())).power(frame);
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Triangular filters evaluated at DFT bin frequencies; rows are filters.
class MelFilterbank {
 public:
  MelFilterbank(int n_filters, int n_bins, int sample_rate, double fmin, double fmax)
      : n_filters_(n_filters), n_bins_(n_bins) {
    if (n_filters < 1) throw std::invalid_argument("mel: need >= 1 filter");
    double nyquist = sample_rate / 2.0;
    if (!(fmin < fmax) || fmax > nyquist + 1e-9)
      throw std::invalid_argument("mel: invalid band edges fmin=" + std::to_string(fmin) +
                                  " fmax=" + std::to_string(fmax) + " nyquist=" +
                                  std::to_string(nyquist));
    double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
    centers_hz_.resize(static_cast<size_t>(n_filters + 2));
    for (int i = 0; i < n_filters + 2; ++i)
      centers_hz_[static_cast<size_t>(i)] =
          mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_filters + 1));
    weights_.assign(static_cast<size_t>(n_filters * n_bins), 0.0);
    double bin_hz = nyquist / (n_bins - 1);
    for (int j = 0; j < n_filters; ++j) {
      double left = centers_hz_[static_cast<size_t>(j)];
      double center = centers_hz_[static_cast<size_t>(j + 1)];
      double right = centers_hz_[static_cast<size_t>(j + 2)];
      for (int k = 0; k < n_bins; ++k) {
        double f = k * bin_hz;
        double w = 0.0;
        if (f > left && f < center)
          w = (f - left) / (center - left);
        else if (f >= center && f < right)
          w = (right - f) / (right - center);
        weights_[static_cast<size_t>(j * n_bins + k)] = w;
      }
    }
  }

  // ln(max(filter energy, floor)) per filter.
  std::vector<Real> apply_log(const std::vector<Real>& power, double floor) const {
    if (static_cast<int>(power.size()) != n_bins_)
      throw std::invalid_argument("mel: power bins " + std::to_string(power.size()) +
                                  " != " + std::to_string(n_bins_));
    std::vector<Real> out(static_cast<size_t>(n_filters_));
    for (int j = 0; j < n_filters_; ++j) {
      Real e = 0.0;
      const Real* wrow = weights_.data() + j * n_bins_;
      for (int k = 0; k < n_bins_; ++k) e += wrow[k] * power[static_cast<size_t>(k)];
      out[static_cast<size_t>(j)] = std::log(std::max(e, static_cast<Real>(floor)));
    }
    return out;
  }

  double center_hz(int j) const { return centers_hz_[static_cast<size_t>(j + 1)]; }
  Real weight(int filter, int bin) const {
    return weights_[static_cast<size_t>(filter * n_bins_ + bin)];
  }
  int n_filters() const { return n_filters_; }
  int n_bins() const { return n_bins_; }

 private:
  int n_filters_, n_bins_;
  std::vector<double> centers_hz_;
  std::vector<Real> weights_;
};

inline std::vector<Real> log_mel(const std::vector<Real>& power, int n_filters,
                                 int sample_rate, double fmin, double fmax,
                                 double floor) {
  MelFilterbank fb(n_filters, static_cast<int>(power.size()), sample_rate, fmin, fmax);
  return fb.apply_log(power, floor);
}

class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureConfig cfg = {})
      : cfg_(cfg),
        dft_(cfg.frame_len),
        mel_(cfg.n_mels, cfg.frame_len / 2 + 1, cfg.sample_rate, cfg.fmin, cfg.fmax) {}

  FeatureMatrix extract(const Waveform& w) const {
    if (w.sample_rate != cfg_.sample_rate)
      throw DataError("feature extraction: waveform rate " +
                      std::to_string(w.sample_rate) + " != config rate " +
                      std::to_string(cfg_.sample_rate));
    for (Real s : w.samples)
      if (!std::isfinite(s)) throw DataError("feature extraction: non-finite sample");
    auto frames = frame_signal(w, cfg_.frame_len, cfg_.frame_shift);
    int64_t T = static_cast<int64_t>(frames.size());
    std::vector<Real> data(static_cast<size_t>(T * cfg_.n_mels));
    for (int64_t t = 0; t < T; ++t) {
      auto fb = mel_.apply_log(dft_.power(frames[static_cast<size_t>(t)]),
                               cfg_.energy_floor);
      std::copy(fb.begin(), fb.end(), data.begin() + t * cfg_.n_mels);
    }
    FeatureMatrix out;
    out.frames = Tensor::from({T, cfg_.n_mels}, std::move(data));
    out.frame_shift_s = static_cast<double>(cfg_.frame_shift) / cfg_.sample_rate;
    out.n_mels = cfg_.n_mels;
    return out;
  }

  const FeatureConfig& config() const { return cfg_; }
  const MelFilterbank& filterbank() const { return mel_; }

 private:
  FeatureConfig cfg_;
  Dft dft_;
  MelFilterbank mel_;
};

// ---------------------------------------------------------------------------
// Binary feature container: 8-byte magic + u32 rows + u32 cols, then
// row-major float32, all little-endian.
// ---------------------------------------------------------------------------

constexpr char kFeatureMagic[8] = {'T', 'S', 'A', 'S', 'R', 'F', 'B', '\0'};

inline void save_feature_matrix(const std::string& path, const FeatureMatrix& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write feature file: " + path);
  uint32_t rows = static_cast<uint32_t>(m.frames.dim(0));
  uint32_t cols = static_cast<uint32_t>(m.frames.dim(1));
  f.write(kFeatureMagic, 8);
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  std::vector<float> buf(m.frames.data().size());
  for (size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(m.frames.data()[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DataError("short write on feature file: " + path);
}

inline FeatureMatrix load_feature_matrix(const std::string& path,
                                         double frame_shift_s = 0.010) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file: " + path);
  char magic[8];
  uint32_t rows = 0, cols = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  if (!f || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw DataError("bad feature file header: " + path);
  std::vector<float> buf(static_cast<size_t>(rows) * cols);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DataError("truncated feature file: " + path);
  std::vector<Real> data(buf.begin(), buf.end());
  FeatureMatrix m;
  m.frames = Tensor::from({rows, cols}, std::move(data));
  m.frame_shift_s = frame_shift_s;
  m.n_mels = static_cast<int>(cols);
  return m;
}

}  // namespace tsasr
