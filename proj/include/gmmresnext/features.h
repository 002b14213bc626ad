// Copyright (c) 2026 The GMM-ResNext Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef GMMRESNEXT_FEATURES_H_
#define GMMRESNEXT_FEATURES_H_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "gmmresnext/common.h"
#include "gmmresnext/dataio.h"

namespace gmmresnext {

enum class FeatureKind : uint32_t { kMfcc = 0, kLgp = 1 };

// Time-major T x D matrix: row t is frame t.
struct FeatureMatrix {
  int frames = 0;
  int dim = 0;
  std::vector<double> data;
  double frame_shift = 0.01;  // seconds
  FeatureKind kind = FeatureKind::kMfcc;

  FeatureMatrix() = default;
  FeatureMatrix(int t, int d, FeatureKind k = FeatureKind::kMfcc)
      : frames(t), dim(d), data(static_cast<size_t>(t) * d, 0.0), kind(k) {}

  double& at(int t, int d) { return data[static_cast<size_t>(t) * dim + d]; }
  double at(int t, int d) const {
    return data[static_cast<size_t>(t) * dim + d];
  }
  std::span<double> row(int t) {
    return {data.data() + static_cast<size_t>(t) * dim,
            static_cast<size_t>(dim)};
  }
  std::span<const double> row(int t) const {
    return {data.data() + static_cast<size_t>(t) * dim,
            static_cast<size_t>(dim)};
  }
};

struct MfccConfig {
  int sample_rate = kSampleRate;
  int frame_length = 400;  // 25 ms
  int frame_shift = 160;   // 10 ms
  int fft_size = 512;
  int n_mels = 80;
  int n_ceps = 80;
  double low_freq = 20.0;
  double high_freq = 7600.0;
  double preemph = 0.97;
  double log_floor = 1e-10;
};

double HzToMel(double hz);

// Triangular mel filters over the fft_size / 2 + 1 power-spectrum bins,
// one row per filter.
std::vector<std::vector<double>> MelFilterbank(const MfccConfig& cfg);

// Pre-emphasis, Hamming window, |FFT|^2, mel filterbank, log with floor and
// orthonormal DCT-II. Holds an FFTW plan; Compute is safe to call from
// several threads.
class MfccComputer {
 public:
  explicit MfccComputer(const MfccConfig& cfg);
  ~MfccComputer();
  MfccComputer(const MfccComputer&) = delete;
  MfccComputer& operator=(const MfccComputer&) = delete;

  FeatureMatrix Compute(const WaveBuffer& wave) const;
  const MfccConfig& config() const { return cfg_; }

  // 1 + floor((n - frame_length) / frame_shift); 0 when n < frame_length.
  int NumFrames(size_t n_samples) const;

 private:
  struct FftPlan;
  MfccConfig cfg_;
  std::vector<double> window_;
  std::vector<std::vector<double>> mel_;
  std::vector<double> dct_;  // n_ceps x n_mels
  std::unique_ptr<FftPlan> plan_;
};

FeatureMatrix ComputeMfcc(const WaveBuffer& wave, const MfccConfig& cfg);

// Subtracts each coefficient's mean over the utterance.
FeatureMatrix MeanNormalize(FeatureMatrix feat);

// Random contiguous crop when long enough, circular padding otherwise.
FeatureMatrix CropOrPad(const FeatureMatrix& feat, int target_frames,
                        Rng& rng);
// Same with an explicit start frame (ignored when padding).
FeatureMatrix CropOrPadAt(const FeatureMatrix& feat, int target_frames,
                          int offset);

// FEATv1: magic, dtype, T, D, kind, frame shift, config hash, then row-major
// f32 payload.
void WriteFeatures(const std::filesystem::path& path, const FeatureMatrix& feat,
                   uint64_t config_hash);
FeatureMatrix ReadFeatures(const std::filesystem::path& path,
                           uint64_t* config_hash = nullptr);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_FEATURES_H_
