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

#include "gmmresnext/features.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

namespace gmmresnext {

namespace {

// FFTW's planner is not reentrant.
std::mutex& FftwPlannerMutex() {
  static std::mutex m;
  return m;
}

}  // namespace

struct MfccComputer::FftPlan {
  int n = 0;
  fftw_plan plan = nullptr;

  explicit FftPlan(int size) : n(size) {
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    {
      std::lock_guard<std::mutex> lock(FftwPlannerMutex());
      plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
    }
    fftw_free(in);
    fftw_free(out);
  }
  ~FftPlan() {
    std::lock_guard<std::mutex> lock(FftwPlannerMutex());
    fftw_destroy_plan(plan);
  }
};

double HzToMel(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }

std::vector<std::vector<double>> MelFilterbank(const MfccConfig& cfg) {
  const int n_bins = cfg.fft_size / 2 + 1;
  const double mel_lo = HzToMel(cfg.low_freq);
  const double mel_hi = HzToMel(cfg.high_freq);
  const double step = (mel_hi - mel_lo) / (cfg.n_mels + 1);
  std::vector<std::vector<double>> bank(cfg.n_mels,
                                        std::vector<double>(n_bins, 0.0));
  for (int m = 0; m < cfg.n_mels; ++m) {
    double left = mel_lo + m * step;
    double center = left + step;
    double right = center + step;
    for (int k = 0; k < n_bins; ++k) {
      double mel = HzToMel(static_cast<double>(k) * cfg.sample_rate /
                           cfg.fft_size);
      if (mel > left && mel < center) {
        bank[m][k] = (mel - left) / (center - left);
      } else if (mel >= center && mel < right) {
        bank[m][k] = (right - mel) / (right - center);
      }
    }
  }
  return bank;
}

MfccComputer::MfccComputer(const MfccConfig& cfg) : cfg_(cfg) {
  if (cfg.n_ceps < 1 || cfg.n_mels < cfg.n_ceps) {
    throw ConfigError("mfcc: need 1 <= n_ceps <= n_mels");
  }
  if (cfg.frame_length < 2 || cfg.frame_length > cfg.fft_size ||
      cfg.frame_shift < 1) {
    throw ConfigError("mfcc: need 2 <= frame_length <= fft_size");
  }
  if (!(cfg.low_freq >= 0.0 && cfg.high_freq > cfg.low_freq &&
        cfg.high_freq <= cfg.sample_rate / 2.0)) {
    throw ConfigError("mfcc: invalid mel frequency range");
  }
  window_.resize(cfg.frame_length);
  for (int i = 0; i < cfg.frame_length; ++i) {
    window_[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (cfg.frame_length - 1));
  }
  mel_ = MelFilterbank(cfg);
  dct_.resize(static_cast<size_t>(cfg.n_ceps) * cfg.n_mels);
  const double m = cfg.n_mels;
  for (int k = 0; k < cfg.n_ceps; ++k) {
    double norm = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
    for (int j = 0; j < cfg.n_mels; ++j) {
      dct_[static_cast<size_t>(k) * cfg.n_mels + j] =
          norm * std::cos(M_PI * k * (j + 0.5) / m);
    }
  }
  plan_ = std::make_unique<FftPlan>(cfg.fft_size);
}

MfccComputer::~MfccComputer() = default;

int MfccComputer::NumFrames(size_t n_samples) const {
  if (n_samples < static_cast<size_t>(cfg_.frame_length)) return 0;
  return 1 + static_cast<int>((n_samples - cfg_.frame_length) /
                              cfg_.frame_shift);
}

FeatureMatrix MfccComputer::Compute(const WaveBuffer& wave) const {
  if (wave.sample_rate != cfg_.sample_rate) {
    throw DataError("mfcc: unsupported sample rate " +
                    std::to_string(wave.sample_rate));
  }
  const int n_frames = NumFrames(wave.samples.size());
  if (n_frames < 1) throw DataError("mfcc: utterance too short");

  const int n = cfg_.fft_size;
  const int n_bins = n / 2 + 1;
  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(n_bins);
  std::vector<double> frame(cfg_.frame_length), power(n_bins),
      logmel(cfg_.n_mels);

  FeatureMatrix feat(n_frames, cfg_.n_ceps, FeatureKind::kMfcc);
  feat.frame_shift = static_cast<double>(cfg_.frame_shift) / cfg_.sample_rate;
  for (int t = 0; t < n_frames; ++t) {
    const double* src = wave.samples.data() +
                        static_cast<size_t>(t) * cfg_.frame_shift;
    std::copy(src, src + cfg_.frame_length, frame.begin());
    for (int i = cfg_.frame_length - 1; i > 0; --i) {
      frame[i] -= cfg_.preemph * frame[i - 1];
    }
    frame[0] -= cfg_.preemph * frame[0];
    for (int i = 0; i < n; ++i) {
      in[i] = i < cfg_.frame_length ? frame[i] * window_[i] : 0.0;
    }
    fftw_execute_dft_r2c(plan_->plan, in, out);
    for (int k = 0; k < n_bins; ++k) {
      power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    }
    for (int m = 0; m < cfg_.n_mels; ++m) {
      double e = 0.0;
      const std::vector<double>& w = mel_[m];
      for (int k = 0; k < n_bins; ++k) e += w[k] * power[k];
      logmel[m] = std::log(std::max(e, cfg_.log_floor));
    }
    for (int c = 0; c < cfg_.n_ceps; ++c) {
      const double* basis = dct_.data() + static_cast<size_t>(c) * cfg_.n_mels;
      double acc = 0.0;
      for (int m = 0; m < cfg_.n_mels; ++m) acc += basis[m] * logmel[m];
      feat.at(t, c) = acc;
    }
  }
  fftw_free(in);
  fftw_free(out);
  return feat;
}

FeatureMatrix ComputeMfcc(const WaveBuffer& wave, const MfccConfig& cfg) {
  return MfccComputer(cfg).Compute(wave);
}

FeatureMatrix MeanNormalize(FeatureMatrix feat) {
  if (feat.frames < 1) throw DataError("mean_normalize: empty matrix");
  std::vector<double> mean(feat.dim, 0.0);
  for (int t = 0; t < feat.frames; ++t) {
    for (int d = 0; d < feat.dim; ++d) mean[d] += feat.at(t, d);
  }
  for (double& m : mean) m /= feat.frames;
  for (int t = 0; t < feat.frames; ++t) {
    for (int d = 0; d < feat.dim; ++d) feat.at(t, d) -= mean[d];
  }
  return feat;
}

FeatureMatrix CropOrPadAt(const FeatureMatrix& feat, int target_frames,
                          int offset) {
  if (target_frames < 1) throw ConfigError("crop: target_frames must be >= 1");
  if (feat.frames < 1) throw DataError("crop: empty matrix");
  FeatureMatrix out(target_frames, feat.dim, feat.kind);
  out.frame_shift = feat.frame_shift;
  if (feat.frames >= target_frames) {
    if (offset < 0 || offset + target_frames > feat.frames) {
      throw ConfigError("crop: offset out of range");
    }
    std::copy(feat.data.begin() + static_cast<ptrdiff_t>(offset) * feat.dim,
              feat.data.begin() +
                  static_cast<ptrdiff_t>(offset + target_frames) * feat.dim,
              out.data.begin());
  } else {
    for (int t = 0; t < target_frames; ++t) {
      auto src = feat.row(t % feat.frames);
      std::copy(src.begin(), src.end(), out.row(t).begin());
    }
  }
  return out;
}

FeatureMatrix CropOrPad(const FeatureMatrix& feat, int target_frames,
                        Rng& rng) {
  int offset = 0;
  if (feat.frames > target_frames) {
    offset = static_cast<int>(rng.Index(feat.frames - target_frames + 1));
  }
  return CropOrPadAt(feat, target_frames, offset);
}

namespace {
constexpr char kFeatMagic[] = "FEATv1\0\0";
constexpr uint32_t kDtypeF32 = 0;
}  // namespace

void WriteFeatures(const std::filesystem::path& path, const FeatureMatrix& feat,
                   uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  binio::WriteMagic(os, std::string_view(kFeatMagic, 8));
  binio::WriteU32(os, kDtypeF32);
  binio::WriteU32(os, static_cast<uint32_t>(feat.frames));
  binio::WriteU32(os, static_cast<uint32_t>(feat.dim));
  binio::WriteU32(os, static_cast<uint32_t>(feat.kind));
  binio::WriteF64(os, feat.frame_shift);
  binio::WriteU64(os, config_hash);
  std::vector<float> buf(feat.data.begin(), feat.data.end());
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw DataError("write failed: " + path.string());
}

FeatureMatrix ReadFeatures(const std::filesystem::path& path,
                           uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  binio::ExpectMagic(is, std::string_view(kFeatMagic, 8), path.string());
  if (binio::ReadU32(is) != kDtypeF32) {
    throw DataError(path.string() + ": unsupported dtype");
  }
  uint32_t t = binio::ReadU32(is);
  uint32_t d = binio::ReadU32(is);
  uint32_t kind = binio::ReadU32(is);
  if (kind > 1) throw DataError(path.string() + ": unknown feature kind");
  if (t < 1 || d < 1) throw DataError(path.string() + ": empty matrix");
  FeatureMatrix feat(static_cast<int>(t), static_cast<int>(d),
                     static_cast<FeatureKind>(kind));
  feat.frame_shift = binio::ReadF64(is);
  uint64_t hash = binio::ReadU64(is);
  if (config_hash) *config_hash = hash;
  std::vector<float> buf(feat.data.size());
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw DataError(path.string() + ": truncated payload");
  std::copy(buf.begin(), buf.end(), feat.data.begin());
  return feat;
}

}  // namespace gmmresnext
