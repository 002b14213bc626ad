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

#ifndef GMMRESNEXT_DATAIO_H_
#define GMMRESNEXT_DATAIO_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gmmresnext {

constexpr int kSampleRate = 16000;

enum class Gender { kMale, kFemale, kUnknown };

std::string GenderToString(Gender g);
// Accepts "male", "female", "unknown" and the empty string (unknown).
Gender ParseGender(const std::string& token);

struct WaveBuffer {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;
};

// Reads a mono 16 kHz RIFF/WAVE file holding PCM16 or float32 samples.
// PCM16 value v maps to v / 32768.
WaveBuffer LoadWav(const std::filesystem::path& path);

// Writes PCM16. Samples are clipped to the representable range and rounded,
// so LoadWav(WriteWav(x)) reproduces any PCM16-quantized x exactly.
void WriteWav(const std::filesystem::path& path, const WaveBuffer& wave);

struct UtteranceManifestEntry {
  std::string utt_id;
  std::filesystem::path path;
  std::string speaker_id;
  Gender gender = Gender::kUnknown;
};

// Parses a CSV manifest with header `utt_id,path,speaker_id,gender` (column
// order free, gender optional) or JSONL with the same keys. Relative paths are
// resolved against the manifest's directory. Entries come back in file order.
std::vector<UtteranceManifestEntry> ParseManifest(
    const std::filesystem::path& path);

// Writes CSV. Paths under the manifest's directory are written relative.
void WriteManifest(const std::filesystem::path& path,
                   const std::vector<UtteranceManifestEntry>& entries);

enum class TrialLabel { kTarget, kNontarget };

struct TrialRecord {
  TrialLabel label = TrialLabel::kNontarget;
  std::string enroll_utt;
  std::string test_utt;
};

// VoxCeleb-style `label enroll test` lines with label 1/0.
std::vector<TrialRecord> ParseTrials(const std::filesystem::path& path);
void WriteTrials(const std::filesystem::path& path,
                 const std::vector<TrialRecord>& trials);

// Every unordered pair of entries (manifest order), labeled by speaker.
std::vector<TrialRecord> MakeAllPairTrials(
    const std::vector<UtteranceManifestEntry>& entries);

// A synthetic speaker: a glottal-pulse/noise source and a cascade of four
// formant resonators. Each syllable takes one vowel of a shared inventory,
// warped by the speaker's vocal-tract scale and per-formant offsets.
struct SpeakerRecipe {
  Gender gender = Gender::kUnknown;
  double f0_hz = 120.0;
  double tract_scale = 1.0;
  std::array<double, 4> formant_scale{1.0, 1.0, 1.0, 1.0};
  std::array<double, 4> bandwidth_hz{};
  double voicing = 0.7;
  double tilt = 0.5;
};

// Neutral formant frequencies (Hz) of the shared vowel inventory.
constexpr int kNumVowels = 6;
extern const std::array<std::array<double, 4>, kNumVowels> kVowelFormants;

SpeakerRecipe MakeSpeakerRecipe(uint64_t seed, int speaker_index);

struct SynthOptions {
  int n_speakers = 16;
  int utts_per_speaker = 14;
  uint64_t seed = 7;
  double min_seconds = 2.2;
  double max_seconds = 3.8;
};

WaveBuffer SynthesizeUtterance(const SpeakerRecipe& recipe,
                               const SynthOptions& opts, int speaker_index,
                               int utt_index);

// Writes `<out_dir>/wav/spkNNN-uttNNN.wav` for every utterance and returns the
// manifest entries (speaker-major order). Even speakers are male, odd female.
std::vector<UtteranceManifestEntry> SynthCorpus(
    const SynthOptions& opts, const std::filesystem::path& out_dir);

}  // namespace gmmresnext

#endif  // GMMRESNEXT_DATAIO_H_
