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

#include "gmmresnext/dataio.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "gmmresnext/common.h"
#include "json.hpp"

namespace gmmresnext {

namespace fs = std::filesystem;

std::string GenderToString(Gender g) {
  switch (g) {
    case Gender::kMale:
      return "male";
    case Gender::kFemale:
      return "female";
    default:
      return "unknown";
  }
}

Gender ParseGender(const std::string& token) {
  if (token == "male") return Gender::kMale;
  if (token == "female") return Gender::kFemale;
  if (token == "unknown" || token.empty()) return Gender::kUnknown;
  throw DataError("invalid gender '" + token + "'");
}

// ---------------------------------------------------------------------------
// WAV

namespace {

constexpr uint16_t kFormatPcm = 1;
constexpr uint16_t kFormatFloat = 3;
constexpr uint16_t kFormatExtensible = 0xFFFE;

uint16_t Le16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

uint32_t Le32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

WaveBuffer LoadWav(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError(where + "not a RIFF/WAVE file");
  }

  bool have_fmt = false, have_data = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* ck = bytes.data() + pos;
    uint32_t len = Le32(ck + 4);
    size_t body = pos + 8;
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) {
        throw DataError(where + "truncated fmt chunk");
      }
      format = Le16(bytes.data() + body);
      channels = Le16(bytes.data() + body + 2);
      rate = Le32(bytes.data() + body + 4);
      bits = Le16(bytes.data() + body + 14);
      if (format == kFormatExtensible && len >= 26) {
        format = Le16(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(ck, "data", 4) == 0) {
      data_off = body;
      data_len = std::min<size_t>(len, bytes.size() - body);
      have_data = true;
      break;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw DataError(where + "missing fmt chunk");
  if (!have_data) throw DataError(where + "missing data chunk");

  bool pcm16 = format == kFormatPcm && bits == 16;
  bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw DataError(where + "unsupported encoding (format " +
                    std::to_string(format) + ", " + std::to_string(bits) +
                    " bits)");
  }
  if (channels != 1) {
    throw DataError(where + "unsupported channel count " +
                    std::to_string(channels));
  }
  if (rate != static_cast<uint32_t>(kSampleRate)) {
    throw DataError(where + "unsupported sample rate " + std::to_string(rate));
  }

  WaveBuffer wave;
  wave.sample_rate = kSampleRate;
  const unsigned char* p = bytes.data() + data_off;
  if (pcm16) {
    size_t n = data_len / 2;
    wave.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      wave.samples[i] = static_cast<int16_t>(Le16(p + 2 * i)) / 32768.0;
    }
  } else {
    size_t n = data_len / 4;
    wave.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, p + 4 * i, 4);
      wave.samples[i] = v;
    }
  }
  if (wave.samples.empty()) throw DataError(where + "empty audio");
  return wave;
}

void WriteWav(const fs::path& path, const WaveBuffer& wave) {
  if (wave.sample_rate != kSampleRate) {
    throw DataError("WriteWav: unsupported sample rate " +
                    std::to_string(wave.sample_rate));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  const uint32_t data_len = static_cast<uint32_t>(wave.samples.size() * 2);
  os.write("RIFF", 4);
  binio::WriteU32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  binio::WriteU32(os, 16);
  uint16_t fmt[2] = {kFormatPcm, 1};
  os.write(reinterpret_cast<const char*>(fmt), 4);
  binio::WriteU32(os, kSampleRate);
  binio::WriteU32(os, kSampleRate * 2);
  uint16_t align_bits[2] = {2, 16};
  os.write(reinterpret_cast<const char*>(align_bits), 4);
  os.write("data", 4);
  binio::WriteU32(os, data_len);
  std::vector<int16_t> pcm(wave.samples.size());
  for (size_t i = 0; i < pcm.size(); ++i) {
    double v = std::nearbyint(wave.samples[i] * 32768.0);
    pcm[i] = static_cast<int16_t>(std::clamp(v, -32768.0, 32767.0));
  }
  os.write(reinterpret_cast<const char*>(pcm.data()),
           static_cast<std::streamsize>(pcm.size() * 2));
  if (!os) throw DataError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Manifests and trials

namespace {

std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool LooksLikeJsonl(const fs::path& path, const std::string& first_line) {
  if (path.extension() == ".jsonl") return true;
  auto it = std::find_if(first_line.begin(), first_line.end(),
                         [](char c) { return !std::isspace(c); });
  return it != first_line.end() && *it == '{';
}

fs::path Resolve(const fs::path& base_dir, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : (base_dir / path).lexically_normal();
}

}  // namespace

std::vector<UtteranceManifestEntry> ParseManifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }

  std::vector<UtteranceManifestEntry> entries;
  std::unordered_set<std::string> seen;
  auto add = [&](UtteranceManifestEntry e, size_t line_no) {
    if (e.utt_id.empty()) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": empty utt_id");
    }
    if (!seen.insert(e.utt_id).second) {
      throw DataError("duplicate utt_id '" + e.utt_id + "'");
    }
    entries.push_back(std::move(e));
  };

  if (!lines.empty() && LooksLikeJsonl(path, lines.front())) {
    for (size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(lines[i]);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest line " + std::to_string(i + 1) + ": " +
                        e.what());
      }
      UtteranceManifestEntry e;
      for (const char* key : {"utt_id", "path", "speaker_id"}) {
        if (!j.contains(key) || !j[key].is_string()) {
          throw DataError("manifest line " + std::to_string(i + 1) +
                          ": missing field '" + key + "'");
        }
      }
      e.utt_id = j["utt_id"].get<std::string>();
      e.path = Resolve(base, j["path"].get<std::string>());
      e.speaker_id = j["speaker_id"].get<std::string>();
      e.gender = ParseGender(j.value("gender", std::string()));
      add(std::move(e), i + 1);
    }
    return entries;
  }

  if (lines.empty()) throw DataError("empty manifest " + path.string());
  std::vector<std::string> header = SplitCsvLine(lines.front());
  std::map<std::string, size_t> col;
  for (size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* key : {"utt_id", "path", "speaker_id"}) {
    if (!col.count(key)) {
      throw DataError("manifest header: missing field '" + std::string(key) +
                      "'");
    }
  }
  const bool has_gender = col.count("gender") > 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f = SplitCsvLine(lines[i]);
    if (f.size() != header.size()) {
      throw DataError("manifest line " + std::to_string(i + 1) +
                      ": missing field (expected " +
                      std::to_string(header.size()) + " columns)");
    }
    UtteranceManifestEntry e;
    e.utt_id = f[col["utt_id"]];
    e.path = Resolve(base, f[col["path"]]);
    e.speaker_id = f[col["speaker_id"]];
    if (has_gender) e.gender = ParseGender(f[col["gender"]]);
    add(std::move(e), i + 1);
  }
  return entries;
}

void WriteManifest(const fs::path& path,
                   const std::vector<UtteranceManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  os << "utt_id,path,speaker_id,gender\n";
  for (const auto& e : entries) {
    fs::path p = fs::absolute(e.path).lexically_normal();
    fs::path rel = p.lexically_relative(base);
    bool inside = !rel.empty() && *rel.begin() != "..";
    os << e.utt_id << ',' << (inside ? rel : p).generic_string() << ','
       << e.speaker_id << ',' << GenderToString(e.gender) << '\n';
  }
}

std::vector<TrialRecord> ParseTrials(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open trial list " + path.string());
  std::vector<TrialRecord> trials;
  size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string label, a, b;
    if (!(ss >> label >> a >> b)) {
      throw DataError("trial line " + std::to_string(line_no) +
                      ": expected `label enroll test`");
    }
    TrialRecord t;
    if (label == "1") {
      t.label = TrialLabel::kTarget;
    } else if (label == "0") {
      t.label = TrialLabel::kNontarget;
    } else {
      throw DataError("trial line " + std::to_string(line_no) +
                      ": label must be 1 or 0");
    }
    t.enroll_utt = a;
    t.test_utt = b;
    trials.push_back(std::move(t));
  }
  return trials;
}

void WriteTrials(const fs::path& path, const std::vector<TrialRecord>& trials) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& t : trials) {
    os << (t.label == TrialLabel::kTarget ? 1 : 0) << ' ' << t.enroll_utt
       << ' ' << t.test_utt << '\n';
  }
}

std::vector<TrialRecord> MakeAllPairTrials(
    const std::vector<UtteranceManifestEntry>& entries) {
  std::vector<TrialRecord> trials;
  for (size_t i = 0; i < entries.size(); ++i) {
    for (size_t j = i + 1; j < entries.size(); ++j) {
      TrialRecord t;
      t.label = entries[i].speaker_id == entries[j].speaker_id
                    ? TrialLabel::kTarget
                    : TrialLabel::kNontarget;
      t.enroll_utt = entries[i].utt_id;
      t.test_utt = entries[j].utt_id;
      trials.push_back(std::move(t));
    }
  }
  return trials;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const std::array<std::array<double, 4>, kNumVowels> kVowelFormants = {{
    {730.0, 1090.0, 2440.0, 3400.0},
    {270.0, 2290.0, 3010.0, 3700.0},
    {300.0, 870.0, 2240.0, 3300.0},
    {530.0, 1840.0, 2480.0, 3500.0},
    {570.0, 840.0, 2410.0, 3300.0},
    {660.0, 1720.0, 2410.0, 3600.0},
}};

SpeakerRecipe MakeSpeakerRecipe(uint64_t seed, int speaker_index) {
  Rng rng(DeriveSeed(seed, 1000 + static_cast<uint64_t>(speaker_index)));
  SpeakerRecipe r;
  r.gender = speaker_index % 2 == 0 ? Gender::kMale : Gender::kFemale;
  const bool male = r.gender == Gender::kMale;
  r.f0_hz = male ? rng.Uniform(85.0, 150.0) : rng.Uniform(165.0, 260.0);
  r.tract_scale = (male ? 1.0 : 1.15) * rng.Uniform(0.88, 1.12);
  for (size_t k = 0; k < 4; ++k) {
    r.formant_scale[k] = rng.Uniform(0.92, 1.08);
    r.bandwidth_hz[k] = rng.Uniform(50.0, 160.0) * (1.0 + 0.3 * k);
  }
  r.voicing = rng.Uniform(0.6, 0.95);
  r.tilt = rng.Uniform(0.3, 0.9);
  return r;
}

namespace {

// Two-pole resonator coefficients for one formant.
struct Resonator {
  double a1 = 0.0, a2 = 0.0, gain = 0.0;
};

Resonator MakeResonator(double freq, double bandwidth) {
  const double fs = kSampleRate;
  freq = std::min(freq, 0.45 * fs);
  const double radius = std::exp(-M_PI * bandwidth / fs);
  return {2.0 * radius * std::cos(2.0 * M_PI * freq / fs), -radius * radius,
          1.0 - radius};
}

}  // namespace

WaveBuffer SynthesizeUtterance(const SpeakerRecipe& recipe,
                               const SynthOptions& opts, int speaker_index,
                               int utt_index) {
  Rng rng(DeriveSeed(DeriveSeed(opts.seed, 2000 + speaker_index),
                     static_cast<uint64_t>(utt_index)));
  const double fs = kSampleRate;
  const size_t n = static_cast<size_t>(
      std::lround(rng.Uniform(opts.min_seconds, opts.max_seconds) * fs));

  // Syllables: a vowel and pitch per segment with raised-cosine edges,
  // separated by gaps that carry only the noise floor.
  struct Segment {
    size_t begin, end;
    int vowel;
    double f0;
  };
  std::vector<Segment> segs;
  std::vector<double> env(n, 0.0);
  for (size_t pos = static_cast<size_t>(rng.Uniform(0.02, 0.08) * fs);
       pos < n;) {
    const size_t on = static_cast<size_t>(rng.Uniform(0.12, 0.30) * fs);
    const size_t off = static_cast<size_t>(rng.Uniform(0.04, 0.12) * fs);
    const size_t end = std::min(n, pos + on);
    segs.push_back({pos, end, static_cast<int>(rng.Index(kNumVowels)),
                    recipe.f0_hz * rng.Uniform(0.9, 1.1)});
    const size_t ramp = std::min<size_t>(on / 4, 320);
    for (size_t i = 0; pos + i < end; ++i) {
      double g = 1.0;
      if (i < ramp) g = 0.5 - 0.5 * std::cos(M_PI * i / ramp);
      if (on - 1 - i < ramp) g = 0.5 - 0.5 * std::cos(M_PI * (on - 1 - i) / ramp);
      env[pos + i] = g;
    }
    pos += on + off;
  }

  std::vector<double> x(n, 0.0);
  double phase = 0.0, tilt_state = 0.0;
  for (const Segment& s : segs) {
    for (size_t i = s.begin; i < s.end; ++i) {
      const double t = static_cast<double>(i - s.begin) / fs;
      phase += s.f0 * (1.0 - 0.08 * t) / fs;  // falling intonation
      double pulse = 0.0;
      if (phase >= 1.0) {
        phase -= 1.0;
        pulse = 1.0;
      }
      const double src = recipe.voicing * pulse * 4.0 +
                         (1.0 - recipe.voicing) * 0.3 * rng.Normal();
      tilt_state = src + recipe.tilt * tilt_state;
      x[i] = tilt_state * env[i];
    }
  }

  // Formant cascade with per-segment coefficients; filter state carries
  // across segment boundaries.
  std::vector<int> seg_of(n, -1);
  for (size_t k = 0; k < segs.size(); ++k) {
    for (size_t i = segs[k].begin; i < segs[k].end; ++i) seg_of[i] = static_cast<int>(k);
  }
  for (size_t f = 0; f < 4; ++f) {
    std::vector<Resonator> res(segs.size());
    for (size_t k = 0; k < segs.size(); ++k) {
      res[k] = MakeResonator(kVowelFormants[segs[k].vowel][f] *
                                 recipe.tract_scale * recipe.formant_scale[f],
                             recipe.bandwidth_hz[f]);
    }
    Resonator cur = segs.empty() ? Resonator{} : res[0];
    double y1 = 0.0, y2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
      if (seg_of[i] >= 0) cur = res[seg_of[i]];
      const double y = cur.gain * x[i] + cur.a1 * y1 + cur.a2 * y2;
      y2 = y1;
      y1 = y;
      x[i] = y;
    }
  }

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  const double target = 0.5 * rng.Uniform(0.6, 1.0);
  const double scale = peak > 0.0 ? target / peak : 0.0;
  WaveBuffer wave;
  wave.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const double v = x[i] * scale + 3e-4 * rng.Normal();
    // Quantize now so the in-memory buffer equals what LoadWav returns.
    const double q = std::nearbyint(v * 32768.0);
    wave.samples[i] = std::clamp(q, -32768.0, 32767.0) / 32768.0;
  }
  return wave;
}

std::vector<UtteranceManifestEntry> SynthCorpus(const SynthOptions& opts,
                                                const fs::path& out_dir) {
  if (opts.n_speakers < 2) {
    throw ConfigError("synth corpus needs at least 2 speakers");
  }
  if (opts.utts_per_speaker < 1) {
    throw ConfigError("synth corpus needs at least 1 utterance per speaker");
  }
  fs::create_directories(out_dir / "wav");
  std::vector<UtteranceManifestEntry> entries;
  char name[64];
  for (int s = 0; s < opts.n_speakers; ++s) {
    SpeakerRecipe recipe = MakeSpeakerRecipe(opts.seed, s);
    std::snprintf(name, sizeof(name), "spk%03d", s);
    std::string spk = name;
    for (int u = 0; u < opts.utts_per_speaker; ++u) {
      std::snprintf(name, sizeof(name), "%s-utt%03d", spk.c_str(), u);
      UtteranceManifestEntry e;
      e.utt_id = name;
      e.path = out_dir / "wav" / (e.utt_id + ".wav");
      e.speaker_id = spk;
      e.gender = recipe.gender;
      WriteWav(e.path, SynthesizeUtterance(recipe, opts, s, u));
      entries.push_back(std::move(e));
    }
  }
  return entries;
}

}  // namespace gmmresnext
