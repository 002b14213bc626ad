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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <fstream>
#include <set>

#include "gmmresnext/dataio.h"
#include "test_util.h"

using namespace gmmresnext;
using gmmresnext::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Minimal RIFF writer for formats WriteWav does not produce.
void WriteRawWav(const fs::path& path, uint16_t format, uint16_t channels,
                 uint32_t rate, uint16_t bits, const std::string& payload) {
  std::ofstream os(path, std::ios::binary);
  auto u16 = [&](uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); };
  auto u32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  os.write("RIFF", 4);
  u32(36 + static_cast<uint32_t>(payload.size()));
  os.write("WAVEfmt ", 8);
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<uint16_t>(channels * bits / 8));
  u16(bits);
  os.write("data", 4);
  u32(static_cast<uint32_t>(payload.size()));
  os << payload;
}

std::string Pcm16(const std::vector<int16_t>& v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size() * 2);
}

std::string ErrorOf(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool Contains(const std::string& s, const std::string& sub) {
  return s.find(sub) != std::string::npos;
}

}  // namespace

TEST_CASE("load_wav scales PCM16 by 1/32768") {
  TempDir dir("wav");
  WriteRawWav(dir.path() / "a.wav", 1, 1, 16000, 16, Pcm16({0, 16384, -32768}));
  WaveBuffer w = LoadWav(dir.path() / "a.wav");
  REQUIRE(w.samples.size() == 3);
  CHECK(w.samples[0] == 0.0);
  CHECK(w.samples[1] == 0.5);
  CHECK(w.samples[2] == -1.0);
  CHECK(w.sample_rate == 16000);
}

TEST_CASE("load_wav reads float32") {
  TempDir dir("wav");
  std::vector<float> v{0.25f, -0.75f};
  WriteRawWav(dir.path() / "f.wav", 3, 1, 16000, 32,
              std::string(reinterpret_cast<const char*>(v.data()), 8));
  WaveBuffer w = LoadWav(dir.path() / "f.wav");
  REQUIRE(w.samples.size() == 2);
  CHECK(w.samples[0] == 0.25);
  CHECK(w.samples[1] == -0.75);
}

TEST_CASE("load_wav rejections name the reason") {
  TempDir dir("wav");
  const fs::path p = dir.path() / "x.wav";
  WriteRawWav(p, 1, 1, 16000, 16, "");
  CHECK(Contains(ErrorOf([&] { LoadWav(p); }), "empty audio"));
  WriteRawWav(p, 1, 1, 8000, 16, Pcm16({1, 2}));
  CHECK(Contains(ErrorOf([&] { LoadWav(p); }), "unsupported sample rate"));
  WriteRawWav(p, 1, 2, 16000, 16, Pcm16({1, 2}));
  CHECK(Contains(ErrorOf([&] { LoadWav(p); }), "unsupported channel count"));
  WriteRawWav(p, 1, 1, 16000, 8, "ab");
  CHECK(Contains(ErrorOf([&] { LoadWav(p); }), "unsupported encoding"));
  CHECK_THROWS_AS(LoadWav(dir.path() / "missing.wav"), DataError);
}

TEST_CASE("write_wav then load_wav is identity on PCM16 values") {
  TempDir dir("wav");
  Rng rng(3);
  WaveBuffer w;
  for (int i = 0; i < 1000; ++i) {
    w.samples.push_back(static_cast<double>(
                            static_cast<int>(rng.Index(65536)) - 32768) /
                        32768.0);
  }
  WriteWav(dir.path() / "r.wav", w);
  WaveBuffer r = LoadWav(dir.path() / "r.wav");
  CHECK(r.samples == w.samples);
}

TEST_CASE("parse_manifest CSV keeps file order and resolves paths") {
  TempDir dir("manifest");
  {
    std::ofstream os(dir.path() / "m.csv");
    os << "speaker_id,utt_id,path,gender\n"
       << "s1,u2,wav/b.wav,female\n"
       << "s0,u1,/abs/a.wav,male\n";
  }
  auto m = ParseManifest(dir.path() / "m.csv");
  REQUIRE(m.size() == 2);
  CHECK(m[0].utt_id == "u2");
  CHECK(m[0].speaker_id == "s1");
  CHECK(m[0].gender == Gender::kFemale);
  CHECK(m[0].path == dir.path() / "wav" / "b.wav");
  CHECK(m[1].utt_id == "u1");
  CHECK(m[1].path == fs::path("/abs/a.wav"));
  CHECK(m[1].gender == Gender::kMale);
}

TEST_CASE("parse_manifest without gender column and JSONL") {
  TempDir dir("manifest");
  {
    std::ofstream os(dir.path() / "m.csv");
    os << "utt_id,path,speaker_id\nu1,a.wav,s0\n";
  }
  auto m = ParseManifest(dir.path() / "m.csv");
  REQUIRE(m.size() == 1);
  CHECK(m[0].gender == Gender::kUnknown);
  {
    std::ofstream os(dir.path() / "m.jsonl");
    os << R"({"utt_id":"a","path":"x.wav","speaker_id":"s","gender":"male"})"
       << "\n"
       << R"({"utt_id":"b","path":"y.wav","speaker_id":"t"})" << "\n";
  }
  auto j = ParseManifest(dir.path() / "m.jsonl");
  REQUIRE(j.size() == 2);
  CHECK(j[0].gender == Gender::kMale);
  CHECK(j[1].utt_id == "b");
}

TEST_CASE("parse_manifest errors") {
  TempDir dir("manifest");
  const fs::path p = dir.path() / "m.csv";
  {
    std::ofstream os(p);
    os << "utt_id,path,speaker_id\nu1,a.wav,s0\nu1,b.wav,s1\n";
  }
  std::string err = ErrorOf([&] { ParseManifest(p); });
  CHECK(Contains(err, "duplicate"));
  CHECK(Contains(err, "u1"));
  {
    std::ofstream os(p);
    os << "utt_id,path,speaker_id,gender\nu1,a.wav,s0,x\n";
  }
  CHECK(Contains(ErrorOf([&] { ParseManifest(p); }), "invalid gender"));
  {
    std::ofstream os(p);
    os << "utt_id,path\nu1,a.wav\n";
  }
  CHECK(Contains(ErrorOf([&] { ParseManifest(p); }), "missing field"));
}

TEST_CASE("manifest and trial round trips") {
  TempDir dir("roundtrip");
  std::vector<UtteranceManifestEntry> es = {
      {"a", dir.path() / "wav" / "a.wav", "s0", Gender::kMale},
      {"b", dir.path() / "wav" / "b.wav", "s0", Gender::kMale},
      {"c", dir.path() / "wav" / "c.wav", "s1", Gender::kFemale}};
  WriteManifest(dir.path() / "m.csv", es);
  auto back = ParseManifest(dir.path() / "m.csv");
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].utt_id == es[i].utt_id);
    CHECK(back[i].path == es[i].path);
    CHECK(back[i].gender == es[i].gender);
  }
  auto trials = MakeAllPairTrials(es);
  REQUIRE(trials.size() == 3);
  CHECK(trials[0].label == TrialLabel::kTarget);
  CHECK(trials[1].label == TrialLabel::kNontarget);
  WriteTrials(dir.path() / "t.txt", trials);
  auto t2 = ParseTrials(dir.path() / "t.txt");
  REQUIRE(t2.size() == 3);
  CHECK(t2[2].enroll_utt == "b");
  CHECK(t2[2].test_utt == "c");
  {
    std::ofstream os(dir.path() / "bad.txt");
    os << "2 a b\n";
  }
  CHECK_THROWS_AS(ParseTrials(dir.path() / "bad.txt"), DataError);
}

TEST_CASE("synth_corpus is deterministic in its seed") {
  TempDir a("synth"), b("synth"), c("synth");
  SynthOptions opts;
  opts.n_speakers = 4;
  opts.utts_per_speaker = 3;
  opts.seed = 7;
  auto ma = SynthCorpus(opts, a.path());
  auto mb = SynthCorpus(opts, b.path());
  REQUIRE(ma.size() == 12);
  for (size_t i = 0; i < ma.size(); ++i) {
    std::ifstream fa(ma[i].path, std::ios::binary), fb(mb[i].path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {});
    std::string sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
  }
  opts.seed = 8;
  auto mc = SynthCorpus(opts, c.path());
  CHECK(LoadWav(ma[0].path).samples != LoadWav(mc[0].path).samples);
}

TEST_CASE("synth_corpus labels half the speakers male") {
  TempDir dir("synth");
  SynthOptions opts;
  opts.n_speakers = 2;
  opts.utts_per_speaker = 2;
  opts.seed = 123;
  auto m = SynthCorpus(opts, dir.path());
  REQUIRE(m.size() == 4);
  std::set<std::string> speakers;
  std::set<Gender> genders;
  for (const auto& e : m) {
    speakers.insert(e.speaker_id);
    genders.insert(e.gender);
    WaveBuffer w = LoadWav(e.path);
    CHECK(w.samples.size() >= static_cast<size_t>(opts.min_seconds * 16000) - 1);
  }
  CHECK(speakers.size() == 2);
  CHECK(genders == std::set<Gender>{Gender::kMale, Gender::kFemale});
  opts.n_speakers = 1;
  CHECK_THROWS_AS(SynthCorpus(opts, dir.path()), ConfigError);
}

TEST_CASE("synthetic in-memory samples equal the written file") {
  SynthOptions opts;
  SpeakerRecipe r = MakeSpeakerRecipe(opts.seed, 3);
  CHECK(r.gender == Gender::kFemale);
  CHECK(r.f0_hz >= 165.0);
  WaveBuffer w = SynthesizeUtterance(r, opts, 3, 0);
  TempDir dir("synth");
  WriteWav(dir.path() / "u.wav", w);
  CHECK(LoadWav(dir.path() / "u.wav").samples == w.samples);
}
