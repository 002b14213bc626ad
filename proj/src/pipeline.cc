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

#include "gmmresnext/pipeline.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "spdlog/spdlog.h"

#include "gmmresnext/dataio.h"
#include "gmmresnext/gmm.h"
#include "gmmresnext/train.h"

namespace gmmresnext {

using nlohmann::json;
using nlohmann::ordered_json;
using Stage = RunConfig::Stage;

namespace {

// ---------------------------------------------------------------------------
// Stamps and paths

fs::path DataDir(const fs::path& root) { return root / "data"; }
fs::path FeatDir(const fs::path& root, const std::string& kind) {
  return root / "feats" / kind;
}
fs::path GmmDir(const fs::path& root) { return root / "gmm"; }

void WriteStamp(const fs::path& dir, uint64_t hash) {
  fs::create_directories(dir);
  std::ofstream os(dir / "stamp.json");
  if (!os) throw DataError("cannot write " + (dir / "stamp.json").string());
  os << json{{"config_hash", HashToHex(hash)}}.dump() << '\n';
}

bool HasStamp(const fs::path& dir) { return fs::exists(dir / "stamp.json"); }

void CheckStamp(const fs::path& dir, uint64_t expected,
                const std::string& producer) {
  std::ifstream is(dir / "stamp.json");
  if (!is) {
    throw DataError("missing " + (dir / "stamp.json").string() + "; run " +
                    producer + " first");
  }
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw DataError((dir / "stamp.json").string() + ": " + e.what());
  }
  const std::string got = j.value("config_hash", "");
  if (got != HashToHex(expected)) {
    throw DataError(dir.string() + " was produced with config hash " + got +
                    ", current config has " + HashToHex(expected) +
                    "; rerun " + producer);
  }
}

void CheckHash(uint64_t got, uint64_t expected, const fs::path& what) {
  if (got != expected) {
    throw DataError(what.string() + ": config hash " + HashToHex(got) +
                    " does not match current config " + HashToHex(expected));
  }
}

std::vector<UtteranceManifestEntry> TrainManifest(const fs::path& root) {
  return ParseManifest(DataDir(root) / "train.csv");
}
std::vector<UtteranceManifestEntry> EvalManifest(const fs::path& root) {
  return ParseManifest(DataDir(root) / "eval.csv");
}

std::vector<FeatureMatrix> LoadFeatures(
    const fs::path& dir, const std::vector<UtteranceManifestEntry>& entries,
    uint64_t expected_hash) {
  std::vector<FeatureMatrix> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const fs::path p = dir / (e.utt_id + ".feat");
    uint64_t h = 0;
    out.push_back(ReadFeatures(p, &h));
    CheckHash(h, expected_hash, p);
  }
  return out;
}

std::vector<const FeatureMatrix*> Pointers(const std::vector<FeatureMatrix>& v) {
  std::vector<const FeatureMatrix*> p;
  for (const auto& f : v) p.push_back(&f);
  return p;
}

std::vector<int> SpeakerLabels(const std::vector<UtteranceManifestEntry>& es) {
  std::set<std::string> speakers;
  for (const auto& e : es) speakers.insert(e.speaker_id);
  std::map<std::string, int> index;
  for (const auto& s : speakers) index.emplace(s, static_cast<int>(index.size()));
  std::vector<int> labels;
  for (const auto& e : es) labels.push_back(index.at(e.speaker_id));
  return labels;
}

// Directory holding the single-path model input features.
std::string SingleFeatureKind(const RunConfig& cfg) {
  return cfg.model.ablate_gmm ? "mfcc" : "lgp";
}

uint64_t SingleFeatureHash(const RunConfig& cfg) {
  return cfg.model.ablate_gmm ? cfg.StageHash(Stage::kMfcc)
                              : cfg.StageHash(Stage::kGmm);
}

class TrainLog {
 public:
  explicit TrainLog(const fs::path& path) : os_(path) {
    if (!os_) throw DataError("cannot write " + path.string());
  }
  void Write(const std::string& phase, const EpochStats& s) {
    ordered_json j;
    j["phase"] = phase;
    j["epoch"] = s.epoch;
    j["lr"] = s.lr;
    j["mean_loss"] = s.mean_loss;
    j["accuracy"] = s.accuracy;
    os_ << j.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Data and features

void SynthDataStage(const RunConfig& cfg, const fs::path& root) {
  SynthOptions opts;
  opts.n_speakers = cfg.data.n_speakers;
  opts.utts_per_speaker =
      cfg.data.train_utts_per_speaker + cfg.data.eval_utts_per_speaker;
  opts.seed = cfg.seed;
  opts.min_seconds = cfg.data.min_seconds;
  opts.max_seconds = cfg.data.max_seconds;
  spdlog::info("synthesizing {} speakers x {} utterances", opts.n_speakers,
               opts.utts_per_speaker);
  auto entries = SynthCorpus(opts, DataDir(root));
  std::vector<UtteranceManifestEntry> train, eval;
  std::map<std::string, int> seen;
  for (auto& e : entries) {
    int k = seen[e.speaker_id]++;
    (k < cfg.data.train_utts_per_speaker ? train : eval).push_back(e);
  }
  WriteManifest(DataDir(root) / "train.csv", train);
  WriteManifest(DataDir(root) / "eval.csv", eval);
  WriteTrials(DataDir(root) / "trials.txt", MakeAllPairTrials(eval));
  WriteStamp(DataDir(root), cfg.StageHash(Stage::kData));
}

void ExtractMfccStage(const RunConfig& cfg, const fs::path& root) {
  CheckStamp(DataDir(root), cfg.StageHash(Stage::kData), "synth-data");
  const fs::path dir = FeatDir(root, "mfcc");
  fs::create_directories(dir);
  const uint64_t hash = cfg.StageHash(Stage::kMfcc);
  MfccComputer mfcc(cfg.mfcc);
  auto entries = TrainManifest(root);
  auto eval = EvalManifest(root);
  entries.insert(entries.end(), eval.begin(), eval.end());
  spdlog::info("extracting MFCC for {} utterances", entries.size());
  for (const auto& e : entries) {
    FeatureMatrix f = MeanNormalize(mfcc.Compute(LoadWav(e.path)));
    WriteFeatures(dir / (e.utt_id + ".feat"), f, hash);
  }
  WriteStamp(dir, hash);
}

void TrainGmmStage(const RunConfig& cfg, const fs::path& root) {
  const uint64_t mfcc_hash = cfg.StageHash(Stage::kMfcc);
  CheckStamp(FeatDir(root, "mfcc"), mfcc_hash, "extract-mfcc");
  const auto entries = TrainManifest(root);
  const auto feats = LoadFeatures(FeatDir(root, "mfcc"), entries, mfcc_hash);
  const uint64_t hash = cfg.StageHash(Stage::kGmm);
  fs::create_directories(GmmDir(root));

  struct Job {
    const char* name;
    Gender gender;
    uint64_t tag;
  };
  const Job jobs[] = {{"gmm", Gender::kUnknown, 21},
                      {"gmm_male", Gender::kMale, 22},
                      {"gmm_female", Gender::kFemale, 23}};
  for (const Job& job : jobs) {
    std::vector<FeatureMatrix> pool;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (job.gender == Gender::kUnknown || entries[i].gender == job.gender) {
        pool.push_back(feats[i]);
      }
    }
    if (job.gender != Gender::kUnknown && pool.empty()) {
      throw DataError(std::string("no training utterances labeled ") +
                      GenderToString(job.gender) + " for " + job.name);
    }
    size_t total = 0;
    for (const auto& f : pool) total += f.frames;
    FeatureMatrix stacked(static_cast<int>(total), cfg.mfcc.n_ceps);
    size_t off = 0;
    for (const auto& f : pool) {
      std::copy(f.data.begin(), f.data.end(), stacked.data.begin() + off);
      off += f.data.size();
    }
    EmOptions opts;
    opts.n_components = cfg.gmm.n_components;
    opts.n_iters = cfg.gmm.n_iters;
    opts.seed = DeriveSeed(cfg.seed, job.tag);
    opts.variance_floor_factor = cfg.gmm.variance_floor_factor;
    opts.kmeans_max_frames = cfg.gmm.kmeans_max_frames;
    spdlog::info("training {} ({} components, {} frames)", job.name,
                 opts.n_components, total);
    EmResult res = EmTrain(stacked, opts);
    res.gmm.norm = FitNormStats(res.gmm, pool);
    res.gmm.has_norm_stats = true;
    WriteGmm(GmmDir(root) / (std::string(job.name) + ".bin"), res.gmm, hash);
  }
  WriteStamp(GmmDir(root), hash);
}

void ExtractLgpStage(const RunConfig& cfg, const fs::path& root) {
  const uint64_t mfcc_hash = cfg.StageHash(Stage::kMfcc);
  const uint64_t hash = cfg.StageHash(Stage::kGmm);
  CheckStamp(FeatDir(root, "mfcc"), mfcc_hash, "extract-mfcc");
  CheckStamp(GmmDir(root), hash, "train-gmm");
  auto entries = TrainManifest(root);
  auto eval = EvalManifest(root);
  entries.insert(entries.end(), eval.begin(), eval.end());
  const auto mfcc = LoadFeatures(FeatDir(root, "mfcc"), entries, mfcc_hash);
  const std::pair<const char*, const char*> kinds[] = {
      {"gmm", "lgp"}, {"gmm_male", "lgp_male"}, {"gmm_female", "lgp_female"}};
  for (const auto& [gmm_name, kind] : kinds) {
    const fs::path gmm_path = GmmDir(root) / (std::string(gmm_name) + ".bin");
    uint64_t h = 0;
    DiagGmm gmm = ReadGmm(gmm_path, &h);
    CheckHash(h, hash, gmm_path);
    if (!gmm.has_norm_stats) throw DataError(gmm_path.string() + ": no norm stats");
    const fs::path dir = FeatDir(root, kind);
    fs::create_directories(dir);
    spdlog::info("extracting {} ({} components)", kind, gmm.n_components);
    for (size_t i = 0; i < entries.size(); ++i) {
      FeatureMatrix y = LgpNormalize(LgpExtract(gmm, mfcc[i]), gmm.norm);
      WriteFeatures(dir / (entries[i].utt_id + ".feat"), y, hash);
    }
    WriteStamp(dir, hash);
  }
}

void EnsureUpstream(const RunConfig& cfg, const fs::path& root) {
  if (!HasStamp(DataDir(root))) SynthDataStage(cfg, root);
  if (!HasStamp(FeatDir(root, "mfcc"))) ExtractMfccStage(cfg, root);
  if (!HasStamp(GmmDir(root))) TrainGmmStage(cfg, root);
  if (!HasStamp(FeatDir(root, "lgp_female"))) ExtractLgpStage(cfg, root);
}

// ---------------------------------------------------------------------------
// Training

void TrainStage(const RunConfig& cfg, const fs::path& root,
                const fs::path& out) {
  if (cfg.architecture != Architecture::kSingle) {
    throw ConfigError("train expects architecture 'single'");
  }
  const std::string kind = SingleFeatureKind(cfg);
  const uint64_t feat_hash = SingleFeatureHash(cfg);
  CheckStamp(FeatDir(root, kind), feat_hash,
             kind == "mfcc" ? "extract-mfcc" : "extract-lgp");
  const auto entries = TrainManifest(root);
  const auto feats = LoadFeatures(FeatDir(root, kind), entries, feat_hash);
  const auto labels = SpeakerLabels(entries);

  fs::create_directories(out / "model");
  fs::create_directories(out / "logs");
  TrainLog log(out / "logs" / "train.jsonl");
  SinglePathResult res = TrainSinglePath(
      Pointers(feats), labels, cfg.model, cfg.train, "", "head.weight",
      [&](const EpochStats& s) { log.Write("single", s); });
  Checkpoint ckpt;
  ckpt.config = cfg.model;
  ckpt.variant = ModelVariant::kSingle;
  ckpt.params = std::move(res.params);
  ckpt.optimizer = res.optimizer.Snapshot();
  WriteCheckpoint(out / "model" / "final.ckpt", ckpt,
                  cfg.StageHash(Stage::kModel));
}

void TrainDualStage(const RunConfig& cfg, const fs::path& root,
                    const fs::path& out) {
  if (cfg.architecture != Architecture::kDual) {
    throw ConfigError("train-dual expects architecture 'dual'");
  }
  const uint64_t feat_hash = cfg.StageHash(Stage::kGmm);
  CheckStamp(FeatDir(root, "lgp_male"), feat_hash, "extract-lgp");
  CheckStamp(FeatDir(root, "lgp_female"), feat_hash, "extract-lgp");
  const auto entries = TrainManifest(root);
  for (const auto& e : entries) {
    if (e.gender == Gender::kUnknown) {
      throw DataError("dual-path training needs gender labels; '" + e.utt_id +
                      "' has none");
    }
  }
  const auto male = LoadFeatures(FeatDir(root, "lgp_male"), entries, feat_hash);
  const auto female =
      LoadFeatures(FeatDir(root, "lgp_female"), entries, feat_hash);
  const auto labels = SpeakerLabels(entries);

  fs::create_directories(out / "model");
  fs::create_directories(out / "logs");
  TrainLog log(out / "logs" / "train.jsonl");
  DualPathResult res = TrainDualPath(
      Pointers(male), Pointers(female), labels, cfg.model, cfg.train,
      [&](const std::string& phase, const EpochStats& s) {
        log.Write(phase, s);
      });
  const uint64_t hash = cfg.StageHash(Stage::kModel);
  if (!cfg.train.no_two_step) {
    for (auto [tree, name] :
         {std::pair{&res.step1_male, "path_m.ckpt"},
          std::pair{&res.step1_female, "path_f.ckpt"}}) {
      Checkpoint c;
      c.config = cfg.model;
      c.variant = ModelVariant::kSingle;
      c.params = *tree;
      WriteCheckpoint(out / "model" / name, c, hash);
    }
  }
  Checkpoint ckpt;
  ckpt.config = cfg.model;
  ckpt.variant = ModelVariant::kDual;
  ckpt.params = std::move(res.params);
  WriteCheckpoint(out / "model" / "final.ckpt", ckpt, hash);
}

void TrainModelStage(const RunConfig& cfg, const fs::path& root,
                     const fs::path& out) {
  if (cfg.architecture == Architecture::kDual) {
    TrainDualStage(cfg, root, out);
  } else {
    TrainStage(cfg, root, out);
  }
}

// ---------------------------------------------------------------------------
// Embedding, scoring, evaluation

void EmbedStage(const RunConfig& cfg, const fs::path& root,
                const fs::path& out) {
  const fs::path ckpt_path = out / "model" / "final.ckpt";
  uint64_t h = 0;
  Checkpoint ckpt = ReadCheckpoint(ckpt_path, &h);
  CheckHash(h, cfg.StageHash(Stage::kModel), ckpt_path);
  const auto entries = EvalManifest(root);

  std::vector<FeatureMatrix> primary, secondary;
  if (ckpt.variant == ModelVariant::kDual) {
    const uint64_t fh = cfg.StageHash(Stage::kGmm);
    primary = LoadFeatures(FeatDir(root, "lgp_male"), entries, fh);
    secondary = LoadFeatures(FeatDir(root, "lgp_female"), entries, fh);
  } else {
    primary = LoadFeatures(FeatDir(root, SingleFeatureKind(cfg)), entries,
                           SingleFeatureHash(cfg));
  }
  std::ofstream os(out / "embeddings.txt");
  if (!os) throw DataError("cannot write " + (out / "embeddings.txt").string());
  os << "# config_hash " << HashToHex(cfg.StageHash(Stage::kModel)) << '\n';
  char buf[32];
  spdlog::info("embedding {} utterances", entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    std::vector<double> e = EmbedUtterance(
        ckpt, primary[i], secondary.empty() ? nullptr : &secondary[i]);
    os << entries[i].utt_id;
    for (double v : e) {
      std::snprintf(buf, sizeof(buf), " %.17g", v);
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw DataError("write failed: embeddings.txt");
}

std::map<std::string, std::vector<double>> ReadEmbeddings(
    const fs::path& path, uint64_t expected_hash) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  const std::string prefix = "# config_hash ";
  if (line.compare(0, prefix.size(), prefix) != 0) {
    throw DataError(path.string() + ": missing config hash header");
  }
  if (line.substr(prefix.size()) != HashToHex(expected_hash)) {
    throw DataError(path.string() + ": config hash " +
                    line.substr(prefix.size()) + " does not match " +
                    HashToHex(expected_hash));
  }
  std::map<std::string, std::vector<double>> table;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id;
    ss >> id;
    std::vector<double> v;
    std::string tok;
    while (ss >> tok) v.push_back(std::strtod(tok.c_str(), nullptr));
    if (v.empty()) throw DataError(path.string() + ": empty embedding for " + id);
    table[id] = std::move(v);
  }
  return table;
}

void ScoreStage(const RunConfig& cfg, const fs::path& root,
                const fs::path& out) {
  const auto table =
      ReadEmbeddings(out / "embeddings.txt", cfg.StageHash(Stage::kModel));
  const auto trials = ParseTrials(DataDir(root) / "trials.txt");
  auto lookup = [&](const std::string& id) {
    auto it = table.find(id);
    if (it == table.end()) throw DataError("unresolved utt_id '" + id + "'");
    return it->second;
  };
  WriteScores(out / "scores.txt", ScoreTrials(trials, lookup));
}

EvalReport EvalStage(const RunConfig& cfg, const fs::path& root,
                     const fs::path& out) {
  const auto trials = ParseTrials(DataDir(root) / "trials.txt");
  std::ifstream is(out / "scores.txt");
  if (!is) throw DataError("cannot open " + (out / "scores.txt").string());
  std::vector<TrialScore> scores;
  std::string a, b, s;
  size_t i = 0;
  while (is >> a >> b >> s) {
    if (i >= trials.size() || trials[i].enroll_utt != a ||
        trials[i].test_utt != b) {
      throw DataError("scores.txt line " + std::to_string(i + 1) +
                      " does not match the trial list");
    }
    scores.push_back({trials[i], std::strtod(s.c_str(), nullptr)});
    ++i;
  }
  if (i != trials.size()) throw DataError("scores.txt is incomplete");
  EvalReport r = Evaluate(scores, cfg.dcf);

  auto num = [](double v) -> ordered_json {
    return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr);
  };
  ordered_json j;
  j["eer"] = r.eer;
  j["min_dcf"] = r.min_dcf;
  j["threshold_eer"] = num(r.threshold_eer);
  j["threshold_dcf"] = num(r.threshold_dcf);
  j["n_target"] = r.n_target;
  j["n_nontarget"] = r.n_nontarget;
  j["config_hash"] = HashToHex(cfg.StageHash(Stage::kEval));
  j["config"] = cfg.ToJson();
  std::ofstream os(out / "report.json");
  if (!os) throw DataError("cannot write report.json");
  os << j.dump(2) << '\n';
  spdlog::info("EER {:.4f}%  minDCF {:.4f}", 100.0 * r.eer, r.min_dcf);
  return r;
}

EvalReport RunPipeline(const RunConfig& cfg, const fs::path& root) {
  SynthDataStage(cfg, root);
  ExtractMfccStage(cfg, root);
  TrainGmmStage(cfg, root);
  ExtractLgpStage(cfg, root);
  TrainModelStage(cfg, root, root);
  EmbedStage(cfg, root, root);
  ScoreStage(cfg, root, root);
  return EvalStage(cfg, root, root);
}

// ---------------------------------------------------------------------------
// Ablation

RunConfig ApplyVariant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  if (variant == "base") {
    return c;
  } else if (variant == "no_gmm") {
    // Without the GMM layer there is no gender split to feed two paths.
    c.architecture = Architecture::kSingle;
    c.model.ablate_gmm = true;
  } else if (variant == "no_mfa") {
    c.model.ablate_mfa = true;
  } else if (variant == "no_2s") {
    if (base.architecture != Architecture::kDual) {
      throw ConfigError("no_2s needs the dual architecture");
    }
    c.train.no_two_step = true;
  } else {
    throw ConfigError("unknown ablation variant '" + variant +
                      "' (no_gmm|no_mfa|no_2s)");
  }
  c.Finalize();
  return c;
}

std::vector<AblationRow> AblateStage(const RunConfig& cfg, const fs::path& root,
                                     const std::vector<std::string>& variants) {
  EnsureUpstream(cfg, root);
  std::vector<std::string> all{"base"};
  for (const auto& v : variants) {
    if (v == "base") continue;
    if (std::find(all.begin(), all.end(), v) == all.end()) all.push_back(v);
  }
  std::vector<RunConfig> cfgs;
  for (const auto& v : all) cfgs.push_back(ApplyVariant(cfg, v));

  std::vector<AblationRow> rows;
  for (size_t i = 0; i < all.size(); ++i) {
    const fs::path out = root / "ablate" / all[i];
    fs::create_directories(out);
    spdlog::info("ablation variant {}", all[i]);
    SaveRunConfig(out / "config.json", cfgs[i]);
    TrainModelStage(cfgs[i], root, out);
    EmbedStage(cfgs[i], root, out);
    ScoreStage(cfgs[i], root, out);
    rows.push_back({all[i], EvalStage(cfgs[i], root, out)});
  }

  ordered_json j = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["variant"] = r.variant;
    row["eer"] = r.report.eer;
    row["min_dcf"] = r.report.min_dcf;
    j.push_back(row);
  }
  std::ofstream(root / "ablate" / "ablation.json") << j.dump(2) << '\n';
  std::ofstream(root / "ablate" / "ablation.txt") << FormatAblationTable(rows);
  return rows;
}

std::string FormatAblationTable(const std::vector<AblationRow>& rows) {
  std::string s = "Variant      EER(%)   minDCF\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %8.2f %8.4f\n", r.variant.c_str(),
                  100.0 * r.report.eer, r.report.min_dcf);
    s += buf;
  }
  return s;
}

}  // namespace gmmresnext
