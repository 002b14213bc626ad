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

#include "gmmresnext/config.h"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace gmmresnext {

using nlohmann::json;
using nlohmann::ordered_json;

std::string ArchitectureToString(Architecture a) {
  return a == Architecture::kDual ? "dual" : "single";
}

Architecture ParseArchitecture(const std::string& s) {
  if (s == "dual") return Architecture::kDual;
  if (s == "single") return Architecture::kSingle;
  throw ConfigError("invalid architecture '" + s + "' (single|dual)");
}

RunConfig RunConfig::Profile(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "tiny") {
    c.gmm.n_components = 64;
    c.model.stage_channels = {32, 32, 32, 32};
    c.model.stage_blocks = {1, 1, 1, 1};
    c.train.batch_size = 32;
    c.train.epochs = 20;
  } else if (name == "paper") {
    c.gmm.n_components = 512;
    c.model.stage_channels = {256, 256, 256, 256};
    c.model.stage_blocks = {3, 3, 9, 3};
    c.train.batch_size = 200;
    c.train.epochs = 100;
  } else {
    throw ConfigError("unknown profile '" + name + "' (tiny|paper)");
  }
  c.Finalize();
  return c;
}

namespace {

ordered_json DataJson(const DataConfig& d) {
  ordered_json j;
  j["n_speakers"] = d.n_speakers;
  j["train_utts_per_speaker"] = d.train_utts_per_speaker;
  j["eval_utts_per_speaker"] = d.eval_utts_per_speaker;
  j["min_seconds"] = d.min_seconds;
  j["max_seconds"] = d.max_seconds;
  return j;
}

ordered_json MfccJson(const MfccConfig& m) {
  ordered_json j;
  j["sample_rate"] = m.sample_rate;
  j["frame_length"] = m.frame_length;
  j["frame_shift"] = m.frame_shift;
  j["fft_size"] = m.fft_size;
  j["n_mels"] = m.n_mels;
  j["n_ceps"] = m.n_ceps;
  j["low_freq"] = m.low_freq;
  j["high_freq"] = m.high_freq;
  j["preemph"] = m.preemph;
  j["log_floor"] = m.log_floor;
  return j;
}

ordered_json GmmJson(const GmmConfig& g) {
  ordered_json j;
  j["n_components"] = g.n_components;
  j["n_iters"] = g.n_iters;
  j["variance_floor_factor"] = g.variance_floor_factor;
  j["kmeans_max_frames"] = g.kmeans_max_frames;
  return j;
}

ordered_json ModelJson(const ModelConfig& m) {
  ordered_json j;
  j["stage_blocks"] = m.stage_blocks;
  j["stage_channels"] = m.stage_channels;
  j["se_reduction"] = m.se_reduction;
  j["asp_bottleneck"] = m.asp_bottleneck;
  j["embedding_dim"] = m.embedding_dim;
  j["ablate_mfa"] = m.ablate_mfa;
  j["ablate_gmm"] = m.ablate_gmm;
  j["bn_momentum"] = m.bn_momentum;
  j["bn_eps"] = m.bn_eps;
  return j;
}

ordered_json TrainJson(const TrainConfig& t) {
  ordered_json j;
  j["lr0"] = t.lr0;
  j["lr_decay_per_epoch"] = t.lr_decay_per_epoch;
  j["weight_decay"] = t.weight_decay;
  j["margin"] = t.margin;
  j["scale"] = t.scale;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["crop_frames"] = t.crop_frames;
  j["step2_epochs"] = t.step2_epochs;
  j["step2_lr0"] = t.step2_lr0;
  j["no_two_step"] = t.no_two_step;
  return j;
}

ordered_json DcfJson(const DcfParams& d) {
  ordered_json j;
  j["p_target"] = d.p_target;
  j["c_miss"] = d.c_miss;
  j["c_fa"] = d.c_fa;
  return j;
}

// Reads j[key] into *out when present.
template <typename T>
void Get(const json& j, const char* key, T* out) {
  auto it = j.find(key);
  if (it != j.end()) *out = it->get<T>();
}

void CheckKeys(const json& j, const std::string& section,
               const ordered_json& reference) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!reference.contains(k)) {
      throw ConfigError("unknown config key '" + section + "." + k + "'");
    }
  }
}

uint64_t HashJson(const ordered_json& j) { return Fnv1a64(j.dump()); }

}  // namespace

ordered_json RunConfig::ToJson() const {
  ordered_json j;
  j["profile"] = profile;
  j["seed"] = seed;
  j["architecture"] = ArchitectureToString(architecture);
  j["data"] = DataJson(data);
  j["mfcc"] = MfccJson(mfcc);
  j["gmm"] = GmmJson(gmm);
  j["model"] = ModelJson(model);
  j["train"] = TrainJson(train);
  j["dcf"] = DcfJson(dcf);
  return j;
}

RunConfig RunConfig::FromJson(const json& j) {
  RunConfig c;
  try {
    CheckKeys(j, "config", c.ToJson());
    c = Profile(j.value("profile", std::string("tiny")));
    const ordered_json ref = c.ToJson();
    Get(j, "seed", &c.seed);
    if (j.contains("architecture")) {
      c.architecture = ParseArchitecture(j["architecture"].get<std::string>());
    }
    if (j.contains("data")) {
      const json& d = j["data"];
      CheckKeys(d, "data", ref["data"]);
      Get(d, "n_speakers", &c.data.n_speakers);
      Get(d, "train_utts_per_speaker", &c.data.train_utts_per_speaker);
      Get(d, "eval_utts_per_speaker", &c.data.eval_utts_per_speaker);
      Get(d, "min_seconds", &c.data.min_seconds);
      Get(d, "max_seconds", &c.data.max_seconds);
    }
    if (j.contains("mfcc")) {
      const json& m = j["mfcc"];
      CheckKeys(m, "mfcc", ref["mfcc"]);
      Get(m, "sample_rate", &c.mfcc.sample_rate);
      Get(m, "frame_length", &c.mfcc.frame_length);
      Get(m, "frame_shift", &c.mfcc.frame_shift);
      Get(m, "fft_size", &c.mfcc.fft_size);
      Get(m, "n_mels", &c.mfcc.n_mels);
      Get(m, "n_ceps", &c.mfcc.n_ceps);
      Get(m, "low_freq", &c.mfcc.low_freq);
      Get(m, "high_freq", &c.mfcc.high_freq);
      Get(m, "preemph", &c.mfcc.preemph);
      Get(m, "log_floor", &c.mfcc.log_floor);
    }
    if (j.contains("gmm")) {
      const json& g = j["gmm"];
      CheckKeys(g, "gmm", ref["gmm"]);
      Get(g, "n_components", &c.gmm.n_components);
      Get(g, "n_iters", &c.gmm.n_iters);
      Get(g, "variance_floor_factor", &c.gmm.variance_floor_factor);
      Get(g, "kmeans_max_frames", &c.gmm.kmeans_max_frames);
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      CheckKeys(m, "model", ref["model"]);
      Get(m, "stage_blocks", &c.model.stage_blocks);
      Get(m, "stage_channels", &c.model.stage_channels);
      Get(m, "se_reduction", &c.model.se_reduction);
      Get(m, "asp_bottleneck", &c.model.asp_bottleneck);
      Get(m, "embedding_dim", &c.model.embedding_dim);
      Get(m, "ablate_mfa", &c.model.ablate_mfa);
      Get(m, "ablate_gmm", &c.model.ablate_gmm);
      Get(m, "bn_momentum", &c.model.bn_momentum);
      Get(m, "bn_eps", &c.model.bn_eps);
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      CheckKeys(t, "train", ref["train"]);
      Get(t, "lr0", &c.train.lr0);
      Get(t, "lr_decay_per_epoch", &c.train.lr_decay_per_epoch);
      Get(t, "weight_decay", &c.train.weight_decay);
      Get(t, "margin", &c.train.margin);
      Get(t, "scale", &c.train.scale);
      Get(t, "batch_size", &c.train.batch_size);
      Get(t, "epochs", &c.train.epochs);
      Get(t, "crop_frames", &c.train.crop_frames);
      Get(t, "step2_epochs", &c.train.step2_epochs);
      Get(t, "step2_lr0", &c.train.step2_lr0);
      Get(t, "no_two_step", &c.train.no_two_step);
    }
    if (j.contains("dcf")) {
      const json& d = j["dcf"];
      CheckKeys(d, "dcf", ref["dcf"]);
      Get(d, "p_target", &c.dcf.p_target);
      Get(d, "c_miss", &c.dcf.c_miss);
      Get(d, "c_fa", &c.dcf.c_fa);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.Finalize();
  return c;
}

void RunConfig::Finalize() {
  model.n_gaussians = gmm.n_components;
  model.mfcc_dim = mfcc.n_ceps;
  train.seed = DeriveSeed(seed, 31);
  Validate();
}

void RunConfig::Validate() const {
  if (data.n_speakers < 2) throw ConfigError("data: n_speakers must be >= 2");
  if (data.train_utts_per_speaker < 1 || data.eval_utts_per_speaker < 1) {
    throw ConfigError("data: utterance counts must be >= 1");
  }
  if (!(data.min_seconds > 0.0) || data.max_seconds < data.min_seconds) {
    throw ConfigError("data: invalid duration range");
  }
  if (gmm.n_components < 1 || gmm.n_iters < 0 || gmm.kmeans_max_frames < 1 ||
      !(gmm.variance_floor_factor > 0.0)) {
    throw ConfigError("gmm: invalid settings");
  }
  if (mfcc.n_ceps < 1 || mfcc.n_ceps > mfcc.n_mels) {
    throw ConfigError("mfcc: n_ceps must be in [1, n_mels]");
  }
  model.Validate();
  train.Validate();
  dcf.Validate();
  if (architecture == Architecture::kDual && model.ablate_gmm) {
    throw ConfigError("dual architecture needs GMM features (ablate_gmm set)");
  }
}

uint64_t RunConfig::StageHash(Stage stage) const {
  ordered_json j;
  j["seed"] = seed;
  j["data"] = DataJson(data);
  if (stage >= Stage::kMfcc) j["mfcc"] = MfccJson(mfcc);
  if (stage >= Stage::kGmm) j["gmm"] = GmmJson(gmm);
  if (stage >= Stage::kModel) {
    j["architecture"] = ArchitectureToString(architecture);
    j["model"] = ModelJson(model);
    j["train"] = TrainJson(train);
  }
  if (stage >= Stage::kEval) j["dcf"] = DcfJson(dcf);
  return HashJson(j);
}

RunConfig LoadRunConfig(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::FromJson(j);
}

void SaveRunConfig(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << cfg.ToJson().dump(2) << '\n';
}

void ApplySeedOverride(RunConfig* cfg) {
  const char* env = std::getenv("GMMRESNEXT_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  errno = 0;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || *end != '\0' || env[0] == '-') {
    throw ConfigError(std::string("invalid GMMRESNEXT_SEED '") + env + "'");
  }
  cfg->seed = v;
  cfg->Finalize();
}

}  // namespace gmmresnext
