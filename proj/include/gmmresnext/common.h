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

#ifndef GMMRESNEXT_COMMON_H_
#define GMMRESNEXT_COMMON_H_

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmmresnext {

// Error taxonomy. The CLI maps these onto exit codes 1, 2 and 3.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seeded generator with portable distributions. std::*_distribution output
// differs between standard libraries; these do not.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }

  // Uniform in [0, 1).
  double Uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, n).
  uint64_t Index(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::Index: empty range");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  double Normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = Uniform();
    } while (u1 <= 0.0);
    double u2 = Uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void Shuffle(std::vector<T>* v) {
    for (size_t i = v->size(); i > 1; --i) {
      size_t j = Index(i);
      std::swap((*v)[i - 1], (*v)[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a tag.
uint64_t DeriveSeed(uint64_t base, uint64_t tag);

// 64-bit FNV-1a.
uint64_t Fnv1a64(std::string_view bytes);

std::string HashToHex(uint64_t hash);

// Little-endian binary helpers shared by the on-disk formats.
namespace binio {

void WriteMagic(std::ostream& os, std::string_view magic);
void ExpectMagic(std::istream& is, std::string_view magic,
                 const std::string& what);

void WriteU32(std::ostream& os, uint32_t v);
void WriteU64(std::ostream& os, uint64_t v);
void WriteF32(std::ostream& os, float v);
void WriteF64(std::ostream& os, double v);
void WriteString(std::ostream& os, const std::string& s);

uint32_t ReadU32(std::istream& is);
uint64_t ReadU64(std::istream& is);
float ReadF32(std::istream& is);
double ReadF64(std::istream& is);
std::string ReadString(std::istream& is);

}  // namespace binio

}  // namespace gmmresnext

#endif  // GMMRESNEXT_COMMON_H_
