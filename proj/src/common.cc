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

#include "gmmresnext/common.h"

#include <bit>
#include <cstdio>

namespace gmmresnext {

uint64_t DeriveSeed(uint64_t base, uint64_t tag) {
  // splitmix64 finalizer over the combined words.
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t Fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string HashToHex(uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash));
  return buf;
}

namespace binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

template <typename T>
void WriteRaw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ReadRaw(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("unexpected end of file");
  return v;
}

}  // namespace

void WriteMagic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

void ExpectMagic(std::istream& is, std::string_view magic,
                 const std::string& what) {
  std::string buf(magic.size(), '\0');
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!is || buf != magic) {
    throw DataError(what + ": bad magic, expected " + std::string(magic));
  }
}

void WriteU32(std::ostream& os, uint32_t v) { WriteRaw(os, v); }
void WriteU64(std::ostream& os, uint64_t v) { WriteRaw(os, v); }
void WriteF32(std::ostream& os, float v) { WriteRaw(os, v); }
void WriteF64(std::ostream& os, double v) { WriteRaw(os, v); }

void WriteString(std::ostream& os, const std::string& s) {
  WriteU32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t ReadU32(std::istream& is) { return ReadRaw<uint32_t>(is); }
uint64_t ReadU64(std::istream& is) { return ReadRaw<uint64_t>(is); }
float ReadF32(std::istream& is) { return ReadRaw<float>(is); }
double ReadF64(std::istream& is) { return ReadRaw<double>(is); }

std::string ReadString(std::istream& is) {
  uint32_t n = ReadU32(is);
  if (n > (1u << 28)) throw DataError("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("unexpected end of file");
  return s;
}

}  // namespace binio

}  // namespace gmmresnext
