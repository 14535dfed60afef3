#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace sslrul {

using Rng = std::mt19937_64;

// Independent generator derived from a list of integer keys, e.g.
// (seed, stream salt, structure index, attempt). Identical keys give
// identical streams regardless of which other streams were consumed.
inline Rng substream(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Stream salts keep differently-purposed generators apart.
namespace salt {
inline constexpr std::uint64_t kUnlabelled = 0x55;
inline constexpr std::uint64_t kLabelled = 0x4c;
inline constexpr std::uint64_t kInit = 0x1a;
inline constexpr std::uint64_t kShuffle = 0x2b;
inline constexpr std::uint64_t kDropout = 0x3c;
inline constexpr std::uint64_t kSplit = 0x4d;
inline constexpr std::uint64_t kProtocol = 0x5e;
inline constexpr std::uint64_t kFolds = 0x6f;
}  // namespace salt

}  // namespace sslrul
