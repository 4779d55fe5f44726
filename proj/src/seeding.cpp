#include "latentq/seeding.hpp"

namespace latentq {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t record_seed(std::uint64_t global_seed, std::string_view record_id) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : record_id) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return mix64(mix64(global_seed) ^ h);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) + 0x632BE59BD9B4E019ULL * (stream + 1));
}

}  // namespace latentq
