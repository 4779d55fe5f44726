#pragma once

#include <cstdint>
#include <string_view>

namespace latentq {

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Seed for one record's random stream. Depends only on the global seed and
/// the record id, so reordering records does not change any record's draws.
std::uint64_t record_seed(std::uint64_t global_seed, std::string_view record_id);

/// Independent sub-stream seed, e.g. one per purpose or per index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace latentq
