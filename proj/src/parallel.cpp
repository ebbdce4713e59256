#include "astra/parallel.hpp"

#include <cstdlib>
#include <string>

namespace astra {

std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("ASTRA_TOY_THREADS")) {
    try {
      const auto v = std::stoul(cap);
      if (v >= 1) n = std::min<std::size_t>(n, v);
    } catch (const std::exception&) {
      // unparsable cap: ignore
    }
  }
  return n;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace astra
