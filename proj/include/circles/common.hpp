#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace circles {

/// Precondition violated by the caller (bad argument, empty input, ...).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A remote (or mock) model endpoint failed after all retries.
class EndpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. std::uniform_int_distribution and std::shuffle are
// implementation-defined, so draws go through bounded() instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t bounded(std::uint64_t n);
  // Uniform real in [0, 1) with 53 bits of precision.
  double uniform();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::string sha256_hex(std::string_view data);
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::string trim(std::string_view s);
std::vector<std::string> split_lines(std::string_view s);

// Runs fn(i) for i in [0, n) on up to max_threads workers. If any call
// throws, the exception from the lowest index is rethrown after all finish.
void parallel_for(std::size_t n, std::size_t max_threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace circles
