#pragma once

#include <cstdint>
#include <cstddef>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace softmodnet {

// Error taxonomy. Shape errors come from tensor plumbing, contract errors
// from misuse of an API, data errors from malformed files, numerical errors
// from non-finite losses during training.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

uint64_t splitmix64(uint64_t x);

// Derives an independent stream seed from a base seed and a list of salts.
uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> salts);

// Deterministic RNG. Raw draws come from std::mt19937_64 (bit-exact across
// platforms); the floating-point helpers avoid std::*_distribution so the
// produced streams are identical everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[next_u64() % v.size()];
  }

 private:
  std::mt19937_64 eng_;
};

std::string base64_encode(const uint8_t* data, size_t n);
std::vector<uint8_t> base64_decode(const std::string& text);

std::string sha256_hex(const void* data, size_t n);
std::string sha256_file_hex(const std::string& path);

// Worker-thread cap: min(hint, SOFTMODNET_THREADS, hardware). hint<=0 means
// "as many as allowed".
int resolve_threads(int hint);

// Runs fn(begin, end) over [0, n) split into contiguous chunks, one chunk per
// worker. fn must not touch shared mutable state; determinism of any
// reduction is the caller's job (reduce in index order after the join).
void parallel_chunks(int64_t n, int threads,
                     const std::function<void(int64_t, int64_t)>& fn);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace softmodnet
