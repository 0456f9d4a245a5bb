#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnsteer {

// Error taxonomy used across the library:
//   std::invalid_argument  - shape/config misuse (caller bug)
//   numeric_error          - non-finite values, divergence, failed checks
//   io_error               - filesystem problems, always carries the path
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Dense row-major f64 array. `grad` stays empty until backward touches it;
/// once allocated it always has the same element count as `data`.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0);
    t.requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    require(static_cast<int64_t>(values.size()) == numel_of(t.shape),
            "Tensor::from: " + std::to_string(values.size()) +
                " values for shape " + shape_str_of(t.shape));
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  static std::string shape_str_of(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  std::string shape_str() const { return shape_str_of(shape); }

  int rows() const {
    require(shape.size() == 2, "rows(): tensor is not a matrix, shape " + shape_str());
    return shape[0];
  }
  int cols() const {
    require(shape.size() == 2, "cols(): tensor is not a matrix, shape " + shape_str());
    return shape[1];
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { grad.assign(data.size(), 0.0); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

/// Checked mode for the finiteness invariant.
inline void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite())
    throw numeric_error(std::string("non-finite value in ") + what + ", shape " +
                        t.shape_str());
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// --- checksums -------------------------------------------------------------

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t tensor_checksum(const Tensor& t, uint64_t h = 0xcbf29ce484222325ull) {
  h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int), h);
  return fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
}

// --- seeded randomness -----------------------------------------------------

/// mt19937_64 plus a hand-rolled Box-Muller transform so that sampled streams
/// are bit-reproducible regardless of the standard library's distribution
/// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
  }

  /// Standard normal.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * M_PI * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    require(lo <= hi, "uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  Tensor gaussian_tensor(std::vector<int> shape, double stddev, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data) v = gaussian() * stddev;
    return t;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace attnsteer
