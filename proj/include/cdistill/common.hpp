// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace cdistill {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Failure categories. Each maps onto one process exit code of the CLI.
enum class ErrorKind {
  kInput,         // rejected input (shape mismatch, non-finite values)
  kConfig,        // invalid configuration
  kPrerequisite,  // a required artifact or precondition is missing
  kNumerical,     // non-finite loss/gradient, undefined metric
  kIo,            // filesystem failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

int exit_code_for(ErrorKind kind) noexcept;

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr uint64_t mix64(uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t key) noexcept {
  return mix64(mix64(seed) ^ (key + 0x632BE59BD9B4E019ull));
}

uint64_t derive_seed(uint64_t seed, std::string_view key) noexcept;

using Rng = std::mt19937_64;

/// SHA-256 of arbitrary bytes, lowercase hex.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Hash of the float32 image of a set of matrices (what a checkpoint stores).
std::string tensor_hash(std::span<const RowMatrix* const> tensors);

// Raw little-endian float32 / uint16 arrays.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f32(const std::filesystem::path& path, size_t expected_count);
void write_u16(const std::filesystem::path& path, std::span<const int> values);
std::vector<int> read_u16(const std::filesystem::path& path, size_t expected_count);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// Number of worker threads (CD_THREADS, else hardware concurrency).
int worker_count();

/// Runs fn(i) for i in [0, n) across worker threads. Callers reduce results
/// in index order so outcomes do not depend on scheduling.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

bool all_finite(const RowMatrix& m);

}  // namespace cdistill
