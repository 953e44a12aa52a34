// SPDX-License-Identifier: Apache-2.0
#include "cdistill/common.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace cdistill {

static_assert(std::endian::native == std::endian::little,
              "on-disk arrays are written in host byte order");

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kPrerequisite: return 3;
    case ErrorKind::kNumerical: return 4;
    case ErrorKind::kInput: return 2;
    case ErrorKind::kIo: return 1;
  }
  return 1;
}

uint64_t derive_seed(uint64_t seed, std::string_view key) noexcept {
  // FNV-1a over the key, then mixed with the seed.
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return derive_seed(seed, h);
}

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      fail(ErrorKind::kIo, "sha256: digest init failed");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n) { EVP_DigestUpdate(ctx_, data, n); }

  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
      os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_text(path));
}

std::string tensor_hash(std::span<const RowMatrix* const> tensors) {
  Sha256 h;
  for (const RowMatrix* t : tensors) {
    const int64_t shape[2] = {static_cast<int64_t>(t->rows()), static_cast<int64_t>(t->cols())};
    h.update(shape, sizeof(shape));
    for (Index i = 0; i < t->size(); ++i) {
      const float f = static_cast<float>(t->data()[i]);
      h.update(&f, sizeof(f));
    }
  }
  return h.hex();
}

void write_f32(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<float> buf(values.begin(), values.end());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<double> read_f32(const std::filesystem::path& path, size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open: " + path.string());
  std::vector<float> buf(expected_count);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(expected_count * sizeof(float)));
  if (static_cast<size_t>(in.gcount()) != expected_count * sizeof(float) ||
      in.peek() != std::ifstream::traits_type::eof()) {
    fail(ErrorKind::kIo, "size mismatch in " + path.string());
  }
  return {buf.begin(), buf.end()};
}

void write_u16(const std::filesystem::path& path, std::span<const int> values) {
  std::vector<uint16_t> buf(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0 || values[i] > 0xFFFF) fail(ErrorKind::kInput, "u16 value out of range");
    buf[i] = static_cast<uint16_t>(values[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(uint16_t)));
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<int> read_u16(const std::filesystem::path& path, size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open: " + path.string());
  std::vector<uint16_t> buf(expected_count);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(expected_count * sizeof(uint16_t)));
  if (static_cast<size_t>(in.gcount()) != expected_count * sizeof(uint16_t) ||
      in.peek() != std::ifstream::traits_type::eof()) {
    fail(ErrorKind::kIo, "size mismatch in " + path.string());
  }
  return {buf.begin(), buf.end()};
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open for writing: " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int worker_count() {
  if (const char* env = std::getenv("CD_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const size_t workers = std::min<size_t>(static_cast<size_t>(worker_count()), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::mutex error_mutex;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

bool all_finite(const RowMatrix& m) { return m.allFinite(); }

}  // namespace cdistill
