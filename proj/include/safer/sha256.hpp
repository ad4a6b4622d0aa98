#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace safer {

// Minimal SHA-256 (FIPS 180-4), used for parameter digests and batch digests.
class Sha256 {
  public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, std::size_t len);
    std::array<std::uint8_t, 32> finish();

    static std::string hex(const void* data, std::size_t len);

  private:
    void process_block(const std::uint8_t* block);

    std::array<std::uint32_t, 8> h_{};
    std::uint64_t total_len_ = 0;
    std::array<std::uint8_t, 64> buffer_{};
    std::size_t buffer_len_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);

}  // namespace safer
