#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace distrifs {

// Incremental SHA-256 (FIPS 180-4). Self-contained so the binaries have no
// crypto library dependency.
class Sha256 {
public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, size_t len);
    void update(std::string_view sv) { update(sv.data(), sv.size()); }

    // Finalizes and returns the 32-byte digest. The hasher must be reset()
    // before reuse.
    std::array<uint8_t, 32> finish();

    // Finalizes and returns the digest as 64 lowercase hex characters.
    std::string finish_hex();

    static std::string hex_digest(std::string_view data);

private:
    void process_block(const uint8_t* block);

    uint32_t state_[8];
    uint64_t total_len_;
    uint8_t buffer_[64];
    size_t buffer_len_;
};

std::string to_hex(const uint8_t* data, size_t len);

} // namespace distrifs
