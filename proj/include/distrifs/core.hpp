#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace distrifs {

// I/O failure, distinct from verification mismatch. position is the byte
// offset reached when the failure was detected, when known.
class IoError : public std::runtime_error {
public:
    IoError(const std::string& what, uint64_t position = 0)
        : std::runtime_error(what), position_(position) {}
    uint64_t position() const { return position_; }

private:
    uint64_t position_;
};

// 64-char lowercase hex SHA-256 digest, the network-wide file identity.
// Canonical form only: parse() normalizes uppercase input, everything else
// is rejected.
class ContentHash {
public:
    ContentHash() = default;

    static std::optional<ContentHash> parse(std::string_view hex);
    static ContentHash from_digest(const uint8_t* digest32);

    const std::string& value() const { return value_; }
    bool empty() const { return value_.empty(); }

    bool operator==(const ContentHash& other) const = default;
    auto operator<=>(const ContentHash& other) const = default;

private:
    explicit ContentHash(std::string v) : value_(std::move(v)) {}
    std::string value_;
};

struct FileRecord {
    ContentHash hash;
    std::string name;          // final segment of rel_path
    uint64_t size_bytes = 0;
    int64_t modified_unix_s = 0;
    std::string rel_path;      // '/'-separated, relative to the served root

    bool operator==(const FileRecord&) const = default;
};

struct VerificationOutcome {
    bool matched = false;
    ContentHash actual;        // set on mismatch

    static VerificationOutcome match() { return {true, {}}; }
    static VerificationOutcome mismatch(ContentHash actual) {
        return {false, std::move(actual)};
    }
};

struct ScanResult {
    std::vector<FileRecord> records;   // lexicographic by rel_path
    std::vector<std::string> warnings; // skipped subtrees / unreadable files
};

// Hashes the stream to exhaustion in 64 KiB chunks. Throws IoError on read
// failure, carrying the byte position reached.
ContentHash compute_hash(std::istream& in);
ContentHash compute_hash(std::string_view data);
ContentHash compute_hash_file(const std::filesystem::path& path);

// Match iff the file's current content hashes to `expected`. A missing or
// unreadable file throws IoError; it is never reported as a mismatch.
VerificationOutcome verify_file(const std::filesystem::path& path,
                                const ContentHash& expected);

// Walks root recursively and hashes every regular file. Symlinks are never
// followed. Unreadable subtrees are skipped and reported in warnings.
ScanResult scan_directory(const std::filesystem::path& root);

} // namespace distrifs
