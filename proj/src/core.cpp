#include "distrifs/core.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "distrifs/sha256.hpp"

namespace distrifs {

namespace fs = std::filesystem;

static constexpr size_t kHashChunkBytes = 64 * 1024;

std::optional<ContentHash> ContentHash::parse(std::string_view hex) {
    if (hex.size() != 64) return std::nullopt;
    std::string canon;
    canon.reserve(64);
    for (char c : hex) {
        if (c >= '0' && c <= '9') {
            canon.push_back(c);
        } else if (c >= 'a' && c <= 'f') {
            canon.push_back(c);
        } else if (c >= 'A' && c <= 'F') {
            canon.push_back(char(c - 'A' + 'a'));
        } else {
            return std::nullopt;
        }
    }
    return ContentHash(std::move(canon));
}

ContentHash ContentHash::from_digest(const uint8_t* digest32) {
    ContentHash h;
    h.value_ = to_hex(digest32, 32);
    return h;
}

ContentHash compute_hash(std::istream& in) {
    Sha256 hasher;
    std::vector<char> buf(kHashChunkBytes);
    uint64_t pos = 0;
    while (in.good()) {
        in.read(buf.data(), std::streamsize(buf.size()));
        std::streamsize n = in.gcount();
        if (n > 0) {
            hasher.update(buf.data(), size_t(n));
            pos += uint64_t(n);
        }
    }
    if (in.bad()) {
        throw IoError("read failure while hashing stream", pos);
    }
    auto digest = hasher.finish();
    return ContentHash::from_digest(digest.data());
}

ContentHash compute_hash(std::string_view data) {
    Sha256 hasher;
    hasher.update(data);
    auto digest = hasher.finish();
    return ContentHash::from_digest(digest.data());
}

ContentHash compute_hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) {
        throw IoError("cannot open file: " + path.string());
    }
    return compute_hash(in);
}

VerificationOutcome verify_file(const fs::path& path, const ContentHash& expected) {
    ContentHash actual = compute_hash_file(path);
    if (actual == expected) return VerificationOutcome::match();
    return VerificationOutcome::mismatch(std::move(actual));
}

namespace {

std::string to_rel_path(const fs::path& rel) {
    // generic_string gives '/' separators on every platform
    return rel.generic_string();
}

void scan_tree(const fs::path& root, const fs::path& dir, ScanResult& out) {
    std::error_code ec;
    fs::directory_iterator it(dir, fs::directory_options::none, ec);
    if (ec) {
        out.warnings.push_back("skipped unreadable directory: " + dir.string() +
                               " (" + ec.message() + ")");
        return;
    }
    for (const auto& entry : it) {
        std::error_code sec;
        auto status = entry.symlink_status(sec);
        if (sec) {
            out.warnings.push_back("skipped unreadable entry: " +
                                   entry.path().string() + " (" + sec.message() + ")");
            continue;
        }
        if (fs::is_symlink(status)) {
            continue; // never followed
        }
        if (fs::is_directory(status)) {
            scan_tree(root, entry.path(), out);
            continue;
        }
        if (!fs::is_regular_file(status)) {
            continue; // sockets, fifos, devices
        }

        FileRecord rec;
        rec.rel_path = to_rel_path(entry.path().lexically_relative(root));
        rec.name = entry.path().filename().string();

        std::error_code fec;
        rec.size_bytes = uint64_t(fs::file_size(entry.path(), fec));
        if (fec) {
            out.warnings.push_back("skipped file (size): " + entry.path().string());
            continue;
        }
        auto mtime = fs::last_write_time(entry.path(), fec);
        if (fec) {
            out.warnings.push_back("skipped file (mtime): " + entry.path().string());
            continue;
        }
        // file_clock -> system_clock via epoch offset (no clock_cast in
        // libstdc++ 11). Truncates to whole seconds for wire portability.
        auto sys_mtime = std::chrono::time_point_cast<std::chrono::system_clock::duration>(
            mtime - fs::file_time_type::clock::now() + std::chrono::system_clock::now());
        rec.modified_unix_s = std::chrono::duration_cast<std::chrono::seconds>(
                                  sys_mtime.time_since_epoch())
                                  .count();

        try {
            rec.hash = compute_hash_file(entry.path());
        } catch (const IoError& e) {
            out.warnings.push_back("skipped file (read): " + entry.path().string() +
                                   " (" + e.what() + ")");
            continue;
        }
        out.records.push_back(std::move(rec));
    }
}

} // namespace

ScanResult scan_directory(const fs::path& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec) || ec) {
        throw IoError("not a directory: " + root.string());
    }
    ScanResult out;
    scan_tree(root, root, out);
    std::sort(out.records.begin(), out.records.end(),
              [](const FileRecord& a, const FileRecord& b) {
                  return a.rel_path < b.rel_path;
              });
    return out;
}

} // namespace distrifs
