#include "distrifs/kvstore.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>

#include <fcntl.h>
#include <unistd.h>

#include "distrifs/core.hpp"

namespace distrifs {

namespace fs = std::filesystem;

namespace {

constexpr char kWalMagic[8] = {'D', 'F', 'S', 'W', 'A', 'L', '1', '\n'};
constexpr char kSnapMagic[8] = {'D', 'F', 'S', 'N', 'A', 'P', '1', '\n'};
constexpr uint32_t kMaxFrameBytes = 64u << 20;
constexpr uint64_t kCompactMinWalBytes = 1u << 20;

uint32_t crc32_ieee(const uint8_t* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? (0xedb88320u ^ (c >> 1)) : (c >> 1);
            }
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xffffffffu;
    for (size_t i = 0; i < len; ++i) {
        c = table[(c ^ data[i]) & 0xff] ^ (c >> 8);
    }
    return c ^ 0xffffffffu;
}

void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (i * 8)) & 0xff));
}

uint32_t read_u32(const uint8_t* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
           (uint32_t(p[3]) << 24);
}

std::string serialize_batch(const WriteBatch& batch) {
    std::string payload;
    append_u32(payload, uint32_t(batch.size()));
    for (const auto& op : batch.ops()) {
        payload.push_back(char(op.kind));
        append_u32(payload, uint32_t(op.key.size()));
        payload.append(op.key);
        if (op.kind == WriteBatch::OpKind::Put) {
            append_u32(payload, uint32_t(op.value.size()));
            payload.append(op.value);
        }
    }
    std::string frame;
    append_u32(frame, uint32_t(payload.size()));
    append_u32(frame, crc32_ieee(reinterpret_cast<const uint8_t*>(payload.data()),
                                 payload.size()));
    frame.append(payload);
    return frame;
}

// Applies one frame payload to the map. Returns false on malformed payload.
bool apply_payload(const uint8_t* p, size_t len,
                   std::map<std::string, std::string>& map) {
    if (len < 4) return false;
    uint32_t count = read_u32(p);
    size_t off = 4;
    for (uint32_t i = 0; i < count; ++i) {
        if (off + 5 > len) return false;
        uint8_t kind = p[off];
        uint32_t klen = read_u32(p + off + 1);
        off += 5;
        if (klen > kMaxFrameBytes || off + klen > len) return false;
        std::string key(reinterpret_cast<const char*>(p + off), klen);
        off += klen;
        if (kind == uint8_t(WriteBatch::OpKind::Put)) {
            if (off + 4 > len) return false;
            uint32_t vlen = read_u32(p + off);
            off += 4;
            if (vlen > kMaxFrameBytes || off + vlen > len) return false;
            map[std::move(key)] =
                std::string(reinterpret_cast<const char*>(p + off), vlen);
            off += vlen;
        } else if (kind == uint8_t(WriteBatch::OpKind::Del)) {
            map.erase(key);
        } else {
            return false;
        }
    }
    return off == len;
}

// Reads frames from `path` (after the 8-byte magic) into map. Returns the
// offset just past the last intact frame, or nullopt if the magic is wrong.
std::optional<uint64_t> replay_file(const fs::path& path, const char expected_magic[8],
                                    std::map<std::string, std::string>& map) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) return std::nullopt;

    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, expected_magic, 8) != 0) {
        return std::nullopt;
    }

    uint64_t good_end = 8;
    std::vector<uint8_t> payload;
    for (;;) {
        uint8_t header[8];
        in.read(reinterpret_cast<char*>(header), 8);
        if (in.gcount() != 8) break;
        uint32_t len = read_u32(header);
        uint32_t crc = read_u32(header + 4);
        if (len > kMaxFrameBytes) break;
        payload.resize(len);
        in.read(reinterpret_cast<char*>(payload.data()), len);
        if (uint64_t(in.gcount()) != len) break;
        if (crc32_ieee(payload.data(), len) != crc) break;
        if (!apply_payload(payload.data(), len, map)) break;
        good_end += 8 + len;
    }
    return good_end;
}

void write_all(int fd, const char* data, size_t len, const char* what) {
    size_t off = 0;
    while (off < len) {
        ssize_t n = ::write(fd, data + off, len - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError(std::string(what) + ": write failed: " + std::strerror(errno),
                          off);
        }
        off += size_t(n);
    }
}

} // namespace

KvStore::KvStore(fs::path dir) : dir_(std::move(dir)) {}

std::unique_ptr<KvStore> KvStore::open(const fs::path& dir) {
    fs::create_directories(dir);
    auto store = std::unique_ptr<KvStore>(new KvStore(dir));
    store->load();
    return store;
}

KvStore::~KvStore() {
    if (wal_fd_ >= 0) ::close(wal_fd_);
}

void KvStore::load() {
    fs::path snap = dir_ / "snapshot.db";
    fs::path wal = dir_ / "wal.log";

    if (fs::exists(snap)) {
        auto end = replay_file(snap, kSnapMagic, map_);
        if (!end) throw IoError("corrupt snapshot: " + snap.string());
        snapshot_bytes_ = *end;
    }

    uint64_t wal_end = 8;
    if (fs::exists(wal)) {
        auto end = replay_file(wal, kWalMagic, map_);
        if (!end) throw IoError("corrupt log header: " + wal.string());
        wal_end = *end;
    }

    wal_fd_ = ::open(wal.c_str(), O_RDWR | O_CREAT, 0644);
    if (wal_fd_ < 0) throw IoError("cannot open log: " + wal.string());

    uint64_t actual = uint64_t(::lseek(wal_fd_, 0, SEEK_END));
    if (actual < 8) {
        // fresh log
        if (::ftruncate(wal_fd_, 0) != 0) throw IoError("log truncate failed");
        write_all(wal_fd_, kWalMagic, 8, "log magic");
        wal_end = 8;
    } else if (actual > wal_end) {
        // torn tail from an interrupted commit
        if (::ftruncate(wal_fd_, off_t(wal_end)) != 0) {
            throw IoError("log truncate failed");
        }
        ::lseek(wal_fd_, 0, SEEK_END);
    }
    wal_bytes_ = wal_end;
}

std::optional<std::string> KvStore::get(const std::string& key) const {
    std::shared_lock lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
}

void KvStore::apply(const WriteBatch& batch) {
    if (batch.empty()) return;
    std::string frame = serialize_batch(batch);

    std::unique_lock lock(mu_);
    write_all(wal_fd_, frame.data(), frame.size(), "log append");
    if (::fsync(wal_fd_) != 0) throw IoError("log fsync failed");
    wal_bytes_ += frame.size();

    for (const auto& op : batch.ops()) {
        if (op.kind == WriteBatch::OpKind::Put) {
            map_[op.key] = op.value;
        } else {
            map_.erase(op.key);
        }
    }

    if (wal_bytes_ > std::max(kCompactMinWalBytes, snapshot_bytes_ * 4)) {
        write_snapshot();
    }
}

void KvStore::scan_prefix(const std::string& prefix,
                          const std::function<bool(const std::string&,
                                                   const std::string&)>& fn) const {
    std::shared_lock lock(mu_);
    for (auto it = map_.lower_bound(prefix); it != map_.end(); ++it) {
        if (it->first.compare(0, prefix.size(), prefix) != 0) break;
        if (!fn(it->first, it->second)) break;
    }
}

size_t KvStore::count_prefix(const std::string& prefix) const {
    size_t n = 0;
    scan_prefix(prefix, [&](const std::string&, const std::string&) {
        ++n;
        return true;
    });
    return n;
}

size_t KvStore::entry_count() const {
    std::shared_lock lock(mu_);
    return map_.size();
}

void KvStore::compact() {
    std::unique_lock lock(mu_);
    write_snapshot();
}

// Caller holds the write lock.
void KvStore::write_snapshot() {
    fs::path tmp = dir_ / "snapshot.tmp";
    fs::path snap = dir_ / "snapshot.db";

    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw IoError("cannot create snapshot: " + tmp.string());
    try {
        write_all(fd, kSnapMagic, 8, "snapshot magic");
        uint64_t total = 8;
        WriteBatch chunk;
        auto flush_chunk = [&] {
            if (chunk.empty()) return;
            std::string frame = serialize_batch(chunk);
            write_all(fd, frame.data(), frame.size(), "snapshot frame");
            total += frame.size();
            chunk = WriteBatch();
        };
        for (const auto& [k, v] : map_) {
            chunk.put(k, v);
            if (chunk.size() >= 1024) flush_chunk();
        }
        flush_chunk();
        if (::fsync(fd) != 0) throw IoError("snapshot fsync failed");
        ::close(fd);
        fd = -1;
        fs::rename(tmp, snap);
        snapshot_bytes_ = total;
    } catch (...) {
        if (fd >= 0) ::close(fd);
        throw;
    }

    if (::ftruncate(wal_fd_, 8) != 0) throw IoError("log truncate failed");
    ::lseek(wal_fd_, 0, SEEK_END);
    wal_bytes_ = 8;
}

} // namespace distrifs
