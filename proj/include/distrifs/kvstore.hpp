#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace distrifs {

// A group of writes applied atomically: either every op lands or none do,
// including across a crash.
class WriteBatch {
public:
    void put(std::string key, std::string value) {
        ops_.push_back({OpKind::Put, std::move(key), std::move(value)});
    }
    void del(std::string key) {
        ops_.push_back({OpKind::Del, std::move(key), {}});
    }
    size_t size() const { return ops_.size(); }
    bool empty() const { return ops_.empty(); }

    enum class OpKind : uint8_t { Put = 0, Del = 1 };
    struct Op {
        OpKind kind;
        std::string key;
        std::string value;
    };
    const std::vector<Op>& ops() const { return ops_; }

private:
    std::vector<Op> ops_;
};

// Persistent ordered key-value map: an in-memory std::map backed by a
// checksummed write-ahead log plus periodic snapshot compaction. Batches are
// committed with a single write+fsync; a torn tail is truncated on reopen.
// Values are metadata records only — callers never store file bodies.
class KvStore {
public:
    static std::unique_ptr<KvStore> open(const std::filesystem::path& dir);
    ~KvStore();

    KvStore(const KvStore&) = delete;
    KvStore& operator=(const KvStore&) = delete;

    std::optional<std::string> get(const std::string& key) const;

    // Durable atomic commit. Throws IoError if the log write fails.
    void apply(const WriteBatch& batch);

    // In-order walk of keys starting with prefix; return false to stop.
    void scan_prefix(const std::string& prefix,
                     const std::function<bool(const std::string& key,
                                              const std::string& value)>& fn) const;

    size_t count_prefix(const std::string& prefix) const;
    size_t entry_count() const;

    // Rewrites the snapshot and truncates the log. Also runs automatically
    // once the log outgrows the snapshot.
    void compact();

    const std::filesystem::path& dir() const { return dir_; }

private:
    explicit KvStore(std::filesystem::path dir);
    void load();
    void write_snapshot();

    std::filesystem::path dir_;
    mutable std::shared_mutex mu_;
    std::map<std::string, std::string> map_;
    int wal_fd_ = -1;
    uint64_t wal_bytes_ = 0;
    uint64_t snapshot_bytes_ = 0;
};

} // namespace distrifs
