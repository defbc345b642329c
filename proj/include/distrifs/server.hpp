#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "distrifs/core.hpp"
#include "distrifs/net.hpp"

namespace distrifs::server {

using NowFn = net::NowFn;

struct FaultInjection {
    // Test instrumentation driven by the simnet harness; all off by default.
    int added_latency_ms = 0;      // sleep before answering any request
    bool tamper_first_byte = false; // flip byte 0 of every download stream
    int stream_chunk_delay_ms = 0; // throttle: sleep per 64 KiB chunk
};

struct ServeConfig {
    std::filesystem::path root;
    std::string listen_host = "127.0.0.1";
    int listen_port = 0;             // 0 picks an ephemeral port
    int max_concurrent = 0;          // 0 = unlimited streams
    double queue_wait_timeout_s = 120.0;
    int64_t token_ttl_s = 60;
    std::string name = "distrifs-server";
    int worker_threads = 32;
    bool record_grant_order = false; // keep (arrival, grant) pairs for tests
    bool record_user_agents = false; // test instrumentation
    FaultInjection fault;
};

struct CatalogEntry {
    FileRecord record;                  // canonical: lexicographically first path
    std::vector<std::string> all_paths; // every rel_path with this content
};

// Immutable scan snapshot; the server swaps whole catalogs atomically.
class Catalog {
public:
    static Catalog build(const std::filesystem::path& root); // throws IoError

    const CatalogEntry* find(const ContentHash& hash) const;
    std::vector<FileRecord> list() const; // lexicographic by rel_path
    size_t size() const { return by_hash_.size(); }
    const std::map<std::string, CatalogEntry>& entries() const { return by_hash_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    std::map<std::string, CatalogEntry> by_hash_;
    std::vector<std::string> warnings_;
};

struct RefreshDelta {
    size_t added = 0;
    size_t removed = 0;
    size_t changed = 0;
};

struct IssuedToken {
    std::string token;
    int64_t expires_unix_s = 0;
};

struct TokenOutcome {
    enum class Status { Granted, UnknownHash, QueueTimeout };
    Status status = Status::UnknownHash;
    IssuedToken issued;    // Granted
    size_t queue_len = 0;  // QueueTimeout
};

struct ConsumeOutcome {
    enum class Status { Ok, NotFound, Gone };
    Status status = Status::NotFound;
    FileRecord record;
    std::filesystem::path abs_path;
};

struct ServerStats {
    int active_slots = 0;
    int streaming_now = 0;
    int max_streaming_observed = 0;
    size_t waiting = 0;
    std::vector<std::pair<uint64_t, uint64_t>> grant_order; // (arrival, grant)
};

// Token-gated file host. Grant, consume, expire and release are atomic
// transitions on one state machine; a token reserves its concurrency slot
// from grant until stream completion, abort, or expiry.
class FileServer {
public:
    FileServer(ServeConfig cfg, NowFn now = net::system_now());

    // Builds the initial catalog; throws IoError on unreadable root.
    void start();

    std::vector<FileRecord> list_files() const;
    std::optional<FileRecord> get_metadata(const ContentHash& hash) const;
    size_t file_count() const;
    std::vector<std::string> scan_warnings() const;

    // Blocks in FIFO order while all slots are busy, up to
    // queue_wait_timeout_s. Never blocks for unknown hashes.
    TokenOutcome request_token(const ContentHash& hash);

    // Atomically marks the token consumed; exactly one concurrent caller
    // wins. Expired and already-consumed tokens report Gone.
    ConsumeOutcome consume_token(const std::string& token);

    // Must be called exactly once after a consume_token transition, when the
    // stream ends (complete or aborted). Frees the slot and wakes the queue.
    void stream_finished(const std::string& token, bool completed);

    // Releases slots of unconsumed tokens whose TTL passed. Safe to call at
    // any time; also runs inside queue waits.
    void expire_tokens();

    RefreshDelta refresh_index();

    ServerStats stats() const;
    const ServeConfig& config() const { return cfg_; }
    int64_t now() const { return now_(); }

private:
    enum class TokenState { Fresh, Consumed, Expired };
    struct TokenInfo {
        std::string hash_hex;
        int64_t expires_unix_s = 0;
        TokenState state = TokenState::Fresh;
        bool holds_slot = false;
    };
    struct Waiter {
        std::condition_variable cv;
        bool granted = false;
        ContentHash hash;
        uint64_t arrival = 0;
        IssuedToken issued; // filled by the pump, in strict FIFO order
    };

    IssuedToken grant_locked(const ContentHash& hash, uint64_t arrival);
    void expire_locked(int64_t now_s);
    void pump_locked();
    void release_slot_locked(TokenInfo& info);

    ServeConfig cfg_;
    NowFn now_;

    mutable std::mutex catalog_mu_;
    std::shared_ptr<const Catalog> catalog_;

    mutable std::mutex mu_; // token table + queue + gauges
    std::unordered_map<std::string, TokenInfo> tokens_;
    std::deque<Waiter*> queue_;
    int active_slots_ = 0;
    int streaming_now_ = 0;
    int max_streaming_ = 0;
    uint64_t next_arrival_ = 0;
    uint64_t next_grant_ = 0;
    std::vector<std::pair<uint64_t, uint64_t>> grant_order_;
};

// HTTP front end: /api/v1/info, /api/v1/list, /api/v1/meta/{hash},
// POST /api/v1/token, GET /dl/{token}.
class FileServerService {
public:
    FileServerService(ServeConfig cfg, net::LoggerPtr log = nullptr,
                      NowFn now = net::system_now());
    ~FileServerService();

    FileServerService(const FileServerService&) = delete;
    FileServerService& operator=(const FileServerService&) = delete;

    void start(); // throws on bind or scan failure
    void stop();  // idempotent

    int port() const;
    std::string base_url() const;
    FileServer& core();
    const FileServer& core() const;
    std::vector<std::string> observed_user_agents() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace distrifs::server
