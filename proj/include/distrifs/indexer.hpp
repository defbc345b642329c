#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "distrifs/core.hpp"
#include "distrifs/kvstore.hpp"
#include "distrifs/lru_cache.hpp"
#include "distrifs/net.hpp"
#include "distrifs/wire.hpp"

namespace distrifs::indexer {

using NowFn = net::NowFn;

struct IndexerConfig {
    std::filesystem::path db_dir;
    std::string listen_host = "127.0.0.1";
    int listen_port = 0;           // 0 picks an ephemeral port
    std::string self_url;          // federation identity; defaulted after bind
    std::string name = "distrifs-indexer";
    std::vector<wire::PeerRef> peers;
    size_t cutoff = 100000;        // hard cap on records accepted per server
    int64_t crawl_interval_s = 900;
    int64_t stale_ttl_s = 0;       // 0 -> 3 * crawl_interval_s
    double peer_timeout_s = 5.0;
    double server_timeout_s = 5.0;
    size_t cache_capacity = 10000; // hot IndexEntry LRU
    bool scheduler_enabled = false;
    int scheduler_tick_ms = 1000;
    int worker_threads = 16;
    bool record_user_agents = false; // test instrumentation
};

struct ServerEntry {
    std::string url;
    int64_t first_seen_unix_s = 0;
    int64_t last_crawl_unix_s = 0; // last successful crawl
    int64_t last_seen_unix_s = 0;  // crawl or sync mention, drives eviction
    uint64_t file_count = 0;       // records attributed to this server
    bool reachable = true;
    std::optional<double> latency_ms;        // EWMA, alpha 0.3
    std::optional<double> throughput_bps;    // EWMA, alpha 0.3
    std::optional<int64_t> last_probed_unix_s;
};

struct IndexEntry {
    FileRecord record;                   // first-seen name wins
    std::vector<std::string> alt_names;  // other names seen for this hash
    std::vector<std::string> servers;    // sorted unique URLs
};

struct CrawlOutcome {
    enum class Status { Ok, InvalidUrl, Unreachable, MalformedListing };
    Status status = Status::Ok;
    wire::CrawlResult result;
    std::string detail;
};

struct ProbeOutcome {
    bool reachable = false;
    std::optional<double> latency_ms;      // updated EWMA
    std::optional<double> throughput_bps;
};

struct EvictOutcome {
    size_t servers_evicted = 0;
    size_t entries_removed = 0;
};

struct SearchOutcome {
    wire::SearchResponse response;
    // names that resolve to more than one hash within this response
    std::vector<std::string> conflicts;
};

// lowercase, split on non-alphanumeric, deduplicated, order preserved
std::vector<std::string> tokenize_name(std::string_view name);

// alpha=0.3 exponentially weighted moving average; first sample passes through
double ewma_update(std::optional<double> prev, double sample);

// Discovery service: crawls servers into the persistent index, answers
// local and federated searches, accepts sync pushes and propagates crawled
// records to upstream indexers. Stores metadata and hashes only.
class Indexer {
public:
    Indexer(IndexerConfig cfg, NowFn now = net::system_now(),
            net::LoggerPtr log = nullptr); // opens the store; throws IoError

    // Fetches {url}/api/v1/list and replaces the server's attributed records
    // in one atomic batch, capped at cutoff. Successful crawls are pushed to
    // the configured upstream peers.
    CrawlOutcome register_server(const std::string& url);

    SearchOutcome search_local(const wire::SearchRequest& req);

    // Local-first: peers are consulted only on a local miss, each with
    // hop_budget-1 and this indexer appended to visited. Peer failures are
    // skipped, never fatal.
    SearchOutcome search_federated(const wire::SearchRequest& req);

    // Merges records (servers set union) under the per-server cutoff.
    // Re-pushing an existing (hash, server) pair is idempotent and counted.
    size_t sync_push(const wire::SyncBatch& batch);

    // Round-trip latency of a metadata request plus a 64 KiB throughput
    // sample fetched through a normal token download of the smallest hosted
    // file (skipped when none is <= 1 MiB). Both folded in as EWMA.
    ProbeOutcome probe_server(const std::string& url);

    // Servers whose freshness exceeds the stale TTL are marked unreachable
    // and detached from every entry; entries left with no server vanish.
    EvictOutcome evict_stale();

    // Re-crawls every server whose last crawl is older than the interval.
    void recrawl_due();

    size_t entry_count() const;
    std::optional<ServerEntry> server_entry(const std::string& url) const;
    std::optional<IndexEntry> index_entry(const ContentHash& hash) const;
    std::vector<wire::PeerRef> peers() const;
    void set_peers(std::vector<wire::PeerRef> peers); // hot-swappable
    const IndexerConfig& config() const { return cfg_; }
    void set_self_url(const std::string& url);

private:
    struct StagedState;

    CrawlOutcome crawl(const std::string& url);
    void push_to_upstreams(const std::vector<wire::SyncRecord>& records);
    std::optional<IndexEntry> load_entry(const std::string& hash_hex) const;
    std::optional<ServerEntry> load_server(const std::string& url) const;
    wire::SearchHit build_hit(const IndexEntry& entry) const;
    SearchOutcome finish_response(std::vector<wire::SearchHit> hits, bool truncated) const;

    IndexerConfig cfg_;
    NowFn now_;
    net::LoggerPtr log_;
    std::unique_ptr<KvStore> store_;
    mutable LruCache<std::string, IndexEntry> hot_entries_;
    std::mutex write_mu_; // serializes read-modify-write batches
    mutable std::mutex peers_mu_;
    std::vector<wire::PeerRef> peers_;
};

// HTTP front end: POST /api/v1/register, GET /api/v1/search,
// POST /api/v1/sync, GET /api/v1/peers, GET /api/v1/info.
class IndexerService {
public:
    IndexerService(IndexerConfig cfg, net::LoggerPtr log = nullptr,
                   NowFn now = net::system_now());
    ~IndexerService();

    IndexerService(const IndexerService&) = delete;
    IndexerService& operator=(const IndexerService&) = delete;

    void start();
    void stop(); // idempotent

    int port() const;
    std::string base_url() const;
    Indexer& core();
    std::vector<std::string> observed_user_agents() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace distrifs::indexer
