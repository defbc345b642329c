#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "distrifs/client.hpp"
#include "distrifs/indexer.hpp"
#include "distrifs/server.hpp"
#include "distrifs/wire.hpp"

namespace distrifs::simnet {

// Deterministic fixture content: same (seed, size) -> same bytes.
std::string fixture_bytes(uint64_t seed, uint64_t size);

struct FileSpec {
    std::string rel_path;
    uint64_t size_bytes = 0;
    uint64_t seed = 0;
};

struct ServerSpec {
    std::vector<FileSpec> files;
    int injected_latency_ms = 0;
    bool tamper = false; // flip the first byte of every download stream
    int max_concurrent = 0;
    double queue_timeout_s = 120.0;
    int64_t token_ttl_s = 60;
    int stream_chunk_delay_ms = 0;
    int worker_threads = 64;
};

struct IndexerSpec {
    std::vector<size_t> peers;     // indices into Topology::indexers
    std::vector<size_t> upstreams; // subset pushed to after crawls
    size_t cutoff = 100000;
    int64_t crawl_interval_s = 900;
    int64_t stale_ttl_s = 0;
    double peer_timeout_s = 2.0;
    bool scheduler_enabled = false;
    int scheduler_tick_ms = 200;
};

struct Registration {
    size_t indexer = 0;
    size_t server = 0;
};

struct Topology {
    std::vector<ServerSpec> servers;
    std::vector<IndexerSpec> indexers;
    std::vector<Registration> registrations;
};

Topology topology_from_json(const wire::json& j);

// Adjustable wall clock shared by every spawned instance.
class SimClock {
public:
    SimClock();
    int64_t now() const;
    void advance(int64_t seconds);
    net::NowFn fn(); // safe to outlive nothing: SimNet keeps the clock alive

private:
    int64_t base_;
    std::shared_ptr<std::atomic<int64_t>> offset_;
};

struct ActionOutcome {
    std::string action;
    bool ok = false;
    std::string detail;
    double elapsed_ms = 0;
};

struct ScenarioResult {
    std::vector<ActionOutcome> outcomes;
    size_t download_attempts = 0;
    size_t download_successes = 0;
    int max_concurrent_streams = 0;

    double availability() const {
        return download_attempts == 0
                   ? 1.0
                   : double(download_successes) / double(download_attempts);
    }
    wire::json to_json() const;
};

// In-process network of real indexer and server instances on loopback
// ephemeral ports, with fault injection. Teardown releases every port and
// removes every temp file.
class SimNet {
public:
    explicit SimNet(uint64_t seed = 1);
    ~SimNet();

    SimNet(const SimNet&) = delete;
    SimNet& operator=(const SimNet&) = delete;

    void spawn(const Topology& topology); // all-or-nothing
    void teardown();

    size_t server_count() const { return servers_.size(); }
    size_t indexer_count() const { return indexers_.size(); }

    server::FileServerService& server(size_t i) { return *servers_.at(i).service; }
    indexer::IndexerService& indexer_svc(size_t i) { return *indexers_.at(i).service; }
    std::string server_url(size_t i) const { return servers_.at(i).url; }
    std::string indexer_url(size_t i) const { return indexers_.at(i).url; }
    bool server_is_down(size_t i) const { return servers_.at(i).down; }

    ContentHash file_hash(size_t server_idx, size_t file_idx) const;
    const std::filesystem::path& root() const { return root_; }

    // Stops the server's listener; later calls are idempotent.
    void take_down(size_t server_idx);

    // Kills the indexer instance and reopens the same database on the same
    // port, exercising the persistence path.
    void restart_indexer(size_t i);

    SimClock& clock() { return clock_; }
    std::string server_log(size_t i) const;
    std::string indexer_log(size_t i) const;
    std::vector<std::string> all_observed_user_agents() const;

    // config pointing at every spawned indexer
    client::ClientConfig client_config() const;
    client::ClientOptions client_options() const; // short timeouts for tests

    ScenarioResult run_scenario(const wire::json& actions);

private:
    struct ServerInstance {
        std::unique_ptr<server::FileServerService> service;
        std::filesystem::path dir;
        std::string url;
        std::shared_ptr<std::ostringstream> log;
        std::vector<std::pair<std::string, ContentHash>> files; // rel_path, hash
        bool down = false;
    };
    struct IndexerInstance {
        std::unique_ptr<indexer::IndexerService> service;
        indexer::IndexerConfig config;
        std::filesystem::path dir;
        std::string url;
        std::shared_ptr<std::ostringstream> log;
    };

    uint64_t seed_;
    SimClock clock_;
    std::filesystem::path root_;
    std::vector<ServerInstance> servers_;
    std::vector<IndexerInstance> indexers_;
};

} // namespace distrifs::simnet
