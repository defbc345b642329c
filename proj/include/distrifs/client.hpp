#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "distrifs/core.hpp"
#include "distrifs/net.hpp"
#include "distrifs/wire.hpp"

namespace distrifs::client {

enum class SecurityMode { Strict, Permissive };

struct IndexerRef {
    std::string url;
    bool is_default = false;

    bool operator==(const IndexerRef&) const = default;
};

struct ClientConfig {
    std::vector<IndexerRef> indexers;
    SecurityMode mode = SecurityMode::Strict;
    std::optional<std::string> scanner_command; // run as `<command> <path>`
    std::string user_agent = net::kUserAgent;   // override discouraged
};

class ClientError : public std::runtime_error {
public:
    enum class Kind { NoIndexer, NoSource, NoServer, Declined, QueueBusy, Config, Protocol };

    ClientError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Shipped defaults, written to config on first run. Deployment-specific;
// operators replace these with their own indexers.
std::vector<IndexerRef> default_indexers();

// $DISTRIFS_CONFIG_DIR, else XDG config dir, else ~/.config/distrifs.
std::filesystem::path default_config_dir();

struct BootstrapResult {
    ClientConfig config;
    std::vector<std::string> notices;
};

// First run writes the built-in defaults; later runs load the persisted set
// verbatim (removed defaults stay removed). A corrupt file is an error
// naming the file, never a silent reset.
BootstrapResult bootstrap(const std::filesystem::path& config_dir);

// Atomic write-temp-then-rename.
void save_config(const std::filesystem::path& config_dir, const ClientConfig& config);

// Mutations persist immediately. Removing the last indexer is refused.
void add_indexer(const std::filesystem::path& config_dir, ClientConfig& config,
                 const std::string& url);
void remove_indexer(const std::filesystem::path& config_dir, ClientConfig& config,
                    const std::string& url);

struct SearchResult {
    std::vector<wire::SearchHit> hits; // deduplicated by hash, sources unioned
    std::vector<std::string> warnings; // name->hash conflicts, unreachable indexers
};

enum class ScannerVerdict { Clean, Flagged, Skipped };

struct DownloadReport {
    std::filesystem::path output;
    ContentHash expected;
    ContentHash actual;
    enum class Verdict { Verified, Blocked };
    Verdict verdict = Verdict::Blocked;
    std::string blocked_reason; // "hash mismatch" | "scanner" | ...
    std::string server_used;
    ScannerVerdict scanner_verdict = ScannerVerdict::Skipped;
    std::string scanner_detail;
    std::vector<std::string> notes; // retries, warnings
};

wire::json report_to_json(const DownloadReport& r);
DownloadReport report_from_json(const wire::json& j);

struct ClientOptions {
    double indexer_timeout_s = 5.0;
    double server_timeout_s = 10.0;
    double queue_deadline_s = 300.0; // token request may hang in the queue
    int hop_budget = 2;
    uint64_t selection_seed = 0;     // 0 seeds from the OS
    // strict-mode gate; return false to abort. Defaults to accept-all so
    // library use stays non-interactive; the CLI wires a prompt here.
    std::function<bool(const FileRecord&, const std::string& server_url)> confirm;
    std::function<void(const std::string&)> notice; // progress lines
};

// The downloader: multi-indexer search with consistency cross-check,
// latency-ranked server selection, token download, SHA-256 verification and
// an optional post-verification scanner hook.
class Client {
public:
    Client(ClientConfig config, ClientOptions opts = {});

    SearchResult search_text(const std::string& query);
    SearchResult search_hash(const ContentHash& hash);

    // Probes every source and returns the winner: lowest latency, ties
    // within 20% broken by throughput, exact ties uniformly at random.
    wire::ServerRef select_server(const wire::SearchHit& hit);

    // The full flow: resolve -> select -> confirm (strict) -> token ->
    // stream -> verify -> scan. On a hash mismatch the file is quarantined
    // as <out>.blocked and one retry goes through a different server.
    DownloadReport download(const ContentHash& hash, const std::filesystem::path& out,
                            const std::optional<std::string>& direct_server = {});

    VerificationOutcome verify(const std::filesystem::path& path,
                               const ContentHash& expected) const;

    const ClientConfig& config() const { return config_; }

private:
    struct Candidate {
        wire::ServerRef ref;
        double measured_ms = 0;
    };
    SearchResult fan_out(const std::optional<std::string>& query,
                         const std::optional<ContentHash>& hash);
    std::vector<Candidate> rank_candidates(const std::vector<wire::ServerRef>& sources,
                                           std::vector<std::string>* attempts);
    void note(const std::string& line);

    ClientConfig config_;
    ClientOptions opts_;
};

} // namespace distrifs::client
