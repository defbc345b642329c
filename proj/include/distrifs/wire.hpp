#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "distrifs/core.hpp"

// Canonical JSON schemas for every client/indexer/server exchange, frozen
// under /api/v1/. Encoding is byte-stable: lexicographic key order, absent
// optionals omitted, compact separators.
namespace distrifs::wire {

using json = nlohmann::json;

class WireError : public std::runtime_error {
public:
    enum class Kind { Parse, Schema, Validation };

    WireError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr int kMaxHopBudget = 8;
inline constexpr size_t kMaxSyncBatchRecords = 1000;
inline constexpr size_t kMaxSearchHits = 100;

struct ServerRef {
    std::string url;
    std::optional<double> latency_ms;        // absent until first probe
    std::optional<double> throughput_bps;
    std::optional<int64_t> last_probed_unix_s;

    bool operator==(const ServerRef&) const = default;
};

struct SearchHit {
    FileRecord record;
    std::vector<ServerRef> sources; // non-empty

    bool operator==(const SearchHit&) const = default;
};

struct SearchRequest {
    std::optional<std::string> query; // exactly one of query|hash
    std::optional<ContentHash> hash;
    int hop_budget = 0;
    std::vector<std::string> visited; // indexer identities already consulted

    bool operator==(const SearchRequest&) const = default;
};

struct SearchResponse {
    std::vector<SearchHit> hits;
    bool truncated = false;

    bool operator==(const SearchResponse&) const = default;
};

struct TokenGrant {
    std::string token;        // 32-char lowercase hex, 128 random bits
    std::string download_url; // absolute, path ends with /dl/{token}
    int64_t expires_unix_s = 0;

    bool operator==(const TokenGrant&) const = default;
};

struct SyncRecord {
    FileRecord record;
    std::string server; // absolute URL hosting the record

    bool operator==(const SyncRecord&) const = default;
};

struct SyncBatch {
    std::string origin; // pushing indexer's identity
    std::vector<SyncRecord> records;

    bool operator==(const SyncBatch&) const = default;
};

struct PeerRef {
    std::string url;
    bool is_upstream = false;

    bool operator==(const PeerRef&) const = default;
};

struct CrawlResult {
    int64_t files_indexed = 0;
    bool truncated = false;

    bool operator==(const CrawlResult&) const = default;
};

// Fixed body for every non-2xx JSON response.
struct ErrorBody {
    std::string error;  // machine code
    std::string detail; // human text

    bool operator==(const ErrorBody&) const = default;
};

// True for absolute http:// or https:// URLs with a host part.
bool is_absolute_http_url(const std::string& url);

// Invariant checks; throw WireError{Validation} naming the violated rule.
void validate(const FileRecord& r);
void validate(const ServerRef& r);
void validate(const SearchHit& h);
void validate(const SearchRequest& r);
void validate(const SearchResponse& r);
void validate(const TokenGrant& g);
void validate(const SyncBatch& b);
void validate(const PeerRef& p);
inline void validate(const CrawlResult&) {}
inline void validate(const ErrorBody&) {}

// JSON-value layer, used for nesting and by the services.
json to_json(const FileRecord& r);
json to_json(const ServerRef& r);
json to_json(const SearchHit& h);
json to_json(const SearchRequest& r);
json to_json(const SearchResponse& r);
json to_json(const TokenGrant& g);
json to_json(const SyncBatch& b);
json to_json(const PeerRef& p);
json to_json(const CrawlResult& c);
json to_json(const ErrorBody& e);

FileRecord record_from_json(const json& j);
ServerRef server_ref_from_json(const json& j);
SearchHit hit_from_json(const json& j);
SearchRequest search_request_from_json(const json& j);
SearchResponse search_response_from_json(const json& j);
TokenGrant token_grant_from_json(const json& j);
SyncBatch sync_batch_from_json(const json& j);
PeerRef peer_ref_from_json(const json& j);
CrawlResult crawl_result_from_json(const json& j);
ErrorBody error_body_from_json(const json& j);

// Canonical text encoding. Refuses invariant-violating messages.
template <typename T>
std::string encode(const T& msg) {
    validate(msg);
    return to_json(msg).dump();
}

// decode(): parse errors -> Kind::Parse, missing/mistyped fields ->
// Kind::Schema, invariant violations -> Kind::Validation. Unknown keys are
// ignored for forward compatibility.
json parse_json(std::string_view text);

SearchRequest decode_search_request(std::string_view text);
SearchResponse decode_search_response(std::string_view text);
TokenGrant decode_token_grant(std::string_view text);
SyncBatch decode_sync_batch(std::string_view text);
FileRecord decode_file_record(std::string_view text);
ServerRef decode_server_ref(std::string_view text);
SearchHit decode_search_hit(std::string_view text);
PeerRef decode_peer_ref(std::string_view text);
CrawlResult decode_crawl_result(std::string_view text);
ErrorBody decode_error_body(std::string_view text);

// Field-extraction helpers shared by the services' ad-hoc request bodies.
std::string require_string(const json& j, const char* field);
int64_t require_int(const json& j, const char* field);
uint64_t require_uint(const json& j, const char* field);
bool require_bool(const json& j, const char* field);
const json& require_field(const json& j, const char* field);

} // namespace distrifs::wire
