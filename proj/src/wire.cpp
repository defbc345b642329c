#include "distrifs/wire.hpp"

#include <algorithm>
#include <set>

namespace distrifs::wire {

namespace {

[[noreturn]] void fail_validation(const std::string& rule) {
    throw WireError(WireError::Kind::Validation, rule);
}

[[noreturn]] void fail_schema(const std::string& what) {
    throw WireError(WireError::Kind::Schema, what);
}

bool is_lower_hex(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](char c) {
        return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
    });
}

} // namespace

bool is_absolute_http_url(const std::string& url) {
    std::string_view v(url);
    std::string_view rest;
    if (v.starts_with("http://")) {
        rest = v.substr(7);
    } else if (v.starts_with("https://")) {
        rest = v.substr(8);
    } else {
        return false;
    }
    auto host_end = rest.find_first_of("/?#");
    std::string_view authority = rest.substr(0, host_end);
    return !authority.empty() && authority.find(' ') == std::string_view::npos;
}

void validate(const FileRecord& r) {
    if (r.hash.empty()) fail_validation("file record: hash missing");
    if (r.rel_path.empty()) fail_validation("file record: rel_path empty");
    if (r.rel_path.front() == '/') fail_validation("file record: rel_path begins with '/'");
    std::string last_segment;
    std::string segment;
    for (size_t i = 0; i <= r.rel_path.size(); ++i) {
        if (i == r.rel_path.size() || r.rel_path[i] == '/') {
            if (segment.empty()) fail_validation("file record: empty rel_path segment");
            if (segment == "..") fail_validation("file record: rel_path contains '..'");
            last_segment = segment;
            segment.clear();
        } else {
            segment.push_back(r.rel_path[i]);
        }
    }
    if (r.name != last_segment) {
        fail_validation("file record: name must equal the final rel_path segment");
    }
}

void validate(const ServerRef& r) {
    if (!is_absolute_http_url(r.url)) {
        fail_validation("server ref: url must be an absolute http(s) URL");
    }
    if (r.latency_ms && *r.latency_ms < 0) fail_validation("server ref: negative latency_ms");
    if (r.throughput_bps && *r.throughput_bps < 0) {
        fail_validation("server ref: negative throughput_bps");
    }
}

void validate(const SearchHit& h) {
    validate(h.record);
    if (h.sources.empty()) fail_validation("search hit: sources must be non-empty");
    for (const auto& s : h.sources) validate(s);
}

void validate(const SearchRequest& r) {
    if (r.query.has_value() == r.hash.has_value()) {
        fail_validation("search request: exactly one of query|hash");
    }
    if (r.query && r.query->find_first_not_of(" \t\r\n") == std::string::npos) {
        fail_validation("search request: query empty");
    }
    if (r.hop_budget < 0) fail_validation("search request: negative hop_budget");
    if (r.hop_budget > kMaxHopBudget) {
        fail_validation("search request: hop_budget exceeds " + std::to_string(kMaxHopBudget));
    }
}

void validate(const SearchResponse& r) {
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& h : r.hits) {
        validate(h);
        for (const auto& s : h.sources) {
            if (!seen.emplace(h.record.hash.value(), s.url).second) {
                fail_validation("search response: duplicate (hash, server_url) pair");
            }
        }
    }
}

void validate(const TokenGrant& g) {
    if (g.token.size() != 32 || !is_lower_hex(g.token)) {
        fail_validation("token grant: token must be 32 lowercase hex chars");
    }
    if (!is_absolute_http_url(g.download_url)) {
        fail_validation("token grant: download_url must be absolute");
    }
    if (!g.download_url.ends_with("/dl/" + g.token)) {
        fail_validation("token grant: download_url must end with /dl/{token}");
    }
}

void validate(const SyncBatch& b) {
    if (b.origin.empty()) fail_validation("sync batch: origin empty");
    if (b.records.size() > kMaxSyncBatchRecords) {
        fail_validation("sync batch: exceeds " + std::to_string(kMaxSyncBatchRecords) +
                        " records");
    }
    for (const auto& rec : b.records) {
        validate(rec.record);
        if (!is_absolute_http_url(rec.server)) {
            fail_validation("sync batch: record server must be an absolute http(s) URL");
        }
    }
}

void validate(const PeerRef& p) {
    if (!is_absolute_http_url(p.url)) {
        fail_validation("peer ref: url must be an absolute http(s) URL");
    }
}

json to_json(const FileRecord& r) {
    return json{
        {"hash", r.hash.value()},
        {"modified_unix_s", r.modified_unix_s},
        {"name", r.name},
        {"rel_path", r.rel_path},
        {"size_bytes", r.size_bytes},
    };
}

json to_json(const ServerRef& r) {
    json j{{"url", r.url}};
    if (r.latency_ms) j["latency_ms"] = *r.latency_ms;
    if (r.throughput_bps) j["throughput_bps"] = *r.throughput_bps;
    if (r.last_probed_unix_s) j["last_probed_unix_s"] = *r.last_probed_unix_s;
    return j;
}

json to_json(const SearchHit& h) {
    json sources = json::array();
    for (const auto& s : h.sources) sources.push_back(to_json(s));
    return json{{"record", to_json(h.record)}, {"sources", std::move(sources)}};
}

json to_json(const SearchRequest& r) {
    json j{{"hop_budget", r.hop_budget}, {"visited", r.visited}};
    if (r.query) j["query"] = *r.query;
    if (r.hash) j["hash"] = r.hash->value();
    return j;
}

json to_json(const SearchResponse& r) {
    json hits = json::array();
    for (const auto& h : r.hits) hits.push_back(to_json(h));
    return json{{"hits", std::move(hits)}, {"truncated", r.truncated}};
}

json to_json(const TokenGrant& g) {
    return json{
        {"download_url", g.download_url},
        {"expires_unix_s", g.expires_unix_s},
        {"token", g.token},
    };
}

json to_json(const SyncBatch& b) {
    json records = json::array();
    for (const auto& rec : b.records) {
        records.push_back(json{{"record", to_json(rec.record)}, {"server", rec.server}});
    }
    return json{{"origin", b.origin}, {"records", std::move(records)}};
}

json to_json(const PeerRef& p) {
    return json{{"is_upstream", p.is_upstream}, {"url", p.url}};
}

json to_json(const CrawlResult& c) {
    return json{{"files_indexed", c.files_indexed}, {"truncated", c.truncated}};
}

json to_json(const ErrorBody& e) {
    return json{{"detail", e.detail}, {"error", e.error}};
}

const json& require_field(const json& j, const char* field) {
    if (!j.is_object()) fail_schema("expected a JSON object");
    auto it = j.find(field);
    if (it == j.end()) fail_schema(std::string("missing field: ") + field);
    return *it;
}

std::string require_string(const json& j, const char* field) {
    const json& v = require_field(j, field);
    if (!v.is_string()) fail_schema(std::string("field ") + field + ": expected string");
    return v.get<std::string>();
}

int64_t require_int(const json& j, const char* field) {
    const json& v = require_field(j, field);
    if (!v.is_number_integer()) {
        fail_schema(std::string("field ") + field + ": expected integer");
    }
    return v.get<int64_t>();
}

uint64_t require_uint(const json& j, const char* field) {
    const json& v = require_field(j, field);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0)) {
        fail_schema(std::string("field ") + field + ": expected non-negative integer");
    }
    return v.get<uint64_t>();
}

bool require_bool(const json& j, const char* field) {
    const json& v = require_field(j, field);
    if (!v.is_boolean()) fail_schema(std::string("field ") + field + ": expected bool");
    return v.get<bool>();
}

namespace {

ContentHash require_hash(const json& j, const char* field) {
    auto parsed = ContentHash::parse(require_string(j, field));
    if (!parsed) {
        fail_validation(std::string("field ") + field + ": not 64 hex chars");
    }
    return *parsed;
}

std::optional<double> optional_number(const json& j, const char* field) {
    auto it = j.is_object() ? j.find(field) : j.end();
    if (it == j.end()) return std::nullopt;
    if (!it->is_number()) fail_schema(std::string("field ") + field + ": expected number");
    return it->get<double>();
}

std::optional<int64_t> optional_int(const json& j, const char* field) {
    auto it = j.is_object() ? j.find(field) : j.end();
    if (it == j.end()) return std::nullopt;
    if (!it->is_number_integer()) {
        fail_schema(std::string("field ") + field + ": expected integer");
    }
    return it->get<int64_t>();
}

const json& require_array(const json& j, const char* field) {
    const json& v = require_field(j, field);
    if (!v.is_array()) fail_schema(std::string("field ") + field + ": expected array");
    return v;
}

} // namespace

FileRecord record_from_json(const json& j) {
    FileRecord r;
    r.hash = require_hash(j, "hash");
    r.name = require_string(j, "name");
    r.size_bytes = require_uint(j, "size_bytes");
    r.modified_unix_s = require_int(j, "modified_unix_s");
    r.rel_path = require_string(j, "rel_path");
    validate(r);
    return r;
}

ServerRef server_ref_from_json(const json& j) {
    ServerRef r;
    r.url = require_string(j, "url");
    r.latency_ms = optional_number(j, "latency_ms");
    r.throughput_bps = optional_number(j, "throughput_bps");
    r.last_probed_unix_s = optional_int(j, "last_probed_unix_s");
    validate(r);
    return r;
}

SearchHit hit_from_json(const json& j) {
    SearchHit h;
    h.record = record_from_json(require_field(j, "record"));
    for (const auto& s : require_array(j, "sources")) {
        h.sources.push_back(server_ref_from_json(s));
    }
    validate(h);
    return h;
}

SearchRequest search_request_from_json(const json& j) {
    SearchRequest r;
    if (j.is_object() && j.contains("query")) r.query = require_string(j, "query");
    if (j.is_object() && j.contains("hash")) r.hash = require_hash(j, "hash");
    int64_t hops = require_int(j, "hop_budget");
    if (hops < 0 || hops > kMaxHopBudget) {
        fail_validation("search request: hop_budget out of range");
    }
    r.hop_budget = int(hops);
    for (const auto& v : require_array(j, "visited")) {
        if (!v.is_string()) fail_schema("field visited: expected array of strings");
        r.visited.push_back(v.get<std::string>());
    }
    validate(r);
    return r;
}

SearchResponse search_response_from_json(const json& j) {
    SearchResponse r;
    for (const auto& h : require_array(j, "hits")) {
        r.hits.push_back(hit_from_json(h));
    }
    r.truncated = require_bool(j, "truncated");
    validate(r);
    return r;
}

TokenGrant token_grant_from_json(const json& j) {
    TokenGrant g;
    g.token = require_string(j, "token");
    g.download_url = require_string(j, "download_url");
    g.expires_unix_s = require_int(j, "expires_unix_s");
    validate(g);
    return g;
}

SyncBatch sync_batch_from_json(const json& j) {
    SyncBatch b;
    b.origin = require_string(j, "origin");
    for (const auto& rec : require_array(j, "records")) {
        SyncRecord sr;
        sr.record = record_from_json(require_field(rec, "record"));
        sr.server = require_string(rec, "server");
        b.records.push_back(std::move(sr));
    }
    validate(b);
    return b;
}

PeerRef peer_ref_from_json(const json& j) {
    PeerRef p;
    p.url = require_string(j, "url");
    p.is_upstream = require_bool(j, "is_upstream");
    validate(p);
    return p;
}

CrawlResult crawl_result_from_json(const json& j) {
    CrawlResult c;
    c.files_indexed = require_int(j, "files_indexed");
    c.truncated = require_bool(j, "truncated");
    return c;
}

ErrorBody error_body_from_json(const json& j) {
    ErrorBody e;
    e.error = require_string(j, "error");
    e.detail = require_string(j, "detail");
    return e;
}

json parse_json(std::string_view text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw WireError(WireError::Kind::Parse, "malformed JSON");
    }
    return j;
}

SearchRequest decode_search_request(std::string_view text) {
    return search_request_from_json(parse_json(text));
}
SearchResponse decode_search_response(std::string_view text) {
    return search_response_from_json(parse_json(text));
}
TokenGrant decode_token_grant(std::string_view text) {
    return token_grant_from_json(parse_json(text));
}
SyncBatch decode_sync_batch(std::string_view text) {
    return sync_batch_from_json(parse_json(text));
}
FileRecord decode_file_record(std::string_view text) {
    return record_from_json(parse_json(text));
}
ServerRef decode_server_ref(std::string_view text) {
    return server_ref_from_json(parse_json(text));
}
SearchHit decode_search_hit(std::string_view text) {
    return hit_from_json(parse_json(text));
}
PeerRef decode_peer_ref(std::string_view text) {
    return peer_ref_from_json(parse_json(text));
}
CrawlResult decode_crawl_result(std::string_view text) {
    return crawl_result_from_json(parse_json(text));
}
ErrorBody decode_error_body(std::string_view text) {
    return error_body_from_json(parse_json(text));
}

} // namespace distrifs::wire
