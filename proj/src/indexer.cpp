#include "distrifs/indexer.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <set>
#include <thread>

#include <httplib.h>

#include "distrifs/sha256.hpp"

namespace distrifs::indexer {

using wire::json;

namespace {

constexpr const char* kEntryPrefix = "e/";
constexpr const char* kServerPrefix = "s/";
constexpr const char* kPostingPrefix = "n/";
constexpr size_t kThroughputSampleBytes = 64 * 1024;
constexpr uint64_t kThroughputMaxFileBytes = 1024 * 1024;
constexpr double kEwmaAlpha = 0.3;

std::string entry_key(const std::string& hash_hex) {
    return kEntryPrefix + hash_hex;
}

std::string server_key(const std::string& url) {
    return kServerPrefix + Sha256::hex_digest(url);
}

std::string posting_key(const std::string& token, const std::string& hash_hex) {
    return kPostingPrefix + token + "/" + hash_hex;
}

json entry_to_json(const IndexEntry& e) {
    return json{{"alt_names", e.alt_names},
                {"record", wire::to_json(e.record)},
                {"servers", e.servers}};
}

IndexEntry entry_from_json(const std::string& value) {
    json j = wire::parse_json(value);
    IndexEntry e;
    e.record = wire::record_from_json(wire::require_field(j, "record"));
    for (const auto& n : wire::require_field(j, "alt_names")) {
        e.alt_names.push_back(n.get<std::string>());
    }
    for (const auto& s : wire::require_field(j, "servers")) {
        e.servers.push_back(s.get<std::string>());
    }
    return e;
}

json server_to_json(const ServerEntry& s) {
    json j{{"url", s.url},
           {"first_seen_unix_s", s.first_seen_unix_s},
           {"last_crawl_unix_s", s.last_crawl_unix_s},
           {"last_seen_unix_s", s.last_seen_unix_s},
           {"file_count", s.file_count},
           {"reachable", s.reachable}};
    if (s.latency_ms) j["latency_ms"] = *s.latency_ms;
    if (s.throughput_bps) j["throughput_bps"] = *s.throughput_bps;
    if (s.last_probed_unix_s) j["last_probed_unix_s"] = *s.last_probed_unix_s;
    return j;
}

ServerEntry server_from_json(const std::string& value) {
    json j = wire::parse_json(value);
    ServerEntry s;
    s.url = wire::require_string(j, "url");
    s.first_seen_unix_s = wire::require_int(j, "first_seen_unix_s");
    s.last_crawl_unix_s = wire::require_int(j, "last_crawl_unix_s");
    s.last_seen_unix_s = wire::require_int(j, "last_seen_unix_s");
    s.file_count = wire::require_uint(j, "file_count");
    s.reachable = wire::require_bool(j, "reachable");
    if (j.contains("latency_ms")) s.latency_ms = j["latency_ms"].get<double>();
    if (j.contains("throughput_bps")) s.throughput_bps = j["throughput_bps"].get<double>();
    if (j.contains("last_probed_unix_s")) {
        s.last_probed_unix_s = j["last_probed_unix_s"].get<int64_t>();
    }
    return s;
}

// every token for which this entry must be findable
std::set<std::string> entry_tokens(const IndexEntry& e) {
    std::set<std::string> out;
    for (const auto& t : tokenize_name(e.record.name)) out.insert(t);
    for (const auto& alt : e.alt_names) {
        for (const auto& t : tokenize_name(alt)) out.insert(t);
    }
    return out;
}

httplib::Client make_http_client(const net::UrlParts& parts, double timeout_s) {
    httplib::Client cli(parts.origin());
    auto timeout = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::duration<double>(timeout_s));
    cli.set_tcp_nodelay(true);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    cli.set_default_headers({{"User-Agent", net::kUserAgent}});
    return cli;
}

} // namespace

double ewma_update(std::optional<double> prev, double sample) {
    if (!prev) return sample;
    return kEwmaAlpha * sample + (1.0 - kEwmaAlpha) * *prev;
}

std::vector<std::string> tokenize_name(std::string_view name) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && seen.insert(cur).second) out.push_back(cur);
        cur.clear();
    };
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

// Mutation overlay collected under write_mu_, committed as one atomic batch.
struct Indexer::StagedState {
    Indexer& ix;
    // nullopt marks deletion
    std::map<std::string, std::optional<IndexEntry>> entries; // hash_hex keyed
    std::map<std::string, ServerEntry> servers;               // url keyed
    std::set<std::string> postings_add;
    std::set<std::string> postings_del;

    explicit StagedState(Indexer& owner) : ix(owner) {}

    IndexEntry* find_entry(const std::string& hash_hex) {
        auto it = entries.find(hash_hex);
        if (it == entries.end()) {
            auto loaded = ix.load_entry(hash_hex);
            if (!loaded) return nullptr;
            it = entries.emplace(hash_hex, std::move(*loaded)).first;
        }
        return it->second ? &*it->second : nullptr;
    }

    IndexEntry& create_entry(const std::string& hash_hex, const FileRecord& rec) {
        IndexEntry e;
        e.record = rec;
        entries[hash_hex] = std::move(e);
        IndexEntry& ref = *entries[hash_hex];
        for (const auto& t : entry_tokens(ref)) {
            postings_add.insert(posting_key(t, hash_hex));
        }
        return ref;
    }

    void delete_entry(const std::string& hash_hex, const IndexEntry& old) {
        for (const auto& t : entry_tokens(old)) {
            postings_del.insert(posting_key(t, hash_hex));
        }
        entries[hash_hex] = std::nullopt;
    }

    // merge a name observed for an existing entry; returns true if new
    bool merge_name(IndexEntry& e, const std::string& hash_hex, const std::string& name) {
        if (e.record.name == name) return false;
        if (std::find(e.alt_names.begin(), e.alt_names.end(), name) != e.alt_names.end()) {
            return false;
        }
        e.alt_names.push_back(name);
        for (const auto& t : tokenize_name(name)) {
            postings_add.insert(posting_key(t, hash_hex));
        }
        return true;
    }

    ServerEntry& touch_server(const std::string& url, int64_t now_s) {
        auto it = servers.find(url);
        if (it == servers.end()) {
            auto loaded = ix.load_server(url);
            if (loaded) {
                it = servers.emplace(url, std::move(*loaded)).first;
            } else {
                ServerEntry fresh;
                fresh.url = url;
                fresh.first_seen_unix_s = now_s;
                it = servers.emplace(url, std::move(fresh)).first;
            }
        }
        return it->second;
    }

    void commit() {
        WriteBatch batch;
        for (const auto& [hash_hex, entry] : entries) {
            if (entry) {
                batch.put(entry_key(hash_hex), entry_to_json(*entry).dump());
            } else {
                batch.del(entry_key(hash_hex));
            }
        }
        for (const auto& [url, sentry] : servers) {
            batch.put(server_key(url), server_to_json(sentry).dump());
        }
        for (const auto& k : postings_del) {
            if (!postings_add.count(k)) batch.del(k);
        }
        for (const auto& k : postings_add) batch.put(k, "");
        ix.store_->apply(batch);

        for (const auto& [hash_hex, entry] : entries) {
            if (entry) {
                ix.hot_entries_.put(hash_hex, *entry);
            } else {
                ix.hot_entries_.erase(hash_hex);
            }
        }
    }
};

Indexer::Indexer(IndexerConfig cfg, NowFn now, net::LoggerPtr log)
    : cfg_(std::move(cfg)),
      now_(std::move(now)),
      log_(std::move(log)),
      store_(KvStore::open(cfg_.db_dir)),
      hot_entries_(cfg_.cache_capacity) {
    if (cfg_.stale_ttl_s <= 0) cfg_.stale_ttl_s = 3 * cfg_.crawl_interval_s;
    set_peers(cfg_.peers);
}

std::vector<wire::PeerRef> Indexer::peers() const {
    std::lock_guard lock(peers_mu_);
    return peers_;
}

void Indexer::set_peers(std::vector<wire::PeerRef> peers) {
    std::set<std::string> seen;
    for (const auto& p : peers) {
        if (!seen.insert(p.url).second) {
            throw IoError("duplicate peer: " + p.url);
        }
        if (p.url == cfg_.self_url && p.is_upstream) {
            throw IoError("indexer cannot be its own upstream");
        }
    }
    std::lock_guard lock(peers_mu_);
    peers_ = std::move(peers);
}

void Indexer::set_self_url(const std::string& url) {
    cfg_.self_url = url;
}

std::optional<IndexEntry> Indexer::load_entry(const std::string& hash_hex) const {
    if (auto cached = hot_entries_.get(hash_hex)) return cached;
    auto raw = store_->get(entry_key(hash_hex));
    if (!raw) return std::nullopt;
    auto entry = entry_from_json(*raw);
    hot_entries_.put(hash_hex, entry);
    return entry;
}

std::optional<ServerEntry> Indexer::load_server(const std::string& url) const {
    auto raw = store_->get(server_key(url));
    if (!raw) return std::nullopt;
    return server_from_json(*raw);
}

size_t Indexer::entry_count() const {
    return store_->count_prefix(kEntryPrefix);
}

std::optional<ServerEntry> Indexer::server_entry(const std::string& url) const {
    return load_server(url);
}

std::optional<IndexEntry> Indexer::index_entry(const ContentHash& hash) const {
    return load_entry(hash.value());
}

CrawlOutcome Indexer::register_server(const std::string& url) {
    auto outcome = crawl(url);
    if (outcome.status == CrawlOutcome::Status::Ok && outcome.result.files_indexed > 0) {
        // propagate the fresh records upstream
        std::vector<wire::SyncRecord> records;
        store_->scan_prefix(kEntryPrefix, [&](const std::string&, const std::string& raw) {
            auto entry = entry_from_json(raw);
            if (std::find(entry.servers.begin(), entry.servers.end(), url) !=
                entry.servers.end()) {
                records.push_back(wire::SyncRecord{entry.record, url});
            }
            return true;
        });
        push_to_upstreams(records);
    }
    return outcome;
}

CrawlOutcome Indexer::crawl(const std::string& url) {
    CrawlOutcome out;
    auto parts = net::parse_url(url);
    if (!parts || !wire::is_absolute_http_url(url)) {
        out.status = CrawlOutcome::Status::InvalidUrl;
        out.detail = "url must be absolute http(s)";
        return out;
    }

    auto cli = make_http_client(*parts, cfg_.server_timeout_s);
    auto res = cli.Get(std::string(net::kApiPrefix) + "/list");
    int64_t now_s = now_();

    if (!res || res->status != 200) {
        std::lock_guard lock(write_mu_);
        StagedState staged(*this);
        auto& sentry = staged.touch_server(url, now_s);
        sentry.reachable = false;
        staged.commit();
        out.status = CrawlOutcome::Status::Unreachable;
        out.detail = "server did not answer the listing request";
        if (log_) log_->log("crawl failed server=" + net::url_tag(url));
        return out;
    }

    std::vector<FileRecord> listing;
    try {
        json arr = wire::parse_json(res->body);
        if (!arr.is_array()) {
            throw wire::WireError(wire::WireError::Kind::Schema, "listing must be an array");
        }
        std::set<std::string> seen_hashes;
        for (const auto& item : arr) {
            auto rec = wire::record_from_json(item);
            if (seen_hashes.insert(rec.hash.value()).second) {
                listing.push_back(std::move(rec));
            }
        }
    } catch (const wire::WireError& e) {
        // rejected whole: no partial ingest
        std::lock_guard lock(write_mu_);
        StagedState staged(*this);
        staged.touch_server(url, now_s);
        staged.commit();
        out.status = CrawlOutcome::Status::MalformedListing;
        out.detail = e.what();
        if (log_) log_->log("crawl rejected (malformed listing) server=" + net::url_tag(url));
        return out;
    }

    bool truncated = listing.size() > cfg_.cutoff;
    if (truncated) listing.resize(cfg_.cutoff);

    std::set<std::string> new_hashes;
    for (const auto& rec : listing) new_hashes.insert(rec.hash.value());

    {
        std::lock_guard lock(write_mu_);
        StagedState staged(*this);

        // detach records this server no longer lists
        std::vector<std::pair<std::string, IndexEntry>> stale;
        store_->scan_prefix(kEntryPrefix, [&](const std::string& key, const std::string& raw) {
            std::string hash_hex = key.substr(2);
            if (new_hashes.count(hash_hex)) return true;
            auto entry = entry_from_json(raw);
            if (std::find(entry.servers.begin(), entry.servers.end(), url) !=
                entry.servers.end()) {
                stale.emplace_back(std::move(hash_hex), std::move(entry));
            }
            return true;
        });
        for (auto& [hash_hex, entry] : stale) {
            entry.servers.erase(
                std::remove(entry.servers.begin(), entry.servers.end(), url),
                entry.servers.end());
            if (entry.servers.empty()) {
                staged.delete_entry(hash_hex, entry);
            } else {
                staged.entries[hash_hex] = std::move(entry);
            }
        }

        for (const auto& rec : listing) {
            const std::string& hash_hex = rec.hash.value();
            IndexEntry* entry = staged.find_entry(hash_hex);
            if (!entry) {
                staged.create_entry(hash_hex, rec).servers.push_back(url);
            } else {
                staged.merge_name(*entry, hash_hex, rec.name);
                if (std::find(entry->servers.begin(), entry->servers.end(), url) ==
                    entry->servers.end()) {
                    entry->servers.push_back(url);
                    std::sort(entry->servers.begin(), entry->servers.end());
                }
            }
        }

        auto& sentry = staged.touch_server(url, now_s);
        sentry.reachable = true;
        sentry.last_crawl_unix_s = now_s;
        sentry.last_seen_unix_s = now_s;
        sentry.file_count = listing.size();
        staged.commit();
    }

    out.status = CrawlOutcome::Status::Ok;
    out.result.files_indexed = int64_t(listing.size());
    out.result.truncated = truncated;
    if (log_) {
        log_->log("crawl ok server=" + net::url_tag(url) +
                  " files=" + std::to_string(listing.size()) +
                  (truncated ? " truncated" : ""));
    }
    return out;
}

void Indexer::push_to_upstreams(const std::vector<wire::SyncRecord>& records) {
    if (records.empty()) return;
    for (const auto& peer : peers()) {
        if (!peer.is_upstream) continue;
        auto parts = net::parse_url(peer.url);
        if (!parts) continue;
        auto cli = make_http_client(*parts, cfg_.peer_timeout_s);
        size_t pushed = 0;
        for (size_t off = 0; off < records.size(); off += wire::kMaxSyncBatchRecords) {
            wire::SyncBatch batch;
            batch.origin = cfg_.self_url.empty() ? cfg_.name : cfg_.self_url;
            size_t end = std::min(records.size(), off + wire::kMaxSyncBatchRecords);
            batch.records.assign(records.begin() + long(off), records.begin() + long(end));
            auto res = cli.Post(std::string(net::kApiPrefix) + "/sync",
                                wire::encode(batch), "application/json");
            if (!res || res->status != 200) break;
            pushed += batch.records.size();
        }
        if (log_) {
            log_->log("sync push upstream=" + net::url_tag(peer.url) +
                      " records=" + std::to_string(pushed));
        }
    }
}

size_t Indexer::sync_push(const wire::SyncBatch& batch) {
    wire::validate(batch);
    int64_t now_s = now_();
    size_t accepted = 0;

    std::lock_guard lock(write_mu_);
    StagedState staged(*this);
    for (const auto& rec : batch.records) {
        const std::string& hash_hex = rec.record.hash.value();
        auto& sentry = staged.touch_server(rec.server, now_s);
        sentry.last_seen_unix_s = now_s;

        IndexEntry* entry = staged.find_entry(hash_hex);
        bool attached = entry && std::find(entry->servers.begin(), entry->servers.end(),
                                           rec.server) != entry->servers.end();
        if (attached) {
            staged.merge_name(*entry, hash_hex, rec.record.name);
            ++accepted; // idempotent repeat still counts
            continue;
        }
        if (sentry.file_count >= cfg_.cutoff) continue; // hard cutoff
        if (!entry) {
            staged.create_entry(hash_hex, rec.record).servers.push_back(rec.server);
        } else {
            staged.merge_name(*entry, hash_hex, rec.record.name);
            entry->servers.push_back(rec.server);
            std::sort(entry->servers.begin(), entry->servers.end());
        }
        ++sentry.file_count;
        ++accepted;
    }
    staged.commit();
    if (log_) {
        log_->log("sync accepted=" + std::to_string(accepted) + "/" +
                  std::to_string(batch.records.size()));
    }
    return accepted;
}

wire::SearchHit Indexer::build_hit(const IndexEntry& entry) const {
    wire::SearchHit hit;
    hit.record = entry.record;
    for (const auto& url : entry.servers) {
        wire::ServerRef ref;
        ref.url = url;
        if (auto sentry = load_server(url)) {
            ref.latency_ms = sentry->latency_ms;
            ref.throughput_bps = sentry->throughput_bps;
            ref.last_probed_unix_s = sentry->last_probed_unix_s;
        }
        hit.sources.push_back(std::move(ref));
    }
    return hit;
}

SearchOutcome Indexer::finish_response(std::vector<wire::SearchHit> hits,
                                       bool truncated) const {
    SearchOutcome out;
    out.response.hits = std::move(hits);
    out.response.truncated = truncated;

    std::map<std::string, std::set<std::string>> by_name;
    for (const auto& h : out.response.hits) {
        by_name[h.record.name].insert(h.record.hash.value());
    }
    for (const auto& [name, hashes] : by_name) {
        if (hashes.size() > 1) out.conflicts.push_back(name);
    }
    return out;
}

SearchOutcome Indexer::search_local(const wire::SearchRequest& req) {
    wire::validate(req);

    if (req.hash) {
        auto entry = load_entry(req.hash->value());
        if (!entry || entry->servers.empty()) return finish_response({}, false);
        return finish_response({build_hit(*entry)}, false);
    }

    auto query_tokens = tokenize_name(*req.query);
    if (query_tokens.empty()) return finish_response({}, false);
    if (query_tokens.size() > 64) query_tokens.resize(64);
    uint64_t full_mask = query_tokens.size() == 64
                             ? ~uint64_t(0)
                             : ((uint64_t(1) << query_tokens.size()) - 1);

    // single ordered pass over the postings; a query token matches a name
    // token containing it as a substring
    std::map<std::string, uint64_t> matched; // hash -> query-token mask
    std::string last_token;
    uint64_t last_token_mask = 0;
    store_->scan_prefix(kPostingPrefix, [&](const std::string& key, const std::string&) {
        auto sep = key.rfind('/');
        std::string token = key.substr(2, sep - 2);
        std::string hash_hex = key.substr(sep + 1);
        if (token != last_token) {
            last_token = token;
            last_token_mask = 0;
            for (size_t i = 0; i < query_tokens.size(); ++i) {
                if (token.find(query_tokens[i]) != std::string::npos) {
                    last_token_mask |= uint64_t(1) << i;
                }
            }
        }
        if (last_token_mask) matched[hash_hex] |= last_token_mask;
        return true;
    });

    std::vector<wire::SearchHit> hits;
    bool truncated = false;
    for (const auto& [hash_hex, mask] : matched) {
        if (mask != full_mask) continue;
        if (hits.size() >= wire::kMaxSearchHits) {
            truncated = true;
            break;
        }
        auto entry = load_entry(hash_hex);
        if (entry && !entry->servers.empty()) {
            hits.push_back(build_hit(*entry));
        }
    }
    return finish_response(std::move(hits), truncated);
}

SearchOutcome Indexer::search_federated(const wire::SearchRequest& req) {
    auto local = search_local(req);
    if (!local.response.hits.empty()) return local;
    if (req.hop_budget <= 0) return local;

    std::set<std::string> visited(req.visited.begin(), req.visited.end());
    std::string self = cfg_.self_url.empty() ? cfg_.name : cfg_.self_url;
    visited.insert(self);

    std::string forwarded_visited;
    for (const auto& v : visited) {
        if (!forwarded_visited.empty()) forwarded_visited += ",";
        forwarded_visited += v;
    }

    std::map<std::string, wire::SearchHit> merged; // by hash
    bool truncated = false;

    for (const auto& peer : peers()) {
        if (visited.count(peer.url)) continue;
        auto parts = net::parse_url(peer.url);
        if (!parts) continue;

        auto cli = make_http_client(*parts, cfg_.peer_timeout_s);
        std::string path = std::string(net::kApiPrefix) + "/search?";
        if (req.hash) {
            path += "hash=" + req.hash->value();
        } else {
            path += "q=" + net::percent_encode(*req.query);
        }
        httplib::Headers headers{
            {net::kHopsHeader, std::to_string(req.hop_budget - 1)},
            {net::kVisitedHeader, forwarded_visited},
        };
        auto res = cli.Get(path, headers);
        if (!res || res->status != 200) {
            if (log_) log_->log("peer skipped peer=" + net::url_tag(peer.url));
            continue;
        }
        wire::SearchResponse peer_resp;
        try {
            peer_resp = wire::decode_search_response(res->body);
        } catch (const wire::WireError&) {
            if (log_) log_->log("peer response invalid peer=" + net::url_tag(peer.url));
            continue;
        }
        truncated = truncated || peer_resp.truncated;

        for (auto& hit : peer_resp.hits) {
            auto [it, inserted] = merged.try_emplace(hit.record.hash.value(), hit);
            if (!inserted) {
                // union the source sets
                auto& sources = it->second.sources;
                for (auto& src : hit.sources) {
                    auto same_url = [&](const wire::ServerRef& s) {
                        return s.url == src.url;
                    };
                    if (std::none_of(sources.begin(), sources.end(), same_url)) {
                        sources.push_back(std::move(src));
                    }
                }
                std::sort(sources.begin(), sources.end(),
                          [](const wire::ServerRef& a, const wire::ServerRef& b) {
                              return a.url < b.url;
                          });
            }
        }
    }

    std::vector<wire::SearchHit> hits;
    for (auto& [hash_hex, hit] : merged) {
        if (hits.size() >= wire::kMaxSearchHits) {
            truncated = true;
            break;
        }
        hits.push_back(std::move(hit));
    }
    return finish_response(std::move(hits), truncated);
}

ProbeOutcome Indexer::probe_server(const std::string& url) {
    ProbeOutcome out;
    auto existing = load_server(url);
    if (!existing) return out; // not registered

    auto parts = net::parse_url(url);
    if (!parts) return out;

    auto cli = make_http_client(*parts, cfg_.server_timeout_s);
    auto t0 = std::chrono::steady_clock::now();
    auto info = cli.Get(std::string(net::kApiPrefix) + "/info");
    auto t1 = std::chrono::steady_clock::now();

    if (!info || info->status != 200) {
        std::lock_guard lock(write_mu_);
        StagedState staged(*this);
        auto& sentry = staged.touch_server(url, now_());
        sentry.reachable = false;
        staged.commit();
        return out; // measurements left as they were
    }

    double latency_sample =
        std::chrono::duration<double, std::milli>(t1 - t0).count();

    // throughput: 64 KiB sample through a normal token download of the
    // smallest file this server is known to host (if any small enough)
    std::optional<double> throughput_sample;
    std::optional<std::pair<std::string, uint64_t>> smallest; // hash, size
    store_->scan_prefix(kEntryPrefix, [&](const std::string&, const std::string& raw) {
        auto entry = entry_from_json(raw);
        if (std::find(entry.servers.begin(), entry.servers.end(), url) ==
            entry.servers.end()) {
            return true;
        }
        if (entry.record.size_bytes > kThroughputMaxFileBytes) return true;
        if (!smallest || entry.record.size_bytes < smallest->second) {
            smallest = {entry.record.hash.value(), entry.record.size_bytes};
        }
        return true;
    });

    if (smallest) {
        auto grant_res = cli.Post(std::string(net::kApiPrefix) + "/token",
                                  "{\"hash\":\"" + smallest->first + "\"}",
                                  "application/json");
        if (grant_res && grant_res->status == 200) {
            try {
                auto grant = wire::decode_token_grant(grant_res->body);
                size_t received = 0;
                auto d0 = std::chrono::steady_clock::now();
                cli.Get("/dl/" + grant.token,
                        [&](const char*, size_t n) {
                            received += n;
                            return received < kThroughputSampleBytes;
                        });
                auto d1 = std::chrono::steady_clock::now();
                double secs = std::chrono::duration<double>(d1 - d0).count();
                if (received > 0 && secs > 0) {
                    throughput_sample = double(received) * 8.0 / secs; // bits/s
                }
            } catch (const wire::WireError&) {
            }
        }
    }

    int64_t now_s = now_();
    {
        std::lock_guard lock(write_mu_);
        StagedState staged(*this);
        auto& sentry = staged.touch_server(url, now_s);
        sentry.reachable = true;
        sentry.latency_ms = ewma_update(sentry.latency_ms, latency_sample);
        if (throughput_sample) {
            sentry.throughput_bps = ewma_update(sentry.throughput_bps, *throughput_sample);
        }
        sentry.last_probed_unix_s = now_s;
        staged.commit();

        out.reachable = true;
        out.latency_ms = sentry.latency_ms;
        out.throughput_bps = sentry.throughput_bps;
    }
    return out;
}

EvictOutcome Indexer::evict_stale() {
    EvictOutcome out;
    int64_t now_s = now_();
    int64_t ttl = cfg_.stale_ttl_s;

    std::lock_guard lock(write_mu_);

    std::vector<ServerEntry> stale;
    store_->scan_prefix(kServerPrefix, [&](const std::string&, const std::string& raw) {
        auto sentry = server_from_json(raw);
        bool expired = now_s - sentry.last_seen_unix_s > ttl;
        if (expired && (sentry.reachable || sentry.file_count > 0)) {
            stale.push_back(std::move(sentry));
        }
        return true;
    });
    if (stale.empty()) return out;

    StagedState staged(*this);
    std::set<std::string> evicted_urls;
    for (auto& sentry : stale) {
        evicted_urls.insert(sentry.url);
        sentry.reachable = false;
        sentry.file_count = 0;
        staged.servers[sentry.url] = std::move(sentry);
    }
    out.servers_evicted = stale.size();

    std::vector<std::pair<std::string, IndexEntry>> touched;
    store_->scan_prefix(kEntryPrefix, [&](const std::string& key, const std::string& raw) {
        auto entry = entry_from_json(raw);
        bool hit = std::any_of(entry.servers.begin(), entry.servers.end(),
                               [&](const std::string& u) { return evicted_urls.count(u); });
        if (hit) touched.emplace_back(key.substr(2), std::move(entry));
        return true;
    });
    for (auto& [hash_hex, entry] : touched) {
        std::erase_if(entry.servers,
                      [&](const std::string& u) { return evicted_urls.count(u) > 0; });
        if (entry.servers.empty()) {
            staged.delete_entry(hash_hex, entry);
            ++out.entries_removed;
        } else {
            staged.entries[hash_hex] = std::move(entry);
        }
    }
    staged.commit();

    if (log_) {
        log_->log("evicted servers=" + std::to_string(out.servers_evicted) +
                  " entries_removed=" + std::to_string(out.entries_removed));
    }
    return out;
}

void Indexer::recrawl_due() {
    int64_t now_s = now_();
    std::vector<std::string> due;
    store_->scan_prefix(kServerPrefix, [&](const std::string&, const std::string& raw) {
        auto sentry = server_from_json(raw);
        if (now_s - sentry.last_crawl_unix_s >= cfg_.crawl_interval_s) {
            due.push_back(sentry.url);
        }
        return true;
    });
    for (const auto& url : due) {
        auto outcome = crawl(url);
        if (outcome.status == CrawlOutcome::Status::Ok) {
            probe_server(url);
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP service
// ---------------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& detail) {
    res.status = status;
    res.set_content(wire::encode(wire::ErrorBody{code, detail}), "application/json");
}

} // namespace

struct IndexerService::Impl {
    Indexer core;
    net::LoggerPtr log;
    httplib::Server svr;
    std::thread listen_thread;
    std::thread scheduler;
    std::atomic<bool> stopping{false};
    std::atomic<bool> started{false};
    int port = 0;
    mutable std::mutex ua_mu;
    std::vector<std::string> observed_uas;

    Impl(IndexerConfig cfg, net::LoggerPtr logger, NowFn now)
        : core(std::move(cfg), std::move(now), logger), log(std::move(logger)) {}

    std::string base_url() const {
        return "http://" + core.config().listen_host + ":" + std::to_string(port);
    }

    void route() {
        svr.set_tcp_nodelay(true);
        svr.new_task_queue = [n = core.config().worker_threads] {
            return new httplib::ThreadPool(size_t(n));
        };

        if (core.config().record_user_agents) {
            svr.set_pre_routing_handler(
                [this](const httplib::Request& req, httplib::Response&) {
                    std::lock_guard lock(ua_mu);
                    observed_uas.push_back(req.get_header_value("User-Agent"));
                    return httplib::Server::HandlerResponse::Unhandled;
                });
        }

        svr.Get("/api/v1/info", [this](const httplib::Request&, httplib::Response& res) {
            res.set_content(wire::json{{"entries", core.entry_count()},
                                       {"name", core.config().name},
                                       {"version", "1.0"}}
                                .dump(),
                            "application/json");
        });

        svr.Get("/api/v1/peers", [this](const httplib::Request&, httplib::Response& res) {
            wire::json peers = wire::json::array();
            for (const auto& p : core.peers()) peers.push_back(wire::to_json(p));
            res.set_content(wire::json{{"peers", std::move(peers)}}.dump(),
                            "application/json");
        });

        svr.Post("/api/v1/register",
                 [this](const httplib::Request& req, httplib::Response& res) {
                     std::string url;
                     try {
                         url = wire::require_string(wire::parse_json(req.body), "url");
                     } catch (const wire::WireError& e) {
                         send_error(res, 400, "bad_request", e.what());
                         return;
                     }
                     auto out = core.register_server(url);
                     switch (out.status) {
                     case CrawlOutcome::Status::InvalidUrl:
                         send_error(res, 400, "invalid_url", out.detail);
                         return;
                     case CrawlOutcome::Status::Unreachable:
                         send_error(res, 502, "server_unreachable", out.detail);
                         return;
                     case CrawlOutcome::Status::MalformedListing:
                         send_error(res, 502, "malformed_listing", out.detail);
                         return;
                     case CrawlOutcome::Status::Ok:
                         break;
                     }
                     res.set_content(wire::encode(out.result), "application/json");
                 });

        svr.Get("/api/v1/search",
                [this](const httplib::Request& req, httplib::Response& res) {
                    bool has_q = req.has_param("q");
                    bool has_hash = req.has_param("hash");
                    if (has_q == has_hash) {
                        send_error(res, 400, "bad_request",
                                   "exactly one of q|hash is required");
                        return;
                    }
                    wire::SearchRequest sreq;
                    if (has_hash) {
                        auto h = ContentHash::parse(req.get_param_value("hash"));
                        if (!h) {
                            send_error(res, 400, "invalid_hash",
                                       "hash must be 64 lowercase hex chars");
                            return;
                        }
                        sreq.hash = *h;
                    } else {
                        sreq.query = req.get_param_value("q");
                    }

                    sreq.hop_budget = 2; // default for clientless callers
                    if (req.has_header(net::kHopsHeader)) {
                        try {
                            sreq.hop_budget =
                                std::stoi(req.get_header_value(net::kHopsHeader));
                        } catch (...) {
                            send_error(res, 400, "bad_request", "bad hops header");
                            return;
                        }
                    }
                    if (req.has_header(net::kVisitedHeader)) {
                        std::string joined = req.get_header_value(net::kVisitedHeader);
                        size_t start = 0;
                        while (start <= joined.size() && !joined.empty()) {
                            auto comma = joined.find(',', start);
                            auto part = joined.substr(
                                start, comma == std::string::npos ? std::string::npos
                                                                  : comma - start);
                            if (!part.empty()) sreq.visited.push_back(part);
                            if (comma == std::string::npos) break;
                            start = comma + 1;
                        }
                    }

                    SearchOutcome out;
                    try {
                        out = core.search_federated(sreq);
                    } catch (const wire::WireError& e) {
                        send_error(res, 400, "bad_request", e.what());
                        return;
                    }
                    if (!out.conflicts.empty()) {
                        std::string joined;
                        for (const auto& name : out.conflicts) {
                            if (!joined.empty()) joined += ",";
                            joined += net::percent_encode(name);
                        }
                        res.set_header(net::kConflictsHeader, joined);
                    }
                    if (log) {
                        log->log(std::string("search ") + (has_hash ? "hash" : "text") +
                                 " hits=" + std::to_string(out.response.hits.size()));
                    }
                    res.set_content(wire::encode(out.response), "application/json");
                });

        svr.Post("/api/v1/sync",
                 [this](const httplib::Request& req, httplib::Response& res) {
                     wire::SyncBatch batch;
                     try {
                         batch = wire::decode_sync_batch(req.body);
                     } catch (const wire::WireError& e) {
                         send_error(res, 400, "bad_request", e.what());
                         return;
                     }
                     size_t accepted = core.sync_push(batch);
                     res.set_content(wire::json{{"accepted", accepted}}.dump(),
                                     "application/json");
                 });
    }
};

IndexerService::IndexerService(IndexerConfig cfg, net::LoggerPtr log, NowFn now)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(log), std::move(now))) {}

IndexerService::~IndexerService() {
    stop();
}

void IndexerService::start() {
    impl_->route();
    const auto& cfg = impl_->core.config();

    if (cfg.listen_port == 0) {
        impl_->port = impl_->svr.bind_to_any_port(cfg.listen_host);
        if (impl_->port <= 0) throw IoError("cannot bind " + cfg.listen_host);
    } else {
        if (!impl_->svr.bind_to_port(cfg.listen_host, cfg.listen_port)) {
            throw IoError("cannot bind " + cfg.listen_host + ":" +
                          std::to_string(cfg.listen_port));
        }
        impl_->port = cfg.listen_port;
    }
    if (impl_->core.config().self_url.empty()) {
        impl_->core.set_self_url(impl_->base_url());
    }

    impl_->listen_thread = std::thread([this] { impl_->svr.listen_after_bind(); });
    impl_->svr.wait_until_ready();

    if (cfg.scheduler_enabled) {
        impl_->scheduler = std::thread([this] {
            auto tick = std::chrono::milliseconds(impl_->core.config().scheduler_tick_ms);
            while (!impl_->stopping.load()) {
                std::this_thread::sleep_for(tick);
                if (impl_->stopping.load()) break;
                try {
                    impl_->core.recrawl_due();
                    impl_->core.evict_stale();
                } catch (const std::exception& e) {
                    if (impl_->log) impl_->log->log(std::string("scheduler: ") + e.what());
                }
            }
        });
    }

    impl_->started = true;
    if (impl_->log) {
        impl_->log->log("indexer up entries=" + std::to_string(impl_->core.entry_count()));
    }
}

void IndexerService::stop() {
    if (!impl_ || !impl_->started.exchange(false)) {
        if (impl_) impl_->stopping = true;
        return;
    }
    impl_->stopping = true;
    impl_->svr.stop();
    if (impl_->listen_thread.joinable()) impl_->listen_thread.join();
    if (impl_->scheduler.joinable()) impl_->scheduler.join();
}

int IndexerService::port() const { return impl_->port; }

std::string IndexerService::base_url() const { return impl_->base_url(); }

Indexer& IndexerService::core() { return impl_->core; }

std::vector<std::string> IndexerService::observed_user_agents() const {
    std::lock_guard lock(impl_->ua_mu);
    return impl_->observed_uas;
}

} // namespace distrifs::indexer
