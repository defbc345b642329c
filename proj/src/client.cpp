#include "distrifs/client.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include <sys/wait.h>

#include <httplib.h>

#include "distrifs/sha256.hpp"

namespace distrifs::client {

using wire::json;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kBlockedSuffix = ".blocked";
constexpr const char* kPartSuffix = ".part";

httplib::Client make_http_client(const net::UrlParts& parts, double timeout_s,
                                 const std::string& user_agent) {
    httplib::Client cli(parts.origin());
    auto timeout = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::duration<double>(timeout_s));
    cli.set_tcp_nodelay(true);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    cli.set_default_headers({{"User-Agent", user_agent}});
    return cli;
}

json config_to_json(const ClientConfig& c) {
    json indexers = json::array();
    for (const auto& ref : c.indexers) {
        indexers.push_back(json{{"is_default", ref.is_default}, {"url", ref.url}});
    }
    json j{{"indexers", std::move(indexers)},
           {"security_mode", c.mode == SecurityMode::Strict ? "strict" : "permissive"}};
    if (c.scanner_command) j["scanner_command"] = *c.scanner_command;
    if (c.user_agent != net::kUserAgent) j["user_agent"] = c.user_agent;
    return j;
}

ClientConfig config_from_json(const json& j) {
    ClientConfig c;
    for (const auto& item : wire::require_field(j, "indexers")) {
        IndexerRef ref;
        ref.url = wire::require_string(item, "url");
        ref.is_default = wire::require_bool(item, "is_default");
        c.indexers.push_back(std::move(ref));
    }
    auto mode = wire::require_string(j, "security_mode");
    if (mode == "strict") {
        c.mode = SecurityMode::Strict;
    } else if (mode == "permissive") {
        c.mode = SecurityMode::Permissive;
    } else {
        throw wire::WireError(wire::WireError::Kind::Validation,
                              "security_mode must be strict|permissive");
    }
    if (j.contains("scanner_command")) {
        c.scanner_command = j["scanner_command"].get<std::string>();
    }
    if (j.contains("user_agent")) c.user_agent = j["user_agent"].get<std::string>();
    return c;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out.push_back(c);
        }
    }
    out += "'";
    return out;
}

struct ScanResult {
    ScannerVerdict verdict;
    std::string detail;
};

ScanResult run_scanner(const std::string& command, const std::filesystem::path& target) {
    std::string cmdline = command + " " + shell_quote(target.string()) + " 2>&1";
    FILE* pipe = popen(cmdline.c_str(), "r");
    if (!pipe) return {ScannerVerdict::Skipped, "scanner could not be started"};

    std::string output;
    char buf[512];
    while (fgets(buf, sizeof(buf), pipe)) output += buf;
    int status = pclose(pipe);

    if (output.size() > 300) output = output.substr(output.size() - 300);
    while (!output.empty() && (output.back() == '\n' || output.back() == '\r')) {
        output.pop_back();
    }

    if (WIFEXITED(status)) {
        int code = WEXITSTATUS(status);
        if (code == 0) return {ScannerVerdict::Clean, output};
        if (code == 1) return {ScannerVerdict::Flagged, output};
        return {ScannerVerdict::Skipped,
                "scanner exited with status " + std::to_string(code)};
    }
    return {ScannerVerdict::Skipped, "scanner terminated abnormally"};
}

} // namespace

std::vector<IndexerRef> default_indexers() {
    return {
        {"https://index1.distrifs.example", true},
        {"https://index2.distrifs.example", true},
    };
}

std::filesystem::path default_config_dir() {
    if (const char* env = std::getenv("DISTRIFS_CONFIG_DIR")) return env;
    if (const char* xdg = std::getenv("XDG_CONFIG_HOME")) {
        return std::filesystem::path(xdg) / "distrifs";
    }
    if (const char* home = std::getenv("HOME")) {
        return std::filesystem::path(home) / ".config" / "distrifs";
    }
    return std::filesystem::current_path() / ".distrifs";
}

BootstrapResult bootstrap(const std::filesystem::path& config_dir) {
    BootstrapResult out;
    auto file = config_dir / kConfigFile;

    if (std::filesystem::exists(file)) {
        std::ifstream in(file);
        std::string text(std::istreambuf_iterator<char>(in), {});
        try {
            out.config = config_from_json(wire::parse_json(text));
        } catch (const wire::WireError& e) {
            throw ClientError(ClientError::Kind::Config,
                              "corrupt config file " + file.string() + ": " + e.what());
        }
        return out;
    }

    out.config.indexers = default_indexers();
    try {
        save_config(config_dir, out.config);
    } catch (const std::exception& e) {
        out.notices.push_back(std::string("config dir not writable (") + e.what() +
                              "), using in-memory defaults");
    }
    return out;
}

void save_config(const std::filesystem::path& config_dir, const ClientConfig& config) {
    std::filesystem::create_directories(config_dir);
    auto file = config_dir / kConfigFile;
    auto tmp = config_dir / (std::string(kConfigFile) + ".tmp");
    {
        std::ofstream outf(tmp, std::ios::trunc);
        if (!outf.is_open()) throw IoError("cannot write " + tmp.string());
        outf << config_to_json(config).dump(2) << "\n";
        if (!outf) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, file);
}

void add_indexer(const std::filesystem::path& config_dir, ClientConfig& config,
                 const std::string& url) {
    if (!wire::is_absolute_http_url(url)) {
        throw ClientError(ClientError::Kind::Config,
                          "indexer url must be absolute http(s): " + url);
    }
    for (const auto& ref : config.indexers) {
        if (ref.url == url) {
            throw ClientError(ClientError::Kind::Config, "indexer already present: " + url);
        }
    }
    config.indexers.push_back({url, false});
    save_config(config_dir, config);
}

void remove_indexer(const std::filesystem::path& config_dir, ClientConfig& config,
                    const std::string& url) {
    auto it = std::find_if(config.indexers.begin(), config.indexers.end(),
                           [&](const IndexerRef& r) { return r.url == url; });
    if (it == config.indexers.end()) {
        throw ClientError(ClientError::Kind::Config, "indexer not configured: " + url);
    }
    if (config.indexers.size() == 1) {
        throw ClientError(ClientError::Kind::Config,
                          "refusing to remove the last indexer");
    }
    config.indexers.erase(it);
    save_config(config_dir, config);
}

wire::json report_to_json(const DownloadReport& r) {
    json j{{"actual", r.actual.empty() ? "" : r.actual.value()},
           {"expected", r.expected.value()},
           {"output", r.output.string()},
           {"server_used", r.server_used},
           {"verdict", r.verdict == DownloadReport::Verdict::Verified ? "verified"
                                                                      : "blocked"}};
    switch (r.scanner_verdict) {
    case ScannerVerdict::Clean: j["scanner"] = "clean"; break;
    case ScannerVerdict::Flagged: j["scanner"] = "flagged"; break;
    case ScannerVerdict::Skipped: j["scanner"] = "skipped"; break;
    }
    if (!r.blocked_reason.empty()) j["blocked_reason"] = r.blocked_reason;
    if (!r.scanner_detail.empty()) j["scanner_detail"] = r.scanner_detail;
    if (!r.notes.empty()) j["notes"] = r.notes;
    return j;
}

DownloadReport report_from_json(const wire::json& j) {
    DownloadReport r;
    r.output = wire::require_string(j, "output");
    auto expected = ContentHash::parse(wire::require_string(j, "expected"));
    if (!expected) {
        throw wire::WireError(wire::WireError::Kind::Validation, "bad expected hash");
    }
    r.expected = *expected;
    auto actual_hex = wire::require_string(j, "actual");
    if (!actual_hex.empty()) {
        auto actual = ContentHash::parse(actual_hex);
        if (!actual) {
            throw wire::WireError(wire::WireError::Kind::Validation, "bad actual hash");
        }
        r.actual = *actual;
    }
    auto verdict = wire::require_string(j, "verdict");
    r.verdict = verdict == "verified" ? DownloadReport::Verdict::Verified
                                      : DownloadReport::Verdict::Blocked;
    auto scanner = wire::require_string(j, "scanner");
    if (scanner == "clean") r.scanner_verdict = ScannerVerdict::Clean;
    else if (scanner == "flagged") r.scanner_verdict = ScannerVerdict::Flagged;
    else r.scanner_verdict = ScannerVerdict::Skipped;
    r.server_used = wire::require_string(j, "server_used");
    if (j.contains("blocked_reason")) r.blocked_reason = j["blocked_reason"];
    if (j.contains("scanner_detail")) r.scanner_detail = j["scanner_detail"];
    if (j.contains("notes")) {
        for (const auto& n : j["notes"]) r.notes.push_back(n.get<std::string>());
    }
    return r;
}

Client::Client(ClientConfig config, ClientOptions opts)
    : config_(std::move(config)), opts_(std::move(opts)) {
    if (!opts_.confirm) {
        opts_.confirm = [](const FileRecord&, const std::string&) { return true; };
    }
}

void Client::note(const std::string& line) {
    if (opts_.notice) opts_.notice(line);
}

namespace {

struct IndexerAnswer {
    std::string indexer_url;
    std::optional<wire::SearchResponse> response;
    std::string error;
};

} // namespace

SearchResult Client::fan_out(const std::optional<std::string>& query,
                             const std::optional<ContentHash>& hash) {
    if (config_.indexers.empty()) {
        throw ClientError(ClientError::Kind::NoIndexer, "no indexers configured");
    }

    // query every configured indexer concurrently
    std::vector<IndexerAnswer> answers(config_.indexers.size());
    {
        std::vector<std::thread> threads;
        for (size_t i = 0; i < config_.indexers.size(); ++i) {
            threads.emplace_back([&, i] {
                auto& ans = answers[i];
                ans.indexer_url = config_.indexers[i].url;
                auto parts = net::parse_url(ans.indexer_url);
                if (!parts) {
                    ans.error = "invalid url";
                    return;
                }
                auto cli =
                    make_http_client(*parts, opts_.indexer_timeout_s, config_.user_agent);
                std::string path = std::string(net::kApiPrefix) + "/search?";
                if (hash) {
                    path += "hash=" + hash->value();
                } else {
                    path += "q=" + net::percent_encode(*query);
                }
                auto res =
                    cli.Get(path, {{net::kHopsHeader, std::to_string(opts_.hop_budget)}});
                if (!res) {
                    ans.error = "unreachable";
                    return;
                }
                if (res->status != 200) {
                    ans.error = "http " + std::to_string(res->status);
                    return;
                }
                try {
                    ans.response = wire::decode_search_response(res->body);
                } catch (const wire::WireError& e) {
                    ans.error = std::string("bad response: ") + e.what();
                }
            });
        }
        for (auto& t : threads) t.join();
    }

    SearchResult out;
    size_t reachable = 0;
    std::map<std::string, wire::SearchHit> merged;      // by hash
    std::map<std::string, std::set<std::string>> names; // name -> hashes seen

    for (const auto& ans : answers) {
        if (!ans.response) {
            out.warnings.push_back("indexer " + ans.indexer_url + " skipped: " + ans.error);
            continue;
        }
        ++reachable;
        for (const auto& hit : ans.response->hits) {
            names[hit.record.name].insert(hit.record.hash.value());
            auto [it, inserted] = merged.try_emplace(hit.record.hash.value(), hit);
            if (!inserted) {
                auto& sources = it->second.sources;
                for (const auto& src : hit.sources) {
                    auto same = [&](const wire::ServerRef& s) { return s.url == src.url; };
                    if (std::none_of(sources.begin(), sources.end(), same)) {
                        sources.push_back(src);
                    }
                }
                std::sort(sources.begin(), sources.end(),
                          [](const wire::ServerRef& a, const wire::ServerRef& b) {
                              return a.url < b.url;
                          });
            }
        }
    }

    if (reachable == 0) {
        throw ClientError(ClientError::Kind::NoIndexer, "no indexer reachable");
    }

    for (const auto& [name, hashes] : names) {
        if (hashes.size() > 1) {
            std::string joined;
            for (const auto& h : hashes) {
                if (!joined.empty()) joined += ", ";
                joined += h;
            }
            out.warnings.push_back("name \"" + name +
                                   "\" maps to different hashes across indexers: " + joined);
        }
    }
    for (auto& [h, hit] : merged) out.hits.push_back(std::move(hit));
    return out;
}

SearchResult Client::search_text(const std::string& query) {
    return fan_out(query, std::nullopt);
}

SearchResult Client::search_hash(const ContentHash& hash) {
    return fan_out(std::nullopt, hash);
}

std::vector<Client::Candidate> Client::rank_candidates(
    const std::vector<wire::ServerRef>& sources, std::vector<std::string>* attempts) {
    std::vector<Candidate> alive;
    for (const auto& src : sources) {
        auto parts = net::parse_url(src.url);
        if (!parts) {
            if (attempts) attempts->push_back(src.url + ": invalid url");
            continue;
        }
        auto cli = make_http_client(*parts, opts_.server_timeout_s, config_.user_agent);
        auto t0 = std::chrono::steady_clock::now();
        auto res = cli.Get(std::string(net::kApiPrefix) + "/info");
        auto t1 = std::chrono::steady_clock::now();
        if (!res || res->status != 200) {
            if (attempts) attempts->push_back(src.url + ": unreachable");
            continue;
        }
        Candidate c;
        c.ref = src;
        c.measured_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        alive.push_back(std::move(c));
    }
    if (alive.empty()) return alive;

    std::sort(alive.begin(), alive.end(), [](const Candidate& a, const Candidate& b) {
        return a.measured_ms < b.measured_ms;
    });

    // latency ties (within 20% of the best) break on throughput, exact
    // remaining ties uniformly at random
    double best = alive.front().measured_ms;
    size_t tie_end = 0;
    while (tie_end < alive.size() && alive[tie_end].measured_ms <= best * 1.2) {
        ++tie_end;
    }

    uint64_t seed = opts_.selection_seed;
    if (seed == 0) {
        std::random_device rd;
        seed = (uint64_t(rd()) << 32) ^ rd();
    }
    std::mt19937_64 rng(seed);
    std::shuffle(alive.begin(), alive.begin() + long(tie_end), rng);
    std::stable_sort(alive.begin(), alive.begin() + long(tie_end),
                     [](const Candidate& a, const Candidate& b) {
                         double ta = a.ref.throughput_bps.value_or(-1);
                         double tb = b.ref.throughput_bps.value_or(-1);
                         return ta > tb;
                     });
    return alive;
}

wire::ServerRef Client::select_server(const wire::SearchHit& hit) {
    if (hit.sources.empty()) {
        throw ClientError(ClientError::Kind::NoServer, "hit has no sources");
    }
    std::vector<std::string> attempts;
    auto ranked = rank_candidates(hit.sources, &attempts);
    if (ranked.empty()) {
        std::string detail;
        for (const auto& a : attempts) detail += "\n  " + a;
        throw ClientError(ClientError::Kind::NoServer,
                          "no server reachable; attempts:" + detail);
    }
    return ranked.front().ref;
}

DownloadReport Client::download(const ContentHash& hash, const std::filesystem::path& out,
                                const std::optional<std::string>& direct_server) {
    std::vector<wire::ServerRef> sources;
    std::vector<std::string> search_warnings;
    if (direct_server) {
        wire::ServerRef ref;
        ref.url = *direct_server;
        sources.push_back(std::move(ref));
    } else {
        auto result = search_hash(hash);
        search_warnings = result.warnings;
        for (const auto& w : result.warnings) note(w);
        for (const auto& hit : result.hits) {
            if (hit.record.hash == hash) sources = hit.sources;
        }
        if (sources.empty()) {
            throw ClientError(ClientError::Kind::NoSource,
                              "no file found for hash " + hash.value() +
                                  "; the download fails");
        }
    }

    std::vector<std::string> attempts;
    auto ranked = rank_candidates(sources, &attempts);
    if (ranked.empty()) {
        std::string detail;
        for (const auto& a : attempts) detail += "\n  " + a;
        throw ClientError(ClientError::Kind::NoServer,
                          "no server reachable; attempts:" + detail);
    }

    DownloadReport report;
    report.output = out;
    report.expected = hash;
    report.notes = search_warnings;

    auto part = std::filesystem::path(out.string() + kPartSuffix);
    auto blocked = std::filesystem::path(out.string() + kBlockedSuffix);

    bool mismatch_retried = false;
    bool saw_queue_timeout = false;

    for (size_t i = 0; i < ranked.size(); ++i) {
        const std::string& server_url = ranked[i].ref.url;
        report.server_used = server_url;
        auto parts = net::parse_url(server_url);
        if (!parts) continue;

        // metadata first: lets the user confirm what they are fetching
        auto meta_cli =
            make_http_client(*parts, opts_.server_timeout_s, config_.user_agent);
        auto meta_res =
            meta_cli.Get(std::string(net::kApiPrefix) + "/meta/" + hash.value());
        if (!meta_res || meta_res->status != 200) {
            note("server " + server_url + " has no metadata for the hash, skipping");
            continue;
        }
        FileRecord meta;
        try {
            meta = wire::decode_file_record(meta_res->body);
        } catch (const wire::WireError&) {
            note("server " + server_url + " sent a bad record, skipping");
            continue;
        }
        if (!(meta.hash == hash)) {
            note("server " + server_url + " lied about the hash, skipping");
            continue;
        }

        if (config_.mode == SecurityMode::Strict) {
            if (!opts_.confirm(meta, server_url)) {
                throw ClientError(ClientError::Kind::Declined,
                                  "download not confirmed");
            }
        }

        // token request; the server may hang us in its queue
        auto token_cli =
            make_http_client(*parts, opts_.queue_deadline_s, config_.user_agent);
        auto token_res = token_cli.Post(std::string(net::kApiPrefix) + "/token",
                                        "{\"hash\":\"" + hash.value() + "\"}",
                                        "application/json");
        if (!token_res) {
            note("server " + server_url + " dropped the token request, skipping");
            continue;
        }
        if (token_res->status == 503) {
            saw_queue_timeout = true;
            note("server " + server_url + " queue is full, skipping");
            continue;
        }
        if (token_res->status != 200) {
            note("server " + server_url + " refused a token (http " +
                 std::to_string(token_res->status) + "), skipping");
            continue;
        }
        wire::TokenGrant grant;
        try {
            grant = wire::decode_token_grant(token_res->body);
        } catch (const wire::WireError&) {
            note("server " + server_url + " sent a bad token grant, skipping");
            continue;
        }

        // stream to a temp file, hashing as bytes arrive
        std::ofstream sink(part, std::ios::binary | std::ios::trunc);
        if (!sink.is_open()) {
            throw IoError("cannot write " + part.string());
        }
        Sha256 hasher;
        uint64_t received = 0;
        auto dl_cli = make_http_client(*parts, opts_.server_timeout_s, config_.user_agent);
        auto dl_res = dl_cli.Get("/dl/" + grant.token, [&](const char* data, size_t n) {
            hasher.update(data, n);
            sink.write(data, std::streamsize(n));
            received += n;
            return bool(sink);
        });
        sink.close();

        if (!dl_res || dl_res->status != 200 || received != meta.size_bytes) {
            std::error_code ec;
            std::filesystem::remove(part, ec);
            note("stream from " + server_url + " failed, skipping");
            continue;
        }

        auto digest = hasher.finish();
        report.actual = ContentHash::from_digest(digest.data());

        if (!(report.actual == hash)) {
            // quarantine: bad bytes never land under the intended name
            std::error_code ec;
            std::filesystem::remove(blocked, ec);
            std::filesystem::rename(part, blocked);
            note("hash mismatch from " + server_url + "; quarantined as " +
                 blocked.string());
            report.notes.push_back("mismatch via " + server_url);
            if (!mismatch_retried && i + 1 < ranked.size()) {
                mismatch_retried = true; // one retry through a different path
                note("retrying via a different server");
                continue;
            }
            report.verdict = DownloadReport::Verdict::Blocked;
            report.blocked_reason = "hash mismatch";
            report.scanner_verdict = ScannerVerdict::Skipped;
            return report;
        }

        // verified; scan before the file lands under its real name
        if (config_.scanner_command) {
            auto scan = run_scanner(*config_.scanner_command, part);
            report.scanner_verdict = scan.verdict;
            report.scanner_detail = scan.detail;
            if (scan.verdict == ScannerVerdict::Flagged) {
                std::error_code ec;
                std::filesystem::remove(blocked, ec);
                std::filesystem::rename(part, blocked);
                report.verdict = DownloadReport::Verdict::Blocked;
                report.blocked_reason = "scanner";
                note("scanner flagged the file; quarantined as " + blocked.string());
                return report;
            }
            if (scan.verdict == ScannerVerdict::Skipped) {
                note("warning: scanner did not run (" + scan.detail + ")");
            }
        } else {
            report.scanner_verdict = ScannerVerdict::Skipped;
            note("warning: virus scanning is enabled but no scanner is configured; "
                 "set scanner_command to enable it");
        }

        std::filesystem::rename(part, out);
        report.verdict = DownloadReport::Verdict::Verified;
        return report;
    }

    if (saw_queue_timeout) {
        throw ClientError(ClientError::Kind::QueueBusy,
                          "every server is busy; retry later");
    }
    throw ClientError(ClientError::Kind::NoServer,
                      "download failed: no server delivered the file");
}

VerificationOutcome Client::verify(const std::filesystem::path& path,
                                   const ContentHash& expected) const {
    return verify_file(path, expected);
}

} // namespace distrifs::client
