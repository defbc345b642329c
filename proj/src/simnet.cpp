#include "distrifs/simnet.hpp"

#include <chrono>
#include <fstream>
#include <thread>

#include <unistd.h>

#include <httplib.h>

namespace distrifs::simnet {

using wire::json;

std::string fixture_bytes(uint64_t seed, uint64_t size) {
    // splitmix64 stream
    std::string out(size, '\0');
    uint64_t state = seed * 0x9e3779b97f4a7c15ULL + 0xbf58476d1ce4e5b9ULL;
    size_t i = 0;
    while (i < size) {
        state += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
        for (int b = 0; b < 8 && i < size; ++b) {
            out[i++] = char((z >> (b * 8)) & 0xff);
        }
    }
    return out;
}

Topology topology_from_json(const json& j) {
    Topology topo;
    if (j.contains("servers")) {
        for (const auto& sj : j["servers"]) {
            ServerSpec spec;
            if (sj.contains("files")) {
                for (const auto& fj : sj["files"]) {
                    FileSpec f;
                    f.rel_path = wire::require_string(fj, "rel_path");
                    f.size_bytes = wire::require_uint(fj, "size_bytes");
                    f.seed = wire::require_uint(fj, "seed");
                    spec.files.push_back(std::move(f));
                }
            }
            if (sj.contains("injected_latency_ms")) {
                spec.injected_latency_ms = int(sj["injected_latency_ms"].get<int64_t>());
            }
            if (sj.contains("tamper")) spec.tamper = sj["tamper"].get<bool>();
            if (sj.contains("max_concurrent")) {
                spec.max_concurrent = int(sj["max_concurrent"].get<int64_t>());
            }
            if (sj.contains("queue_timeout_s")) {
                spec.queue_timeout_s = sj["queue_timeout_s"].get<double>();
            }
            if (sj.contains("token_ttl_s")) {
                spec.token_ttl_s = sj["token_ttl_s"].get<int64_t>();
            }
            if (sj.contains("stream_chunk_delay_ms")) {
                spec.stream_chunk_delay_ms =
                    int(sj["stream_chunk_delay_ms"].get<int64_t>());
            }
            topo.servers.push_back(std::move(spec));
        }
    }
    if (j.contains("indexers")) {
        for (const auto& ij : j["indexers"]) {
            IndexerSpec spec;
            if (ij.contains("peers")) {
                for (const auto& p : ij["peers"]) spec.peers.push_back(p.get<size_t>());
            }
            if (ij.contains("upstreams")) {
                for (const auto& u : ij["upstreams"]) {
                    spec.upstreams.push_back(u.get<size_t>());
                }
            }
            if (ij.contains("cutoff")) spec.cutoff = ij["cutoff"].get<size_t>();
            if (ij.contains("crawl_interval_s")) {
                spec.crawl_interval_s = ij["crawl_interval_s"].get<int64_t>();
            }
            if (ij.contains("scheduler_enabled")) {
                spec.scheduler_enabled = ij["scheduler_enabled"].get<bool>();
            }
            topo.indexers.push_back(std::move(spec));
        }
    }
    if (j.contains("registrations")) {
        for (const auto& rj : j["registrations"]) {
            Registration r;
            r.indexer = wire::require_uint(rj, "indexer");
            r.server = wire::require_uint(rj, "server");
            topo.registrations.push_back(r);
        }
    }
    return topo;
}

SimClock::SimClock()
    : base_(std::chrono::duration_cast<std::chrono::seconds>(
                std::chrono::system_clock::now().time_since_epoch())
                .count()),
      offset_(std::make_shared<std::atomic<int64_t>>(0)) {}

int64_t SimClock::now() const {
    int64_t real = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
    return real + offset_->load();
}

void SimClock::advance(int64_t seconds) {
    offset_->fetch_add(seconds);
}

net::NowFn SimClock::fn() {
    auto offset = offset_;
    return [offset] {
        int64_t real = std::chrono::duration_cast<std::chrono::seconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count();
        return real + offset->load();
    };
}

SimNet::SimNet(uint64_t seed) : seed_(seed) {
    auto tmpl = (std::filesystem::temp_directory_path() / "distrifs-sim.XXXXXX").string();
    std::string buf = tmpl;
    if (!mkdtemp(buf.data())) throw IoError("mkdtemp failed for simnet root");
    root_ = buf;
}

SimNet::~SimNet() {
    teardown();
}

void SimNet::spawn(const Topology& topology) {
    try {
        // servers first: their URLs are crawl targets
        for (size_t i = 0; i < topology.servers.size(); ++i) {
            const auto& spec = topology.servers[i];
            ServerInstance inst;
            inst.dir = root_ / ("server" + std::to_string(i));
            std::filesystem::create_directories(inst.dir);
            for (const auto& f : spec.files) {
                auto bytes = fixture_bytes(f.seed, f.size_bytes);
                auto path = inst.dir / f.rel_path;
                std::filesystem::create_directories(path.parent_path());
                std::ofstream out(path, std::ios::binary);
                out.write(bytes.data(), std::streamsize(bytes.size()));
                if (!out) throw IoError("fixture write failed: " + path.string());
                inst.files.emplace_back(f.rel_path, compute_hash(bytes));
            }

            server::ServeConfig cfg;
            cfg.root = inst.dir;
            cfg.name = "sim-server-" + std::to_string(i);
            cfg.max_concurrent = spec.max_concurrent;
            cfg.queue_wait_timeout_s = spec.queue_timeout_s;
            cfg.token_ttl_s = spec.token_ttl_s;
            cfg.worker_threads = spec.worker_threads;
            cfg.record_grant_order = true;
            cfg.record_user_agents = true;
            cfg.fault.added_latency_ms = spec.injected_latency_ms;
            cfg.fault.tamper_first_byte = spec.tamper;
            cfg.fault.stream_chunk_delay_ms = spec.stream_chunk_delay_ms;

            inst.log = std::make_shared<std::ostringstream>();
            auto logger = net::make_logger(cfg.name, inst.log.get());
            inst.service = std::make_unique<server::FileServerService>(
                cfg, logger, clock_.fn());
            inst.service->start();
            inst.url = inst.service->base_url();
            servers_.push_back(std::move(inst));
        }

        // indexers next; peers are wired once every port is known
        for (size_t i = 0; i < topology.indexers.size(); ++i) {
            const auto& spec = topology.indexers[i];
            IndexerInstance inst;
            inst.dir = root_ / ("indexer" + std::to_string(i));

            indexer::IndexerConfig cfg;
            cfg.db_dir = inst.dir / "db";
            cfg.name = "sim-indexer-" + std::to_string(i);
            cfg.cutoff = spec.cutoff;
            cfg.crawl_interval_s = spec.crawl_interval_s;
            cfg.stale_ttl_s = spec.stale_ttl_s;
            cfg.peer_timeout_s = spec.peer_timeout_s;
            cfg.server_timeout_s = spec.peer_timeout_s;
            cfg.scheduler_enabled = spec.scheduler_enabled;
            cfg.scheduler_tick_ms = spec.scheduler_tick_ms;
            cfg.record_user_agents = true;
            cfg.worker_threads = 16;

            inst.log = std::make_shared<std::ostringstream>();
            auto logger = net::make_logger(cfg.name, inst.log.get());
            inst.service = std::make_unique<indexer::IndexerService>(
                cfg, logger, clock_.fn());
            inst.service->start();
            inst.url = inst.service->base_url();
            inst.config = cfg;
            inst.config.listen_port = inst.service->port();
            inst.config.self_url = inst.url;
            indexers_.push_back(std::move(inst));
        }

        for (size_t i = 0; i < topology.indexers.size(); ++i) {
            const auto& spec = topology.indexers[i];
            std::vector<wire::PeerRef> peers;
            for (size_t p : spec.peers) {
                bool upstream = std::find(spec.upstreams.begin(), spec.upstreams.end(),
                                          p) != spec.upstreams.end();
                peers.push_back({indexers_.at(p).url, upstream});
            }
            for (size_t u : spec.upstreams) {
                if (std::find(spec.peers.begin(), spec.peers.end(), u) ==
                    spec.peers.end()) {
                    peers.push_back({indexers_.at(u).url, true});
                }
            }
            indexers_[i].service->core().set_peers(peers);
            indexers_[i].config.peers = peers;
        }

        // registrations go over the wire like any operator would
        for (const auto& reg : topology.registrations) {
            auto parts = net::parse_url(indexers_.at(reg.indexer).url);
            httplib::Client cli(parts->origin());
            cli.set_default_headers({{"User-Agent", net::kUserAgent}});
            cli.set_read_timeout(std::chrono::seconds(30));
            auto res = cli.Post("/api/v1/register",
                                json{{"url", servers_.at(reg.server).url}}.dump(),
                                "application/json");
            if (!res || res->status != 200) {
                throw IoError("registration failed: indexer " +
                              std::to_string(reg.indexer) + " -> server " +
                              std::to_string(reg.server));
            }
        }
    } catch (...) {
        teardown();
        throw;
    }
}

void SimNet::teardown() {
    for (auto& s : servers_) {
        if (s.service) s.service->stop();
    }
    for (auto& ix : indexers_) {
        if (ix.service) ix.service->stop();
    }
    servers_.clear();
    indexers_.clear();
    if (!root_.empty()) {
        std::error_code ec;
        std::filesystem::remove_all(root_, ec);
        root_.clear();
    }
}

ContentHash SimNet::file_hash(size_t server_idx, size_t file_idx) const {
    return servers_.at(server_idx).files.at(file_idx).second;
}

void SimNet::take_down(size_t server_idx) {
    auto& inst = servers_.at(server_idx);
    if (inst.down) return; // idempotent
    inst.service->stop();
    inst.down = true;
}

void SimNet::restart_indexer(size_t i) {
    auto& inst = indexers_.at(i);
    inst.service->stop();
    inst.service.reset(); // closes the store

    auto logger = net::make_logger(inst.config.name, inst.log.get());
    inst.service = std::make_unique<indexer::IndexerService>(inst.config, logger,
                                                             clock_.fn());
    inst.service->start();
    inst.service->core().set_peers(inst.config.peers);
}

std::string SimNet::server_log(size_t i) const {
    return servers_.at(i).log->str();
}

std::string SimNet::indexer_log(size_t i) const {
    return indexers_.at(i).log->str();
}

std::vector<std::string> SimNet::all_observed_user_agents() const {
    std::vector<std::string> out;
    for (const auto& s : servers_) {
        if (!s.service) continue;
        auto uas = s.service->observed_user_agents();
        out.insert(out.end(), uas.begin(), uas.end());
    }
    for (const auto& ix : indexers_) {
        if (!ix.service) continue;
        auto uas = ix.service->observed_user_agents();
        out.insert(out.end(), uas.begin(), uas.end());
    }
    return out;
}

client::ClientConfig SimNet::client_config() const {
    client::ClientConfig cfg;
    for (const auto& ix : indexers_) {
        cfg.indexers.push_back({ix.url, false});
    }
    return cfg;
}

client::ClientOptions SimNet::client_options() const {
    client::ClientOptions opts;
    opts.indexer_timeout_s = 2.0;
    opts.server_timeout_s = 5.0;
    opts.queue_deadline_s = 30.0;
    return opts;
}

ScenarioResult SimNet::run_scenario(const json& actions) {
    ScenarioResult result;
    std::mutex result_mu;
    size_t out_counter = 0;
    auto out_dir = root_ / "downloads";
    std::filesystem::create_directories(out_dir);

    for (const auto& action : actions) {
        std::string op = wire::require_string(action, "op");
        auto t0 = std::chrono::steady_clock::now();

        auto push = [&](bool ok, const std::string& detail) {
            ActionOutcome o;
            o.action = op;
            o.ok = ok;
            o.detail = detail;
            o.elapsed_ms = std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
            std::lock_guard lock(result_mu);
            result.outcomes.push_back(std::move(o));
        };

        try {
            if (op == "download") {
                ContentHash hash;
                if (action.contains("hash")) {
                    hash = *ContentHash::parse(action["hash"].get<std::string>());
                } else {
                    hash = file_hash(wire::require_uint(action, "server"),
                                     wire::require_uint(action, "file"));
                }
                size_t clients = 1;
                if (action.contains("clients")) clients = action["clients"].get<size_t>();

                std::vector<std::thread> threads;
                for (size_t c = 0; c < clients; ++c) {
                    size_t idx = out_counter++;
                    threads.emplace_back([&, hash, idx] {
                        auto opts = client_options();
                        opts.selection_seed = seed_ * 7919 + idx + 1;
                        client::Client cli(client_config(), opts);
                        auto out_path = out_dir / ("dl" + std::to_string(idx));
                        bool ok = false;
                        std::string detail;
                        try {
                            auto report = cli.download(hash, out_path);
                            ok = report.verdict ==
                                 client::DownloadReport::Verdict::Verified;
                            detail = ok ? "verified" : report.blocked_reason;
                        } catch (const std::exception& e) {
                            detail = e.what();
                        }
                        {
                            std::lock_guard lock(result_mu);
                            ++result.download_attempts;
                            if (ok) ++result.download_successes;
                        }
                        push(ok, detail);
                    });
                }
                for (auto& t : threads) t.join();
            } else if (op == "search") {
                client::Client cli(client_config(), client_options());
                auto res = action.contains("hash")
                               ? cli.search_hash(*ContentHash::parse(
                                     action["hash"].get<std::string>()))
                               : cli.search_text(wire::require_string(action, "query"));
                push(true, std::to_string(res.hits.size()) + " hits");
            } else if (op == "take_down") {
                take_down(wire::require_uint(action, "server"));
                push(true, "down");
            } else if (op == "advance_clock") {
                clock_.advance(wire::require_int(action, "seconds"));
                push(true, "advanced");
            } else if (op == "evict") {
                auto out = indexer_svc(wire::require_uint(action, "indexer"))
                               .core()
                               .evict_stale();
                push(true, std::to_string(out.servers_evicted) + " servers evicted");
            } else if (op == "recrawl") {
                indexer_svc(wire::require_uint(action, "indexer")).core().recrawl_due();
                push(true, "recrawled");
            } else if (op == "register") {
                auto out = indexer_svc(wire::require_uint(action, "indexer"))
                               .core()
                               .register_server(
                                   server_url(wire::require_uint(action, "server")));
                push(out.status == indexer::CrawlOutcome::Status::Ok,
                     std::to_string(out.result.files_indexed) + " files");
            } else if (op == "sleep_ms") {
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(wire::require_int(action, "ms")));
                push(true, "slept");
            } else {
                push(false, "unknown op");
            }
        } catch (const std::exception& e) {
            push(false, e.what());
        }
    }

    for (const auto& s : servers_) {
        if (!s.service) continue;
        result.max_concurrent_streams = std::max(
            result.max_concurrent_streams, s.service->core().stats().max_streaming_observed);
    }
    return result;
}

json ScenarioResult::to_json() const {
    json outcomes = json::array();
    for (const auto& o : this->outcomes) {
        outcomes.push_back(json{{"action", o.action},
                                {"detail", o.detail},
                                {"elapsed_ms", o.elapsed_ms},
                                {"ok", o.ok}});
    }
    return json{{"availability", availability()},
                {"download_attempts", download_attempts},
                {"download_successes", download_successes},
                {"max_concurrent_streams", max_concurrent_streams},
                {"outcomes", std::move(outcomes)}};
}

} // namespace distrifs::simnet
