#include "distrifs/server.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "distrifs/wire.hpp"

namespace distrifs::server {

using namespace std::chrono_literals;

// Tombstones (consumed/expired tokens) are kept this long so duplicate
// fetches keep getting 410 instead of 404, then pruned.
static constexpr int64_t kTombstoneTtlS = 3600;

Catalog Catalog::build(const std::filesystem::path& root) {
    auto scan = scan_directory(root);
    Catalog cat;
    cat.warnings_ = std::move(scan.warnings);
    for (auto& rec : scan.records) {
        auto [it, inserted] = cat.by_hash_.try_emplace(rec.hash.value());
        if (inserted) {
            it->second.record = rec; // scan order makes this the lex-first path
        }
        it->second.all_paths.push_back(rec.rel_path);
    }
    return cat;
}

const CatalogEntry* Catalog::find(const ContentHash& hash) const {
    auto it = by_hash_.find(hash.value());
    return it == by_hash_.end() ? nullptr : &it->second;
}

std::vector<FileRecord> Catalog::list() const {
    std::vector<FileRecord> out;
    out.reserve(by_hash_.size());
    for (const auto& [hash, entry] : by_hash_) out.push_back(entry.record);
    std::sort(out.begin(), out.end(), [](const FileRecord& a, const FileRecord& b) {
        return a.rel_path < b.rel_path;
    });
    return out;
}

FileServer::FileServer(ServeConfig cfg, NowFn now)
    : cfg_(std::move(cfg)), now_(std::move(now)) {}

void FileServer::start() {
    auto cat = std::make_shared<Catalog>(Catalog::build(cfg_.root));
    std::lock_guard lock(catalog_mu_);
    catalog_ = std::move(cat);
}

namespace {
std::shared_ptr<const Catalog> require_catalog(std::mutex& mu,
                                               const std::shared_ptr<const Catalog>& cat) {
    std::lock_guard lock(mu);
    if (!cat) throw IoError("server not started");
    return cat;
}
} // namespace

std::vector<FileRecord> FileServer::list_files() const {
    return require_catalog(catalog_mu_, catalog_)->list();
}

std::optional<FileRecord> FileServer::get_metadata(const ContentHash& hash) const {
    auto cat = require_catalog(catalog_mu_, catalog_);
    const CatalogEntry* e = cat->find(hash);
    if (!e) return std::nullopt;
    return e->record;
}

size_t FileServer::file_count() const {
    return require_catalog(catalog_mu_, catalog_)->size();
}

std::vector<std::string> FileServer::scan_warnings() const {
    return require_catalog(catalog_mu_, catalog_)->warnings();
}

IssuedToken FileServer::grant_locked(const ContentHash& hash, uint64_t arrival) {
    IssuedToken issued;
    issued.token = net::random_hex128();
    issued.expires_unix_s = now_() + cfg_.token_ttl_s;

    TokenInfo info;
    info.hash_hex = hash.value();
    info.expires_unix_s = issued.expires_unix_s;
    info.holds_slot = cfg_.max_concurrent > 0;
    tokens_.emplace(issued.token, std::move(info));

    if (cfg_.record_grant_order) {
        grant_order_.emplace_back(arrival, next_grant_);
    }
    ++next_grant_;
    return issued;
}

void FileServer::release_slot_locked(TokenInfo& info) {
    if (info.holds_slot) {
        info.holds_slot = false;
        --active_slots_;
    }
}

void FileServer::pump_locked() {
    while (!queue_.empty() &&
           (cfg_.max_concurrent <= 0 || active_slots_ < cfg_.max_concurrent)) {
        Waiter* w = queue_.front();
        queue_.pop_front();
        if (cfg_.max_concurrent > 0) ++active_slots_;
        // issue here, under the lock, so tokens come out in strict FIFO order
        w->issued = grant_locked(w->hash, w->arrival);
        w->granted = true;
        w->cv.notify_one();
    }
}

void FileServer::expire_locked(int64_t now_s) {
    for (auto it = tokens_.begin(); it != tokens_.end();) {
        TokenInfo& info = it->second;
        if (info.state == TokenState::Fresh && now_s >= info.expires_unix_s) {
            info.state = TokenState::Expired;
            release_slot_locked(info);
        }
        if (info.state != TokenState::Fresh &&
            now_s >= info.expires_unix_s + kTombstoneTtlS) {
            it = tokens_.erase(it);
        } else {
            ++it;
        }
    }
    pump_locked();
}

void FileServer::expire_tokens() {
    std::lock_guard lock(mu_);
    expire_locked(now_());
}

TokenOutcome FileServer::request_token(const ContentHash& hash) {
    {
        auto cat = require_catalog(catalog_mu_, catalog_);
        if (!cat->find(hash)) {
            TokenOutcome out;
            out.status = TokenOutcome::Status::UnknownHash;
            return out;
        }
    }

    std::unique_lock lk(mu_);
    expire_locked(now_());
    uint64_t arrival = next_arrival_++;
    bool unlimited = cfg_.max_concurrent <= 0;

    TokenOutcome out;
    if (unlimited || (active_slots_ < cfg_.max_concurrent && queue_.empty())) {
        if (!unlimited) ++active_slots_;
        out.status = TokenOutcome::Status::Granted;
        out.issued = grant_locked(hash, arrival);
        return out;
    }

    Waiter waiter;
    waiter.hash = hash;
    waiter.arrival = arrival;
    queue_.push_back(&waiter);
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                        std::chrono::duration<double>(cfg_.queue_wait_timeout_s));
    while (!waiter.granted) {
        auto next_wake = std::min(deadline, std::chrono::steady_clock::now() + 50ms);
        waiter.cv.wait_until(lk, next_wake);
        if (waiter.granted) break;
        expire_locked(now_()); // expiry frees slots; pump may grant us
        if (waiter.granted) break;
        if (std::chrono::steady_clock::now() >= deadline) {
            auto pos = std::find(queue_.begin(), queue_.end(), &waiter);
            if (pos != queue_.end()) queue_.erase(pos);
            out.status = TokenOutcome::Status::QueueTimeout;
            out.queue_len = queue_.size();
            return out;
        }
    }
    out.status = TokenOutcome::Status::Granted;
    out.issued = waiter.issued;
    return out;
}

ConsumeOutcome FileServer::consume_token(const std::string& token) {
    auto cat = require_catalog(catalog_mu_, catalog_);

    std::lock_guard lock(mu_);
    expire_locked(now_());

    ConsumeOutcome out;
    auto it = tokens_.find(token);
    if (it == tokens_.end()) {
        out.status = ConsumeOutcome::Status::NotFound;
        return out;
    }
    TokenInfo& info = it->second;
    if (info.state != TokenState::Fresh) {
        out.status = ConsumeOutcome::Status::Gone;
        return out;
    }

    auto hash = ContentHash::parse(info.hash_hex);
    const CatalogEntry* entry = hash ? cat->find(*hash) : nullptr;
    if (!entry) {
        // file dropped from the catalog between grant and fetch
        info.state = TokenState::Expired;
        release_slot_locked(info);
        pump_locked();
        out.status = ConsumeOutcome::Status::Gone;
        return out;
    }

    info.state = TokenState::Consumed;
    ++streaming_now_;
    max_streaming_ = std::max(max_streaming_, streaming_now_);

    out.status = ConsumeOutcome::Status::Ok;
    out.record = entry->record;
    out.abs_path = cfg_.root / entry->record.rel_path;
    return out;
}

void FileServer::stream_finished(const std::string& token, bool) {
    std::lock_guard lock(mu_);
    auto it = tokens_.find(token);
    --streaming_now_;
    if (it != tokens_.end()) {
        release_slot_locked(it->second);
    }
    pump_locked();
}

RefreshDelta FileServer::refresh_index() {
    auto fresh = std::make_shared<Catalog>(Catalog::build(cfg_.root));

    std::lock_guard lock(catalog_mu_);
    RefreshDelta delta;
    auto path_map = [](const Catalog& c) {
        std::map<std::string, std::string> m; // rel_path -> hash
        for (const auto& [hash, entry] : c.entries()) {
            for (const auto& p : entry.all_paths) m[p] = hash;
        }
        return m;
    };
    auto old_paths = catalog_ ? path_map(*catalog_) : std::map<std::string, std::string>{};
    auto new_paths = path_map(*fresh);

    for (const auto& [p, h] : new_paths) {
        auto it = old_paths.find(p);
        if (it == old_paths.end()) {
            ++delta.added;
        } else if (it->second != h) {
            ++delta.changed;
        }
    }
    for (const auto& [p, h] : old_paths) {
        if (!new_paths.count(p)) ++delta.removed;
    }

    catalog_ = std::move(fresh);
    return delta;
}

ServerStats FileServer::stats() const {
    std::lock_guard lock(mu_);
    ServerStats s;
    s.active_slots = active_slots_;
    s.streaming_now = streaming_now_;
    s.max_streaming_observed = max_streaming_;
    s.waiting = queue_.size();
    s.grant_order = grant_order_;
    return s;
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

void send_json(httplib::Response& res, const wire::json& j) {
    res.set_content(j.dump(), "application/json");
}

} // namespace

struct FileServerService::Impl {
    FileServer core;
    net::LoggerPtr log;
    httplib::Server svr;
    std::thread listen_thread;
    std::thread sweeper;
    std::atomic<bool> stopping{false};
    std::atomic<bool> started{false};
    int port = 0;
    mutable std::mutex ua_mu;
    std::vector<std::string> observed_uas;

    Impl(ServeConfig cfg, net::LoggerPtr logger, NowFn now)
        : core(std::move(cfg), std::move(now)), log(std::move(logger)) {}

    std::string base_url() const {
        return "http://" + core.config().listen_host + ":" + std::to_string(port);
    }

    void log_line(const std::string& line) {
        if (log) log->log(line);
    }

    void route() {
        const auto& cfg = core.config();

        svr.set_tcp_nodelay(true);
        svr.new_task_queue = [n = cfg.worker_threads] {
            return new httplib::ThreadPool(size_t(n));
        };

        if (cfg.fault.added_latency_ms > 0 || cfg.record_user_agents) {
            svr.set_pre_routing_handler(
                [this, delay = cfg.fault.added_latency_ms,
                 record = cfg.record_user_agents](const httplib::Request& req,
                                                  httplib::Response&) {
                    if (record) {
                        std::lock_guard lock(ua_mu);
                        observed_uas.push_back(req.get_header_value("User-Agent"));
                    }
                    if (delay > 0) {
                        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
                    }
                    return httplib::Server::HandlerResponse::Unhandled;
                });
        }

        svr.Get("/api/v1/info", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, wire::json{{"files", core.file_count()},
                                      {"name", core.config().name},
                                      {"version", "1.0"}});
        });

        svr.Get("/api/v1/list", [this](const httplib::Request&, httplib::Response& res) {
            wire::json arr = wire::json::array();
            for (const auto& rec : core.list_files()) arr.push_back(wire::to_json(rec));
            send_json(res, arr);
        });

        svr.Get(R"(/api/v1/meta/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                    auto hash = ContentHash::parse(req.matches[1].str());
                    if (!hash) {
                        send_error(res, 400, "invalid_hash",
                                   "hash must be 64 lowercase hex chars");
                        return;
                    }
                    auto rec = core.get_metadata(*hash);
                    if (!rec) {
                        send_error(res, 404, "not_found", "no file with that hash");
                        return;
                    }
                    send_json(res, wire::to_json(*rec));
                });

        svr.Post("/api/v1/token",
                 [this](const httplib::Request& req, httplib::Response& res) {
                     std::optional<ContentHash> hash;
                     try {
                         auto j = wire::parse_json(req.body);
                         hash = ContentHash::parse(wire::require_string(j, "hash"));
                     } catch (const wire::WireError& e) {
                         send_error(res, 400, "bad_request", e.what());
                         return;
                     }
                     if (!hash) {
                         send_error(res, 400, "invalid_hash",
                                    "hash must be 64 lowercase hex chars");
                         return;
                     }
                     auto out = core.request_token(*hash);
                     switch (out.status) {
                     case TokenOutcome::Status::UnknownHash:
                         send_error(res, 404, "not_found", "no file with that hash");
                         return;
                     case TokenOutcome::Status::QueueTimeout:
                         res.set_header("Retry-After", "5");
                         send_error(res, 503, "retry_later",
                                    "queue full, " + std::to_string(out.queue_len) +
                                        " ahead of you");
                         return;
                     case TokenOutcome::Status::Granted:
                         break;
                     }
                     wire::TokenGrant grant;
                     grant.token = out.issued.token;
                     grant.expires_unix_s = out.issued.expires_unix_s;
                     grant.download_url = base_url() + "/dl/" + grant.token;
                     log_line("token granted hash=" + hash->value().substr(0, 8));
                     res.set_content(wire::encode(grant), "application/json");
                 });

        svr.Get(R"(/dl/([0-9a-f]{32}))",
                [this](const httplib::Request& req, httplib::Response& res) {
                    handle_download(req.matches[1].str(), res);
                });
        svr.Get(R"(/dl/.*)", [](const httplib::Request&, httplib::Response& res) {
            send_error(res, 404, "not_found", "unknown token");
        });
    }

    void handle_download(const std::string& token, httplib::Response& res) {
        auto out = core.consume_token(token);
        if (out.status == ConsumeOutcome::Status::NotFound) {
            send_error(res, 404, "not_found", "unknown token");
            return;
        }
        if (out.status == ConsumeOutcome::Status::Gone) {
            send_error(res, 410, "gone", "token already consumed or expired");
            return;
        }

        auto stream = std::make_shared<std::ifstream>(out.abs_path, std::ios::binary);
        if (!stream->is_open()) {
            core.stream_finished(token, false);
            send_error(res, 404, "not_found", "file vanished from disk");
            return;
        }

        res.set_header(net::kHashHeader, out.record.hash.value());
        res.set_header(net::kNameHeader, out.record.name);

        bool tamper = core.config().fault.tamper_first_byte;
        int chunk_delay = core.config().fault.stream_chunk_delay_ms;
        auto rec = out.record;
        res.set_content_provider(
            rec.size_bytes, "application/octet-stream",
            [stream, tamper, chunk_delay](size_t offset, size_t length,
                                          httplib::DataSink& sink) {
                char buf[64 * 1024];
                size_t want = std::min(length, sizeof(buf));
                stream->clear();
                stream->seekg(std::streamoff(offset));
                stream->read(buf, std::streamsize(want));
                auto n = stream->gcount();
                if (n <= 0) return false;
                if (tamper && offset == 0) buf[0] = char(buf[0] ^ 0xff);
                if (chunk_delay > 0) {
                    std::this_thread::sleep_for(std::chrono::milliseconds(chunk_delay));
                }
                return sink.write(buf, size_t(n));
            },
            [this, token, rec](bool success) {
                core.stream_finished(token, success);
                log_line(std::string(success ? "download complete" : "download aborted") +
                         " hash=" + rec.hash.value().substr(0, 8) +
                         " bytes=" + std::to_string(rec.size_bytes));
            });
    }
};

FileServerService::FileServerService(ServeConfig cfg, net::LoggerPtr log, NowFn now)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(log), std::move(now))) {}

FileServerService::~FileServerService() {
    stop();
}

void FileServerService::start() {
    impl_->core.start();
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

    impl_->listen_thread = std::thread([this] { impl_->svr.listen_after_bind(); });
    impl_->svr.wait_until_ready();

    impl_->sweeper = std::thread([this] {
        while (!impl_->stopping.load()) {
            impl_->core.expire_tokens();
            std::this_thread::sleep_for(50ms);
        }
    });

    impl_->started = true;
    impl_->log_line("serving " + std::to_string(impl_->core.file_count()) + " files");
}

void FileServerService::stop() {
    if (!impl_ || !impl_->started.exchange(false)) {
        if (impl_) impl_->stopping = true;
        return;
    }
    impl_->stopping = true;
    impl_->svr.stop();
    if (impl_->listen_thread.joinable()) impl_->listen_thread.join();
    if (impl_->sweeper.joinable()) impl_->sweeper.join();
}

int FileServerService::port() const { return impl_->port; }

std::string FileServerService::base_url() const { return impl_->base_url(); }

FileServer& FileServerService::core() { return impl_->core; }
const FileServer& FileServerService::core() const { return impl_->core; }

std::vector<std::string> FileServerService::observed_user_agents() const {
    std::lock_guard lock(impl_->ua_mu);
    return impl_->observed_uas;
}

} // namespace distrifs::server
