// distrifs: one binary for every role in the network — hash and verify
// files, search indexers, download with verification, host a directory,
// run an indexer, manage the indexer list, and drive simnet scenarios.

#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "distrifs/client.hpp"
#include "distrifs/core.hpp"
#include "distrifs/indexer.hpp"
#include "distrifs/server.hpp"
#include "distrifs/simnet.hpp"
#include "distrifs/wire.hpp"

using namespace distrifs;

namespace {

volatile std::sig_atomic_t g_stop_requested = 0;

void handle_signal(int) {
    g_stop_requested = 1;
}

void wait_for_signal() {
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    while (!g_stop_requested) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
}

int cmd_hash(const std::string& file) {
    try {
        std::cout << compute_hash_file(file).value() << "\n";
        return 0;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_verify(const std::string& file, const std::string& hash_hex) {
    auto expected = ContentHash::parse(hash_hex);
    if (!expected) {
        std::cerr << "error: expected hash must be 64 hex chars\n";
        return 2;
    }
    try {
        auto outcome = verify_file(file, *expected);
        if (outcome.matched) {
            std::cout << "OK " << expected->value() << "\n";
            return 0;
        }
        std::cout << "MISMATCH\n  expected " << expected->value() << "\n  actual   "
                  << outcome.actual.value() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

client::ClientConfig load_client_config(const std::vector<std::string>& indexer_urls,
                                        bool permissive,
                                        const std::string& scanner_cmd,
                                        std::vector<std::string>* notices) {
    client::ClientConfig cfg;
    if (!indexer_urls.empty()) {
        for (const auto& u : indexer_urls) cfg.indexers.push_back({u, false});
    } else {
        auto boot = client::bootstrap(client::default_config_dir());
        cfg = boot.config;
        if (notices) {
            notices->insert(notices->end(), boot.notices.begin(), boot.notices.end());
        }
    }
    if (permissive) cfg.mode = client::SecurityMode::Permissive;
    if (!scanner_cmd.empty()) cfg.scanner_command = scanner_cmd;
    return cfg;
}

void print_hit(const wire::SearchHit& hit) {
    std::cout << hit.record.hash.value() << "  " << hit.record.name << "  "
              << hit.record.size_bytes << " bytes\n";
    for (const auto& src : hit.sources) {
        std::cout << "    " << src.url;
        if (src.latency_ms) std::cout << "  " << *src.latency_ms << " ms";
        if (src.throughput_bps) std::cout << "  " << *src.throughput_bps << " bps";
        std::cout << "\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DistriFS: decentralized, verified file distribution"};
    app.require_subcommand(1);

    // hash
    std::string hash_file;
    auto* hash_cmd = app.add_subcommand("hash", "Print the SHA-256 content hash of a file");
    hash_cmd->add_option("file", hash_file, "file to hash")->required();

    // verify
    std::string verify_path, verify_hash;
    auto* verify_cmd =
        app.add_subcommand("verify", "Check a file against an expected content hash");
    verify_cmd->add_option("file", verify_path, "file to verify")->required();
    verify_cmd->add_option("hash", verify_hash, "expected 64-hex SHA-256")->required();

    // search
    std::string search_query, search_hash_hex;
    std::vector<std::string> search_indexers;
    bool search_json = false;
    auto* search_cmd = app.add_subcommand("search", "Search the configured indexers");
    search_cmd->add_option("query", search_query, "free-text query");
    search_cmd->add_option("--hash", search_hash_hex, "exact content hash");
    search_cmd->add_option("--indexer", search_indexers, "indexer URL (repeatable)");
    search_cmd->add_flag("--json", search_json, "emit wire-format JSON");

    // get
    std::string get_hash_hex, get_out, get_server, get_scanner;
    std::vector<std::string> get_indexers;
    bool get_yes = false, get_permissive = false, get_json = false;
    auto* get_cmd = app.add_subcommand("get", "Download a file by content hash");
    get_cmd->add_option("hash", get_hash_hex, "64-hex SHA-256 of the file")->required();
    get_cmd->add_option("--out", get_out, "output path")->required();
    get_cmd->add_option("--indexer", get_indexers, "indexer URL (repeatable)");
    get_cmd->add_option("--server", get_server, "skip indexers, fetch from this server");
    get_cmd->add_option("--scanner", get_scanner, "scanner command (exit 0 clean, 1 flagged)");
    get_cmd->add_flag("--yes", get_yes, "auto-confirm the strict-mode prompt");
    get_cmd->add_flag("--permissive", get_permissive, "permissive security mode");
    get_cmd->add_flag("--json", get_json, "emit the download report as JSON");

    // serve
    server::ServeConfig serve_cfg;
    std::string serve_dir, serve_addr = "127.0.0.1:4180";
    auto* serve_cmd = app.add_subcommand("serve", "Host a directory of files");
    serve_cmd->add_option("--dir", serve_dir, "directory to serve")->required();
    serve_cmd->add_option("--addr", serve_addr, "listen address host:port");
    serve_cmd->add_option("--max-concurrent", serve_cfg.max_concurrent,
                          "max simultaneous downloads, 0 = unlimited");
    serve_cmd->add_option("--queue-timeout", serve_cfg.queue_wait_timeout_s,
                          "seconds a token request may wait in the queue");
    serve_cmd->add_option("--token-ttl", serve_cfg.token_ttl_s,
                          "seconds an unconsumed token stays valid");

    // index
    indexer::IndexerConfig index_cfg;
    std::string index_addr = "127.0.0.1:4141", index_db = "distrifs-index";
    std::vector<std::string> index_peers, index_upstreams;
    std::vector<std::string> index_register;
    auto* index_cmd = app.add_subcommand("index", "Run an indexer");
    index_cmd->add_option("--db", index_db, "database directory");
    index_cmd->add_option("--addr", index_addr, "listen address host:port");
    index_cmd->add_option("--peer", index_peers, "peer indexer URL (repeatable)");
    index_cmd->add_option("--upstream", index_upstreams,
                          "upstream indexer URL, pushed to after crawls (repeatable)");
    index_cmd->add_option("--cutoff", index_cfg.cutoff, "max records per server");
    index_cmd->add_option("--crawl-interval", index_cfg.crawl_interval_s,
                          "seconds between re-crawls");
    index_cmd->add_option("--self-url", index_cfg.self_url,
                          "public URL of this indexer (federation identity)");
    index_cmd->add_option("--register", index_register,
                          "server URL to crawl at startup (repeatable)");

    // indexers add|remove|list
    auto* indexers_cmd = app.add_subcommand("indexers", "Manage the client indexer list");
    indexers_cmd->require_subcommand(1);
    std::string ix_add_url, ix_remove_url;
    auto* ix_add = indexers_cmd->add_subcommand("add", "Add an indexer");
    ix_add->add_option("url", ix_add_url, "indexer URL")->required();
    auto* ix_remove = indexers_cmd->add_subcommand("remove", "Remove an indexer");
    ix_remove->add_option("url", ix_remove_url, "indexer URL")->required();
    auto* ix_list = indexers_cmd->add_subcommand("list", "List configured indexers");

    // simnet
    std::string simnet_scenario;
    bool simnet_json = false;
    auto* simnet_cmd =
        app.add_subcommand("simnet", "Run a simulated-network scenario file");
    simnet_cmd->add_option("--scenario", simnet_scenario, "scenario JSON file")->required();
    simnet_cmd->add_flag("--json", simnet_json, "emit the scenario result as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2; // usage errors exit 2
    }

    try {
        if (*hash_cmd) return cmd_hash(hash_file);
        if (*verify_cmd) return cmd_verify(verify_path, verify_hash);

        if (*search_cmd) {
            if (search_query.empty() == search_hash_hex.empty()) {
                std::cerr << "error: provide exactly one of <query> or --hash\n";
                return 2;
            }
            std::vector<std::string> notices;
            client::Client cli(load_client_config(search_indexers, false, "", &notices));
            for (const auto& n : notices) std::cerr << "note: " << n << "\n";

            client::SearchResult result;
            if (!search_hash_hex.empty()) {
                auto h = ContentHash::parse(search_hash_hex);
                if (!h) {
                    std::cerr << "error: --hash must be 64 hex chars\n";
                    return 2;
                }
                result = cli.search_hash(*h);
            } else {
                result = cli.search_text(search_query);
            }
            for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
            if (search_json) {
                wire::SearchResponse resp;
                resp.hits = result.hits;
                std::cout << wire::encode(resp) << "\n";
            } else if (result.hits.empty()) {
                std::cout << "no results\n";
            } else {
                for (const auto& hit : result.hits) print_hit(hit);
            }
            return 0;
        }

        if (*get_cmd) {
            auto h = ContentHash::parse(get_hash_hex);
            if (!h) {
                std::cerr << "error: hash must be 64 hex chars\n";
                return 2;
            }
            std::vector<std::string> notices;
            auto cfg =
                load_client_config(get_indexers, get_permissive, get_scanner, &notices);
            client::ClientOptions opts;
            opts.notice = [](const std::string& line) {
                std::cerr << "note: " << line << "\n";
            };
            if (get_yes) {
                opts.confirm = [](const FileRecord&, const std::string&) { return true; };
            } else {
                opts.confirm = [](const FileRecord& rec, const std::string& server) {
                    std::cerr << "about to download from " << server << ":\n  name "
                              << rec.name << "\n  size " << rec.size_bytes
                              << " bytes\n  modified " << rec.modified_unix_s
                              << "\nproceed? [y/N] ";
                    std::string answer;
                    std::getline(std::cin, answer);
                    return answer == "y" || answer == "Y" || answer == "yes";
                };
            }
            client::Client cli(cfg, opts);
            for (const auto& n : notices) std::cerr << "note: " << n << "\n";

            std::optional<std::string> direct;
            if (!get_server.empty()) direct = get_server;
            auto report = cli.download(*h, get_out, direct);
            if (get_json) {
                std::cout << client::report_to_json(report).dump() << "\n";
            } else if (report.verdict == client::DownloadReport::Verdict::Verified) {
                std::cout << "verified " << report.output.string() << " ("
                          << report.actual.value() << ")\n";
            } else {
                std::cout << "blocked: " << report.blocked_reason << " (quarantined as "
                          << report.output.string() << ".blocked)\n";
            }
            return report.verdict == client::DownloadReport::Verdict::Verified ? 0 : 1;
        }

        if (*serve_cmd) {
            auto colon = serve_addr.rfind(':');
            if (colon == std::string::npos) {
                std::cerr << "error: --addr must be host:port\n";
                return 2;
            }
            serve_cfg.root = serve_dir;
            serve_cfg.listen_host = serve_addr.substr(0, colon);
            serve_cfg.listen_port = std::stoi(serve_addr.substr(colon + 1));
            auto logger = net::make_logger("server", &std::cout);
            server::FileServerService svc(serve_cfg, logger);
            svc.start();
            std::cout << "serving " << svc.core().file_count() << " files on "
                      << svc.base_url() << "\n";
            for (const auto& w : svc.core().scan_warnings()) {
                std::cerr << "warning: " << w << "\n";
            }
            wait_for_signal();
            svc.stop();
            return 0;
        }

        if (*index_cmd) {
            auto colon = index_addr.rfind(':');
            if (colon == std::string::npos) {
                std::cerr << "error: --addr must be host:port\n";
                return 2;
            }
            index_cfg.db_dir = index_db;
            index_cfg.listen_host = index_addr.substr(0, colon);
            index_cfg.listen_port = std::stoi(index_addr.substr(colon + 1));
            for (const auto& p : index_peers) index_cfg.peers.push_back({p, false});
            for (const auto& u : index_upstreams) index_cfg.peers.push_back({u, true});
            index_cfg.scheduler_enabled = true;
            auto logger = net::make_logger("indexer", &std::cout);
            indexer::IndexerService svc(index_cfg, logger);
            svc.start();
            std::cout << "indexer on " << svc.base_url() << ", "
                      << svc.core().entry_count() << " entries\n";
            for (const auto& url : index_register) {
                auto out = svc.core().register_server(url);
                if (out.status == indexer::CrawlOutcome::Status::Ok) {
                    std::cout << "registered " << url << ": "
                              << out.result.files_indexed << " files\n";
                } else {
                    std::cerr << "warning: register " << url << " failed: " << out.detail
                              << "\n";
                }
            }
            wait_for_signal();
            svc.stop();
            return 0;
        }

        if (*indexers_cmd) {
            auto dir = client::default_config_dir();
            auto boot = client::bootstrap(dir);
            for (const auto& n : boot.notices) std::cerr << "note: " << n << "\n";
            if (*ix_add) {
                client::add_indexer(dir, boot.config, ix_add_url);
                std::cout << "added " << ix_add_url << "\n";
            } else if (*ix_remove) {
                client::remove_indexer(dir, boot.config, ix_remove_url);
                std::cout << "removed " << ix_remove_url << "\n";
            } else if (*ix_list) {
                for (const auto& ref : boot.config.indexers) {
                    std::cout << ref.url << (ref.is_default ? "  (default)" : "") << "\n";
                }
            }
            return 0;
        }

        if (*simnet_cmd) {
            std::ifstream in(simnet_scenario);
            if (!in.is_open()) {
                std::cerr << "error: cannot read " << simnet_scenario << "\n";
                return 1;
            }
            std::string text(std::istreambuf_iterator<char>(in), {});
            auto j = wire::parse_json(text);
            auto topo = simnet::topology_from_json(wire::require_field(j, "topology"));

            simnet::SimNet net;
            net.spawn(topo);
            auto result = net.run_scenario(
                j.contains("actions") ? j["actions"] : wire::json::array());
            if (simnet_json) {
                std::cout << result.to_json().dump() << "\n";
            } else {
                for (const auto& o : result.outcomes) {
                    std::cout << (o.ok ? "ok   " : "fail ") << o.action << "  "
                              << o.detail << "  (" << o.elapsed_ms << " ms)\n";
                }
                std::cout << "availability " << result.availability()
                          << ", max concurrent streams " << result.max_concurrent_streams
                          << "\n";
            }
            net.teardown();
            return 0;
        }
    } catch (const client::ClientError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const wire::WireError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
