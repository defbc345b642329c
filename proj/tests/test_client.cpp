#include <doctest.h>

#include <fstream>
#include <set>

#include <sys/stat.h>
#include <unistd.h>

#include "distrifs/client.hpp"
#include "distrifs/simnet.hpp"
#include "oracle_sha256.hpp"
#include "test_util.hpp"

using namespace distrifs;
using namespace distrifs::client;

namespace {

void write_script(const std::filesystem::path& p, const std::string& body) {
    write_file(p, "#!/bin/sh\n" + body + "\n");
    chmod(p.c_str(), 0755);
}

FileRecord sync_record(const std::string& name, const std::string& content) {
    FileRecord r;
    r.hash = compute_hash(content);
    r.name = name;
    r.rel_path = name;
    r.size_bytes = content.size();
    r.modified_unix_s = 1700000000;
    return r;
}

void push_record(indexer::Indexer& ix, const FileRecord& rec, const std::string& srv) {
    wire::SyncBatch b;
    b.origin = "http://fixture.test";
    b.records.push_back({rec, srv});
    ix.sync_push(b);
}

} // namespace

TEST_SUITE_BEGIN("client");

TEST_CASE("bootstrap writes defaults once and honors removals") {
    TempDir dir;

    auto first = bootstrap(dir.path());
    CHECK(first.config.indexers == default_indexers());
    CHECK(first.config.mode == SecurityMode::Strict);
    CHECK(std::filesystem::exists(dir.path() / "config.json"));

    SUBCASE("reload returns the persisted set verbatim") {
        auto again = bootstrap(dir.path());
        CHECK(again.config.indexers == first.config.indexers);
    }

    SUBCASE("a removed default stays removed") {
        auto cfg = first.config;
        remove_indexer(dir.path(), cfg, default_indexers()[0].url);
        auto again = bootstrap(dir.path());
        CHECK(again.config.indexers.size() == default_indexers().size() - 1);
        for (const auto& ref : again.config.indexers) {
            CHECK(ref.url != default_indexers()[0].url);
        }
    }

    SUBCASE("corrupt config is an error naming the file, not a reset") {
        write_file(dir.path() / "config.json", "{broken");
        try {
            bootstrap(dir.path());
            FAIL("expected ClientError");
        } catch (const ClientError& e) {
            CHECK(e.kind() == ClientError::Kind::Config);
            CHECK(std::string(e.what()).find("config.json") != std::string::npos);
        }
        // file untouched
        CHECK(read_file(dir.path() / "config.json") == "{broken");
    }

    SUBCASE("unwritable dir falls back to in-memory defaults with a notice") {
        if (geteuid() == 0) return; // permission bits don't bind root
        chmod(dir.path().c_str(), 0555);
        auto sub = dir.path() / "nested";
        auto boot = bootstrap(sub);
        chmod(dir.path().c_str(), 0755);
        CHECK(boot.config.indexers == default_indexers());
        CHECK(boot.notices.size() == 1);
    }
}

TEST_CASE("indexer list management") {
    TempDir dir;
    auto cfg = bootstrap(dir.path()).config;

    SUBCASE("added url appears last and persists") {
        add_indexer(dir.path(), cfg, "http://mine.test:4141");
        CHECK(cfg.indexers.back().url == "http://mine.test:4141");
        CHECK_FALSE(cfg.indexers.back().is_default);
        auto reloaded = bootstrap(dir.path()).config;
        CHECK(reloaded.indexers.back().url == "http://mine.test:4141");
    }

    SUBCASE("duplicates refused") {
        add_indexer(dir.path(), cfg, "http://mine.test:4141");
        CHECK_THROWS_AS(add_indexer(dir.path(), cfg, "http://mine.test:4141"),
                        ClientError);
    }

    SUBCASE("non-http refused") {
        CHECK_THROWS_AS(add_indexer(dir.path(), cfg, "ftp://mine.test"), ClientError);
    }

    SUBCASE("removing the last indexer is refused") {
        while (cfg.indexers.size() > 1) {
            remove_indexer(dir.path(), cfg, cfg.indexers.back().url);
        }
        CHECK_THROWS_AS(remove_indexer(dir.path(), cfg, cfg.indexers[0].url),
                        ClientError);
        CHECK(cfg.indexers.size() == 1);
    }
}

TEST_CASE("download report json round-trips") {
    DownloadReport r;
    r.output = "/tmp/out.bin";
    r.expected = compute_hash("x");
    r.actual = compute_hash("x");
    r.verdict = DownloadReport::Verdict::Verified;
    r.server_used = "http://srv.test:1";
    r.scanner_verdict = ScannerVerdict::Skipped;
    r.notes = {"note one"};

    auto j = report_to_json(r);
    auto back = report_from_json(j);
    CHECK(back.output == r.output);
    CHECK(back.expected == r.expected);
    CHECK(back.actual == r.actual);
    CHECK(back.verdict == r.verdict);
    CHECK(back.server_used == r.server_used);
    CHECK(back.scanner_verdict == r.scanner_verdict);
    CHECK(back.notes == r.notes);
}

TEST_CASE("search merges indexers and warns on conflicting names") {
    simnet::SimNet net(21);
    simnet::Topology topo;
    topo.indexers.push_back({});
    topo.indexers.push_back({});
    net.spawn(topo);

    auto good = sync_record("app.bin", "genuine payload");
    auto evil = sync_record("app.bin", "trojaned payload");
    push_record(net.indexer_svc(0).core(), good, "http://good-server.test:1");
    push_record(net.indexer_svc(1).core(), evil, "http://evil-server.test:2");

    Client cli(net.client_config(), net.client_options());

    SUBCASE("conflicting name -> warning, both hits returned") {
        auto out = cli.search_text("app");
        CHECK(out.hits.size() == 2);
        REQUIRE(out.warnings.size() == 1);
        CHECK(out.warnings[0].find("app.bin") != std::string::npos);
        CHECK(out.warnings[0].find(good.hash.value()) != std::string::npos);
        CHECK(out.warnings[0].find(evil.hash.value()) != std::string::npos);
    }

    SUBCASE("agreeing indexers produce one hit, no warning") {
        push_record(net.indexer_svc(1).core(), good, "http://good-server.test:1");
        auto out = cli.search_hash(good.hash);
        REQUIRE(out.hits.size() == 1);
        CHECK(out.warnings.empty());
    }

    SUBCASE("same hash from both indexers unions sources") {
        push_record(net.indexer_svc(1).core(), good, "http://mirror.test:3");
        auto out = cli.search_hash(good.hash);
        REQUIRE(out.hits.size() == 1);
        CHECK(out.hits[0].sources.size() == 2);
    }

    SUBCASE("unreachable indexer is skipped with a notice") {
        auto cfg = net.client_config();
        cfg.indexers.push_back({"http://127.0.0.1:1", false});
        Client partial(cfg, net.client_options());
        auto out = partial.search_text("app");
        CHECK(out.hits.size() == 2);
        bool noticed = false;
        for (const auto& w : out.warnings) {
            if (w.find("skipped") != std::string::npos) noticed = true;
        }
        CHECK(noticed);
    }

    SUBCASE("all indexers unreachable is an error") {
        ClientConfig cfg;
        cfg.indexers = {{"http://127.0.0.1:1", false}};
        Client dead(cfg, net.client_options());
        CHECK_THROWS_WITH_AS(dead.search_text("app"), "no indexer reachable",
                             ClientError);
    }

    SUBCASE("empty indexer set is a precondition error") {
        Client none(ClientConfig{}, net.client_options());
        CHECK_THROWS_AS(none.search_text("app"), ClientError);
    }
}

TEST_CASE("server selection ranks by measured latency") {
    simnet::SimNet net(22);
    simnet::Topology topo;
    simnet::ServerSpec fast;
    fast.files.push_back({"pick.bin", 128, 31});
    simnet::ServerSpec slow = fast;
    slow.injected_latency_ms = 120;
    topo.servers.push_back(fast);
    topo.servers.push_back(slow);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    topo.registrations.push_back({0, 1});
    net.spawn(topo);

    Client cli(net.client_config(), net.client_options());
    auto hits = cli.search_hash(net.file_hash(0, 0)).hits;
    REQUIRE(hits.size() == 1);
    REQUIRE(hits[0].sources.size() == 2);

    SUBCASE("the fast server wins consistently") {
        for (int i = 0; i < 5; ++i) {
            auto winner = cli.select_server(hits[0]);
            CHECK(winner.url == net.server_url(0));
        }
    }

    SUBCASE("single candidate is chosen trivially") {
        wire::SearchHit single = hits[0];
        single.sources = {single.sources[0]};
        auto winner = cli.select_server(single);
        CHECK(winner.url == single.sources[0].url);
    }

    SUBCASE("all candidates unreachable lists the attempts") {
        wire::SearchHit dead = hits[0];
        dead.sources.clear();
        dead.sources.push_back({"http://127.0.0.1:1", {}, {}, {}});
        dead.sources.push_back({"http://127.0.0.1:2", {}, {}, {}});
        try {
            cli.select_server(dead);
            FAIL("expected ClientError");
        } catch (const ClientError& e) {
            CHECK(e.kind() == ClientError::Kind::NoServer);
            CHECK(std::string(e.what()).find("127.0.0.1:1") != std::string::npos);
            CHECK(std::string(e.what()).find("127.0.0.1:2") != std::string::npos);
        }
    }
}

TEST_CASE("latency ties break on throughput, exact ties are randomized") {
    simnet::SimNet net(23);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    spec.files.push_back({"tie.bin", 128, 33});
    // equal injected latency dominates loopback jitter, so both servers
    // always land inside the 20% tie window
    spec.injected_latency_ms = 40;
    topo.servers.push_back(spec);
    topo.servers.push_back(spec); // same content, same latency
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    topo.registrations.push_back({0, 1});
    net.spawn(topo);

    Client cli(net.client_config(), net.client_options());
    auto hits = cli.search_hash(net.file_hash(0, 0)).hits;
    REQUIRE(hits.size() == 1);
    REQUIRE(hits[0].sources.size() == 2);

    SUBCASE("higher advertised throughput wins the tie") {
        auto hit = hits[0];
        for (auto& src : hit.sources) {
            src.throughput_bps = src.url == net.server_url(1) ? 50e6 : 10e6;
        }
        int wins_for_1 = 0;
        for (int i = 0; i < 10; ++i) {
            if (cli.select_server(hit).url == net.server_url(1)) ++wins_for_1;
        }
        CHECK(wins_for_1 == 10);
    }

    SUBCASE("exact ties are non-degenerate across runs") {
        std::set<std::string> winners;
        for (int i = 0; i < 30 && winners.size() < 2; ++i) {
            auto opts = net.client_options();
            opts.selection_seed = uint64_t(i + 1);
            Client fresh(net.client_config(), opts);
            winners.insert(fresh.select_server(hits[0]).url);
        }
        CHECK(winners.size() == 2);
    }
}

TEST_CASE("download end to end") {
    TempDir out_dir;
    simnet::SimNet net(24);
    simnet::Topology topo;
    simnet::ServerSpec honest;
    honest.files.push_back({"target.bin", 96 * 1024, 55});
    topo.servers.push_back(honest);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    auto hash = net.file_hash(0, 0);
    auto expected_bytes = simnet::fixture_bytes(55, 96 * 1024);

    SUBCASE("verified download is byte-identical") {
        Client cli(net.client_config(), net.client_options());
        auto out = out_dir.path() / "got.bin";
        auto report = cli.download(hash, out);
        CHECK(report.verdict == DownloadReport::Verdict::Verified);
        CHECK(report.actual == hash);
        CHECK(report.scanner_verdict == ScannerVerdict::Skipped); // none configured
        CHECK(read_file(out) == expected_bytes);
        CHECK_FALSE(std::filesystem::exists(out_dir.path() / "got.bin.part"));
    }

    SUBCASE("strict mode asks for confirmation; declining aborts") {
        auto opts = net.client_options();
        bool asked = false;
        opts.confirm = [&](const FileRecord& rec, const std::string&) {
            asked = true;
            CHECK(rec.hash == hash);
            CHECK(rec.size_bytes == 96 * 1024);
            return false;
        };
        Client cli(net.client_config(), opts);
        CHECK_THROWS_AS(cli.download(hash, out_dir.path() / "never.bin"), ClientError);
        CHECK(asked);
        CHECK_FALSE(std::filesystem::exists(out_dir.path() / "never.bin"));
    }

    SUBCASE("permissive mode never consults the confirm hook") {
        auto cfg = net.client_config();
        cfg.mode = SecurityMode::Permissive;
        auto opts = net.client_options();
        opts.confirm = [](const FileRecord&, const std::string&) {
            FAIL("confirm must not run in permissive mode");
            return false;
        };
        Client cli(cfg, opts);
        auto report = cli.download(hash, out_dir.path() / "permissive.bin");
        CHECK(report.verdict == DownloadReport::Verdict::Verified);
    }

    SUBCASE("direct server download bypasses the indexers") {
        Client cli(ClientConfig{}, net.client_options()); // no indexers at all
        auto report =
            cli.download(hash, out_dir.path() / "direct.bin", net.server_url(0));
        CHECK(report.verdict == DownloadReport::Verdict::Verified);
    }

    SUBCASE("unknown hash fails the download with a notice") {
        Client cli(net.client_config(), net.client_options());
        auto absent = *ContentHash::parse(std::string(64, 'c'));
        try {
            cli.download(absent, out_dir.path() / "none.bin");
            FAIL("expected ClientError");
        } catch (const ClientError& e) {
            CHECK(e.kind() == ClientError::Kind::NoSource);
            CHECK(std::string(e.what()).find("download fails") != std::string::npos);
        }
    }
}

TEST_CASE("tampered stream is blocked and quarantined") {
    TempDir out_dir;
    simnet::SimNet net(25);
    simnet::Topology topo;
    simnet::ServerSpec tamper;
    tamper.files.push_back({"poisoned.bin", 32 * 1024, 66});
    tamper.tamper = true;
    topo.servers.push_back(tamper);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    auto hash = net.file_hash(0, 0);
    Client cli(net.client_config(), net.client_options());
    auto out = out_dir.path() / "wanted.bin";
    auto report = cli.download(hash, out);

    CHECK(report.verdict == DownloadReport::Verdict::Blocked);
    CHECK(report.blocked_reason == "hash mismatch");
    CHECK(!(report.actual == hash));
    CHECK_FALSE(std::filesystem::exists(out)); // nothing under the real name
    auto quarantined = out_dir.path() / "wanted.bin.blocked";
    REQUIRE(std::filesystem::exists(quarantined));

    // quarantined bytes are the tampered stream: first byte flipped
    auto expected = simnet::fixture_bytes(66, 32 * 1024);
    auto actual_bytes = read_file(quarantined);
    CHECK(actual_bytes.size() == expected.size());
    CHECK(actual_bytes[0] == char(expected[0] ^ 0xff));
    CHECK(actual_bytes.substr(1) == expected.substr(1));
}

TEST_CASE("mismatch retries once via a different server") {
    TempDir out_dir;
    simnet::SimNet net(26);
    simnet::Topology topo;
    simnet::ServerSpec tamper;
    tamper.files.push_back({"shared.bin", 16 * 1024, 77});
    tamper.tamper = true;
    simnet::ServerSpec honest;
    honest.files.push_back({"shared.bin", 16 * 1024, 77});
    honest.injected_latency_ms = 60; // make the tampering server win selection
    topo.servers.push_back(tamper);
    topo.servers.push_back(honest);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    topo.registrations.push_back({0, 1});
    net.spawn(topo);

    auto hash = net.file_hash(0, 0);
    Client cli(net.client_config(), net.client_options());
    auto out = out_dir.path() / "rescued.bin";
    auto report = cli.download(hash, out);

    CHECK(report.verdict == DownloadReport::Verdict::Verified);
    CHECK(report.server_used == net.server_url(1));
    CHECK(read_file(out) == simnet::fixture_bytes(77, 16 * 1024));
    // evidence of the first, blocked attempt remains quarantined
    bool retried = false;
    for (const auto& note : report.notes) {
        if (note.find("mismatch via " + net.server_url(0)) != std::string::npos) {
            retried = true;
        }
    }
    CHECK(retried);
}

TEST_CASE("scanner hook") {
    TempDir out_dir;
    TempDir script_dir;
    simnet::SimNet net(27);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    spec.files.push_back({"scanme.bin", 8 * 1024, 88});
    topo.servers.push_back(spec);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);
    auto hash = net.file_hash(0, 0);

    SUBCASE("clean verdict lets the file land") {
        write_script(script_dir.path() / "clean.sh", "exit 0");
        auto cfg = net.client_config();
        cfg.scanner_command = (script_dir.path() / "clean.sh").string();
        Client cli(cfg, net.client_options());
        auto report = cli.download(hash, out_dir.path() / "ok.bin");
        CHECK(report.verdict == DownloadReport::Verdict::Verified);
        CHECK(report.scanner_verdict == ScannerVerdict::Clean);
        CHECK(std::filesystem::exists(out_dir.path() / "ok.bin"));
    }

    SUBCASE("flagged verdict quarantines after a good hash") {
        write_script(script_dir.path() / "flag.sh", "echo Eicar-Test-Signature; exit 1");
        auto cfg = net.client_config();
        cfg.scanner_command = (script_dir.path() / "flag.sh").string();
        Client cli(cfg, net.client_options());
        auto out = out_dir.path() / "viral.bin";
        auto report = cli.download(hash, out);
        CHECK(report.verdict == DownloadReport::Verdict::Blocked);
        CHECK(report.blocked_reason == "scanner");
        CHECK(report.scanner_verdict == ScannerVerdict::Flagged);
        CHECK(report.scanner_detail.find("Eicar") != std::string::npos);
        CHECK(report.actual == hash); // hash verification had passed
        CHECK_FALSE(std::filesystem::exists(out));
        CHECK(std::filesystem::exists(out_dir.path() / "viral.bin.blocked"));
    }

    SUBCASE("scanner crash degrades to skipped with a warning") {
        write_script(script_dir.path() / "crash.sh", "exit 7");
        auto cfg = net.client_config();
        cfg.scanner_command = (script_dir.path() / "crash.sh").string();
        std::vector<std::string> notes;
        auto opts = net.client_options();
        opts.notice = [&](const std::string& line) { notes.push_back(line); };
        Client cli(cfg, opts);
        auto report = cli.download(hash, out_dir.path() / "meh.bin");
        CHECK(report.verdict == DownloadReport::Verdict::Verified);
        CHECK(report.scanner_verdict == ScannerVerdict::Skipped);
        bool warned = false;
        for (const auto& n : notes) {
            if (n.find("scanner did not run") != std::string::npos) warned = true;
        }
        CHECK(warned);
    }
}

TEST_CASE("scanner never touches a file that failed verification") {
    TempDir out_dir;
    TempDir script_dir;
    simnet::SimNet net(28);
    simnet::Topology topo;
    simnet::ServerSpec tamper;
    tamper.files.push_back({"bad.bin", 4 * 1024, 99});
    tamper.tamper = true;
    topo.servers.push_back(tamper);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    auto sentinel = script_dir.path() / "ran";
    write_script(script_dir.path() / "spy.sh",
                 "touch " + sentinel.string() + "\nexit 0");
    auto cfg = net.client_config();
    cfg.scanner_command = (script_dir.path() / "spy.sh").string();
    Client cli(cfg, net.client_options());

    auto report = cli.download(net.file_hash(0, 0), out_dir.path() / "x.bin");
    CHECK(report.verdict == DownloadReport::Verdict::Blocked);
    CHECK(report.blocked_reason == "hash mismatch");
    CHECK_FALSE(std::filesystem::exists(sentinel)); // scanner ordering law
}

TEST_CASE("every client request carries exactly the DistriFS user agent") {
    TempDir out_dir;
    simnet::SimNet net(29);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    spec.files.push_back({"ua.bin", 2048, 101});
    topo.servers.push_back(spec);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    Client cli(net.client_config(), net.client_options());
    cli.search_text("ua");
    cli.download(net.file_hash(0, 0), out_dir.path() / "ua.bin");

    auto uas = net.all_observed_user_agents();
    REQUIRE(!uas.empty());
    for (const auto& ua : uas) {
        CHECK(ua == "DistriFS/1.0");
    }
}

TEST_CASE("busy queue surfaces as a retryable error") {
    TempDir out_dir;
    simnet::SimNet net(30);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    spec.files.push_back({"busy.bin", 1024 * 1024, 111});
    spec.max_concurrent = 1;
    spec.queue_timeout_s = 0.4;
    spec.stream_chunk_delay_ms = 60; // first download holds the slot ~1s
    topo.servers.push_back(spec);
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    auto hash = net.file_hash(0, 0);

    std::thread hog([&] {
        Client cli(net.client_config(), net.client_options());
        try {
            cli.download(hash, out_dir.path() / "hog.bin");
        } catch (const std::exception&) {
        }
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(300));

    bool queue_busy = false;
    try {
        Client cli(net.client_config(), net.client_options());
        cli.download(hash, out_dir.path() / "late.bin");
    } catch (const ClientError& e) {
        queue_busy = e.kind() == ClientError::Kind::QueueBusy;
    }
    hog.join();
    CHECK(queue_busy);
}

TEST_SUITE_END();
