#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "distrifs/indexer.hpp"
#include "distrifs/server.hpp"
#include "distrifs/simnet.hpp"
#include "test_util.hpp"

using namespace distrifs;
using namespace distrifs::indexer;

namespace {

struct FakeClock {
    std::shared_ptr<std::atomic<int64_t>> t =
        std::make_shared<std::atomic<int64_t>>(1700000000);
    net::NowFn fn() const {
        auto p = t;
        return [p] { return p->load(); };
    }
    void advance(int64_t s) { t->fetch_add(s); }
};

FileRecord make_record(const std::string& name, char fill, uint64_t size = 64) {
    FileRecord r;
    r.hash = compute_hash(std::string(size, fill));
    r.name = name;
    r.rel_path = name;
    r.size_bytes = size;
    r.modified_unix_s = 1700000000;
    return r;
}

wire::SyncBatch batch_of(std::vector<std::pair<FileRecord, std::string>> records) {
    wire::SyncBatch b;
    b.origin = "http://test-origin.example";
    for (auto& [rec, srv] : records) b.records.push_back({std::move(rec), srv});
    return b;
}

wire::SearchRequest text_request(const std::string& q, int hops = 0) {
    wire::SearchRequest r;
    r.query = q;
    r.hop_budget = hops;
    return r;
}

wire::SearchRequest hash_request(const ContentHash& h, int hops = 0) {
    wire::SearchRequest r;
    r.hash = h;
    r.hop_budget = hops;
    return r;
}

} // namespace

TEST_SUITE_BEGIN("indexer");

TEST_CASE("tokenize_name") {
    CHECK(tokenize_name("Ubuntu-22.04.iso") ==
          std::vector<std::string>{"ubuntu", "22", "04", "iso"});
    CHECK(tokenize_name("a__b") == std::vector<std::string>{"a", "b"});
    CHECK(tokenize_name("...") == std::vector<std::string>{});
    CHECK(tokenize_name("Dup dup DUP") == std::vector<std::string>{"dup"});
}

TEST_CASE("ewma update") {
    CHECK(ewma_update(std::nullopt, 50.0) == doctest::Approx(50.0));
    CHECK(ewma_update(50.0, 150.0) == doctest::Approx(80.0)); // 0.3*150 + 0.7*50
    CHECK(ewma_update(80.0, 80.0) == doctest::Approx(80.0));
}

TEST_CASE("sync_push merges, dedupes and enforces the cutoff") {
    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.cutoff = 3;
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    const std::string srv = "http://files-a.test:1111";
    auto rec1 = make_record("one.bin", 'a');
    auto rec2 = make_record("two.bin", 'b');

    SUBCASE("new records are accepted and findable") {
        CHECK(ix.sync_push(batch_of({{rec1, srv}, {rec2, srv}})) == 2);
        CHECK(ix.entry_count() == 2);

        auto hit = ix.search_local(hash_request(rec1.hash));
        REQUIRE(hit.response.hits.size() == 1);
        CHECK(hit.response.hits[0].record == rec1);
        REQUIRE(hit.response.hits[0].sources.size() == 1);
        CHECK(hit.response.hits[0].sources[0].url == srv);

        auto text = ix.search_local(text_request("two"));
        REQUIRE(text.response.hits.size() == 1);
        CHECK(text.response.hits[0].record == rec2);
    }

    SUBCASE("repeating an existing pair is idempotent but counted") {
        CHECK(ix.sync_push(batch_of({{rec1, srv}})) == 1);
        auto count_before = ix.entry_count();
        CHECK(ix.sync_push(batch_of({{rec1, srv}})) == 1);
        CHECK(ix.entry_count() == count_before);
        auto sentry = ix.server_entry(srv);
        REQUIRE(sentry);
        CHECK(sentry->file_count == 1);
    }

    SUBCASE("server at cutoff accepts nothing more") {
        auto r3 = make_record("three.bin", 'c');
        auto r4 = make_record("four.bin", 'd');
        CHECK(ix.sync_push(batch_of({{rec1, srv}, {rec2, srv}, {r3, srv}})) == 3);
        CHECK(ix.sync_push(batch_of({{r4, srv}})) == 0);
        CHECK(ix.entry_count() == 3);
        auto sentry = ix.server_entry(srv);
        REQUIRE(sentry);
        CHECK(sentry->file_count == 3);

        // another server still gets its own budget
        CHECK(ix.sync_push(batch_of({{r4, "http://files-b.test:2222"}})) == 1);
    }

    SUBCASE("same hash from two servers unions the source set") {
        const std::string srv2 = "http://files-b.test:2222";
        CHECK(ix.sync_push(batch_of({{rec1, srv}, {rec1, srv2}})) == 2);
        auto hit = ix.search_local(hash_request(rec1.hash));
        REQUIRE(hit.response.hits.size() == 1);
        CHECK(hit.response.hits[0].sources.size() == 2);
        CHECK(ix.entry_count() == 1);
    }

    SUBCASE("conflicting names for one hash keep the first, list alternates") {
        auto renamed = rec1;
        renamed.name = "renamed.bin";
        renamed.rel_path = "renamed.bin";
        CHECK(ix.sync_push(batch_of({{rec1, srv}})) == 1);
        CHECK(ix.sync_push(batch_of({{renamed, "http://files-b.test:2222"}})) == 1);

        auto entry = ix.index_entry(rec1.hash);
        REQUIRE(entry);
        CHECK(entry->record.name == "one.bin");
        CHECK(entry->alt_names == std::vector<std::string>{"renamed.bin"});

        // findable under both names
        CHECK(ix.search_local(text_request("one")).response.hits.size() == 1);
        CHECK(ix.search_local(text_request("renamed")).response.hits.size() == 1);
    }
}

TEST_CASE("search tokenization semantics") {
    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    auto iso = make_record("Ubuntu-22.04.iso", 'u');
    auto doc = make_record("manual.pdf", 'm');
    ix.sync_push(batch_of({{iso, "http://s.test:1"}, {doc, "http://s.test:1"}}));

    CHECK(ix.search_local(text_request("ubuntu iso")).response.hits.size() == 1);
    CHECK(ix.search_local(text_request("UBUNTU")).response.hits.size() == 1);
    CHECK(ix.search_local(text_request("ubu")).response.hits.size() == 1); // substring
    CHECK(ix.search_local(text_request("ubuntu manual")).response.hits.empty());
    CHECK(ix.search_local(text_request("absent")).response.hits.empty());
}

TEST_CASE("search results cap at 100 with truncation flag") {
    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    std::vector<std::pair<FileRecord, std::string>> records;
    for (int i = 0; i < 105; ++i) {
        FileRecord r;
        r.hash = compute_hash("content-" + std::to_string(i));
        r.name = "common-" + std::to_string(i) + ".bin";
        r.rel_path = r.name;
        r.size_bytes = 10;
        records.emplace_back(std::move(r), "http://s.test:1");
    }
    ix.sync_push(batch_of(records));

    auto out = ix.search_local(text_request("common"));
    CHECK(out.response.hits.size() == 100);
    CHECK(out.response.truncated);
}

TEST_CASE("conflicting name->hash pairs are flagged") {
    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    auto honest = make_record("app.bin", 'h');
    auto evil = make_record("app.bin", 'e'); // same name, different content
    ix.sync_push(batch_of({{honest, "http://good.test:1"}, {evil, "http://bad.test:2"}}));

    auto out = ix.search_local(text_request("app"));
    CHECK(out.response.hits.size() == 2);
    REQUIRE(out.conflicts.size() == 1);
    CHECK(out.conflicts[0] == "app.bin");
}

TEST_CASE("persistence across reopen") {
    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";

    auto rec = make_record("persist.bin", 'p');
    {
        Indexer ix(cfg);
        ix.sync_push(batch_of({{rec, "http://s.test:1"}}));
        CHECK(ix.entry_count() == 1);
    }
    Indexer reopened(cfg);
    CHECK(reopened.entry_count() == 1);
    auto out = reopened.search_local(hash_request(rec.hash));
    REQUIRE(out.response.hits.size() == 1);
    CHECK(out.response.hits[0].record == rec);
    auto sentry = reopened.server_entry("http://s.test:1");
    REQUIRE(sentry);
    CHECK(sentry->file_count == 1);
}

TEST_CASE("register_server crawls a live server") {
    TempDir dir;
    simnet::SimNet net(7);
    simnet::Topology topo;
    topo.servers.push_back({{{"a.bin", 500, 1}, {"b.bin", 600, 2}, {"c.bin", 700, 3}}});
    net.spawn(topo);

    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    cfg.server_timeout_s = 5.0;
    Indexer ix(cfg);

    SUBCASE("three files indexed") {
        auto out = ix.register_server(net.server_url(0));
        CHECK(out.status == CrawlOutcome::Status::Ok);
        CHECK(out.result.files_indexed == 3);
        CHECK_FALSE(out.result.truncated);
        CHECK(ix.entry_count() == 3);

        auto sentry = ix.server_entry(net.server_url(0));
        REQUIRE(sentry);
        CHECK(sentry->reachable);
        CHECK(sentry->file_count == 3);

        auto hit = ix.search_local(hash_request(net.file_hash(0, 0)));
        REQUIRE(hit.response.hits.size() == 1);
        CHECK(hit.response.hits[0].sources[0].url == net.server_url(0));
    }

    SUBCASE("re-crawl drops records the server stopped listing") {
        ix.register_server(net.server_url(0));
        CHECK(ix.entry_count() == 3);
        std::filesystem::remove(net.root() / "server0" / "a.bin");
        net.server(0).core().refresh_index();
        auto out = ix.register_server(net.server_url(0));
        CHECK(out.result.files_indexed == 2);
        CHECK(ix.entry_count() == 2);
        CHECK(ix.search_local(hash_request(net.file_hash(0, 0))).response.hits.empty());
    }

    SUBCASE("invalid url") {
        auto out = ix.register_server("not-a-url");
        CHECK(out.status == CrawlOutcome::Status::InvalidUrl);
    }

    SUBCASE("unreachable server recorded with reachable=false") {
        std::string dead_url = "http://127.0.0.1:1";
        auto out = ix.register_server(dead_url);
        CHECK(out.status == CrawlOutcome::Status::Unreachable);
        CHECK(out.result.files_indexed == 0);
        auto sentry = ix.server_entry(dead_url);
        REQUIRE(sentry);
        CHECK_FALSE(sentry->reachable);
        CHECK(ix.entry_count() == 0);
    }
}

TEST_CASE("cutoff truncates oversized listings") {
    TempDir dir;
    simnet::SimNet net(8);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    for (int i = 0; i < 12; ++i) {
        spec.files.push_back({"f" + std::to_string(i) + ".bin", 64, uint64_t(i + 1)});
    }
    topo.servers.push_back(spec);
    net.spawn(topo);

    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.cutoff = 7;
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    auto out = ix.register_server(net.server_url(0));
    CHECK(out.status == CrawlOutcome::Status::Ok);
    CHECK(out.result.files_indexed == 7);
    CHECK(out.result.truncated);
    CHECK(ix.entry_count() == 7);
    auto sentry = ix.server_entry(net.server_url(0));
    REQUIRE(sentry);
    CHECK(sentry->file_count == 7);
}

TEST_CASE("malformed listing is rejected whole") {
    httplib::Server bogus;
    bogus.Get("/api/v1/list", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("this is not a listing", "text/plain");
    });
    int port = bogus.bind_to_any_port("127.0.0.1");
    std::thread th([&] { bogus.listen_after_bind(); });
    bogus.wait_until_ready();

    TempDir dir;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);

    auto out = ix.register_server("http://127.0.0.1:" + std::to_string(port));
    CHECK(out.status == CrawlOutcome::Status::MalformedListing);
    CHECK(ix.entry_count() == 0);

    bogus.stop();
    th.join();
}

TEST_CASE("probe measures injected latency and folds EWMA") {
    TempDir dir;
    simnet::SimNet net(9);
    simnet::Topology topo;
    simnet::ServerSpec spec;
    spec.files.push_back({"small.bin", 32 * 1024, 77});
    spec.injected_latency_ms = 50;
    topo.servers.push_back(spec);
    net.spawn(topo);

    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    Indexer ix(cfg);
    ix.register_server(net.server_url(0));

    auto probe = ix.probe_server(net.server_url(0));
    CHECK(probe.reachable);
    REQUIRE(probe.latency_ms);
    CHECK(*probe.latency_ms >= 50.0);
    CHECK(*probe.latency_ms < 250.0); // injected delay plus loopback overhead
    REQUIRE(probe.throughput_bps);
    CHECK(*probe.throughput_bps > 0);

    auto sentry = ix.server_entry(net.server_url(0));
    REQUIRE(sentry);
    CHECK(sentry->last_probed_unix_s);
    auto first = *sentry->latency_ms;

    auto probe2 = ix.probe_server(net.server_url(0));
    REQUIRE(probe2.latency_ms);
    // EWMA: within the band spanned by the old value and the new sample
    CHECK(*probe2.latency_ms >= 0.5 * first);
    CHECK(*probe2.latency_ms <= 2.5 * first);

    SUBCASE("probing an unreachable server flips reachable, keeps metrics") {
        net.take_down(0);
        auto dead = ix.probe_server(net.server_url(0));
        CHECK_FALSE(dead.reachable);
        auto after = ix.server_entry(net.server_url(0));
        REQUIRE(after);
        CHECK_FALSE(after->reachable);
        CHECK(after->latency_ms); // measurements not erased
    }
}

TEST_CASE("evict_stale removes dead servers and their records") {
    TempDir dir;
    FakeClock clock;
    IndexerConfig cfg;
    cfg.db_dir = dir.path() / "db";
    cfg.self_url = "http://self.indexer.test";
    cfg.crawl_interval_s = 100; // ttl = 300
    Indexer ix(cfg, clock.fn());

    auto shared = make_record("shared.bin", 's');
    auto lonely = make_record("lonely.bin", 'l');
    const std::string srv_a = "http://a.test:1";
    const std::string srv_b = "http://b.test:2";

    ix.sync_push(batch_of({{shared, srv_a}, {shared, srv_b}, {lonely, srv_a}}));

    SUBCASE("all healthy -> no-op") {
        auto out = ix.evict_stale();
        CHECK(out.servers_evicted == 0);
        CHECK(out.entries_removed == 0);
    }

    SUBCASE("stale server vanishes from results") {
        clock.advance(301);
        // refresh only server B
        ix.sync_push(batch_of({{shared, srv_b}}));
        auto out = ix.evict_stale();
        CHECK(out.servers_evicted == 1);
        CHECK(out.entries_removed == 1); // lonely.bin had only server A

        auto hit = ix.search_local(hash_request(shared.hash));
        REQUIRE(hit.response.hits.size() == 1);
        REQUIRE(hit.response.hits[0].sources.size() == 1);
        CHECK(hit.response.hits[0].sources[0].url == srv_b);

        CHECK(ix.search_local(hash_request(lonely.hash)).response.hits.empty());
        auto sentry = ix.server_entry(srv_a);
        REQUIRE(sentry);
        CHECK_FALSE(sentry->reachable);
        CHECK(sentry->file_count == 0);
    }
}

TEST_CASE("federation over live indexers") {
    simnet::SimNet net(10);
    simnet::Topology topo;
    topo.servers.push_back({{{"only-here.bin", 256, 42}}});
    topo.indexers.push_back({}); // A
    topo.indexers.push_back({}); // B
    topo.registrations.push_back({1, 0}); // file known only to B
    net.spawn(topo);

    // A <-> B
    net.indexer_svc(0).core().set_peers({{net.indexer_url(1), false}});
    net.indexer_svc(1).core().set_peers({{net.indexer_url(0), false}});

    auto hash = net.file_hash(0, 0);
    auto& a = net.indexer_svc(0).core();

    SUBCASE("hop budget 1 reaches the peer") {
        auto out = a.search_federated(hash_request(hash, 1));
        REQUIRE(out.response.hits.size() == 1);
        CHECK(out.response.hits[0].record.hash == hash);
    }
    SUBCASE("hop budget 0 forbids forwarding") {
        auto out = a.search_federated(hash_request(hash, 0));
        CHECK(out.response.hits.empty());
    }
    SUBCASE("cycle terminates on a miss") {
        auto absent = *ContentHash::parse(std::string(64, '9'));
        auto out = a.search_federated(hash_request(absent, 8));
        CHECK(out.response.hits.empty());
    }
    SUBCASE("local hits suppress forwarding") {
        a.register_server(net.server_url(0));
        auto out = a.search_federated(hash_request(hash, 1));
        REQUIRE(out.response.hits.size() == 1);
    }
    SUBCASE("dead peer degrades, never aborts") {
        net.indexer_svc(0).core().set_peers(
            {{"http://127.0.0.1:1", false}, {net.indexer_url(1), false}});
        auto out = a.search_federated(hash_request(hash, 1));
        REQUIRE(out.response.hits.size() == 1);
    }
}

TEST_CASE("upstream push propagates crawled records") {
    simnet::SimNet net(11);
    simnet::Topology topo;
    topo.servers.push_back({{{"pushed.bin", 128, 5}}});
    topo.indexers.push_back({});                    // 0: downstream
    topo.indexers.push_back({});                    // 1: official upstream
    net.spawn(topo);
    net.indexer_svc(0).core().set_peers({{net.indexer_url(1), true}});

    auto out = net.indexer_svc(0).core().register_server(net.server_url(0));
    REQUIRE(out.status == CrawlOutcome::Status::Ok);

    // the upstream can now answer locally
    auto& upstream = net.indexer_svc(1).core();
    auto hit = upstream.search_local(hash_request(net.file_hash(0, 0)));
    REQUIRE(hit.response.hits.size() == 1);
    CHECK(hit.response.hits[0].sources[0].url == net.server_url(0));
}

TEST_CASE("background scheduler re-crawls on its own") {
    simnet::SimNet net(13);
    simnet::Topology topo;
    topo.servers.push_back({{{"first.bin", 64, 71}}});
    simnet::IndexerSpec ix;
    ix.scheduler_enabled = true;
    ix.scheduler_tick_ms = 100;
    ix.crawl_interval_s = 1;
    topo.indexers.push_back(ix);
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    CHECK(net.indexer_svc(0).core().entry_count() == 1);

    // the server grows a file; the next scheduled crawl should pick it up
    write_file(net.root() / "server0" / "second.bin", "fresh content");
    net.server(0).core().refresh_index();

    bool indexed = false;
    for (int i = 0; i < 100 && !indexed; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        indexed = net.indexer_svc(0).core().entry_count() == 2;
    }
    CHECK(indexed);
}

TEST_CASE("indexer http endpoints") {
    simnet::SimNet net(12);
    simnet::Topology topo;
    topo.servers.push_back({{{"api-test.bin", 64, 6}}});
    topo.indexers.push_back({});
    topo.registrations.push_back({0, 0});
    net.spawn(topo);

    httplib::Client cli("http://127.0.0.1:" + std::to_string(net.indexer_svc(0).port()));
    cli.set_default_headers({{"User-Agent", "DistriFS/1.0"}});

    auto info = cli.Get("/api/v1/info");
    REQUIRE(info);
    auto j = wire::parse_json(info->body);
    CHECK(j["entries"] == 1);
    CHECK(j["version"] == "1.0");

    auto peers = cli.Get("/api/v1/peers");
    REQUIRE(peers);
    CHECK(wire::parse_json(peers->body)["peers"].is_array());

    auto by_hash = cli.Get("/api/v1/search?hash=" + net.file_hash(0, 0).value());
    REQUIRE(by_hash);
    auto resp = wire::decode_search_response(by_hash->body);
    CHECK(resp.hits.size() == 1);

    auto bad_reg = cli.Post("/api/v1/register", "{\"url\":\"not-a-url\"}",
                            "application/json");
    REQUIRE(bad_reg);
    CHECK(bad_reg->status == 400);
    auto dead_reg = cli.Post("/api/v1/register", "{\"url\":\"http://127.0.0.1:1\"}",
                             "application/json");
    REQUIRE(dead_reg);
    CHECK(dead_reg->status == 502);
    CHECK(wire::decode_error_body(dead_reg->body).error == "server_unreachable");

    auto bad = cli.Get("/api/v1/search?hash=zzz");
    REQUIRE(bad);
    CHECK(bad->status == 400);

    auto both = cli.Get("/api/v1/search?hash=" + net.file_hash(0, 0).value() + "&q=x");
    REQUIRE(both);
    CHECK(both->status == 400);

    auto oversized = [&] {
        wire::SyncBatch b;
        b.origin = "http://x.test";
        auto rec = make_record("r.bin", 'r');
        for (size_t i = 0; i <= wire::kMaxSyncBatchRecords; ++i) {
            b.records.push_back({rec, "http://s.test:1"});
        }
        // bypass encode-side validation to hit the endpoint check
        return wire::to_json(b).dump();
    }();
    auto sync = cli.Post("/api/v1/sync", oversized, "application/json");
    REQUIRE(sync);
    CHECK(sync->status == 400);

    SUBCASE("conflict header on divergent names") {
        auto evil = make_record("api-test.bin", 'z'); // clashes with fixture name
        wire::SyncBatch b;
        b.origin = "http://x.test";
        b.records.push_back({evil, "http://evil.test:3"});
        auto push = cli.Post("/api/v1/sync", wire::encode(b), "application/json");
        REQUIRE(push);
        CHECK(push->status == 200);

        auto res = cli.Get("/api/v1/search?q=api");
        REQUIRE(res);
        CHECK(res->get_header_value("X-DistriFS-Conflicts") ==
              net::percent_encode("api-test.bin"));
    }
}

TEST_SUITE_END();
