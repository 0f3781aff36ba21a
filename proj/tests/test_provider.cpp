#include <atomic>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "doctest.h"
#include "dubalign/common.hpp"
#include "dubalign/provider.hpp"
#include "httplib.h"
#include "json.hpp"

using dubalign::ConfigError;
using dubalign::InvalidInput;
using dubalign::RemoteError;
namespace provider = dubalign::provider;
namespace text = dubalign::text;
using nlohmann::json;

namespace {

std::string scratch(const std::string& name) {
    return std::string(DUBALIGN_SOURCE_DIR) + "/build/" + name;
}

// In-process instruction service with a scripted handler. Each test
// installs its own behavior; the server counts every request it sees.
struct StubService {
    httplib::Server server;
    std::thread runner;
    int port{0};
    std::atomic<int> hits{0};

    explicit StubService(std::function<void(const httplib::Request&, httplib::Response&)> handle) {
        server.Post("/instruction", [this, handle = std::move(handle)](
                                        const httplib::Request& req, httplib::Response& res) {
            ++hits;
            handle(req, res);
        });
        port = server.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        runner = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }

    ~StubService() {
        server.stop();
        runner.join();
    }

    provider::RemoteEndpoint endpoint() const {
        provider::RemoteEndpoint ep;
        ep.base_url = "http://127.0.0.1:" + std::to_string(port);
        ep.timeout_ms = 2000;
        ep.backoff_ms = 1;  // keep retry tests fast
        return ep;
    }
};

void reply_with(httplib::Response& res, const std::string& sample_id, const std::string& text) {
    res.set_content(json{{"sample_id", sample_id}, {"text", text}}.dump(), "application/json");
}

}  // namespace

TEST_CASE("prompt templates default to labeled placeholders") {
    provider::PromptTemplates templates;
    templates.validate();
    for (const auto* t : {&templates.prompt_dur, &templates.prompt_emo, &templates.prompt_entity,
                          &templates.prompt_a}) {
        CHECK(t->find("placeholder") != std::string::npos);
    }
    CHECK(templates.for_kind(text::InstructionKind::duration) == templates.prompt_dur);
    CHECK(templates.for_kind(text::InstructionKind::emotion) == templates.prompt_emo);
    templates.prompt_entity.clear();
    CHECK_THROWS_WITH_AS(templates.validate(), "prompt template prompt_entity is empty",
                         ConfigError);
}

TEST_CASE("endpoint configuration is validated") {
    provider::RemoteEndpoint ep;
    ep.base_url = "http://127.0.0.1:1";
    ep.validate();
    CHECK_THROWS_AS([&] { auto e = ep; e.base_url.clear(); e.validate(); }(), ConfigError);
    CHECK_THROWS_AS([&] { auto e = ep; e.timeout_ms = 0; e.validate(); }(), ConfigError);
    CHECK_THROWS_AS([&] { auto e = ep; e.max_retries = -1; e.validate(); }(), ConfigError);
    CHECK_THROWS_AS([&] { auto e = ep; e.max_parallel = 0; e.validate(); }(), ConfigError);
}

TEST_CASE("fixture files load in order and reject duplicates") {
    const std::string path = scratch("tmp_fixtures.jsonl");
    std::vector<text::InstructionRecord> records;
    for (int i = 1; i <= 5; ++i) {
        const std::string id = "fx-" + std::to_string(i);
        records.push_back({id, text::InstructionKind::duration, "speak slowly please",
                           text::InstructionSource::fixture});
        records.push_back({id, text::InstructionKind::emotion, "sound happy",
                           text::InstructionSource::fixture});
    }
    provider::write_fixtures(path, records);
    const auto loaded = provider::load_fixtures(path);
    REQUIRE(loaded.size() == 10);
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].sample_id == records[i].sample_id);
        CHECK(loaded[i].kind == records[i].kind);
        CHECK(loaded[i].text == records[i].text);
        CHECK(loaded[i].source == text::InstructionSource::fixture);
    }

    // A line without `text` is named by number.
    dubalign::write_file(path,
                         R"({"sample_id":"a","kind":"duration","text":"ok"})"
                         "\n"
                         R"({"sample_id":"b","kind":"duration"})"
                         "\n");
    CHECK_THROWS_WITH(provider::load_fixtures(path), doctest::Contains("line 2"));

    // Duplicate (sample_id, kind) is rejected; same id with the other kind is fine.
    dubalign::write_file(path,
                         R"({"sample_id":"a","kind":"duration","text":"one"})"
                         "\n"
                         R"({"sample_id":"a","kind":"duration","text":"two"})"
                         "\n");
    CHECK_THROWS_WITH(provider::load_fixtures(path), doctest::Contains("duplicate"));

    dubalign::write_file(path, R"({"sample_id":"a","kind":"sarcasm","text":"x"})" "\n");
    CHECK_THROWS_WITH(provider::load_fixtures(path), doctest::Contains("line 1"));
    dubalign::write_file(path, "\n");
    CHECK_THROWS_WITH(provider::load_fixtures(path), doctest::Contains("no fixture records"));
    std::remove(path.c_str());
}

TEST_CASE("cache keys depend on id, kind, and prompt text") {
    const auto a = provider::cache_key("s-1", text::InstructionKind::duration, "prompt one");
    CHECK(a == provider::cache_key("s-1", text::InstructionKind::duration, "prompt one"));
    CHECK(a != provider::cache_key("s-2", text::InstructionKind::duration, "prompt one"));
    CHECK(a != provider::cache_key("s-1", text::InstructionKind::emotion, "prompt one"));
    CHECK(a != provider::cache_key("s-1", text::InstructionKind::duration, "prompt two"));
    // Hostile ids cannot escape the cache directory.
    const auto weird = provider::cache_key("../../etc", text::InstructionKind::emotion, "p");
    CHECK(weird.find('/') == std::string::npos);
}

TEST_CASE("remote fetch round-trips an instruction") {
    StubService stub([](const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        CHECK(body.at("kind") == "duration");
        CHECK(body.at("script") == "the cat ran");
        CHECK(body.at("video_ref") == "clip-7");
        CHECK(body.at("prompt").get<std::string>().find("placeholder") != std::string::npos);
        reply_with(res, body.at("sample_id"), "speak at a brisk pace");
    });
    const auto result =
        provider::fetch_instruction(stub.endpoint(), "s-1", text::InstructionKind::duration,
                                    "the cat ran", "clip-7", provider::PromptTemplates{});
    CHECK(result.record.sample_id == "s-1");
    CHECK(result.record.kind == text::InstructionKind::duration);
    CHECK(result.record.text == "speak at a brisk pace");
    CHECK(result.record.source == text::InstructionSource::remote);
    CHECK(result.retries_used == 0);
    CHECK_FALSE(result.from_cache);
    CHECK(stub.hits == 1);
}

TEST_CASE("transient failures are retried with the count recorded") {
    StubService stub([&](const httplib::Request& req, httplib::Response& res) {
        if (stub.hits <= 2) {
            res.status = 500;
            return;
        }
        reply_with(res, json::parse(req.body).at("sample_id"), "sound angry");
    });
    auto ep = stub.endpoint();
    ep.max_retries = 3;
    const auto result = provider::fetch_instruction(ep, "s-2", text::InstructionKind::emotion,
                                                    "a big dog", "clip-8",
                                                    provider::PromptTemplates{});
    CHECK(result.record.text == "sound angry");
    CHECK(result.retries_used == 2);
    CHECK(stub.hits == 3);

    // Exhausted retries surface the attempt count and last failure.
    StubService dead([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    auto dead_ep = dead.endpoint();
    dead_ep.max_retries = 1;
    CHECK_THROWS_WITH_AS(
        provider::fetch_instruction(dead_ep, "s-3", text::InstructionKind::duration, "x", "v",
                                    provider::PromptTemplates{}),
        doctest::Contains("after 2 attempts"), RemoteError);
    CHECK(dead.hits == 2);
}

TEST_CASE("protocol violations fail immediately without retries") {
    StubService empty_text([](const httplib::Request& req, httplib::Response& res) {
        reply_with(res, json::parse(req.body).at("sample_id"), "");
    });
    auto ep = empty_text.endpoint();
    ep.max_retries = 5;
    CHECK_THROWS_WITH_AS(
        provider::fetch_instruction(ep, "s-4", text::InstructionKind::emotion, "x", "v",
                                    provider::PromptTemplates{}),
        doctest::Contains("empty text"), RemoteError);
    CHECK(empty_text.hits == 1);

    StubService wrong_id([](const httplib::Request&, httplib::Response& res) {
        reply_with(res, "someone-else", "text");
    });
    CHECK_THROWS_WITH(provider::fetch_instruction(wrong_id.endpoint(), "s-5",
                                                  text::InstructionKind::emotion, "x", "v",
                                                  provider::PromptTemplates{}),
                      doctest::Contains("echoes sample_id"));
    CHECK(wrong_id.hits == 1);

    StubService teapot([](const httplib::Request&, httplib::Response& res) { res.status = 418; });
    auto teapot_ep = teapot.endpoint();
    teapot_ep.max_retries = 4;
    CHECK_THROWS_WITH(provider::fetch_instruction(teapot_ep, "s-6",
                                                  text::InstructionKind::duration, "x", "v",
                                                  provider::PromptTemplates{}),
                      doctest::Contains("status 418"));
    CHECK(teapot.hits == 1);
}

TEST_CASE("cached responses skip the network") {
    const std::string cache_dir = scratch("tmp_cache");
    std::filesystem::remove_all(cache_dir);
    StubService stub([](const httplib::Request& req, httplib::Response& res) {
        reply_with(res, json::parse(req.body).at("sample_id"), "speak very slowly");
    });
    const provider::PromptTemplates templates;

    const auto first =
        provider::fetch_instruction(stub.endpoint(), "s-7", text::InstructionKind::duration,
                                    "the old cat", "clip-9", templates, cache_dir);
    CHECK_FALSE(first.from_cache);
    CHECK(stub.hits == 1);

    const auto second =
        provider::fetch_instruction(stub.endpoint(), "s-7", text::InstructionKind::duration,
                                    "the old cat", "clip-9", templates, cache_dir);
    CHECK(second.from_cache);
    CHECK(second.record.text == first.record.text);
    CHECK(second.record.source == text::InstructionSource::remote);
    CHECK(stub.hits == 1);

    // A different prompt is a different cache entry.
    auto reworded = templates;
    reworded.prompt_dur = "say how quickly this should be read";
    const auto third =
        provider::fetch_instruction(stub.endpoint(), "s-7", text::InstructionKind::duration,
                                    "the old cat", "clip-9", reworded, cache_dir);
    CHECK_FALSE(third.from_cache);
    CHECK(stub.hits == 2);

    // The cached entry serves even with no server reachable at all.
    provider::RemoteEndpoint offline;
    offline.base_url = "http://127.0.0.1:1";  // nothing listens here
    offline.timeout_ms = 50;
    offline.max_retries = 0;
    const auto fourth = provider::fetch_instruction(
        offline, "s-7", text::InstructionKind::duration, "the old cat", "clip-9", templates,
        cache_dir);
    CHECK(fourth.from_cache);
    CHECK(fourth.record.text == first.record.text);
    std::filesystem::remove_all(cache_dir);
}

TEST_CASE("batch fetching honors the parallelism cap and request order") {
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};
    StubService stub([&](const httplib::Request& req, httplib::Response& res) {
        const int now = ++in_flight;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        --in_flight;
        reply_with(res, json::parse(req.body).at("sample_id"), "sound cheerful");
    });
    auto ep = stub.endpoint();
    ep.max_parallel = 2;

    std::vector<provider::FetchRequest> requests;
    for (int i = 0; i < 8; ++i) {
        requests.push_back({"batch-" + std::to_string(i), text::InstructionKind::emotion,
                            "the cat ran", "clip"});
    }
    const auto results =
        provider::fetch_instructions(ep, requests, provider::PromptTemplates{});
    REQUIRE(results.size() == 8);
    for (size_t i = 0; i < results.size(); ++i) {
        CHECK(results[i].record.sample_id == "batch-" + std::to_string(i));
        CHECK(results[i].record.text == "sound cheerful");
    }
    CHECK(stub.hits == 8);
    CHECK(peak.load() <= 2);

    // A failing request propagates after the batch drains.
    StubService flaky([&](const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        if (body.at("sample_id") == "batch-3") {
            res.status = 404;
            return;
        }
        reply_with(res, body.at("sample_id"), "ok then");
    });
    auto flaky_ep = flaky.endpoint();
    flaky_ep.max_parallel = 3;
    CHECK_THROWS_AS(provider::fetch_instructions(flaky_ep, requests,
                                                 provider::PromptTemplates{}),
                    RemoteError);
}
