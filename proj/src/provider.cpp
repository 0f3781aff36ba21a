#include "dubalign/provider.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <exception>
#include <filesystem>
#include <mutex>
#include <semaphore>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "httplib.h"
#include "json.hpp"

namespace dubalign::provider {

using nlohmann::json;

namespace {

// File names must survive any sample id; everything outside a conservative
// character set collapses to '_' and the prompt hash keeps keys distinct.
std::string sanitize(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (const char c : s) {
        const auto uc = static_cast<unsigned char>(c);
        out += (std::isalnum(uc) || c == '-' || c == '_') ? c : '_';
    }
    return out;
}

std::mutex cache_mutex;

std::string cache_path(const std::string& cache_dir, const std::string& key) {
    return cache_dir + "/" + key + ".json";
}

// Parses a wire response body into an instruction record, enforcing the
// protocol: the id must echo back and the text must be non-empty.
text::InstructionRecord parse_response(const std::string& body, const std::string& sample_id,
                                       text::InstructionKind kind) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        throw RemoteError("malformed instruction response for sample " + sample_id + ": " +
                          e.what());
    }
    std::string echoed, instruction_text;
    try {
        echoed = j.at("sample_id").get<std::string>();
        instruction_text = j.at("text").get<std::string>();
    } catch (const json::exception& e) {
        throw RemoteError("malformed instruction response for sample " + sample_id + ": " +
                          e.what());
    }
    if (echoed != sample_id) {
        throw RemoteError("instruction response echoes sample_id '" + echoed + "' but '" +
                          sample_id + "' was requested");
    }
    if (instruction_text.empty()) {
        throw RemoteError("instruction service returned empty text for sample " + sample_id +
                          " kind " + text::to_string(kind));
    }
    return {sample_id, kind, instruction_text, text::InstructionSource::remote};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config types
// ---------------------------------------------------------------------------

void PromptTemplates::validate() const {
    const auto check = [](const std::string& value, const char* name) {
        if (value.empty()) throw ConfigError(std::string("prompt template ") + name + " is empty");
    };
    check(prompt_dur, "prompt_dur");
    check(prompt_emo, "prompt_emo");
    check(prompt_entity, "prompt_entity");
    check(prompt_a, "prompt_a");
}

const std::string& PromptTemplates::for_kind(text::InstructionKind kind) const {
    return kind == text::InstructionKind::duration ? prompt_dur : prompt_emo;
}

void RemoteEndpoint::validate() const {
    if (base_url.empty()) throw ConfigError("provider.url is empty");
    if (timeout_ms <= 0) throw ConfigError("provider.timeout_ms must be positive");
    if (max_retries < 0) throw ConfigError("provider.retries must be non-negative");
    if (max_parallel < 1) throw ConfigError("provider.parallel must be at least 1");
    if (backoff_ms < 0) throw ConfigError("provider.backoff_ms must be non-negative");
}

// ---------------------------------------------------------------------------
// Fixture provider
// ---------------------------------------------------------------------------

std::vector<text::InstructionRecord> load_fixtures(const std::string& path) {
    std::istringstream in{read_file(path)};
    std::vector<text::InstructionRecord> records;
    std::set<std::pair<std::string, text::InstructionKind>> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fail = [&](const std::string& what) {
            throw InvalidInput(path + " line " + std::to_string(line_no) + ": " + what);
        };
        text::InstructionRecord rec;
        try {
            const json j = json::parse(line);
            rec.sample_id = j.at("sample_id").get<std::string>();
            rec.kind = text::instruction_kind_from(j.at("kind").get<std::string>());
            rec.text = j.at("text").get<std::string>();
            rec.source = text::InstructionSource::fixture;
        } catch (const json::exception& e) {
            fail(e.what());
        } catch (const Error& e) {
            fail(e.what());
        }
        if (rec.sample_id.empty()) fail("empty sample_id");
        if (rec.text.empty()) fail("empty text");
        if (!seen.emplace(rec.sample_id, rec.kind).second) {
            fail("duplicate fixture for sample " + rec.sample_id + " kind " +
                 text::to_string(rec.kind));
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw InvalidInput(path + ": no fixture records");
    return records;
}

void write_fixtures(const std::string& path, const std::vector<text::InstructionRecord>& records) {
    std::string out;
    for (const auto& rec : records) {
        out += json{{"sample_id", rec.sample_id},
                    {"kind", text::to_string(rec.kind)},
                    {"text", rec.text}}
                   .dump();
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Remote client
// ---------------------------------------------------------------------------

std::string cache_key(const std::string& sample_id, text::InstructionKind kind,
                      const std::string& prompt) {
    return sanitize(sample_id) + "." + text::to_string(kind) + "." + to_hex(fnv1a(prompt));
}

FetchResult fetch_instruction(const RemoteEndpoint& endpoint, const std::string& sample_id,
                              text::InstructionKind kind, const std::string& script,
                              const std::string& video_ref, const PromptTemplates& templates,
                              const std::string& cache_dir) {
    endpoint.validate();
    templates.validate();
    if (sample_id.empty()) throw InvalidInput("fetch_instruction needs a sample_id");
    const std::string& prompt = templates.for_kind(kind);

    if (!cache_dir.empty()) {
        const std::string path = cache_path(cache_dir, cache_key(sample_id, kind, prompt));
        std::lock_guard<std::mutex> lock(cache_mutex);
        if (std::filesystem::exists(path)) {
            FetchResult hit;
            hit.record = parse_response(read_file(path), sample_id, kind);
            hit.from_cache = true;
            return hit;
        }
    }

    const std::string body = json{{"sample_id", sample_id},
                                  {"kind", text::to_string(kind)},
                                  {"script", script},
                                  {"video_ref", video_ref},
                                  {"prompt", prompt}}
                                 .dump();

    httplib::Client client(endpoint.base_url);
    client.set_connection_timeout(std::chrono::milliseconds(endpoint.timeout_ms));
    client.set_read_timeout(std::chrono::milliseconds(endpoint.timeout_ms));
    client.set_write_timeout(std::chrono::milliseconds(endpoint.timeout_ms));

    std::string last_failure;
    for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
        if (attempt > 0 && endpoint.backoff_ms > 0) {
            const long factor = 1L << std::min(attempt - 1, 16);
            std::this_thread::sleep_for(std::chrono::milliseconds(endpoint.backoff_ms * factor));
        }
        auto res = client.Post("/instruction", body, "application/json");
        if (!res) {
            last_failure = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_failure = "server error: status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw RemoteError("instruction service rejected sample " + sample_id + " kind " +
                              text::to_string(kind) + ": status " + std::to_string(res->status));
        }
        FetchResult result;
        result.record = parse_response(res->body, sample_id, kind);
        result.retries_used = attempt;
        if (!cache_dir.empty()) {
            std::lock_guard<std::mutex> lock(cache_mutex);
            std::filesystem::create_directories(cache_dir);
            write_file(cache_path(cache_dir, cache_key(sample_id, kind, prompt)), res->body);
        }
        return result;
    }
    throw RemoteError("instruction fetch failed for sample " + sample_id + " kind " +
                      text::to_string(kind) + " after " +
                      std::to_string(endpoint.max_retries + 1) + " attempts; last " +
                      last_failure);
}

std::vector<FetchResult> fetch_instructions(const RemoteEndpoint& endpoint,
                                            const std::vector<FetchRequest>& requests,
                                            const PromptTemplates& templates,
                                            const std::string& cache_dir) {
    endpoint.validate();
    templates.validate();
    std::vector<FetchResult> results(requests.size());
    std::vector<std::exception_ptr> failures(requests.size());
    std::counting_semaphore<> in_flight(endpoint.max_parallel);
    std::vector<std::thread> workers;
    workers.reserve(requests.size());
    for (size_t i = 0; i < requests.size(); ++i) {
        workers.emplace_back([&, i] {
            in_flight.acquire();
            try {
                const FetchRequest& req = requests[i];
                results[i] = fetch_instruction(endpoint, req.sample_id, req.kind, req.script,
                                               req.video_ref, templates, cache_dir);
            } catch (...) {
                failures[i] = std::current_exception();
            }
            in_flight.release();
        });
    }
    for (auto& worker : workers) worker.join();
    for (const auto& failure : failures) {
        if (failure) std::rethrow_exception(failure);
    }
    return results;
}

}  // namespace dubalign::provider
