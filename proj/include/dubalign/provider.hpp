#pragma once

// Instruction ingestion. Two paths produce InstructionRecords for the model:
// a fixture file (line-delimited JSON, deterministic, offline) and a remote
// instruction service speaking a minimal request/response protocol:
//
//   POST {base_url}/instruction
//   request  body: {"sample_id", "kind", "script", "video_ref", "prompt"}
//   response body: {"sample_id", "text"}
//
// Transport failures and 5xx responses are retried with exponential backoff;
// malformed bodies, echoed-id mismatches, empty instruction text, and other
// 4xx responses are protocol errors and fail immediately. An optional on-disk
// cache keyed by (sample_id, kind, prompt hash) makes repeat runs reproducible
// without network access.

#include <string>
#include <vector>

#include "dubalign/common.hpp"
#include "dubalign/textfront.hpp"

namespace dubalign::provider {

// Prompt texts sent with every request, one per instruction kind plus the
// two analyzer-side prompts, all echoed into run manifests for provenance.
// The defaults are deliberately labeled placeholders: real deployments
// supply their own wording via config.
struct PromptTemplates {
    std::string prompt_dur =
        "[placeholder prompt] Watch the clip and describe in one sentence how fast the line "
        "should be spoken.";
    std::string prompt_emo =
        "[placeholder prompt] Watch the clip and describe in one sentence the emotional tone "
        "the voice should carry.";
    std::string prompt_entity =
        "[placeholder prompt] List the emotion words present in the instruction.";
    std::string prompt_a =
        "[placeholder prompt] Answer with the requested attribute only.";

    void validate() const;  // every template non-empty
    const std::string& for_kind(text::InstructionKind kind) const;
};

struct RemoteEndpoint {
    std::string base_url;  // e.g. "http://127.0.0.1:8080"
    long timeout_ms{5000};
    int max_retries{3};
    int max_parallel{4};
    long backoff_ms{100};  // doubled after each failed attempt

    void validate() const;
};

// ---------------------------------------------------------------------------
// Fixture provider
// ---------------------------------------------------------------------------

// Line-delimited records {"sample_id", "kind", "text"}, returned in file
// order with source=fixture. Malformed lines are reported by number;
// duplicate (sample_id, kind) pairs are rejected.
std::vector<text::InstructionRecord> load_fixtures(const std::string& path);
void write_fixtures(const std::string& path, const std::vector<text::InstructionRecord>& records);

// ---------------------------------------------------------------------------
// Remote client
// ---------------------------------------------------------------------------

struct FetchRequest {
    std::string sample_id;
    text::InstructionKind kind{text::InstructionKind::duration};
    std::string script;
    std::string video_ref;
};

struct FetchResult {
    text::InstructionRecord record;  // source = remote
    int retries_used{0};
    bool from_cache{false};
};

// Cache file stem for one request: sanitized sample id, kind, and a hash of
// the prompt text, so editing a prompt invalidates old responses.
std::string cache_key(const std::string& sample_id, text::InstructionKind kind,
                      const std::string& prompt);

// One blocking request/response cycle with retries. When `cache_dir` is
// non-empty, a cached response is returned without touching the network and
// fresh responses are written back.
FetchResult fetch_instruction(const RemoteEndpoint& endpoint, const std::string& sample_id,
                              text::InstructionKind kind, const std::string& script,
                              const std::string& video_ref, const PromptTemplates& templates,
                              const std::string& cache_dir = "");

// Fetches a batch with at most `endpoint.max_parallel` requests in flight.
// Results come back in request order; the first failure, if any, is rethrown
// after all in-flight requests finish.
std::vector<FetchResult> fetch_instructions(const RemoteEndpoint& endpoint,
                                            const std::vector<FetchRequest>& requests,
                                            const PromptTemplates& templates,
                                            const std::string& cache_dir = "");

}  // namespace dubalign::provider
