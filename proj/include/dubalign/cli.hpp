#pragma once

// Command-line surface. One entry point dispatches the subcommands
// (gen-data, train, calibrate, predict, eval, gradcheck); each run reads a
// JSON configuration (defaults, optional file, dotted `--set` overrides, in
// that order), writes its artifacts under `--out`, and leaves a manifest
// sufficient to reproduce the run: the full merged configuration, the seed,
// the code version, and a digest of every input file.
//
// Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "dubalign/eval.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/numerics.hpp"
#include "dubalign/provider.hpp"
#include "dubalign/synth.hpp"
#include "dubalign/training.hpp"

#include "json.hpp"

namespace dubalign::cli {

inline constexpr std::string_view CODE_VERSION = "dubalign 0.1.0";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

// The merged configuration tree. Every key a file or override may touch
// exists in the defaults; anything else is rejected by name, and replacing a
// value with one of a different JSON type is rejected too.
struct RunConfig {
    nlohmann::json tree;

    static nlohmann::json default_tree();
    // defaults <- file (optional) <- `--set key.path=value` overrides.
    static RunConfig load(const std::string& config_path,
                          const std::vector<std::string>& overrides);

    std::uint64_t seed() const;
    train::ModelConfig model_config() const;
    train::TrainConfig train_config() const;
    train::CheckpointMode checkpoint_mode() const;
    iec::AnalyzerConfig analyzer_config() const;
    num::AdamConfig analyzer_adam() const;
    int analyzer_epochs() const;
    synth::SynthConfig synth_config() const;
    eval::ReportOptions eval_options() const;
    provider::RemoteEndpoint endpoint() const;  // base_url empty = offline
    provider::PromptTemplates prompts() const;
};

// Applies one `key.path=value` override in place. The path must name an
// existing leaf; the value is parsed as JSON when possible, else taken as a
// string.
void apply_override(nlohmann::json& tree, const std::string& assignment);

// ---------------------------------------------------------------------------
// Analyzer checkpoints
// ---------------------------------------------------------------------------

// The calibrated analyzer travels as a single JSON document (config echo
// plus named tensors); doubles survive the round trip bit-exactly.
struct AnalyzerCheckpoint {
    iec::AnalyzerConfig config;
    num::ParamStore store;
};

void save_analyzer(const AnalyzerCheckpoint& ckpt, const std::string& path);
AnalyzerCheckpoint load_analyzer(const std::string& path);

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

// `args` holds the argv tail (no program name) in natural order. Messages go
// to `out`, errors to `err`; nothing else is printed, so the pair makes the
// whole surface testable in process.
int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err);
inline int dispatch(std::vector<std::string> args) {
    return dispatch(std::move(args), std::cout, std::cerr);
}

}  // namespace dubalign::cli
