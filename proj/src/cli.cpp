#include "dubalign/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dubalign/common.hpp"
#include "dubalign/eval.hpp"
#include "dubalign/idd.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/provider.hpp"
#include "dubalign/synth.hpp"
#include "dubalign/textfront.hpp"
#include "dubalign/training.hpp"

#include "CLI11.hpp"

namespace dubalign::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Configuration tree
// ---------------------------------------------------------------------------

std::string json_kind(const json& v) {
    if (v.is_object()) return "an object";
    if (v.is_array()) return "an array";
    if (v.is_string()) return "a string";
    if (v.is_boolean()) return "a boolean";
    if (v.is_number()) return "a number";
    return "null";
}

// Recursive merge of `user` over `base`. The defaults define the schema:
// a key absent from `base` is unknown, and a leaf may only be replaced by a
// value of the same JSON kind.
void merge_into(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object()) {
        throw ConfigError("config group '" + (prefix.empty() ? std::string("<root>") : prefix) +
                          "' must be " + (prefix.empty() ? "a JSON object" : "an object") +
                          ", got " + json_kind(user));
    }
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        auto it = base.find(key);
        if (it == base.end()) throw ConfigError("unknown config key '" + path + "'");
        json& slot = *it;
        if (slot.is_object()) {
            merge_into(slot, value, path);
        } else if (json_kind(slot) != json_kind(value)) {
            throw ConfigError("config key '" + path + "' expects " + json_kind(slot) + ", got " +
                              json_kind(value));
        } else {
            slot = value;
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string file_digest(const std::string& path) { return "fnv1a:" + to_hex(fnv1a(read_file(path))); }

// Reproducibility record written next to every run's artifacts: the complete
// merged configuration, the seed, the code version, and a digest of every
// input file. Deliberately timestamp-free so identical runs write identical
// manifests.
struct Manifest {
    std::string command;
    json config;
    json inputs = json::object();
    std::vector<std::string> outputs;

    void add_input(const std::string& path) { inputs[path] = file_digest(path); }
    void write(const std::string& out_dir) const {
        const json m{{"code_version", std::string(CODE_VERSION)},
                     {"command", command},
                     {"config", config},
                     {"inputs", inputs},
                     {"outputs", outputs},
                     {"seed", config.at("seed")}};
        write_file(out_dir + "/manifest.json", m.dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// Instruction resolution
// ---------------------------------------------------------------------------

// Instruction-source priority: a remote endpoint wins over a fixture file,
// which wins over whatever the corpus already carries. Fixtures replace
// instructions per (sample_id, kind) and leave unmatched samples untouched.
void resolve_instructions(std::vector<train::Sample>& samples, const RunConfig& rc,
                          const std::string& fixtures_path, const std::string& out_dir,
                          Manifest& manifest) {
    const provider::RemoteEndpoint endpoint = rc.endpoint();
    if (!endpoint.base_url.empty()) {
        std::vector<provider::FetchRequest> requests;
        requests.reserve(samples.size() * 2);
        for (const auto& s : samples) {
            // The synthetic corpus has no video files; the sample id doubles
            // as the clip reference the service is asked about.
            requests.push_back({s.sample_id, text::InstructionKind::duration, s.script, s.sample_id});
            requests.push_back({s.sample_id, text::InstructionKind::emotion, s.script, s.sample_id});
        }
        std::string cache_dir = out_dir + "/instruction_cache";
        if (const char* env = std::getenv("DUBALIGN_CACHE_DIR"); env != nullptr && *env != '\0') {
            cache_dir = env;
        }
        const auto results = provider::fetch_instructions(endpoint, requests, rc.prompts(), cache_dir);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            samples[i].dur_instruction = results[2 * i].record;
            samples[i].emo_instruction = results[2 * i + 1].record;
        }
        return;
    }
    if (fixtures_path.empty()) return;
    manifest.add_input(fixtures_path);
    std::map<std::pair<std::string, text::InstructionKind>, text::InstructionRecord> by_key;
    for (auto& rec : provider::load_fixtures(fixtures_path)) {
        by_key[{rec.sample_id, rec.kind}] = std::move(rec);
    }
    for (auto& s : samples) {
        if (auto it = by_key.find({s.sample_id, text::InstructionKind::duration}); it != by_key.end())
            s.dur_instruction = it->second;
        if (auto it = by_key.find({s.sample_id, text::InstructionKind::emotion}); it != by_key.end())
            s.emo_instruction = it->second;
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

void run_gen_data(const RunConfig& rc, const std::string& out_dir, const std::string& disjoint_from,
                  Manifest& manifest, std::ostream& out) {
    const std::string templates_path = rc.tree.at("synth").at("templates").get<std::string>();
    if (!templates_path.empty()) manifest.add_input(templates_path);
    const auto samples = synth::gen_corpus(rc.synth_config());
    if (!disjoint_from.empty()) {
        manifest.add_input(disjoint_from);
        synth::assert_disjoint_scripts(train::read_corpus(disjoint_from), samples);
    }
    const std::string path = out_dir + "/corpus.jsonl";
    train::write_corpus(path, samples);
    manifest.outputs = {"corpus.jsonl"};
    out << "wrote " << samples.size() << " samples to " << path << "\n";
}

void run_train(const RunConfig& rc, const std::string& out_dir, const std::string& corpus_path,
               const std::string& checkpoint_path, const std::string& fixtures_path,
               Manifest& manifest, std::ostream& out) {
    manifest.add_input(corpus_path);
    auto corpus = train::read_corpus(corpus_path);
    resolve_instructions(corpus, rc, fixtures_path, out_dir, manifest);

    train::Model model(rc.model_config());
    if (!checkpoint_path.empty()) {
        manifest.add_input(checkpoint_path);
        train::adopt_checkpoint(model, train::load_checkpoint(checkpoint_path));
    }
    const auto records = train::train(model, corpus, rc.train_config(),
                                      out_dir + "/loss_trace.jsonl", out_dir + "/abort.ckpt");
    train::save_checkpoint(model.store, model.cfg, out_dir + "/model.ckpt", rc.checkpoint_mode());
    manifest.outputs = {"loss_trace.jsonl", "model.ckpt"};

    if (records.empty()) {
        out << "no optimization steps (epochs = 0); wrote " << out_dir << "/model.ckpt\n";
        return;
    }
    const int first_epoch = records.front().epoch;
    const int last_epoch = records.back().epoch;
    double first_sum = 0.0, last_sum = 0.0;
    long first_n = 0, last_n = 0;
    for (const auto& r : records) {
        if (r.epoch == first_epoch) {
            first_sum += r.total;
            ++first_n;
        }
        if (r.epoch == last_epoch) {
            last_sum += r.total;
            ++last_n;
        }
    }
    out << "trained " << (last_epoch + 1) << " epochs (" << records.size()
        << " steps): mean loss " << first_sum / double(first_n) << " -> "
        << last_sum / double(last_n) << "; wrote " << out_dir << "/model.ckpt\n";
}

void run_calibrate(const RunConfig& rc, const std::string& out_dir, const std::string& corpus_path,
                   const std::string& fixtures_path, Manifest& manifest, std::ostream& out) {
    manifest.add_input(corpus_path);
    auto corpus = train::read_corpus(corpus_path);
    resolve_instructions(corpus, rc, fixtures_path, out_dir, manifest);

    const iec::AnalyzerConfig cfg = rc.analyzer_config();
    num::ParamStore store;
    Rng rng(rc.seed());
    iec::register_analyzer(store, cfg, rng);

    std::vector<std::pair<text::InstructionRecord, std::vector<iec::Emotion>>> pairs;
    pairs.reserve(corpus.size());
    for (const auto& s : corpus) pairs.push_back({s.emo_instruction, s.gt_entities});
    const auto losses = iec::calibrate_analyzer(store, cfg, pairs, rc.analyzer_adam(),
                                                rc.analyzer_epochs());

    std::string trace;
    for (std::size_t e = 0; e < losses.size(); ++e) {
        trace += json{{"epoch", e}, {"mean_loss", losses[e]}}.dump() + "\n";
    }
    write_file(out_dir + "/calibration_trace.jsonl", trace);
    save_analyzer({cfg, store}, out_dir + "/analyzer.json");
    manifest.outputs = {"analyzer.json", "calibration_trace.jsonl"};

    out << "calibrated analyzer on " << pairs.size() << " instructions over " << losses.size()
        << " epochs";
    if (!losses.empty()) out << ": mean loss " << losses.front() << " -> " << losses.back();
    out << "; wrote " << out_dir << "/analyzer.json\n";
}

void run_predict(const RunConfig& rc, const std::string& out_dir, const std::string& corpus_path,
                 const std::string& checkpoint_path, const std::string& analyzer_path,
                 const std::string& fixtures_path, Manifest& manifest, std::ostream& out) {
    manifest.add_input(corpus_path);
    auto corpus = train::read_corpus(corpus_path);
    resolve_instructions(corpus, rc, fixtures_path, out_dir, manifest);

    train::ModelConfig mc = rc.model_config();
    train::Model model = [&] {
        if (checkpoint_path.empty()) return train::Model(mc);
        manifest.add_input(checkpoint_path);
        train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
        // Rescaling is a prediction-time choice that touches no parameters,
        // so the requested mode is applied after the shape/config handshake
        // instead of being held against the checkpoint.
        const idd::ScaleMode requested = mc.idd.scale_mode;
        mc.idd.scale_mode = ckpt.config.idd.scale_mode;
        train::Model m(mc);
        train::adopt_checkpoint(m, std::move(ckpt));
        m.cfg.idd.scale_mode = requested;
        return m;
    }();

    std::optional<AnalyzerCheckpoint> analyzer;
    if (!analyzer_path.empty()) {
        manifest.add_input(analyzer_path);
        analyzer = load_analyzer(analyzer_path);
    }

    std::vector<eval::PredictionRecord> predictions;
    predictions.reserve(corpus.size());
    for (const auto& s : corpus) {
        eval::PredictionRecord p;
        p.sample_id = s.sample_id;
        p.durations = model.durations(s.phonemes, s.dur_instruction, s.video_frames).durations_frames;
        p.entities = analyzer ? iec::analyze_calibrated(analyzer->store, analyzer->config,
                                                        s.emo_instruction)
                              : iec::analyze_rule(s.emo_instruction);
        const auto prosody = model.prosody(s.phonemes, p.entities);
        p.pitch = prosody.pitch;
        p.energy = prosody.energy;
        // No recognizer in the loop: the script itself stands in as the
        // transcript so downstream word-level scoring has an input.
        p.transcript = s.script;
        predictions.push_back(std::move(p));
    }
    eval::write_predictions(out_dir + "/predictions.jsonl", predictions);
    manifest.outputs = {"predictions.jsonl"};
    out << "wrote " << predictions.size() << " predictions ("
        << idd::to_string(model.cfg.idd.scale_mode) << " scaling, "
        << (analyzer ? "calibrated" : "rule") << " analyzer) to " << out_dir
        << "/predictions.jsonl\n";
}

void run_eval(const RunConfig& rc, const std::string& out_dir, const std::string& corpus_path,
              const std::string& predictions_path, Manifest& manifest, std::ostream& out) {
    manifest.add_input(corpus_path);
    manifest.add_input(predictions_path);
    const auto samples = train::read_corpus(corpus_path);
    const auto predictions = eval::read_predictions(predictions_path);
    const auto report = eval::build_report(samples, predictions, rc.eval_options());
    eval::write_report(report, out_dir + "/report.jsonl");
    const std::string table = eval::report_table(report);
    write_file(out_dir + "/report.txt", table);
    manifest.outputs = {"report.jsonl", "report.txt"};
    out << table;
}

// Central-difference audit of the trainable paths at a deterministic probe
// point. The duration and prosody paths run through the shared training loss
// with the other term's weight at zero; the analyzer path samples only the
// adapter factors and the bias, since its frozen bases receive no gradients
// by design.
bool run_gradcheck(const RunConfig& rc, const std::string& out_dir, Manifest& manifest,
                   std::ostream& out) {
    synth::SynthConfig sc = rc.synth_config();
    sc.n_samples = 2;
    const auto probes = synth::gen_corpus(sc);
    const double tolerance = 1e-3;

    struct Line {
        std::string name;
        int checked{0};
        double max_rel_err{0.0};
        bool pass{false};
        std::string note;
    };
    std::vector<Line> lines;

    const auto model_line = [&](const std::string& name, const train::Sample& sample,
                                const train::LossWeights& weights) {
        train::Model model(rc.model_config());
        const auto loss_fn = [&](num::ParamStore&) {
            return train::sample_loss_and_grads(model, sample, weights).total;
        };
        const auto report = num::grad_check(loss_fn, model.store, 64, tolerance,
                                            fnv1a(name), 1e-5);
        lines.push_back({name, report.checked, report.max_rel_err, report.pass, report.note});
    };
    model_line("duration loss", probes[0], {1.0, 0.0});
    model_line("prosody loss", probes[1], {0.0, 1.0});

    {
        const iec::AnalyzerConfig cfg = rc.analyzer_config();
        num::ParamStore store;
        Rng rng(rc.seed());
        iec::register_analyzer(store, cfg, rng);
        // Push the adapters off their zero initialization so every factor of
        // the low-rank products carries signal through the check.
        for (const std::string target : {"wq", "wk", "wv", "ff1", "ff2", "head"}) {
            store.value("an." + target + ".a") =
                num::gaussian_init(store.value("an." + target + ".a").rows(), cfg.lora_rank, 0.05, rng);
            store.value("an." + target + ".b") =
                num::gaussian_init(cfg.lora_rank, cfg.d_gte, 0.05, rng);
        }
        store.value("an.bias") = num::gaussian_init(7, 1, 0.1, rng);

        const text::InstructionRecord rec = probes[1].emo_instruction;
        const std::vector<iec::Emotion>& gt = probes[1].gt_entities;
        const auto loss_at = [&] {
            return iec::analyzer_loss(iec::analyzer_probs(store, cfg, rec), gt, nullptr);
        };

        store.zero_grads();
        iec::AnalyzerCache cache;
        const num::Vec probs = iec::analyzer_probs(store, cfg, rec, &cache);
        num::Vec dlogits;
        iec::analyzer_loss(probs, gt, &dlogits);
        iec::analyzer_backward(store, dlogits, cache);

        std::vector<std::string> trainable{"an.bias"};
        for (const std::string target : {"wq", "wk", "wv", "ff1", "ff2", "head"}) {
            trainable.push_back("an." + target + ".a");
            trainable.push_back("an." + target + ".b");
        }
        Line line{"analyzer loss", 0, 0.0, false, ""};
        Rng pick(fnv1a(line.name));
        const double step = 1e-5;
        for (int i = 0; i < 64; ++i) {
            const std::string& name = trainable[pick.below(trainable.size())];
            num::Mat& value = store.value(name);
            const num::Index row = num::Index(pick.below(std::uint64_t(value.rows())));
            const num::Index col = num::Index(pick.below(std::uint64_t(value.cols())));
            const double saved = value(row, col);
            value(row, col) = saved + step;
            const double up = loss_at();
            value(row, col) = saved - step;
            const double down = loss_at();
            value(row, col) = saved;
            const double fd = (up - down) / (2.0 * step);
            const double an = store.grad(name)(row, col);
            line.max_rel_err = std::max(
                line.max_rel_err, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
            ++line.checked;
        }
        line.pass = line.max_rel_err < tolerance;
        lines.push_back(std::move(line));
    }

    std::string text_report;
    bool all_pass = true;
    for (const auto& line : lines) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-14s  checked %3d  max relative error %10.3e  %s\n",
                      line.name.c_str(), line.checked, line.max_rel_err,
                      line.pass ? "pass" : "FAIL");
        text_report += buf;
        if (!line.note.empty()) text_report += "  note: " + line.note + "\n";
        all_pass = all_pass && line.pass;
    }
    write_file(out_dir + "/gradcheck.txt", text_report);
    manifest.outputs = {"gradcheck.txt"};
    out << text_report;
    return all_pass;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

json RunConfig::default_tree() {
    const text::ModelDims dims;
    const idd::IddConfig idd_defaults;
    const train::TrainConfig train_defaults;
    const iec::AnalyzerConfig analyzer_defaults;
    const synth::SynthConfig synth_defaults;
    const provider::RemoteEndpoint endpoint_defaults;
    const provider::PromptTemplates prompt_defaults;

    json rate_levels = json::array();
    for (const auto& level : synth_defaults.rate_levels) {
        rate_levels.push_back({{"label", level.label}, {"multiplier", level.multiplier}});
    }
    json profiles = json::object();
    for (const auto& [emotion, profile] : synth_defaults.emotion_profiles) {
        profiles[iec::to_string(emotion)] = {{"pitch_offset", profile.pitch_offset},
                                             {"energy_offset", profile.energy_offset}};
    }

    return json{
        {"seed", 1},
        {"model",
         {{"d_gte", dims.d_gte}, {"d_m", dims.d_m}, {"rnn_hidden", dims.rnn_hidden}}},
        {"idd",
         {{"prototypes", idd_defaults.prototypes},
          {"iterations", idd_defaults.iterations},
          {"aggregate", idd::to_string(idd_defaults.aggregate)},
          {"scale_mode", idd::to_string(idd_defaults.scale_mode)}}},
        {"train",
         {{"epochs", train_defaults.epochs},
          {"lr", train_defaults.adam.lr},
          {"beta1", train_defaults.adam.beta1},
          {"beta2", train_defaults.adam.beta2},
          {"eps", train_defaults.adam.eps},
          {"lambda1", train_defaults.weights.lambda1},
          {"lambda2", train_defaults.weights.lambda2},
          {"checkpoint_mode", "binary"}}},
        {"analyzer",
         {{"lora_rank", analyzer_defaults.lora_rank},
          {"threshold", analyzer_defaults.threshold},
          {"attn_gain", analyzer_defaults.attn_gain},
          {"d_gte", analyzer_defaults.d_gte},
          {"epochs", 300},
          {"lr", 0.01}}},
        {"synth",
         {{"n_samples", synth_defaults.n_samples},
          {"noise_sigma", synth_defaults.noise_sigma},
          {"min_words", synth_defaults.min_words},
          {"max_words", synth_defaults.max_words},
          {"speakers", synth_defaults.speakers},
          {"paraphrase_shift", synth_defaults.paraphrase_shift},
          {"embedding_dim", synth_defaults.embedding_dim},
          {"templates", ""},
          {"vocabulary", json::array()},
          {"rate_levels", rate_levels},
          {"emotion_profiles", profiles}}},
        {"eval", {{"divergence", eval::to_string(eval::Divergence::jsd)}}},
        {"provider",
         {{"url", ""},
          {"timeout_ms", endpoint_defaults.timeout_ms},
          {"retries", endpoint_defaults.max_retries},
          {"parallel", endpoint_defaults.max_parallel},
          {"backoff_ms", endpoint_defaults.backoff_ms},
          {"prompts",
           {{"dur", prompt_defaults.prompt_dur},
            {"emo", prompt_defaults.prompt_emo},
            {"entity", prompt_defaults.prompt_entity},
            {"a", prompt_defaults.prompt_a}}}}},
    };
}

RunConfig RunConfig::load(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    RunConfig rc{default_tree()};
    if (!config_path.empty()) {
        const json user = json::parse(read_file(config_path), nullptr, false);
        if (user.is_discarded()) {
            throw ConfigError("config file " + config_path + " is not valid JSON");
        }
        merge_into(rc.tree, user, "");
    }
    for (const auto& assignment : overrides) apply_override(rc.tree, assignment);
    return rc;
}

void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // unquoted strings stay strings

    json* node = &tree;
    std::string walked;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string part =
            path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            throw ConfigError("override path '" + path + "' has an empty segment");
        }
        walked = walked.empty() ? part : walked + "." + part;
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError("unknown config key '" + walked + "'");
        }
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    if (node->is_object()) {
        throw ConfigError("config key '" + path + "' is a group, not a value");
    }
    if (json_kind(*node) != json_kind(value)) {
        throw ConfigError("config key '" + path + "' expects " + json_kind(*node) + ", got " +
                          json_kind(value));
    }
    *node = std::move(value);
}

std::uint64_t RunConfig::seed() const { return tree.at("seed").get<std::uint64_t>(); }

train::ModelConfig RunConfig::model_config() const {
    const json& m = tree.at("model");
    const json& d = tree.at("idd");
    train::ModelConfig cfg;
    cfg.dims.d_gte = m.at("d_gte").get<num::Index>();
    cfg.dims.d_m = m.at("d_m").get<num::Index>();
    cfg.dims.rnn_hidden = m.at("rnn_hidden").get<num::Index>();
    cfg.idd.prototypes = d.at("prototypes").get<num::Index>();
    cfg.idd.iterations = d.at("iterations").get<num::Index>();
    cfg.idd.aggregate = idd::aggregate_from(d.at("aggregate").get<std::string>());
    cfg.idd.scale_mode = idd::scale_mode_from(d.at("scale_mode").get<std::string>());
    cfg.seed = seed();
    cfg.validate();
    return cfg;
}

train::TrainConfig RunConfig::train_config() const {
    const json& t = tree.at("train");
    train::TrainConfig cfg;
    cfg.adam.lr = t.at("lr").get<double>();
    cfg.adam.beta1 = t.at("beta1").get<double>();
    cfg.adam.beta2 = t.at("beta2").get<double>();
    cfg.adam.eps = t.at("eps").get<double>();
    cfg.epochs = t.at("epochs").get<int>();
    cfg.weights.lambda1 = t.at("lambda1").get<double>();
    cfg.weights.lambda2 = t.at("lambda2").get<double>();
    cfg.validate();
    return cfg;
}

train::CheckpointMode RunConfig::checkpoint_mode() const {
    const std::string mode = tree.at("train").at("checkpoint_mode").get<std::string>();
    if (mode == "binary") return train::CheckpointMode::binary;
    if (mode == "text") return train::CheckpointMode::text;
    throw ConfigError("train.checkpoint_mode must be 'binary' or 'text', got '" + mode + "'");
}

iec::AnalyzerConfig RunConfig::analyzer_config() const {
    const json& a = tree.at("analyzer");
    iec::AnalyzerConfig cfg;
    cfg.lora_rank = a.at("lora_rank").get<num::Index>();
    cfg.threshold = a.at("threshold").get<double>();
    cfg.attn_gain = a.at("attn_gain").get<double>();
    cfg.d_gte = a.at("d_gte").get<num::Index>();
    cfg.validate();
    return cfg;
}

num::AdamConfig RunConfig::analyzer_adam() const {
    num::AdamConfig adam;
    adam.lr = tree.at("analyzer").at("lr").get<double>();
    adam.validate();
    return adam;
}

int RunConfig::analyzer_epochs() const {
    const int epochs = tree.at("analyzer").at("epochs").get<int>();
    if (epochs < 0) throw ConfigError("analyzer.epochs must be >= 0");
    return epochs;
}

synth::SynthConfig RunConfig::synth_config() const {
    const json& s = tree.at("synth");
    synth::SynthConfig cfg;
    cfg.n_samples = s.at("n_samples").get<long>();
    cfg.seed = seed();
    cfg.noise_sigma = s.at("noise_sigma").get<double>();
    cfg.min_words = s.at("min_words").get<int>();
    cfg.max_words = s.at("max_words").get<int>();
    cfg.speakers = s.at("speakers").get<int>();
    cfg.paraphrase_shift = s.at("paraphrase_shift").get<bool>();
    cfg.embedding_dim = s.at("embedding_dim").get<num::Index>();

    cfg.vocabulary.clear();
    for (const json& word : s.at("vocabulary")) {
        if (!word.is_string()) throw ConfigError("synth.vocabulary entries must be strings");
        cfg.vocabulary.push_back(word.get<std::string>());
    }

    cfg.rate_levels.clear();
    for (const json& level : s.at("rate_levels")) {
        if (!level.is_object() || level.size() != 2 || !level.contains("label") ||
            !level.contains("multiplier") || !level.at("label").is_string() ||
            !level.at("multiplier").is_number()) {
            throw ConfigError("synth.rate_levels entries must be {label, multiplier} objects");
        }
        cfg.rate_levels.push_back(
            {level.at("label").get<std::string>(), level.at("multiplier").get<double>()});
    }

    cfg.emotion_profiles.clear();
    for (const auto& [label, profile] : s.at("emotion_profiles").items()) {
        cfg.emotion_profiles[iec::emotion_from(label)] = {
            profile.at("pitch_offset").get<double>(), profile.at("energy_offset").get<double>()};
    }

    const std::string templates_path = s.at("templates").get<std::string>();
    if (!templates_path.empty()) cfg.templates = synth::SynthTemplates::load(templates_path);

    cfg.validate();
    return cfg;
}

eval::ReportOptions RunConfig::eval_options() const {
    return {eval::divergence_from(tree.at("eval").at("divergence").get<std::string>())};
}

provider::RemoteEndpoint RunConfig::endpoint() const {
    const json& p = tree.at("provider");
    provider::RemoteEndpoint endpoint;
    endpoint.base_url = p.at("url").get<std::string>();
    endpoint.timeout_ms = p.at("timeout_ms").get<long>();
    endpoint.max_retries = p.at("retries").get<int>();
    endpoint.max_parallel = p.at("parallel").get<int>();
    endpoint.backoff_ms = p.at("backoff_ms").get<long>();
    if (!endpoint.base_url.empty()) endpoint.validate();
    return endpoint;
}

provider::PromptTemplates RunConfig::prompts() const {
    const json& p = tree.at("provider").at("prompts");
    provider::PromptTemplates templates;
    templates.prompt_dur = p.at("dur").get<std::string>();
    templates.prompt_emo = p.at("emo").get<std::string>();
    templates.prompt_entity = p.at("entity").get<std::string>();
    templates.prompt_a = p.at("a").get<std::string>();
    templates.validate();
    return templates;
}

// ---------------------------------------------------------------------------
// Analyzer checkpoints
// ---------------------------------------------------------------------------

void save_analyzer(const AnalyzerCheckpoint& ckpt, const std::string& path) {
    json tensors = json::array();
    for (const auto& [name, entry] : ckpt.store.entries()) {
        std::vector<double> values(entry.value.data(), entry.value.data() + entry.value.size());
        tensors.push_back({{"name", name},
                           {"rows", entry.value.rows()},
                           {"cols", entry.value.cols()},
                           {"values", values}});
    }
    const json doc{{"format_version", 1},
                   {"kind", "analyzer"},
                   {"config",
                    {{"lora_rank", ckpt.config.lora_rank},
                     {"threshold", ckpt.config.threshold},
                     {"attn_gain", ckpt.config.attn_gain},
                     {"d_gte", ckpt.config.d_gte}}},
                   {"tensors", tensors}};
    write_file(path, doc.dump() + "\n");
}

AnalyzerCheckpoint load_analyzer(const std::string& path) {
    const json doc = json::parse(read_file(path), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw IoError("analyzer checkpoint " + path + " is not valid JSON");
    }
    try {
        if (doc.at("format_version").get<int>() != 1) {
            throw IoError("unsupported analyzer checkpoint format version " +
                          doc.at("format_version").dump());
        }
        if (doc.at("kind").get<std::string>() != "analyzer") {
            throw IoError("checkpoint " + path + " is not an analyzer checkpoint");
        }
        AnalyzerCheckpoint ckpt;
        const json& c = doc.at("config");
        ckpt.config.lora_rank = c.at("lora_rank").get<num::Index>();
        ckpt.config.threshold = c.at("threshold").get<double>();
        ckpt.config.attn_gain = c.at("attn_gain").get<double>();
        ckpt.config.d_gte = c.at("d_gte").get<num::Index>();
        ckpt.config.validate();
        for (const json& t : doc.at("tensors")) {
            const auto rows = t.at("rows").get<num::Index>();
            const auto cols = t.at("cols").get<num::Index>();
            const auto& values = t.at("values");
            if (num::Index(values.size()) != rows * cols) {
                throw IoError("analyzer tensor '" + t.at("name").get<std::string>() +
                              "' value count does not match its shape");
            }
            num::Mat m(rows, cols);
            for (num::Index i = 0; i < m.size(); ++i) m.data()[i] = values.at(i).get<double>();
            ckpt.store.create(t.at("name").get<std::string>(), m);
        }
        return ckpt;
    } catch (const json::exception&) {
        throw IoError("analyzer checkpoint " + path + " is malformed");
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"instruction-conditioned phoneme duration and prosody toolkit", "dubalign"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    std::vector<CLI::Option*> seed_options;

    std::string corpus_path, checkpoint_path, fixtures_path, endpoint_url, scale_mode;
    std::string predictions_path, analyzer_path, disjoint_from;
    long n_samples = 0;
    bool shift = false;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON configuration file")
            ->check(CLI::ExistingFile);
        cmd->add_option("--out", out_dir, "output directory, created if missing");
        cmd->add_option("--set", overrides,
                        "override one configuration value: key.path=value (repeatable)");
        seed_options.push_back(cmd->add_option("--seed", seed, "run seed"));
    };
    const auto add_corpus = [&](CLI::App* cmd) {
        cmd->add_option("corpus", corpus_path, "corpus file (one JSON sample per line)")
            ->required()
            ->check(CLI::ExistingFile);
    };
    const auto add_sources = [&](CLI::App* cmd) {
        cmd->add_option("--fixtures", fixtures_path,
                        "instruction fixture file overriding corpus instructions")
            ->check(CLI::ExistingFile);
        cmd->add_option("--endpoint", endpoint_url,
                        "instruction service base URL (wins over --fixtures)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    add_common(gen);
    CLI::Option* n_option = gen->add_option("--n", n_samples, "number of samples");
    gen->add_flag("--shift", shift, "draw emotion keywords from the paraphrase pools only");
    gen->add_option("--disjoint-from", disjoint_from,
                    "existing corpus whose scripts must not reappear")
        ->check(CLI::ExistingFile);

    CLI::App* trn = app.add_subcommand("train", "train the duration/prosody model");
    add_common(trn);
    add_corpus(trn);
    add_sources(trn);
    trn->add_option("--checkpoint", checkpoint_path, "checkpoint to resume from")
        ->check(CLI::ExistingFile);

    CLI::App* cal = app.add_subcommand("calibrate", "calibrate the instruction analyzer");
    add_common(cal);
    add_corpus(cal);
    add_sources(cal);

    CLI::App* prd = app.add_subcommand("predict", "write per-sample predictions");
    add_common(prd);
    add_corpus(prd);
    add_sources(prd);
    prd->add_option("--checkpoint", checkpoint_path, "trained model checkpoint")
        ->check(CLI::ExistingFile);
    prd->add_option("--analyzer", analyzer_path, "calibrated analyzer checkpoint")
        ->check(CLI::ExistingFile);
    prd->add_option("--scale-mode", scale_mode, "duration rescaling: continuous or integer");

    CLI::App* evl = app.add_subcommand("eval", "score predictions against a corpus");
    add_common(evl);
    add_corpus(evl);
    evl->add_option("--predictions", predictions_path, "prediction file to score")
        ->required()
        ->check(CLI::ExistingFile);

    CLI::App* grd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(grd);

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig rc = RunConfig::load(config_path, overrides);
        for (const CLI::Option* option : seed_options) {
            if (option->count() > 0) rc.tree["seed"] = seed;
        }
        if (n_option->count() > 0) rc.tree["synth"]["n_samples"] = n_samples;
        if (shift) rc.tree["synth"]["paraphrase_shift"] = true;
        if (!scale_mode.empty()) {
            idd::scale_mode_from(scale_mode);  // reject bad names before folding
            rc.tree["idd"]["scale_mode"] = scale_mode;
        }
        if (!endpoint_url.empty()) rc.tree["provider"]["url"] = endpoint_url;

        fs::create_directories(out_dir);
        Manifest manifest;
        manifest.config = rc.tree;

        bool ok = true;
        if (app.got_subcommand(gen)) {
            manifest.command = "gen-data";
            run_gen_data(rc, out_dir, disjoint_from, manifest, out);
        } else if (app.got_subcommand(trn)) {
            manifest.command = "train";
            run_train(rc, out_dir, corpus_path, checkpoint_path, fixtures_path, manifest, out);
        } else if (app.got_subcommand(cal)) {
            manifest.command = "calibrate";
            run_calibrate(rc, out_dir, corpus_path, fixtures_path, manifest, out);
        } else if (app.got_subcommand(prd)) {
            manifest.command = "predict";
            run_predict(rc, out_dir, corpus_path, checkpoint_path, analyzer_path, fixtures_path,
                        manifest, out);
        } else if (app.got_subcommand(evl)) {
            manifest.command = "eval";
            run_eval(rc, out_dir, corpus_path, predictions_path, manifest, out);
        } else {
            manifest.command = "gradcheck";
            ok = run_gradcheck(rc, out_dir, manifest, out);
        }
        manifest.write(out_dir);
        if (!ok) {
            err << "error: gradient check failed; see " << out_dir << "/gradcheck.txt\n";
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dubalign::cli
