#include "dubalign/training.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dubalign/common.hpp"
#include "dubalign/paths.hpp"
#include "json.hpp"

namespace dubalign::train {
namespace {

using nlohmann::json;

json vec_to_json(const Vec& v) {
    json arr = json::array();
    for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

Vec vec_from_json(const json& arr) {
    Vec v(Index(arr.size()));
    Index i = 0;
    for (const auto& x : arr) v(i++) = x.get<double>();
    return v;
}

json record_to_json(const text::InstructionRecord& rec) {
    return json{{"kind", text::to_string(rec.kind)},
                {"text", rec.text},
                {"source", text::to_string(rec.source)}};
}

text::InstructionRecord record_from_json(const std::string& sample_id, const json& j) {
    return {sample_id, text::instruction_kind_from(j.at("kind").get<std::string>()),
            j.at("text").get<std::string>(),
            text::instruction_source_from(j.at("source").get<std::string>())};
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"dims",
                 {{"d_gte", cfg.dims.d_gte},
                  {"d_m", cfg.dims.d_m},
                  {"rnn_hidden", cfg.dims.rnn_hidden}}},
                {"idd",
                 {{"prototypes", cfg.idd.prototypes},
                  {"iterations", cfg.idd.iterations},
                  {"aggregate", idd::to_string(cfg.idd.aggregate)},
                  {"scale_mode", idd::to_string(cfg.idd.scale_mode)}}},
                {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    const auto& dims = j.at("dims");
    cfg.dims.d_gte = dims.at("d_gte").get<Index>();
    cfg.dims.d_m = dims.at("d_m").get<Index>();
    cfg.dims.rnn_hidden = dims.at("rnn_hidden").get<Index>();
    const auto& id = j.at("idd");
    cfg.idd.prototypes = id.at("prototypes").get<Index>();
    cfg.idd.iterations = id.at("iterations").get<Index>();
    cfg.idd.aggregate = idd::aggregate_from(id.at("aggregate").get<std::string>());
    cfg.idd.scale_mode = idd::scale_mode_from(id.at("scale_mode").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

void write_values_binary(std::ostream& out, const Mat& m) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint payloads are little-endian");
    out.write(reinterpret_cast<const char*>(m.data()),
              std::streamsize(sizeof(double) * size_t(m.size())));
}

void write_values_text(std::ostream& out, const Mat& m) {
    char buf[40];
    for (Index i = 0; i < m.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", m.data()[i]);
        out << buf << (i + 1 == m.size() ? "" : " ");
    }
    out << "\n";
}

void read_values_binary(std::istream& in, Mat& m, const std::string& name) {
    in.read(reinterpret_cast<char*>(m.data()),
            std::streamsize(sizeof(double) * size_t(m.size())));
    if (!in) throw IoError("checkpoint truncated in tensor '" + name + "'");
}

void read_values_text(std::istream& in, Mat& m, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) throw IoError("checkpoint truncated in tensor '" + name + "'");
    const char* p = line.c_str();
    for (Index i = 0; i < m.size(); ++i) {
        char* end = nullptr;
        const double v = std::strtod(p, &end);
        if (end == p) {
            throw IoError("checkpoint tensor '" + name + "' holds " + std::to_string(i) +
                          " of " + std::to_string(m.size()) + " expected values");
        }
        m.data()[i] = v;
        p = end;
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Samples.
// ---------------------------------------------------------------------------

void Sample::validate() const {
    const auto fail = [&](const std::string& what) {
        throw InvalidInput("sample " + sample_id + ": " + what);
    };
    if (sample_id.empty()) throw InvalidInput("sample with empty sample_id");
    const Index l = Index(phonemes.size());
    if (l == 0) fail("no phonemes");
    for (const auto& ph : phonemes.phonemes) text::phoneme_index(ph);
    if (gt_durations.size() != l || gt_pitch.size() != l || gt_energy.size() != l) {
        fail("ground-truth arrays must have one value per phoneme (" + std::to_string(l) +
             "), got durations=" + std::to_string(gt_durations.size()) +
             " pitch=" + std::to_string(gt_pitch.size()) +
             " energy=" + std::to_string(gt_energy.size()));
    }
    if ((gt_durations.array() <= 0.0).any()) fail("ground-truth durations must be positive");
    if (video_frames < 1) fail("video_frames must be at least 1");
    if (gt_entities.empty()) fail("no ground-truth entities");
    if (dur_instruction.kind != text::InstructionKind::duration) {
        fail("dur_instruction has kind '" + text::to_string(dur_instruction.kind) + "'");
    }
    if (emo_instruction.kind != text::InstructionKind::emotion) {
        fail("emo_instruction has kind '" + text::to_string(emo_instruction.kind) + "'");
    }
}

std::string sample_to_json(const Sample& s) {
    json j{{"sample_id", s.sample_id},
           {"script", s.script},
           {"phonemes", s.phonemes.phonemes},
           {"dur_instruction", record_to_json(s.dur_instruction)},
           {"emo_instruction", record_to_json(s.emo_instruction)},
           {"gt_durations", vec_to_json(s.gt_durations)},
           {"gt_pitch", vec_to_json(s.gt_pitch)},
           {"gt_energy", vec_to_json(s.gt_energy)},
           {"gt_entities", json::array()},
           {"video_frames", s.video_frames},
           {"speaker_id", s.speaker_id}};
    for (const auto e : s.gt_entities) j["gt_entities"].push_back(iec::to_string(e));
    if (s.emotion_embedding.size() > 0) j["emotion_embedding"] = vec_to_json(s.emotion_embedding);
    return j.dump();
}

Sample sample_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed sample record: ") + e.what());
    }
    Sample s;
    try {
        s.sample_id = j.at("sample_id").get<std::string>();
        s.script = j.at("script").get<std::string>();
        s.phonemes.phonemes = j.at("phonemes").get<std::vector<std::string>>();
        s.dur_instruction = record_from_json(s.sample_id, j.at("dur_instruction"));
        s.emo_instruction = record_from_json(s.sample_id, j.at("emo_instruction"));
        s.gt_durations = vec_from_json(j.at("gt_durations"));
        s.gt_pitch = vec_from_json(j.at("gt_pitch"));
        s.gt_energy = vec_from_json(j.at("gt_energy"));
        for (const auto& label : j.at("gt_entities")) {
            s.gt_entities.push_back(iec::emotion_from(label.get<std::string>()));
        }
        s.video_frames = j.at("video_frames").get<long>();
        s.speaker_id = j.at("speaker_id").get<std::string>();
        if (j.contains("emotion_embedding")) {
            s.emotion_embedding = vec_from_json(j.at("emotion_embedding"));
        }
    } catch (const json::exception& e) {
        throw InvalidInput("sample record" +
                           (s.sample_id.empty() ? std::string() : " " + s.sample_id) + ": " +
                           e.what());
    }
    s.validate();
    return s;
}

void write_corpus(const std::string& path, const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out += sample_to_json(s);
        out += '\n';
    }
    write_file(path, out);
}

std::vector<Sample> read_corpus(const std::string& path) {
    std::istringstream in{read_file(path)};
    std::vector<Sample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            samples.push_back(sample_from_json(line));
        } catch (const Error& e) {
            throw InvalidInput(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (samples.empty()) throw InvalidInput(path + ": corpus holds no samples");
    return samples;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

void LossWeights::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be >= 0");
}

double loss_dur(const Vec& pred_frames, const Vec& gt_frames, Vec* dpred) {
    if (pred_frames.size() != gt_frames.size()) {
        throw ShapeError("duration loss over " + std::to_string(pred_frames.size()) +
                         " predictions vs " + std::to_string(gt_frames.size()) + " targets");
    }
    if (pred_frames.size() == 0) throw InvalidInput("duration loss over zero phonemes");
    const double n = double(pred_frames.size());
    if (dpred) {
        *dpred = (pred_frames - gt_frames).array().sign().matrix() / n;
    }
    return (pred_frames - gt_frames).cwiseAbs().sum() / n;
}

double loss_emo(const Vec& pred_pitch, const Vec& gt_pitch, const Vec& pred_energy,
                const Vec& gt_energy, Vec* dpitch, Vec* denergy) {
    if (pred_pitch.size() != gt_pitch.size() || pred_energy.size() != gt_energy.size() ||
        pred_pitch.size() != pred_energy.size()) {
        throw ShapeError("prosody loss over mismatched lengths: pitch " +
                         std::to_string(pred_pitch.size()) + "/" +
                         std::to_string(gt_pitch.size()) + ", energy " +
                         std::to_string(pred_energy.size()) + "/" +
                         std::to_string(gt_energy.size()));
    }
    if (pred_pitch.size() == 0) throw InvalidInput("prosody loss over zero phonemes");
    const double n = double(pred_pitch.size());
    if (dpitch) *dpitch = (pred_pitch - gt_pitch).array().sign().matrix() / n;
    if (denergy) *denergy = (pred_energy - gt_energy).array().sign().matrix() / n;
    return ((pred_pitch - gt_pitch).cwiseAbs().sum() +
            (pred_energy - gt_energy).cwiseAbs().sum()) /
           n;
}

double total_loss(double l_dur, double l_emo, const LossWeights& w) {
    w.validate();
    return w.lambda1 * l_dur + w.lambda2 * l_emo;
}

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (dims.d_gte < 8) throw ConfigError("model.d_gte must be at least 8");
    if (dims.d_m < 1) throw ConfigError("model.d_m must be at least 1");
    if (dims.rnn_hidden < 1) throw ConfigError("model.rnn_hidden must be at least 1");
    idd.validate();
}

bool ModelConfig::operator==(const ModelConfig& other) const {
    return dims.d_gte == other.dims.d_gte && dims.d_m == other.dims.d_m &&
           dims.rnn_hidden == other.dims.rnn_hidden &&
           idd.prototypes == other.idd.prototypes && idd.iterations == other.idd.iterations &&
           idd.aggregate == other.idd.aggregate && idd.scale_mode == other.idd.scale_mode &&
           seed == other.seed;
}

Model::Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    Rng rng(cfg.seed);
    text::register_phoneme_table(store, cfg.dims.d_m, rng);
    idd::register_idd(store, cfg.idd, cfg.dims, rng);
    iec::register_prosody(store, cfg.dims, rng);
}

Vec Model::raw_frames(const text::PhonemeSequence& phonemes,
                      const text::InstructionRecord& dur_instruction) const {
    const Mat tp = text::embed_phonemes(store, phonemes);
    const Mat e_dur = text::embed_instruction(dur_instruction, cfg.dims.d_gte);
    const Mat protos = idd::distill_duration(store, cfg.idd, e_dur);
    // Residual connection around the attention: the predictor must keep
    // seeing each phoneme's own features, not just the prototype readout.
    const Mat fused = tp + idd::fuse_duration(store, tp, protos);
    const Vec ylog = idd::predict_log_durations(store, fused);
    return ylog.array().exp().matrix();
}

idd::DurationPrediction Model::durations(const text::PhonemeSequence& phonemes,
                                         const text::InstructionRecord& dur_instruction,
                                         long video_frames) const {
    return idd::scale_durations(raw_frames(phonemes, dur_instruction), video_frames,
                                cfg.idd.scale_mode);
}

iec::ProsodyPrediction Model::prosody(const text::PhonemeSequence& phonemes,
                                      const std::vector<iec::Emotion>& entities) const {
    const Mat tp = text::embed_phonemes(store, phonemes);
    const Mat e_emo = iec::embed_entities(entities, cfg.dims.d_gte);
    return iec::predict_prosody(store, tp, e_emo);
}

SampleLosses sample_loss_and_grads(Model& model, const Sample& sample, const LossWeights& w) {
    w.validate();
    sample.validate();
    ParamStore& store = model.store;

    const Mat tp = text::embed_phonemes(store, sample.phonemes);

    // Duration path: instruction -> prototypes -> fused phoneme features ->
    // per-phoneme log frames, supervised in frame space before any rescale.
    const Mat e_dur = text::embed_instruction(sample.dur_instruction, model.cfg.dims.d_gte);
    idd::DistillCache distill_cache;
    const Mat protos = idd::distill_duration(store, model.cfg.idd, e_dur, &distill_cache);
    paths::CrossAttendCache fuse_cache;
    const Mat fused = tp + idd::fuse_duration(store, tp, protos, &fuse_cache);
    paths::RegressorCache dur_cache;
    const Vec ylog = idd::predict_log_durations(store, fused, &dur_cache);
    const Vec pred_frames = ylog.array().exp().matrix();

    SampleLosses out;
    Vec dpred;
    out.dur = loss_dur(pred_frames, sample.gt_durations, &dpred);

    // Prosody path conditioned on the ground-truth entities.
    const Mat e_emo = iec::embed_entities(sample.gt_entities, model.cfg.dims.d_gte);
    iec::ProsodyCache pros_cache;
    const auto pros = iec::predict_prosody(store, tp, e_emo, &pros_cache);
    Vec dpitch, denergy;
    out.emo = loss_emo(pros.pitch, sample.gt_pitch, pros.energy, sample.gt_energy, &dpitch,
                       &denergy);
    out.total = total_loss(out.dur, out.emo, w);

    // Backward, each branch scaled by its loss weight; the two phoneme
    // feature gradients meet at the shared table.
    const Vec dylog = (w.lambda1 * dpred.array() * pred_frames.array()).matrix();
    const Mat dfused = paths::regressor_backward(store, "idd", {{"dur", dylog}}, dur_cache);
    const auto fuse_grads = paths::cross_attend_backward(store, "idd.fuse", dfused, fuse_cache);
    idd::distill_duration_backward(store, model.cfg.idd, fuse_grads.dcontext, distill_cache);

    const Vec dpitch_w = (w.lambda2 * dpitch.array()).matrix();
    const Vec denergy_w = (w.lambda2 * denergy.array()).matrix();
    const Mat dtp_emo = iec::predict_prosody_backward(store, dpitch_w, denergy_w, pros_cache);

    // dfused reaches the phoneme features twice: through the attention
    // queries and through the residual identity.
    text::embed_phonemes_backward(store, sample.phonemes,
                                  fuse_grads.dqueries + dfused + dtp_emo);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    adam.validate();
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    weights.validate();
}

std::vector<StepRecord> train(Model& model, const std::vector<Sample>& corpus,
                              const TrainConfig& cfg, const std::string& trace_path,
                              const std::string& abort_checkpoint_path) {
    cfg.validate();
    if (corpus.empty()) throw InvalidInput("training requires a non-empty corpus");

    std::ofstream trace;
    if (!trace_path.empty()) {
        trace.open(trace_path, std::ios::binary | std::ios::trunc);
        if (!trace) throw IoError("cannot open loss trace for writing: " + trace_path);
    }

    std::vector<StepRecord> records;
    records.reserve(size_t(cfg.epochs) * corpus.size());
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& sample : corpus) {
            model.store.zero_grads();
            const SampleLosses losses = sample_loss_and_grads(model, sample, cfg.weights);
            if (!std::isfinite(losses.total)) {
                if (!abort_checkpoint_path.empty()) {
                    save_checkpoint(model.store, model.cfg, abort_checkpoint_path);
                }
                throw Error("non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                            sample.sample_id +
                            (abort_checkpoint_path.empty()
                                 ? std::string("; aborting")
                                 : "; last-good parameters saved to " + abort_checkpoint_path));
            }
            num::adam_step(model.store, cfg.adam);
            ++step;
            records.push_back({epoch, step, sample.sample_id, losses.total, losses.dur,
                               losses.emo});
            if (trace.is_open()) {
                trace << json{{"epoch", epoch},
                              {"step", step},
                              {"sample_id", sample.sample_id},
                              {"total", losses.total},
                              {"dur", losses.dur},
                              {"emo", losses.emo}}
                             .dump()
                      << "\n";
            }
        }
    }
    return records;
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

void save_checkpoint(const ParamStore& store, const ModelConfig& cfg, const std::string& path,
                     CheckpointMode mode) {
    cfg.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);

    const json header{{"format_version", 1},
                      {"mode", mode == CheckpointMode::binary ? "binary" : "text"},
                      {"tensor_count", store.size()},
                      {"step_count", store.step_count()},
                      {"config", model_config_to_json(cfg)}};
    out << header.dump() << "\n";

    for (const auto& name : store.names()) {
        const auto& entry = store.entry(name);
        out << json{{"name", name}, {"rows", entry.value.rows()}, {"cols", entry.value.cols()}}
                   .dump()
            << "\n";
        for (const Mat* m : {&entry.value, &entry.adam_m, &entry.adam_v}) {
            if (mode == CheckpointMode::binary) {
                write_values_binary(out, *m);
            } else {
                write_values_text(out, *m);
            }
        }
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);

    std::string line;
    if (!std::getline(in, line)) throw IoError("checkpoint is empty: " + path);
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError("checkpoint header: " + std::string(e.what()));
    }

    Checkpoint ckpt;
    bool binary = true;
    long tensor_count = 0;
    try {
        const int version = header.at("format_version").get<int>();
        if (version != 1) {
            throw IoError("unsupported checkpoint format version " + std::to_string(version) +
                          " (expected 1)");
        }
        const std::string mode = header.at("mode").get<std::string>();
        if (mode != "binary" && mode != "text") {
            throw IoError("unknown checkpoint value mode '" + mode + "'");
        }
        binary = mode == "binary";
        tensor_count = header.at("tensor_count").get<long>();
        ckpt.config = model_config_from_json(header.at("config"));
        ckpt.store.set_step_count(header.at("step_count").get<long>());
    } catch (const json::exception& e) {
        throw IoError("checkpoint header: " + std::string(e.what()));
    }

    for (long t = 0; t < tensor_count; ++t) {
        if (!std::getline(in, line)) {
            throw IoError("checkpoint ends after " + std::to_string(t) + " of " +
                          std::to_string(tensor_count) + " tensors");
        }
        std::string name;
        Index rows = 0, cols = 0;
        try {
            const json meta = json::parse(line);
            name = meta.at("name").get<std::string>();
            rows = meta.at("rows").get<Index>();
            cols = meta.at("cols").get<Index>();
        } catch (const json::exception& e) {
            throw IoError("checkpoint tensor " + std::to_string(t) + " metadata: " + e.what());
        }
        if (rows < 1 || cols < 1) {
            throw IoError("checkpoint tensor '" + name + "' declares shape " +
                          std::to_string(rows) + "x" + std::to_string(cols));
        }
        ckpt.store.create(name, rows, cols);
        auto& entry = ckpt.store.entry(name);
        for (Mat* m : {&entry.value, &entry.adam_m, &entry.adam_v}) {
            if (binary) {
                read_values_binary(in, *m, name);
            } else {
                read_values_text(in, *m, name);
            }
        }
    }
    if (std::getline(in, line) && !line.empty()) {
        throw IoError("checkpoint carries trailing data after " +
                      std::to_string(tensor_count) + " tensors");
    }
    return ckpt;
}

void adopt_checkpoint(Model& model, Checkpoint&& ckpt) {
    for (const auto& name : model.store.names()) {
        if (!ckpt.store.has(name)) {
            throw IoError("checkpoint is missing tensor '" + name + "'");
        }
        const Mat& expected = model.store.value(name);
        const Mat& got = ckpt.store.value(name);
        if (expected.rows() != got.rows() || expected.cols() != got.cols()) {
            throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                             std::to_string(got.rows()) + "x" + std::to_string(got.cols()) +
                             " but this run expects " + std::to_string(expected.rows()) + "x" +
                             std::to_string(expected.cols()));
        }
    }
    if (ckpt.store.size() != model.store.size()) {
        for (const auto& name : ckpt.store.names()) {
            if (!model.store.has(name)) {
                throw IoError("checkpoint carries unexpected tensor '" + name + "'");
            }
        }
    }
    if (!(ckpt.config == model.cfg)) {
        throw ConfigError("checkpoint config does not match this run's model config");
    }
    model.store = std::move(ckpt.store);
}

}  // namespace dubalign::train
