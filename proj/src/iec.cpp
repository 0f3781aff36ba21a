#include "dubalign/iec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "dubalign/common.hpp"

namespace dubalign::iec {
namespace {

// Canonical surface forms per entity; one `keyword<TAB>entity` line each.
constexpr std::string_view kKeywordsText =
    "happy\thappy\n"
    "joyful\thappy\n"
    "cheerful\thappy\n"
    "delighted\thappy\n"
    "overjoyed\thappy\n"
    "glad\thappy\n"
    "angry\tangry\n"
    "furious\tangry\n"
    "irate\tangry\n"
    "enraged\tangry\n"
    "fuming\tangry\n"
    "disgust\tdisgust\n"
    "disgusted\tdisgust\n"
    "revolted\tdisgust\n"
    "repulsed\tdisgust\n"
    "queasy\tdisgust\n"
    "fear\tfear\n"
    "afraid\tfear\n"
    "scared\tfear\n"
    "terrified\tfear\n"
    "frightened\tfear\n"
    "neutral\tneutral\n"
    "calm\tneutral\n"
    "composed\tneutral\n"
    "flat\tneutral\n"
    "detached\tneutral\n"
    "sad\tsad\n"
    "tearful\tsad\n"
    "sorrowful\tsad\n"
    "mournful\tsad\n"
    "gloomy\tsad\n"
    "surprise\tsurprise\n"
    "surprised\tsurprise\n"
    "astonished\tsurprise\n"
    "startled\tsurprise\n"
    "amazed\tsurprise\n";

KeywordMap parse_keywords_text(std::string_view text, const std::string& origin) {
    KeywordMap map;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fail = [&](const std::string& what) {
            throw InvalidInput(origin + " line " + std::to_string(line_no) + ": " + what);
        };
        const auto tab = line.find('\t');
        if (tab == std::string::npos) fail("expected keyword<TAB>entity");
        const std::string keyword = lowercase(line.substr(0, tab));
        const std::string label = lowercase(line.substr(tab + 1));
        if (keyword.empty()) fail("empty keyword");
        if (keyword.find_first_of(" \t") != std::string::npos) fail("keyword must be a single word");
        const auto& vocab = emotion_vocabulary();
        if (std::find(vocab.begin(), vocab.end(), label) == vocab.end()) {
            fail("unknown entity '" + label + "'");
        }
        if (!map.entries.emplace(keyword, emotion_from(label)).second) {
            fail("duplicate keyword '" + keyword + "'");
        }
    }
    return map;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// The six adapted linear maps, in registration order.
const std::vector<std::string>& adapter_targets() {
    static const std::vector<std::string> targets{"wq", "wk", "wv", "ff1", "ff2", "head"};
    return targets;
}

Mat merged_map(const ParamStore& store, const std::string& target) {
    const Mat& base = store.value("an." + target + ".base");
    const Mat& a = store.value("an." + target + ".a");
    const Mat& b = store.value("an." + target + ".b");
    return base + a * b;
}

// dW' = dBase + d(A B); scatter the adapter part, leave the base frozen.
void scatter_adapter_grad(ParamStore& store, const std::string& target, const Mat& dmerged) {
    const Mat& a = store.value("an." + target + ".a");
    const Mat& b = store.value("an." + target + ".b");
    store.grad("an." + target + ".a") += dmerged * b.transpose();
    store.grad("an." + target + ".b") += a.transpose() * dmerged;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary.
// ---------------------------------------------------------------------------

const std::vector<std::string>& emotion_vocabulary() {
    static const std::vector<std::string> vocab{"happy",   "angry", "disgust", "fear",
                                                "neutral", "sad",   "surprise"};
    return vocab;
}

std::string to_string(Emotion e) { return emotion_vocabulary().at(static_cast<int>(e)); }

Emotion emotion_from(const std::string& label) {
    const auto& vocab = emotion_vocabulary();
    for (int i = 0; i < EMOTION_COUNT; ++i) {
        if (vocab[i] == label) return static_cast<Emotion>(i);
    }
    throw InvalidInput("unknown emotion entity: " + label);
}

// ---------------------------------------------------------------------------
// Rule-based analyzer.
// ---------------------------------------------------------------------------

const KeywordMap& KeywordMap::builtin() {
    static const KeywordMap map = parse_keywords_text(kKeywordsText, "builtin keywords");
    return map;
}

KeywordMap KeywordMap::load(const std::string& path) {
    return parse_keywords_text(read_file(path), path);
}

std::string_view builtin_keywords_text() { return kKeywordsText; }

std::vector<Emotion> analyze_rule(const text::InstructionRecord& rec) {
    return analyze_rule(rec, KeywordMap::builtin());
}

std::vector<Emotion> analyze_rule(const text::InstructionRecord& rec, const KeywordMap& map) {
    if (rec.kind != text::InstructionKind::emotion) {
        throw InvalidInput("entity analysis expects an emotion instruction, got kind '" +
                           text::to_string(rec.kind) + "' for sample " + rec.sample_id);
    }
    std::vector<Emotion> out;
    for (const auto& word : tokenize_words(rec.text)) {
        const auto it = map.entries.find(word);
        if (it == map.entries.end()) continue;
        if (std::find(out.begin(), out.end(), it->second) == out.end()) out.push_back(it->second);
    }
    if (out.empty()) out.push_back(Emotion::neutral);
    return out;
}

// ---------------------------------------------------------------------------
// Low-rank adaptation.
// ---------------------------------------------------------------------------

Mat lora_merged(const Mat& w, const LoraAdapter& adapter) {
    if (adapter.a.rows() != w.rows() || adapter.b.cols() != w.cols() ||
        adapter.a.cols() != adapter.b.rows()) {
        throw ShapeError("adapter '" + adapter.target + "' [" + std::to_string(adapter.a.rows()) +
                         "x" + std::to_string(adapter.a.cols()) + "]*[" +
                         std::to_string(adapter.b.rows()) + "x" + std::to_string(adapter.b.cols()) +
                         "] does not fit base [" + std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + "]");
    }
    return w + adapter.a * adapter.b;
}

Vec lora_forward(const Vec& x, const Mat& w, const LoraAdapter& adapter, bool merged) {
    if (x.size() != w.cols()) {
        throw ShapeError("input length " + std::to_string(x.size()) + " does not match base [" +
                         std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + "]");
    }
    if (merged) return lora_merged(w, adapter) * x;
    lora_merged(w, adapter);  // shape validation only
    return w * x + adapter.a * (adapter.b * x);
}

// ---------------------------------------------------------------------------
// Calibrated analyzer.
// ---------------------------------------------------------------------------

void AnalyzerConfig::validate() const {
    if (lora_rank < 0) throw ConfigError("iec.lora_rank must be >= 0");
    if (threshold <= 0.0 || threshold >= 1.0) throw ConfigError("iec.threshold must be in (0, 1)");
    if (attn_gain <= 0.0) throw ConfigError("analyzer attention gain must be positive");
    if (d_gte < 8) throw ConfigError("analyzer embedding dimension must be at least 8");
}

void register_analyzer(ParamStore& store, const AnalyzerConfig& cfg, Rng& rng) {
    cfg.validate();
    const Index d = cfg.d_gte;
    const Index r = cfg.lora_rank;

    Mat probes(EMOTION_COUNT, d);
    for (int c = 0; c < EMOTION_COUNT; ++c) {
        probes.row(c) = text::token_embedding(emotion_vocabulary()[c], d).transpose();
    }
    store.create("an.probes", probes);

    // The frozen attention scores each (probe, token) pair by gain * cosine:
    // queries are scaled probes, keys/values the raw token embeddings.
    store.create("an.wq.base", Mat(cfg.attn_gain * std::sqrt(double(d)) *
                                   Mat::Identity(d, d)));
    store.create("an.wk.base", Mat(Mat::Identity(d, d)));
    store.create("an.wv.base", Mat(Mat::Identity(d, d)));
    store.create("an.ff1.base", num::gaussian_init(d, d, 1.0 / std::sqrt(double(d)), rng));
    store.create("an.ff2.base", Mat(Mat::Zero(d, d)));
    store.create("an.head.base", probes);

    for (const auto& target : adapter_targets()) {
        const Index out = target == "head" ? Index{EMOTION_COUNT} : d;
        store.create("an." + target + ".a", num::gaussian_init(out, r, 0.1, rng));
        store.create("an." + target + ".b", r, d);  // zero: adapters start as no-ops
    }
    store.create("an.bias", EMOTION_COUNT, 1);
}

Vec analyzer_probs(const ParamStore& store, const AnalyzerConfig& cfg,
                   const text::InstructionRecord& rec, AnalyzerCache* cache) {
    AnalyzerCache local;
    AnalyzerCache& c = cache ? *cache : local;
    // Entity keywords mean the same thing wherever they sit in the sentence,
    // so the classifier pools over bare token embeddings: adding positional
    // encoding here would make each (keyword, position) pair a separate
    // surface to learn and cripple generalization to unseen positions.
    const std::vector<std::string> tokens = tokenize_words(rec.text);
    if (tokens.empty())
        throw InvalidInput("instruction text is empty for sample " + rec.sample_id);
    c.e.resize(Index(tokens.size()), cfg.d_gte);
    for (Index i = 0; i < c.e.rows(); ++i)
        c.e.row(i) = text::token_embedding(tokens[std::size_t(i)], cfg.d_gte).transpose();

    c.wq = merged_map(store, "wq");
    c.wk = merged_map(store, "wk");
    c.wv = merged_map(store, "wv");
    c.ff1 = merged_map(store, "ff1");
    c.ff2 = merged_map(store, "ff2");
    c.head = merged_map(store, "head");

    const Mat& probes = store.value("an.probes");
    c.q = num::linear(probes, c.wq);
    c.k = num::linear(c.e, c.wk);
    c.v = num::linear(c.e, c.wv);
    c.pooled = num::sdpa(c.q, c.k, c.v, &c.attn);

    c.tanh_h1 = num::linear(c.pooled, c.ff1).array().tanh().matrix();
    c.g = c.pooled + num::linear(c.tanh_h1, c.ff2);

    const Mat& bias = store.value("an.bias");
    c.logits.resize(EMOTION_COUNT);
    c.probs.resize(EMOTION_COUNT);
    for (int i = 0; i < EMOTION_COUNT; ++i) {
        c.logits(i) = c.g.row(i).dot(c.head.row(i)) + bias(i, 0);
        c.probs(i) = sigmoid(c.logits(i));
    }
    return c.probs;
}

void analyzer_backward(ParamStore& store, const Vec& dlogits, const AnalyzerCache& c) {
    if (dlogits.size() != EMOTION_COUNT) {
        throw ShapeError("expected " + std::to_string(EMOTION_COUNT) + " logit gradients, got " +
                         std::to_string(dlogits.size()));
    }
    Mat dg(EMOTION_COUNT, c.g.cols());
    Mat dhead = Mat::Zero(c.head.rows(), c.head.cols());
    for (int i = 0; i < EMOTION_COUNT; ++i) {
        dg.row(i) = dlogits(i) * c.head.row(i);
        dhead.row(i) = dlogits(i) * c.g.row(i);
    }
    store.grad("an.bias").col(0) += dlogits;
    scatter_adapter_grad(store, "head", dhead);

    Mat dpooled = dg;
    Mat dff2 = Mat::Zero(c.ff2.rows(), c.ff2.cols());
    Mat dtanh = num::linear_backward(dg, c.tanh_h1, c.ff2, dff2);
    scatter_adapter_grad(store, "ff2", dff2);
    const Mat dh1 = (dtanh.array() * (1.0 - c.tanh_h1.array().square())).matrix();
    Mat dff1 = Mat::Zero(c.ff1.rows(), c.ff1.cols());
    dpooled += num::linear_backward(dh1, c.pooled, c.ff1, dff1);
    scatter_adapter_grad(store, "ff1", dff1);

    const num::SdpaGrads attn = num::sdpa_backward(dpooled, c.attn);
    Mat dwq = Mat::Zero(c.wq.rows(), c.wq.cols());
    Mat dwk = Mat::Zero(c.wk.rows(), c.wk.cols());
    Mat dwv = Mat::Zero(c.wv.rows(), c.wv.cols());
    num::linear_backward(attn.dq, store.value("an.probes"), c.wq, dwq);
    num::linear_backward(attn.dk, c.e, c.wk, dwk);
    num::linear_backward(attn.dv, c.e, c.wv, dwv);
    scatter_adapter_grad(store, "wq", dwq);
    scatter_adapter_grad(store, "wk", dwk);
    scatter_adapter_grad(store, "wv", dwv);
}

std::vector<Emotion> analyze_calibrated(const ParamStore& store, const AnalyzerConfig& cfg,
                                        const text::InstructionRecord& rec) {
    if (rec.kind != text::InstructionKind::emotion) {
        throw InvalidInput("entity analysis expects an emotion instruction, got kind '" +
                           text::to_string(rec.kind) + "' for sample " + rec.sample_id);
    }
    const Vec probs = analyzer_probs(store, cfg, rec);
    std::vector<Emotion> out;
    for (int i = 0; i < EMOTION_COUNT; ++i) {
        if (probs(i) >= cfg.threshold) out.push_back(static_cast<Emotion>(i));
    }
    if (out.empty()) out.push_back(Emotion::neutral);
    return out;
}

double analyzer_loss(const Vec& probs, const std::vector<Emotion>& gt, Vec* dlogits) {
    if (probs.size() != EMOTION_COUNT) {
        throw ShapeError("expected " + std::to_string(EMOTION_COUNT) + " probabilities, got " +
                         std::to_string(probs.size()));
    }
    Vec y = Vec::Zero(EMOTION_COUNT);
    for (const Emotion e : gt) y(static_cast<int>(e)) = 1.0;
    double loss = 0.0;
    for (int i = 0; i < EMOTION_COUNT; ++i) {
        const double p = std::clamp(probs(i), 1e-12, 1.0 - 1e-12);
        loss -= y(i) * std::log(p) + (1.0 - y(i)) * std::log(1.0 - p);
    }
    loss /= EMOTION_COUNT;
    if (dlogits) *dlogits = (probs - y) / double(EMOTION_COUNT);
    return loss;
}

std::vector<double> calibrate_analyzer(
    ParamStore& store, const AnalyzerConfig& cfg,
    const std::vector<std::pair<text::InstructionRecord, std::vector<Emotion>>>& train,
    const num::AdamConfig& adam, int epochs) {
    adam.validate();
    if (epochs < 0) throw InvalidInput("calibration epochs must be >= 0");
    if (train.empty()) throw InvalidInput("calibration requires a non-empty training set");

    std::vector<double> trace;
    trace.reserve(epochs);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double total = 0.0;
        for (const auto& [rec, gt] : train) {
            AnalyzerCache cache;
            const Vec probs = analyzer_probs(store, cfg, rec, &cache);
            Vec dlogits;
            total += analyzer_loss(probs, gt, &dlogits);
            store.zero_grads();
            analyzer_backward(store, dlogits, cache);
            num::adam_step(store, adam);
        }
        trace.push_back(total / double(train.size()));
    }
    return trace;
}

std::uint64_t analyzer_base_digest(const ParamStore& store) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const std::string name : {"an.probes", "an.wq.base", "an.wk.base", "an.wv.base",
                                   "an.ff1.base", "an.ff2.base", "an.head.base"}) {
        const Mat& m = store.value(name);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()),
                                   sizeof(double) * size_t(m.size())),
                  h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Entity embedding and the prosody path.
// ---------------------------------------------------------------------------

Mat embed_entities(const std::vector<Emotion>& entities, Index d_gte) {
    if (entities.empty()) throw InvalidInput("cannot embed an empty entity list");
    Mat out(Index(entities.size()), d_gte);
    for (Index i = 0; i < out.rows(); ++i) {
        out.row(i) = text::token_embedding(to_string(entities[size_t(i)]), d_gte).transpose() +
                     text::positional_encoding(i, d_gte).transpose();
    }
    return out;
}

Vec entity_embedding(const std::vector<Emotion>& entities, Index dim) {
    if (entities.empty()) throw InvalidInput("cannot embed an empty entity list");
    Vec out = Vec::Zero(dim);
    for (const Emotion e : entities) out += text::token_embedding(to_string(e), dim);
    return out / double(entities.size());
}

void register_prosody(ParamStore& store, const text::ModelDims& dims, Rng& rng) {
    paths::register_cross_attend(store, "iec.fuse", dims.d_gte, dims.d_m, rng);
    paths::register_regressor(store, "iec", dims.d_m, dims.rnn_hidden, {"pitch", "energy"}, rng);
}

ProsodyPrediction predict_prosody(const ParamStore& store, const Mat& phoneme_features,
                                  const Mat& entity_embeddings, ProsodyCache* cache) {
    ProsodyCache local;
    ProsodyCache& c = cache ? *cache : local;
    // Residual connection around the attention, as in the duration path: the
    // regressor keeps each phoneme's own features alongside the entity readout.
    const Mat fused =
        phoneme_features +
        paths::cross_attend(store, "iec.fuse", phoneme_features, entity_embeddings, &c.fuse);
    const Mat h = paths::regressor_hidden(store, "iec", fused, &c.rnn);
    ProsodyPrediction pred;
    pred.pitch = paths::regressor_output(store, "iec", "pitch", h);
    pred.energy = paths::regressor_output(store, "iec", "energy", h);
    return pred;
}

Mat predict_prosody_backward(ParamStore& store, const Vec& dpitch, const Vec& denergy,
                             const ProsodyCache& cache) {
    const Mat dfused = paths::regressor_backward(
        store, "iec", {{"pitch", dpitch}, {"energy", denergy}}, cache.rnn);
    // The residual feeds dfused straight back to the phoneme features in
    // addition to the query-side attention gradient.
    return paths::cross_attend_backward(store, "iec.fuse", dfused, cache.fuse).dqueries + dfused;
}

}  // namespace dubalign::iec
