#pragma once

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dubalign/numerics.hpp"
#include "dubalign/paths.hpp"
#include "dubalign/textfront.hpp"

namespace dubalign::iec {

using num::Index;
using num::Mat;
using num::ParamStore;
using num::Vec;

// ---------------------------------------------------------------------------
// Emotion entities.
// ---------------------------------------------------------------------------

enum class Emotion { happy, angry, disgust, fear, neutral, sad, surprise };
inline constexpr int EMOTION_COUNT = 7;

// Fixed vocabulary, in enum order.
const std::vector<std::string>& emotion_vocabulary();
std::string to_string(Emotion e);
Emotion emotion_from(const std::string& label);

// ---------------------------------------------------------------------------
// Rule-based analyzer: keyword scan over the instruction text.
// ---------------------------------------------------------------------------

// keyword (lowercase single word) -> entity. Loadable from a
// `keyword<TAB>entity` file; the built-in map covers the canonical surface
// forms of each entity.
struct KeywordMap {
    std::map<std::string, Emotion> entries;

    static const KeywordMap& builtin();
    static KeywordMap load(const std::string& path);
};

std::string_view builtin_keywords_text();

// Entities in first-occurrence order, deduplicated; no match -> [neutral].
std::vector<Emotion> analyze_rule(const text::InstructionRecord& rec);
std::vector<Emotion> analyze_rule(const text::InstructionRecord& rec, const KeywordMap& map);

// ---------------------------------------------------------------------------
// Low-rank adaptation.
// ---------------------------------------------------------------------------

// W' = W + A B with A [out x R], B [R x in]. R = 0 leaves W untouched.
struct LoraAdapter {
    Mat a;
    Mat b;
    std::string target;

    Index rank() const { return a.cols(); }
};

Mat lora_merged(const Mat& w, const LoraAdapter& adapter);
// Two-path evaluation W x + A (B x); `merged` folds the adapter first.
Vec lora_forward(const Vec& x, const Mat& w, const LoraAdapter& adapter, bool merged = false);

// ---------------------------------------------------------------------------
// Calibrated analyzer: a frozen attention-pooled classifier whose linear
// maps carry trainable adapters.
//
// Parameters under "an.":
//   an.probes [7 x d]                     frozen per-entity query anchors
//   an.{wq,wk,wv,ff1,ff2}.base [d x d]    frozen linear maps
//   an.head.base [7 x d]                  frozen per-entity read-out rows
//   an.<target>.a / an.<target>.b         trainable adapters per map
//   an.bias [7 x 1]                       trainable decision bias
//
// Forward: probes attend over the embedded instruction tokens (queries from
// the probes, keys/values from the tokens), a tanh feed-forward residual
// refines the pooled rows, and entity c scores as the dot product of its
// pooled row with its read-out row plus bias.
// ---------------------------------------------------------------------------

struct AnalyzerConfig {
    Index lora_rank{4};
    double threshold{0.5};  // sigmoid decision threshold; ties include
    // Gain on the frozen query map. Kept small so the calibrated adapters can
    // steer attention instead of fighting a large frozen term.
    double attn_gain{1.0};
    // Classifier embedding width, independent of the model's d_gte. Wide
    // enough that several dozen keyword embeddings stay near-orthogonal;
    // narrower widths measurably cap calibration accuracy.
    Index d_gte{128};
    void validate() const;
};

void register_analyzer(ParamStore& store, const AnalyzerConfig& cfg, Rng& rng);

struct AnalyzerCache {
    Mat e;                         // token embeddings
    Mat wq, wk, wv, ff1, ff2, head;  // merged maps used by this pass
    Mat q, k, v;
    num::SdpaCache attn;
    Mat pooled;   // attention output [7 x d]
    Mat tanh_h1;  // ff hidden
    Mat g;        // refined rows [7 x d]
    Vec logits, probs;
};

// Per-entity probabilities for an embedded instruction.
Vec analyzer_probs(const ParamStore& store, const AnalyzerConfig& cfg,
                   const text::InstructionRecord& rec, AnalyzerCache* cache = nullptr);
// Accumulates adapter and bias gradients only; frozen bases stay untouched.
void analyzer_backward(ParamStore& store, const Vec& dlogits, const AnalyzerCache& cache);

// Thresholded multi-label decision in vocabulary order; empty -> [neutral].
std::vector<Emotion> analyze_calibrated(const ParamStore& store, const AnalyzerConfig& cfg,
                                        const text::InstructionRecord& rec);

// Mean binary cross-entropy over the 7 entities against a target set.
double analyzer_loss(const Vec& probs, const std::vector<Emotion>& gt, Vec* dlogits = nullptr);

// Batch-1 calibration over (instruction, ground-truth entities) pairs.
// Returns the per-epoch mean loss; epochs = 0 leaves the store untouched.
std::vector<double> calibrate_analyzer(
    ParamStore& store, const AnalyzerConfig& cfg,
    const std::vector<std::pair<text::InstructionRecord, std::vector<Emotion>>>& train,
    const num::AdamConfig& adam, int epochs);

// Digest of every frozen base tensor, for freeze verification.
std::uint64_t analyzer_base_digest(const ParamStore& store);

// ---------------------------------------------------------------------------
// Entity embedding and the prosody path.
// ---------------------------------------------------------------------------

// One row per entity: label embedding plus list-position encoding.
Mat embed_entities(const std::vector<Emotion>& entities, Index d_gte);

// Order-free pooled embedding of an entity set (used by the similarity
// metric); dimension is the caller's choice.
Vec entity_embedding(const std::vector<Emotion>& entities, Index dim);

struct ProsodyPrediction {
    Vec pitch;
    Vec energy;
};

// Fusion ("iec.fuse.*") plus the two-head regressor ("iec.rnn.*",
// "iec.head_pitch.*", "iec.head_energy.*"); same architecture as the
// duration predictor.
void register_prosody(ParamStore& store, const text::ModelDims& dims, Rng& rng);

struct ProsodyCache {
    paths::CrossAttendCache fuse;
    paths::RegressorCache rnn;
};

ProsodyPrediction predict_prosody(const ParamStore& store, const Mat& phoneme_features,
                                  const Mat& entity_embeddings, ProsodyCache* cache = nullptr);
// Returns d(phoneme_features); entity embeddings are frozen inputs.
Mat predict_prosody_backward(ParamStore& store, const Vec& dpitch, const Vec& denergy,
                             const ProsodyCache& cache);

}  // namespace dubalign::iec
