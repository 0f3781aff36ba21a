#pragma once

#include <string>
#include <vector>

#include "dubalign/idd.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/numerics.hpp"
#include "dubalign/textfront.hpp"

namespace dubalign::train {

using num::Index;
using num::Mat;
using num::ParamStore;
using num::Vec;

// ---------------------------------------------------------------------------
// Samples.
// ---------------------------------------------------------------------------

struct Sample {
    std::string sample_id;
    std::string script;
    text::PhonemeSequence phonemes;
    text::InstructionRecord dur_instruction;
    text::InstructionRecord emo_instruction;
    Vec gt_durations;  // frames per phoneme, > 0
    Vec gt_pitch;
    Vec gt_energy;
    std::vector<iec::Emotion> gt_entities;
    long video_frames{0};
    std::string speaker_id;
    Vec emotion_embedding;  // optional reference vector, evaluation only

    // Length agreement, positive durations, positive video length.
    void validate() const;
};

// One JSON object per line; errors carry the line number and sample id.
std::string sample_to_json(const Sample& s);
Sample sample_from_json(const std::string& line);
void write_corpus(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_corpus(const std::string& path);

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda1{2.0};  // duration term
    double lambda2{1.0};  // prosody term
    void validate() const;
};

// Mean absolute frame error, computed on unscaled predictions.
double loss_dur(const Vec& pred_frames, const Vec& gt_frames, Vec* dpred = nullptr);
// Mean over phonemes of |pitch error| + |energy error|.
double loss_emo(const Vec& pred_pitch, const Vec& gt_pitch, const Vec& pred_energy,
                const Vec& gt_energy, Vec* dpitch = nullptr, Vec* denergy = nullptr);
double total_loss(double l_dur, double l_emo, const LossWeights& w);

// ---------------------------------------------------------------------------
// Model: the trainable parameter bank plus its prediction paths.
// ---------------------------------------------------------------------------

struct ModelConfig {
    text::ModelDims dims;
    idd::IddConfig idd;
    std::uint64_t seed{1};
    void validate() const;
    bool operator==(const ModelConfig& other) const;
};

struct Model {
    ModelConfig cfg;
    ParamStore store;

    explicit Model(const ModelConfig& cfg);

    // Unscaled per-phoneme frame predictions for a duration instruction.
    Vec raw_frames(const text::PhonemeSequence& phonemes,
                   const text::InstructionRecord& dur_instruction) const;
    // Frame predictions rescaled to the video length per the config.
    idd::DurationPrediction durations(const text::PhonemeSequence& phonemes,
                                      const text::InstructionRecord& dur_instruction,
                                      long video_frames) const;
    iec::ProsodyPrediction prosody(const text::PhonemeSequence& phonemes,
                                   const std::vector<iec::Emotion>& entities) const;
};

struct SampleLosses {
    double total{0.0};
    double dur{0.0};
    double emo{0.0};
};

// Forward + backward for one sample: duration path conditioned on the
// duration instruction, prosody path conditioned on the ground-truth
// entities. Gradients accumulate into the store.
SampleLosses sample_loss_and_grads(Model& model, const Sample& sample, const LossWeights& w);

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    num::AdamConfig adam;
    int epochs{30};
    LossWeights weights;
    void validate() const;
};

struct StepRecord {
    int epoch{0};
    int step{0};  // global step index
    std::string sample_id;
    double total{0.0};
    double dur{0.0};
    double emo{0.0};
};

// Batch-1 passes over the corpus in order; deterministic given the model
// seed and corpus. A non-finite loss aborts with the parameters as of the
// last completed step saved to `abort_checkpoint_path` (when non-empty).
// `trace_path` (when non-empty) receives one JSON line per step.
std::vector<StepRecord> train(Model& model, const std::vector<Sample>& corpus,
                              const TrainConfig& cfg, const std::string& trace_path = "",
                              const std::string& abort_checkpoint_path = "");

// ---------------------------------------------------------------------------
// Checkpoints: versioned named-tensor container. A JSON header line records
// the format version, value encoding, config echo, tensor count, and
// optimizer step count; each tensor then carries name/shape plus its value
// and Adam moment payloads, either as 64-bit little-endian doubles or as
// decimal text, per the header's mode.
// ---------------------------------------------------------------------------

enum class CheckpointMode { binary, text };

void save_checkpoint(const ParamStore& store, const ModelConfig& cfg, const std::string& path,
                     CheckpointMode mode = CheckpointMode::binary);

struct Checkpoint {
    ModelConfig config;
    ParamStore store;
};

Checkpoint load_checkpoint(const std::string& path);

// Replace the model's parameters with checkpoint contents, validating that
// every tensor matches the shapes this model registered.
void adopt_checkpoint(Model& model, Checkpoint&& ckpt);

}  // namespace dubalign::train
