#pragma once

#include <string>
#include <vector>

#include "dubalign/numerics.hpp"
#include "dubalign/paths.hpp"
#include "dubalign/textfront.hpp"

namespace dubalign::idd {

using num::Index;
using num::Mat;
using num::ParamStore;
using num::Vec;

enum class Aggregate { sum, mean };
enum class ScaleMode { continuous, integer };

Aggregate aggregate_from(const std::string& s);
ScaleMode scale_mode_from(const std::string& s);
std::string to_string(Aggregate a);
std::string to_string(ScaleMode m);

struct IddConfig {
    Index prototypes{10};  // slot count K
    Index iterations{3};   // refinement iterations T
    Aggregate aggregate{Aggregate::sum};
    ScaleMode scale_mode{ScaleMode::continuous};
    void validate() const;
};

struct DurationPrediction {
    Vec durations_log;     // log-frame values, pre-scaling
    Vec durations_frames;  // positive frames, rescaled to the video length
    long video_frames{0};
};

// ---------------------------------------------------------------------------
// Slot distilling. Parameters under "idd.":
//   idd.slots [K x d_gte]            learned initial prototypes
//   idd.wk idd.wv idd.wq [d x d]     attention projections
//   idd.gru.*                        per-slot update cell (d -> d)
//   idd.ln.gamma idd.ln.beta [1 x d] residual-branch normalization
//   idd.mlp.w1/b1/w2/b2              residual MLP (tanh hidden, width d)
// plus the fusion map under "idd.fuse.*" and the duration regressor under
// "idd.rnn.*" / "idd.head_dur.*".
// ---------------------------------------------------------------------------

void register_idd(ParamStore& store, const IddConfig& cfg, const text::ModelDims& dims, Rng& rng);

struct DistillIterCache {
    Mat slots_in;  // [K x d]
    Mat alpha;     // [K x L], columns sum to 1
    Mat u;         // [K x d]
    Vec alpha_rowsum;
    std::vector<num::GruCache> gru;
    Mat s_gru;  // [K x d]
    num::LayerNormCache ln;
    Mat ln_out;
    Mat tanh_h1;
};

struct DistillCache {
    Mat e;     // instruction embedding [L x d]
    Mat k, v;  // shared projections
    std::vector<DistillIterCache> iters;
};

// One refinement iteration: slot-wise attention over the projected
// instruction tokens, GRU state update, then the normalized-MLP residual.
Mat distill_step(const ParamStore& store, const IddConfig& cfg, const Mat& slots, const Mat& k,
                 const Mat& v, DistillIterCache* cache = nullptr);

// Full distiller: projects the instruction embedding once, then applies
// `iterations` steps with shared weights starting from the learned slots.
// Returns the K x d_gte prototype bank.
Mat distill_duration(const ParamStore& store, const IddConfig& cfg, const Mat& e_dur,
                     DistillCache* cache = nullptr);
// Returns d(e_dur); accumulates all parameter gradients.
Mat distill_duration_backward(ParamStore& store, const IddConfig& cfg, const Mat& dprototypes,
                              const DistillCache& cache);

// Phoneme features attend into the distilled prototypes ("idd.fuse.*").
Mat fuse_duration(const ParamStore& store, const Mat& phoneme_features, const Mat& prototypes,
                  paths::CrossAttendCache* cache = nullptr);

// Per-phoneme log-frame predictions from the fused features.
Vec predict_log_durations(const ParamStore& store, const Mat& fused,
                          paths::RegressorCache* cache = nullptr);

// Rescale raw positive frame counts to sum to the video length. Integer mode
// guarantees every phoneme at least one frame (largest-remainder rounding,
// ties to the earliest phoneme) and an exact sum.
DurationPrediction scale_durations(const Vec& raw_frames, long video_frames, ScaleMode mode);

}  // namespace dubalign::idd
