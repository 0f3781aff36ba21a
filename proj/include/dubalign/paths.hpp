#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dubalign/numerics.hpp"

namespace dubalign::paths {

using num::Index;
using num::Mat;
using num::ParamStore;
using num::Vec;

// ---------------------------------------------------------------------------
// Single-head cross-attention over a dimension-reduced context.
//
// Parameters under `prefix`:
//   .reduce [d_m x d_gte]  context reduction
//   .wq .wk .wv [d_m x d_m]  attention projections
// Queries stay in d_m; the context is first mapped d_gte -> d_m, then
// projected to keys/values. Softmax runs over the context rows with
// divisor sqrt(d_m).
// ---------------------------------------------------------------------------

void register_cross_attend(ParamStore& store, const std::string& prefix, Index d_gte, Index d_m,
                           Rng& rng);

struct CrossAttendCache {
    Mat queries, context, reduced;
    Mat q, k, v;
    num::SdpaCache attn;
};

Mat cross_attend(const ParamStore& store, const std::string& prefix, const Mat& queries,
                 const Mat& context, CrossAttendCache* cache = nullptr);

struct CrossAttendGrads {
    Mat dqueries, dcontext;
};

CrossAttendGrads cross_attend_backward(ParamStore& store, const std::string& prefix,
                                       const Mat& dout, const CrossAttendCache& cache);

// ---------------------------------------------------------------------------
// Sequence regressor: bidirectional recurrence plus one scalar head per
// named output, shared by the duration and prosody predictors.
//
// Parameters under `prefix`:
//   .rnn.fwd.* / .rnn.bwd.*       recurrent cells (d_in -> hidden each way)
//   .head_<name>.w [1 x 2*hidden] and .head_<name>.b [1 x 1] per head
// ---------------------------------------------------------------------------

void register_regressor(ParamStore& store, const std::string& prefix, Index d_in, Index hidden,
                        const std::vector<std::string>& heads, Rng& rng);

struct RegressorCache {
    num::BiGruCache rnn;
    Mat h;  // [L x 2*hidden]
};

// Recurrent features for the heads.
Mat regressor_hidden(const ParamStore& store, const std::string& prefix, const Mat& x,
                     RegressorCache* cache = nullptr);
// One value per input row for the named head.
Vec regressor_output(const ParamStore& store, const std::string& prefix, const std::string& head,
                     const Mat& h);
// Accumulates all parameter gradients; returns d(input).
Mat regressor_backward(ParamStore& store, const std::string& prefix,
                       const std::vector<std::pair<std::string, Vec>>& dheads,
                       const RegressorCache& cache);

}  // namespace dubalign::paths
