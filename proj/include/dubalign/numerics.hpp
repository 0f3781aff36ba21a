#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dubalign/common.hpp"

namespace dubalign::num {

// All training math runs in double precision. Matrices are row-major so the
// checkpoint layout matches the in-memory layout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

struct AdamConfig {
    double lr{0.00625};
    double beta1{0.9};
    double beta2{0.98};
    double eps{1e-9};
    void validate() const;
};

struct ParamEntry {
    Mat value;
    Mat grad;
    Mat adam_m;
    Mat adam_v;
};

// Named trainable tensors with gradient slots and Adam moment buffers.
// Entries are kept in a sorted map so iteration (and therefore optimizer
// sweeps and checkpoints) is order-stable.
class ParamStore {
public:
    Mat& create(const std::string& name, Index rows, Index cols);
    Mat& create(const std::string& name, const Mat& init);

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    Mat& value(const std::string& name);
    const Mat& value(const std::string& name) const;
    Mat& grad(const std::string& name);
    const Mat& grad(const std::string& name) const;
    ParamEntry& entry(const std::string& name);
    const ParamEntry& entry(const std::string& name) const;

    void zero_grads();
    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }

    const std::map<std::string, ParamEntry>& entries() const { return entries_; }
    std::map<std::string, ParamEntry>& entries() { return entries_; }

    long step_count() const { return step_count_; }
    void set_step_count(long n) { step_count_ = n; }

private:
    std::map<std::string, ParamEntry> entries_;
    long step_count_{0};
};

enum class AdamStatus { applied, skipped_empty_grads };

// Bias-corrected Adam over every entry; grads are zeroed afterwards. If all
// gradients are exactly zero the step is skipped and the store is untouched.
AdamStatus adam_step(ParamStore& store, const AdamConfig& cfg);

Mat gaussian_init(Index rows, Index cols, double stddev, Rng& rng);

// ---------------------------------------------------------------------------
// Forward ops with hand-derived backwards. Caches hold exactly what the
// corresponding backward needs.
// ---------------------------------------------------------------------------

// Softmax normalized over the slot axis: for a [K x N] matrix of logits the
// K entries of each column sum to one.
Mat softmax_over_slots(const Mat& logits);
Mat softmax_over_slots_backward(const Mat& dy, const Mat& y);

// Softmax normalized per row (attention over keys).
Mat softmax_rows(const Mat& logits);
Mat softmax_rows_backward(const Mat& dy, const Mat& y);

// Layer normalization over the feature axis of a single vector.
Vec layer_norm(const Vec& x, const Vec& gamma, const Vec& beta, double eps);

struct LayerNormCache {
    Mat xhat;     // normalized input, rows match x
    Vec inv_std;  // per-row 1/sqrt(var + eps)
};
Mat layer_norm_rows(const Mat& x, const Vec& gamma, const Vec& beta, double eps,
                    LayerNormCache* cache = nullptr);
// Returns dx; accumulates dgamma/dbeta.
Mat layer_norm_rows_backward(const Mat& dy, const LayerNormCache& cache, const Vec& gamma,
                             Vec& dgamma, Vec& dbeta);

// y = x * w^T, x is [N x in], w is [out x in].
Mat linear(const Mat& x, const Mat& w);
// With bias b stored as an [out x 1] tensor, broadcast over rows.
Mat linear_bias(const Mat& x, const Mat& w, const Mat& b);
// Returns dx; accumulates dw (and db when given).
Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat& dw, Mat* db = nullptr);

// GRU cell parameters live in a ParamStore under `prefix` + one of
// {.wz,.uz,.bz,.wr,.ur,.br,.wh,.uh,.bh}. Update/reset convention:
//   z = sigma(Wz u + Uz s + bz)
//   r = sigma(Wr u + Ur s + br)
//   h = tanh(Wh u + Uh (r.s) + bh)
//   s' = (1 - z).s + z.h
struct GruDims {
    Index in{0};
    Index hidden{0};
};
void register_gru(ParamStore& store, const std::string& prefix, GruDims dims, Rng& rng);
GruDims gru_dims(const ParamStore& store, const std::string& prefix);

struct GruCache {
    Vec u, s_prev, z, r, hcand, rs;
};
Vec gru_cell(const ParamStore& store, const std::string& prefix, const Vec& u, const Vec& s,
             GruCache* cache = nullptr);
struct GruGrads {
    Vec du, ds;
};
GruGrads gru_cell_backward(ParamStore& store, const std::string& prefix, const Vec& ds_next,
                           const GruCache& cache);

// Bidirectional recurrence over the rows of x; output row t is the
// concatenation of the forward state at t and the backward state at t.
// Parameters live under prefix + ".fwd" / prefix + ".bwd".
void register_bigru(ParamStore& store, const std::string& prefix, GruDims dims, Rng& rng);
struct BiGruCache {
    std::vector<GruCache> fwd, bwd;
    Mat hf, hb;  // per-position states, [L x hidden]
};
Mat bigru_forward(const ParamStore& store, const std::string& prefix, const Mat& x,
                  BiGruCache* cache = nullptr);
// Returns dx.
Mat bigru_backward(ParamStore& store, const std::string& prefix, const Mat& dh,
                   const BiGruCache& cache);

// Scaled dot-product attention with rows of q as queries; softmax runs over
// the keys. Divisor is sqrt(q.cols()).
struct SdpaCache {
    Mat q, k, v, w;
    double scale{1.0};
};
Mat sdpa(const Mat& q, const Mat& k, const Mat& v, SdpaCache* cache = nullptr);
struct SdpaGrads {
    Mat dq, dk, dv;
};
SdpaGrads sdpa_backward(const Mat& dout, const SdpaCache& cache);

// ---------------------------------------------------------------------------
// Finite-difference gradient validation.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    int requested{0};
    int checked{0};
    double max_rel_err{0.0};
    bool pass{false};
    bool aborted{false};
    std::string note;
    std::string worst_name;
    Index worst_index{-1};
};

// `loss_fn` must be a pure scalar function of the store values that also
// accumulates analytic gradients into the grad slots. Central differences
// with the given step are compared against those gradients on
// `sample_count` coordinates drawn with `seed`.
GradCheckReport grad_check(const std::function<double(ParamStore&)>& loss_fn, ParamStore& store,
                           int sample_count, double tolerance, std::uint64_t seed,
                           double step = 1e-5);

}  // namespace dubalign::num
