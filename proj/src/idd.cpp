#include "dubalign/idd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dubalign::idd {

Aggregate aggregate_from(const std::string& s) {
    if (s == "sum") return Aggregate::sum;
    if (s == "mean") return Aggregate::mean;
    throw ConfigError("unknown aggregate mode: " + s + " (expected sum or mean)");
}

ScaleMode scale_mode_from(const std::string& s) {
    if (s == "continuous") return ScaleMode::continuous;
    if (s == "integer") return ScaleMode::integer;
    throw ConfigError("unknown scale mode: " + s + " (expected continuous or integer)");
}

std::string to_string(Aggregate a) { return a == Aggregate::sum ? "sum" : "mean"; }
std::string to_string(ScaleMode m) { return m == ScaleMode::continuous ? "continuous" : "integer"; }

void IddConfig::validate() const {
    if (prototypes < 1) throw ConfigError("idd.prototypes must be at least 1");
    if (iterations < 1) throw ConfigError("idd.iterations must be at least 1");
}

void register_idd(ParamStore& store, const IddConfig& cfg, const text::ModelDims& dims, Rng& rng) {
    cfg.validate();
    const Index d = dims.d_gte;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    store.create("idd.slots", num::gaussian_init(cfg.prototypes, d, sd, rng));
    store.create("idd.wk", num::gaussian_init(d, d, sd, rng));
    store.create("idd.wv", num::gaussian_init(d, d, sd, rng));
    store.create("idd.wq", num::gaussian_init(d, d, sd, rng));
    num::register_gru(store, "idd.gru", num::GruDims{d, d}, rng);
    store.create("idd.ln.gamma", Mat::Ones(1, d));
    store.create("idd.ln.beta", 1, d);
    store.create("idd.mlp.w1", num::gaussian_init(d, d, sd, rng));
    store.create("idd.mlp.b1", d, 1);
    store.create("idd.mlp.w2", num::gaussian_init(d, d, sd, rng));
    store.create("idd.mlp.b2", d, 1);
    paths::register_cross_attend(store, "idd.fuse", d, dims.d_m, rng);
    paths::register_regressor(store, "idd", dims.d_m, dims.rnn_hidden, {"dur"}, rng);
}

Mat distill_step(const ParamStore& store, const IddConfig& cfg, const Mat& slots, const Mat& k,
                 const Mat& v, DistillIterCache* cache) {
    const Index d = slots.cols();
    const Index kslots = slots.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Mat q = num::linear(slots, store.value("idd.wq"));  // [K x d]
    Mat logits = (q * k.transpose()) * scale;           // [K x L]
    // competition between slots: normalize over the slot axis per token
    Mat alpha = num::softmax_over_slots(logits);

    Mat u = alpha * v;  // weighted sum over tokens (per-slot read-out)
    Vec rowsum = alpha.rowwise().sum();
    if (cfg.aggregate == Aggregate::mean)
        u.array().colwise() /= rowsum.array();

    Mat s_gru(kslots, d);
    std::vector<num::GruCache> gru_caches(cache ? kslots : 0);
    for (Index i = 0; i < kslots; ++i) {
        s_gru.row(i) = num::gru_cell(store, "idd.gru", u.row(i).transpose(),
                                     slots.row(i).transpose(), cache ? &gru_caches[i] : nullptr)
                           .transpose();
    }

    num::LayerNormCache ln;
    Mat ln_out = num::layer_norm_rows(s_gru, store.value("idd.ln.gamma").row(0).transpose(),
                                      store.value("idd.ln.beta").row(0).transpose(), 1e-5,
                                      cache ? &ln : nullptr);
    Mat h1 = num::linear_bias(ln_out, store.value("idd.mlp.w1"), store.value("idd.mlp.b1"));
    Mat tanh_h1 = h1.array().tanh();
    Mat out = s_gru + num::linear_bias(tanh_h1, store.value("idd.mlp.w2"),
                                       store.value("idd.mlp.b2"));
    if (cache) {
        cache->slots_in = slots;
        cache->alpha = std::move(alpha);
        cache->u = std::move(u);
        cache->alpha_rowsum = std::move(rowsum);
        cache->gru = std::move(gru_caches);
        cache->s_gru = std::move(s_gru);
        cache->ln = std::move(ln);
        cache->ln_out = std::move(ln_out);
        cache->tanh_h1 = std::move(tanh_h1);
    }
    return out;
}

Mat distill_duration(const ParamStore& store, const IddConfig& cfg, const Mat& e_dur,
                     DistillCache* cache) {
    cfg.validate();
    if (e_dur.rows() < 1) throw InvalidInput("distill: instruction embedding has no rows");
    if (e_dur.cols() != store.value("idd.wk").cols())
        throw ShapeError("distill: embedding width " + std::to_string(e_dur.cols()) +
                         " does not match projections (" +
                         std::to_string(store.value("idd.wk").cols()) + ")");

    Mat k = num::linear(e_dur, store.value("idd.wk"));
    Mat v = num::linear(e_dur, store.value("idd.wv"));
    Mat slots = store.value("idd.slots");
    if (cache) {
        cache->e = e_dur;
        cache->k = k;
        cache->v = v;
        cache->iters.resize(static_cast<std::size_t>(cfg.iterations));
    }
    for (Index t = 0; t < cfg.iterations; ++t)
        slots = distill_step(store, cfg, slots, k, v,
                             cache ? &cache->iters[static_cast<std::size_t>(t)] : nullptr);
    return slots;
}

Mat distill_duration_backward(ParamStore& store, const IddConfig& cfg, const Mat& dprototypes,
                              const DistillCache& cache) {
    const Index d = cache.e.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Mat dslots = dprototypes;
    Mat dk_total = Mat::Zero(cache.k.rows(), cache.k.cols());
    Mat dv_total = Mat::Zero(cache.v.rows(), cache.v.cols());
    Vec gamma = store.value("idd.ln.gamma").row(0).transpose();

    for (auto it = cache.iters.rbegin(); it != cache.iters.rend(); ++it) {
        const DistillIterCache& c = *it;
        const Index kslots = c.slots_in.rows();

        // out = s_gru + W2 tanh(W1 LN(s_gru) + b1) + b2
        Mat ds_gru = dslots;
        Mat dtanh = num::linear_backward(dslots, c.tanh_h1, store.value("idd.mlp.w2"),
                                         store.grad("idd.mlp.w2"), &store.grad("idd.mlp.b2"));
        Mat dh1 = dtanh.array() * (1.0 - c.tanh_h1.array().square());
        Mat dln_out = num::linear_backward(dh1, c.ln_out, store.value("idd.mlp.w1"),
                                           store.grad("idd.mlp.w1"), &store.grad("idd.mlp.b1"));
        Vec dgamma = Vec::Zero(d), dbeta = Vec::Zero(d);
        ds_gru += num::layer_norm_rows_backward(dln_out, c.ln, gamma, dgamma, dbeta);
        store.grad("idd.ln.gamma").row(0) += dgamma.transpose();
        store.grad("idd.ln.beta").row(0) += dbeta.transpose();

        Mat du(kslots, d);
        Mat dslots_in = Mat::Zero(kslots, d);
        for (Index i = 0; i < kslots; ++i) {
            num::GruGrads g = num::gru_cell_backward(store, "idd.gru", ds_gru.row(i).transpose(),
                                                     c.gru[static_cast<std::size_t>(i)]);
            du.row(i) = g.du.transpose();
            dslots_in.row(i) = g.ds.transpose();
        }

        // aggregation: u = alpha v (sum) or row-normalized (mean)
        Mat dalpha;
        if (cfg.aggregate == Aggregate::mean) {
            Mat w = c.alpha.array().colwise() / c.alpha_rowsum.array();
            Mat dw = du * cache.v.transpose();
            dv_total.noalias() += w.transpose() * du;
            dalpha.resize(c.alpha.rows(), c.alpha.cols());
            for (Index i = 0; i < c.alpha.rows(); ++i) {
                const double dot = w.row(i).dot(dw.row(i));
                dalpha.row(i) = (dw.row(i).array() - dot) / c.alpha_rowsum(i);
            }
        } else {
            dalpha = du * cache.v.transpose();
            dv_total.noalias() += c.alpha.transpose() * du;
        }

        Mat dlogits = num::softmax_over_slots_backward(dalpha, c.alpha);
        Mat dq = (dlogits * cache.k) * scale;
        dk_total.noalias() += (dlogits.transpose() * (c.slots_in *
                                                      store.value("idd.wq").transpose())) *
                              scale;
        dslots_in += num::linear_backward(dq, c.slots_in, store.value("idd.wq"),
                                          store.grad("idd.wq"));
        dslots = std::move(dslots_in);
    }

    store.grad("idd.slots") += dslots;
    Mat de = num::linear_backward(dk_total, cache.e, store.value("idd.wk"),
                                  store.grad("idd.wk"));
    de += num::linear_backward(dv_total, cache.e, store.value("idd.wv"), store.grad("idd.wv"));
    return de;
}

Mat fuse_duration(const ParamStore& store, const Mat& phoneme_features, const Mat& prototypes,
                  paths::CrossAttendCache* cache) {
    if (phoneme_features.rows() < 1) throw InvalidInput("fuse: empty phoneme features");
    return paths::cross_attend(store, "idd.fuse", phoneme_features, prototypes, cache);
}

Vec predict_log_durations(const ParamStore& store, const Mat& fused,
                          paths::RegressorCache* cache) {
    if (fused.rows() < 1) throw InvalidInput("duration predictor: empty input");
    Mat h = paths::regressor_hidden(store, "idd", fused, cache);
    return paths::regressor_output(store, "idd", "dur", h);
}

DurationPrediction scale_durations(const Vec& raw_frames, long video_frames, ScaleMode mode) {
    const Index n = raw_frames.size();
    if (n < 1) throw InvalidInput("scale_durations: empty duration vector");
    if (raw_frames.minCoeff() <= 0.0)
        throw InvalidInput("scale_durations: raw durations must be positive");
    if (video_frames < 1) throw InvalidInput("scale_durations: video length must be positive");
    const double total = raw_frames.sum();

    DurationPrediction pred;
    pred.video_frames = video_frames;
    if (mode == ScaleMode::continuous) {
        pred.durations_frames = raw_frames * (static_cast<double>(video_frames) / total);
    } else {
        if (video_frames < static_cast<long>(n))
            throw InfeasibleError("scale_durations: " + std::to_string(video_frames) +
                                  " frames cannot cover " + std::to_string(n) +
                                  " phonemes at one frame each");
        // reserve one frame per phoneme, split the rest proportionally with
        // largest-remainder rounding (ties to the earliest phoneme)
        const long extra = video_frames - static_cast<long>(n);
        std::vector<long> base(static_cast<std::size_t>(n));
        std::vector<double> frac(static_cast<std::size_t>(n));
        long assigned = 0;
        for (Index i = 0; i < n; ++i) {
            const double share = raw_frames(i) * static_cast<double>(extra) / total;
            base[static_cast<std::size_t>(i)] = static_cast<long>(std::floor(share));
            frac[static_cast<std::size_t>(i)] = share - std::floor(share);
            assigned += base[static_cast<std::size_t>(i)];
        }
        long remainder = extra - assigned;
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
            return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
        });
        while (remainder > 0) {
            for (Index idx : order) {
                if (remainder == 0) break;
                ++base[static_cast<std::size_t>(idx)];
                --remainder;
            }
        }
        pred.durations_frames.resize(n);
        for (Index i = 0; i < n; ++i)
            pred.durations_frames(i) = static_cast<double>(1 + base[static_cast<std::size_t>(i)]);
    }
    pred.durations_log = pred.durations_frames.array().log();
    return pred;
}

}  // namespace dubalign::idd
