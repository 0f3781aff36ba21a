#include "dubalign/paths.hpp"

#include <cmath>

namespace dubalign::paths {

void register_cross_attend(ParamStore& store, const std::string& prefix, Index d_gte, Index d_m,
                           Rng& rng) {
    const double sg = 1.0 / std::sqrt(static_cast<double>(d_gte));
    const double sm = 1.0 / std::sqrt(static_cast<double>(d_m));
    store.create(prefix + ".reduce", num::gaussian_init(d_m, d_gte, sg, rng));
    store.create(prefix + ".wq", num::gaussian_init(d_m, d_m, sm, rng));
    store.create(prefix + ".wk", num::gaussian_init(d_m, d_m, sm, rng));
    store.create(prefix + ".wv", num::gaussian_init(d_m, d_m, sm, rng));
}

Mat cross_attend(const ParamStore& store, const std::string& prefix, const Mat& queries,
                 const Mat& context, CrossAttendCache* cache) {
    if (queries.rows() < 1) throw InvalidInput(prefix + ": no query rows to attend from");
    if (context.rows() < 1) throw InvalidInput(prefix + ": empty attention context");
    Mat reduced = num::linear(context, store.value(prefix + ".reduce"));
    Mat q = num::linear(queries, store.value(prefix + ".wq"));
    Mat k = num::linear(reduced, store.value(prefix + ".wk"));
    Mat v = num::linear(reduced, store.value(prefix + ".wv"));
    num::SdpaCache attn;
    Mat out = num::sdpa(q, k, v, cache ? &attn : nullptr);
    if (cache) {
        cache->queries = queries;
        cache->context = context;
        cache->reduced = std::move(reduced);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
    }
    return out;
}

CrossAttendGrads cross_attend_backward(ParamStore& store, const std::string& prefix,
                                       const Mat& dout, const CrossAttendCache& cache) {
    num::SdpaGrads attn = num::sdpa_backward(dout, cache.attn);
    CrossAttendGrads grads;
    grads.dqueries = num::linear_backward(attn.dq, cache.queries, store.value(prefix + ".wq"),
                                          store.grad(prefix + ".wq"));
    Mat dreduced = num::linear_backward(attn.dk, cache.reduced, store.value(prefix + ".wk"),
                                        store.grad(prefix + ".wk"));
    dreduced += num::linear_backward(attn.dv, cache.reduced, store.value(prefix + ".wv"),
                                     store.grad(prefix + ".wv"));
    grads.dcontext = num::linear_backward(dreduced, cache.context,
                                          store.value(prefix + ".reduce"),
                                          store.grad(prefix + ".reduce"));
    return grads;
}

void register_regressor(ParamStore& store, const std::string& prefix, Index d_in, Index hidden,
                        const std::vector<std::string>& heads, Rng& rng) {
    num::register_bigru(store, prefix + ".rnn", num::GruDims{d_in, hidden}, rng);
    const double sh = 1.0 / std::sqrt(static_cast<double>(2 * hidden));
    for (const std::string& head : heads) {
        store.create(prefix + ".head_" + head + ".w", num::gaussian_init(1, 2 * hidden, sh, rng));
        store.create(prefix + ".head_" + head + ".b", 1, 1);
    }
}

Mat regressor_hidden(const ParamStore& store, const std::string& prefix, const Mat& x,
                     RegressorCache* cache) {
    num::BiGruCache rnn;
    Mat h = num::bigru_forward(store, prefix + ".rnn", x, cache ? &rnn : nullptr);
    if (cache) {
        cache->rnn = std::move(rnn);
        cache->h = h;
    }
    return h;
}

Vec regressor_output(const ParamStore& store, const std::string& prefix, const std::string& head,
                     const Mat& h) {
    return num::linear_bias(h, store.value(prefix + ".head_" + head + ".w"),
                            store.value(prefix + ".head_" + head + ".b"))
        .col(0);
}

Mat regressor_backward(ParamStore& store, const std::string& prefix,
                       const std::vector<std::pair<std::string, Vec>>& dheads,
                       const RegressorCache& cache) {
    Mat dh = Mat::Zero(cache.h.rows(), cache.h.cols());
    for (const auto& [head, dout] : dheads) {
        const std::string base = prefix + ".head_" + head;
        if (dout.size() != cache.h.rows())
            throw ShapeError(base + ": head gradient length mismatch");
        Mat dy(dout.size(), 1);
        dy.col(0) = dout;
        dh += num::linear_backward(dy, cache.h, store.value(base + ".w"), store.grad(base + ".w"),
                                   &store.grad(base + ".b"));
    }
    return num::bigru_backward(store, prefix + ".rnn", dh, cache.rnn);
}

}  // namespace dubalign::paths
