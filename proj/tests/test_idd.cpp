#include <cmath>

#include "doctest.h"
#include "dubalign/idd.hpp"

using namespace dubalign;
using namespace dubalign::idd;

namespace {

text::ModelDims small_dims() { return text::ModelDims{12, 6, 5}; }

num::ParamStore make_store(const IddConfig& cfg, std::uint64_t seed,
                           const text::ModelDims& dims) {
    num::ParamStore store;
    Rng rng(seed);
    register_idd(store, cfg, dims, rng);
    return store;
}

// Straight-line re-evaluation of the distiller on explicit loops, written
// directly from the update equations rather than through the library ops.
Mat oracle_distill(const num::ParamStore& store, const IddConfig& cfg, const Mat& e) {
    const Index L = e.rows();
    const Index d = e.cols();
    const Index K = store.value("idd.slots").rows();
    auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };

    Mat k = e * store.value("idd.wk").transpose();
    Mat v = e * store.value("idd.wv").transpose();
    Mat slots = store.value("idd.slots");

    for (Index t = 0; t < cfg.iterations; ++t) {
        Mat q = slots * store.value("idd.wq").transpose();
        // attention normalized across slots, independently per token
        Mat alpha(K, L);
        for (Index n = 0; n < L; ++n) {
            double denom = 0.0;
            for (Index i = 0; i < K; ++i) {
                alpha(i, n) = std::exp(q.row(i).dot(k.row(n)) / std::sqrt(double(d)));
                denom += alpha(i, n);
            }
            for (Index i = 0; i < K; ++i) alpha(i, n) /= denom;
        }
        Mat next(K, d);
        for (Index i = 0; i < K; ++i) {
            Vec u = Vec::Zero(d);
            for (Index n = 0; n < L; ++n) u += alpha(i, n) * v.row(n).transpose();
            if (cfg.aggregate == Aggregate::mean) {
                double r = 0.0;
                for (Index n = 0; n < L; ++n) r += alpha(i, n);
                u /= r;
            }
            Vec s = slots.row(i).transpose();
            Vec z(d), r(d), h(d);
            for (Index j = 0; j < d; ++j) {
                z(j) = sigmoid(store.value("idd.gru.wz").row(j).dot(u) +
                               store.value("idd.gru.uz").row(j).dot(s) +
                               store.value("idd.gru.bz")(j, 0));
                r(j) = sigmoid(store.value("idd.gru.wr").row(j).dot(u) +
                               store.value("idd.gru.ur").row(j).dot(s) +
                               store.value("idd.gru.br")(j, 0));
            }
            Vec rs = r.array() * s.array();
            for (Index j = 0; j < d; ++j) {
                h(j) = std::tanh(store.value("idd.gru.wh").row(j).dot(u) +
                                 store.value("idd.gru.uh").row(j).dot(rs) +
                                 store.value("idd.gru.bh")(j, 0));
            }
            Vec s_new = (1.0 - z.array()) * s.array() + z.array() * h.array();

            double mu = s_new.mean();
            double var = (s_new.array() - mu).square().mean();
            Vec ln = store.value("idd.ln.gamma").row(0).transpose().array() *
                         ((s_new.array() - mu) / std::sqrt(var + 1e-5)) +
                     store.value("idd.ln.beta").row(0).transpose().array();
            Vec hid =
                (store.value("idd.mlp.w1") * ln + store.value("idd.mlp.b1").col(0)).array().tanh();
            Vec res = store.value("idd.mlp.w2") * hid + store.value("idd.mlp.b2").col(0);
            next.row(i) = (s_new + res).transpose();
        }
        slots = next;
    }
    return slots;
}

}  // namespace

TEST_CASE("distiller matches the straight-line oracle in both aggregate modes") {
    const auto dims = small_dims();
    for (auto agg : {Aggregate::sum, Aggregate::mean}) {
        IddConfig cfg;
        cfg.prototypes = 3;
        cfg.iterations = 2;
        cfg.aggregate = agg;
        auto store = make_store(cfg, 101, dims);
        Rng erng(7);
        Mat e = num::gaussian_init(5, dims.d_gte, 1.0, erng);
        Mat got = distill_duration(store, cfg, e);
        Mat want = oracle_distill(store, cfg, e);
        REQUIRE(got.rows() == 3);
        REQUIRE(got.cols() == dims.d_gte);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("single-slot single-token step reduces to the written composition") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 1;
    cfg.iterations = 1;
    auto store = make_store(cfg, 55, dims);
    Rng erng(8);
    Mat e = num::gaussian_init(1, dims.d_gte, 1.0, erng);

    // with one slot and one token the attention weight is exactly 1, so the
    // update is GRU(v, s0) followed by the normalized-MLP residual
    Mat v = num::linear(e, store.value("idd.wv"));
    Vec s_gru = num::gru_cell(store, "idd.gru", v.row(0).transpose(),
                              store.value("idd.slots").row(0).transpose());
    Mat s_mat(1, dims.d_gte);
    s_mat.row(0) = s_gru.transpose();
    Mat ln = num::layer_norm_rows(s_mat, store.value("idd.ln.gamma").row(0).transpose(),
                                  store.value("idd.ln.beta").row(0).transpose(), 1e-5);
    Mat hid = num::linear_bias(ln, store.value("idd.mlp.w1"), store.value("idd.mlp.b1"))
                  .array()
                  .tanh();
    Mat expect =
        s_mat + num::linear_bias(hid, store.value("idd.mlp.w2"), store.value("idd.mlp.b2"));

    Mat got = distill_duration(store, cfg, e);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("duplicating tokens doubles the single-slot read-out under sum aggregation") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 1;
    cfg.iterations = 1;
    auto store = make_store(cfg, 77, dims);
    Rng erng(9);
    Mat e = num::gaussian_init(3, dims.d_gte, 1.0, erng);
    Mat e2(6, dims.d_gte);
    e2 << e, e;

    DistillCache c1, c2;
    distill_duration(store, cfg, e, &c1);
    distill_duration(store, cfg, e2, &c2);
    // one slot: every attention weight is 1 either way, so the weighted sum
    // doubles with the duplicated tokens
    CHECK((c1.iters[0].alpha.array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK((c2.iters[0].u - 2.0 * c1.iters[0].u).cwiseAbs().maxCoeff() < 1e-10);

    // mean aggregation removes the doubling and leaves the output unchanged
    IddConfig mean_cfg = cfg;
    mean_cfg.aggregate = Aggregate::mean;
    Mat m1 = distill_duration(store, mean_cfg, e);
    Mat m2 = distill_duration(store, mean_cfg, e2);
    CHECK((m1 - m2).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("attention weights are normalized over slots at every iteration") {
    const auto dims = small_dims();
    for (Index k : {1, 5, 10, 20}) {
        IddConfig cfg;
        cfg.prototypes = k;
        cfg.iterations = 3;
        auto store = make_store(cfg, 200 + static_cast<std::uint64_t>(k), dims);
        Rng erng(11);
        Mat e = num::gaussian_init(7, dims.d_gte, 1.5, erng);
        DistillCache cache;
        distill_duration(store, cfg, e, &cache);
        REQUIRE(cache.iters.size() == 3);
        for (const auto& iter : cache.iters) {
            for (Index n = 0; n < 7; ++n)
                CHECK(iter.alpha.col(n).sum() == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("iterations share one parameter set") {
    const auto dims = small_dims();
    IddConfig two;
    two.prototypes = 4;
    two.iterations = 2;
    auto store = make_store(two, 300, dims);
    Rng erng(12);
    Mat e = num::gaussian_init(4, dims.d_gte, 1.0, erng);

    Mat k = num::linear(e, store.value("idd.wk"));
    Mat v = num::linear(e, store.value("idd.wv"));
    Mat once = distill_step(store, two, store.value("idd.slots"), k, v);
    Mat twice = distill_step(store, two, once, k, v);
    CHECK((distill_duration(store, two, e) - twice).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("permuting the initial slots permutes the prototypes and leaves fusion unchanged") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 5;
    cfg.iterations = 2;
    auto store = make_store(cfg, 400, dims);
    Rng erng(13);
    Mat e = num::gaussian_init(6, dims.d_gte, 1.0, erng);
    Mat tp = num::gaussian_init(9, dims.d_m, 1.0, erng);

    Mat p1 = distill_duration(store, cfg, e);
    Mat f1 = fuse_duration(store, tp, p1);

    // rotate the slot rows by one
    Mat slots = store.value("idd.slots");
    Mat rotated(slots.rows(), slots.cols());
    for (Index i = 0; i < slots.rows(); ++i) rotated.row(i) = slots.row((i + 1) % slots.rows());
    store.value("idd.slots") = rotated;

    Mat p2 = distill_duration(store, cfg, e);
    for (Index i = 0; i < p1.rows(); ++i)
        CHECK((p2.row(i) - p1.row((i + 1) % p1.rows())).cwiseAbs().maxCoeff() < 1e-10);

    Mat f2 = fuse_duration(store, tp, p2);
    CHECK((f1 - f2).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("fusion matches a direct attention evaluation and handles one prototype") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 4;
    auto store = make_store(cfg, 500, dims);
    Rng erng(14);
    Mat tp = num::gaussian_init(5, dims.d_m, 1.0, erng);
    Mat protos = num::gaussian_init(4, dims.d_gte, 1.0, erng);

    Mat out = fuse_duration(store, tp, protos);
    REQUIRE(out.rows() == 5);
    REQUIRE(out.cols() == dims.d_m);

    // brute-force: reduce, project, softmax over keys, weighted values
    Mat red = protos * store.value("idd.fuse.reduce").transpose();
    Mat q = tp * store.value("idd.fuse.wq").transpose();
    Mat kk = red * store.value("idd.fuse.wk").transpose();
    Mat vv = red * store.value("idd.fuse.wv").transpose();
    for (Index i = 0; i < 5; ++i) {
        Eigen::VectorXd w(4);
        for (Index j = 0; j < 4; ++j)
            w(j) = std::exp(q.row(i).dot(kk.row(j)) / std::sqrt(double(dims.d_m)));
        w /= w.sum();
        Vec expect = Vec::Zero(dims.d_m);
        for (Index j = 0; j < 4; ++j) expect += w(j) * vv.row(j).transpose();
        CHECK((out.row(i).transpose() - expect).cwiseAbs().maxCoeff() < 1e-12);
    }

    // single prototype: every row is that prototype's value projection
    Mat one = protos.topRows(1);
    Mat out1 = fuse_duration(store, tp, one);
    Mat v1 = (one * store.value("idd.fuse.reduce").transpose()) *
             store.value("idd.fuse.wv").transpose();
    for (Index i = 0; i < 5; ++i)
        CHECK((out1.row(i) - v1.row(0)).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(fuse_duration(store, Mat(0, dims.d_m), protos), InvalidInput);
}

TEST_CASE("duration predictor shape, zero-parameter bias, and reversal symmetry") {
    const auto dims = small_dims();
    IddConfig cfg;
    auto store = make_store(cfg, 600, dims);
    Rng erng(15);
    Mat fused = num::gaussian_init(7, dims.d_m, 1.0, erng);
    Vec y = predict_log_durations(store, fused);
    CHECK(y.size() == 7);

    // zero everything: recurrent states collapse to zero, output is the bias
    auto zstore = make_store(cfg, 600, dims);
    for (const auto& name : zstore.names()) zstore.value(name).setZero();
    zstore.value("idd.head_dur.b")(0, 0) = 1.25;
    Vec yz = predict_log_durations(zstore, fused);
    CHECK((yz.array() - 1.25).abs().maxCoeff() < 1e-15);

    // reversing input, swapping recurrence directions, and swapping the head
    // halves reverses the prediction sequence
    auto swapped = make_store(cfg, 600, dims);
    for (const char* gate : {"wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"}) {
        swapped.value(std::string("idd.rnn.fwd.") + gate) =
            store.value(std::string("idd.rnn.bwd.") + gate);
        swapped.value(std::string("idd.rnn.bwd.") + gate) =
            store.value(std::string("idd.rnn.fwd.") + gate);
    }
    const Index h = dims.rnn_hidden;
    swapped.value("idd.head_dur.w").leftCols(h) = store.value("idd.head_dur.w").rightCols(h);
    swapped.value("idd.head_dur.w").rightCols(h) = store.value("idd.head_dur.w").leftCols(h);
    Vec yr = predict_log_durations(swapped, fused.colwise().reverse());
    CHECK((yr.reverse() - y).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("full duration path gradients match finite differences") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 3;
    cfg.iterations = 2;
    auto store = make_store(cfg, 700, dims);
    Rng erng(16);
    Mat e = num::gaussian_init(4, dims.d_gte, 1.0, erng);
    Mat tp = num::gaussian_init(6, dims.d_m, 1.0, erng);
    // fixed targets, far from predictions so the L1 loss is locally smooth
    Vec gt(6);
    gt << 3.0, 5.0, 2.0, 7.0, 4.0, 6.0;

    auto loss = [&](num::ParamStore& s) {
        DistillCache dc;
        Mat protos = distill_duration(s, cfg, e, &dc);
        paths::CrossAttendCache fc;
        Mat fused = fuse_duration(s, tp, protos, &fc);
        paths::RegressorCache rc;
        Mat hidden = paths::regressor_hidden(s, "idd", fused, &rc);
        Vec logd = paths::regressor_output(s, "idd", "dur", hidden);
        Vec frames = logd.array().exp();
        const double L = (frames - gt).cwiseAbs().mean();

        Vec dlogd(6);
        for (Index i = 0; i < 6; ++i) {
            const double sign = frames(i) > gt(i) ? 1.0 : -1.0;
            dlogd(i) = sign * frames(i) / 6.0;
        }
        Mat dfused = paths::regressor_backward(s, "idd", {{"dur", dlogd}}, rc);
        auto att = paths::cross_attend_backward(s, "idd.fuse", dfused, fc);
        distill_duration_backward(s, cfg, att.dcontext, dc);
        return L;
    };
    auto rep = num::grad_check(loss, store, 64, 1e-3, 1000);
    INFO("worst ", rep.worst_name, " rel ", rep.max_rel_err);
    CHECK(rep.pass);
    CHECK(rep.checked >= 32);
}

TEST_CASE("mean-aggregation distiller gradients match finite differences") {
    const auto dims = small_dims();
    IddConfig cfg;
    cfg.prototypes = 3;
    cfg.iterations = 2;
    cfg.aggregate = Aggregate::mean;
    auto store = make_store(cfg, 750, dims);
    Rng erng(17);
    Mat e = num::gaussian_init(4, dims.d_gte, 1.0, erng);
    Mat proj = num::gaussian_init(3, dims.d_gte, 1.0, erng);

    auto loss = [&](num::ParamStore& s) {
        DistillCache dc;
        Mat protos = distill_duration(s, cfg, e, &dc);
        distill_duration_backward(s, cfg, proj, dc);
        return (protos.array() * proj.array()).sum();
    };
    auto rep = num::grad_check(loss, store, 48, 1e-3, 1100);
    CHECK(rep.pass);
    CHECK(rep.checked >= 32);
}

TEST_CASE("duration scaling hand cases") {
    Vec raw(3);
    raw << 1.0, 1.0, 2.0;
    auto cont = scale_durations(raw, 8, ScaleMode::continuous);
    CHECK(cont.durations_frames(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(cont.durations_frames(1) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(cont.durations_frames(2) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(cont.durations_log(2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    auto integer = scale_durations(raw, 8, ScaleMode::integer);
    CHECK(integer.durations_frames(0) == 2.0);
    CHECK(integer.durations_frames(1) == 2.0);
    CHECK(integer.durations_frames(2) == 4.0);

    // ties go to the earliest phoneme
    Vec even(3);
    even << 1.0, 1.0, 1.0;
    auto tied = scale_durations(even, 4, ScaleMode::integer);
    CHECK(tied.durations_frames(0) == 2.0);
    CHECK(tied.durations_frames(1) == 1.0);
    CHECK(tied.durations_frames(2) == 1.0);

    // already consistent input is a fixed point in continuous mode
    Vec fixed(2);
    fixed << 3.0, 5.0;
    auto same = scale_durations(fixed, 8, ScaleMode::continuous);
    CHECK((same.durations_frames - fixed).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(scale_durations(even, 2, ScaleMode::integer), InfeasibleError);
    CHECK_THROWS_AS(scale_durations(Vec(), 5, ScaleMode::continuous), InvalidInput);
    Vec neg(2);
    neg << 1.0, -1.0;
    CHECK_THROWS_AS(scale_durations(neg, 5, ScaleMode::continuous), InvalidInput);
}

TEST_CASE("duration scaling properties over random instances") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const Index n = 1 + static_cast<Index>(rng.below(20));
        Vec raw(n);
        for (Index i = 0; i < n; ++i) raw(i) = 0.05 + 10.0 * rng.uniform();
        const long video = static_cast<long>(n) + static_cast<long>(rng.below(60));

        auto cont = scale_durations(raw, video, ScaleMode::continuous);
        CHECK(std::abs(cont.durations_frames.sum() - static_cast<double>(video)) < 1e-6);

        auto integer = scale_durations(raw, video, ScaleMode::integer);
        long sum = 0;
        for (Index i = 0; i < n; ++i) {
            CHECK(integer.durations_frames(i) >= 1.0);
            sum += static_cast<long>(integer.durations_frames(i));
        }
        CHECK(sum == video);
    }
}

TEST_CASE("config parsing and validation") {
    CHECK(aggregate_from("sum") == Aggregate::sum);
    CHECK(aggregate_from("mean") == Aggregate::mean);
    CHECK_THROWS_AS(aggregate_from("avg"), ConfigError);
    CHECK(scale_mode_from("integer") == ScaleMode::integer);
    CHECK_THROWS_AS(scale_mode_from("round"), ConfigError);
    IddConfig bad;
    bad.prototypes = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.prototypes = 1;
    bad.iterations = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
