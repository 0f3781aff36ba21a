#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "dubalign/common.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/textfront.hpp"

using dubalign::ConfigError;
using dubalign::InvalidInput;
using dubalign::Rng;
using dubalign::ShapeError;
using dubalign::num::Index;
using dubalign::num::Mat;
using dubalign::num::ParamStore;
using dubalign::num::Vec;
namespace iec = dubalign::iec;
namespace num = dubalign::num;
namespace paths = dubalign::paths;
namespace text = dubalign::text;

namespace {

text::InstructionRecord emo_record(const std::string& s) {
    return {"s1", text::InstructionKind::emotion, s, text::InstructionSource::fixture};
}

std::vector<std::string> labels_of(const std::vector<iec::Emotion>& es) {
    std::vector<std::string> out;
    for (const auto e : es) out.push_back(iec::to_string(e));
    return out;
}

}  // namespace

TEST_CASE("emotion vocabulary is closed and round-trips") {
    const auto& vocab = iec::emotion_vocabulary();
    REQUIRE(vocab.size() == 7);
    CHECK(vocab.front() == "happy");
    CHECK(vocab.back() == "surprise");
    for (const auto& label : vocab) {
        CHECK(iec::to_string(iec::emotion_from(label)) == label);
    }
    CHECK(iec::to_string(iec::Emotion::disgust) == "disgust");
    CHECK_THROWS_WITH_AS(iec::emotion_from("bored"), "unknown emotion entity: bored",
                         InvalidInput);
}

TEST_CASE("rule analyzer scans the keyword map in first-occurrence order") {
    CHECK(labels_of(iec::analyze_rule(emo_record("sound furious about the delay"))) ==
          std::vector<std::string>{"angry"});
    CHECK(labels_of(iec::analyze_rule(emo_record("overjoyed at first, then tearful"))) ==
          std::vector<std::string>{"happy", "sad"});
    CHECK(labels_of(iec::analyze_rule(emo_record("nothing mapped here"))) ==
          std::vector<std::string>{"neutral"});
    // Deduplication keeps the first hit per entity.
    CHECK(labels_of(iec::analyze_rule(emo_record("happy and glad, then FURIOUS!"))) ==
          std::vector<std::string>{"happy", "angry"});
    // Case and punctuation do not matter.
    CHECK(labels_of(iec::analyze_rule(emo_record("  Terrified?!  "))) ==
          std::vector<std::string>{"fear"});

    CHECK_THROWS_WITH_AS(
        iec::analyze_rule({"s1", text::InstructionKind::duration, "furious",
                           text::InstructionSource::fixture}),
        "entity analysis expects an emotion instruction, got kind 'duration' for sample s1",
        InvalidInput);
}

TEST_CASE("rule analyzer entities of a prefix stay a prefix under concatenation") {
    const std::vector<std::string> first{"sound gloomy today", "be delighted and amazed",
                                         "calm please", "nothing mapped"};
    const std::vector<std::string> second{"then act startled", "and stay composed",
                                          "finish enraged", "plain text"};
    for (const auto& x : first) {
        const auto base = iec::analyze_rule(emo_record(x));
        for (const auto& y : second) {
            const auto joined = iec::analyze_rule(emo_record(x + ". " + y));
            // A no-keyword prefix contributes nothing (its [neutral] is a fallback,
            // not a scan hit), otherwise the prefix entities lead unchanged.
            if (x == "nothing mapped") continue;
            REQUIRE(joined.size() >= base.size());
            for (size_t i = 0; i < base.size(); ++i) CHECK(joined[i] == base[i]);
        }
        // Determinism.
        CHECK(iec::analyze_rule(emo_record(x)) == base);
    }
}

TEST_CASE("keyword map files load and reject malformed lines") {
    const std::string dir = std::string(DUBALIGN_SOURCE_DIR) + "/build";
    const std::string path = dir + "/tmp_keywords.tsv";

    dubalign::write_file(path, "cross\tangry\nblue\tsad\n");
    const auto map = iec::KeywordMap::load(path);
    CHECK(map.entries.size() == 2);
    CHECK(labels_of(iec::analyze_rule(emo_record("feeling blue"), map)) ==
          std::vector<std::string>{"sad"});
    // The custom map fully replaces the built-in one.
    CHECK(labels_of(iec::analyze_rule(emo_record("furious"), map)) ==
          std::vector<std::string>{"neutral"});

    dubalign::write_file(path, "cross\tangry\nblue sad\n");
    CHECK_THROWS_WITH(iec::KeywordMap::load(path), doctest::Contains("line 2"));
    dubalign::write_file(path, "cross\tbored\n");
    CHECK_THROWS_WITH(iec::KeywordMap::load(path), doctest::Contains("unknown entity 'bored'"));
    dubalign::write_file(path, "cross\tangry\ncross\tsad\n");
    CHECK_THROWS_WITH(iec::KeywordMap::load(path), doctest::Contains("duplicate keyword 'cross'"));
    dubalign::write_file(path, "two words\tangry\n");
    CHECK_THROWS_WITH(iec::KeywordMap::load(path), doctest::Contains("single word"));
    std::remove(path.c_str());

    const auto& builtin = iec::KeywordMap::builtin();
    CHECK(builtin.entries.size() == 36);
    // Every entity has at least one keyword, including its own label.
    for (const auto& label : iec::emotion_vocabulary()) {
        REQUIRE(builtin.entries.count(label) == 1);
        CHECK(iec::to_string(builtin.entries.at(label)) == label);
    }
}

TEST_CASE("keyword data file matches the built-in map") {
    const std::string shipped =
        dubalign::read_file(std::string(DUBALIGN_SOURCE_DIR) + "/data/keywords.tsv");
    CHECK(shipped == std::string(iec::builtin_keywords_text()));
}

TEST_CASE("lora adapter hand case, zero identity, and shape errors") {
    // d=2, R=1, A=[1,0]^T, B=[0,1], W=0, x=[3,4] -> (W+AB)x = [4,0].
    iec::LoraAdapter ad;
    ad.target = "toy";
    ad.a = Mat(2, 1);
    ad.a << 1.0, 0.0;
    ad.b = Mat(1, 2);
    ad.b << 0.0, 1.0;
    const Mat w = Mat::Zero(2, 2);
    Vec x(2);
    x << 3.0, 4.0;

    const Mat merged = iec::lora_merged(w, ad);
    CHECK(merged(0, 0) == 0.0);
    CHECK(merged(0, 1) == 1.0);
    CHECK(merged(1, 0) == 0.0);
    CHECK(merged(1, 1) == 0.0);
    for (const bool use_merged : {false, true}) {
        const Vec y = iec::lora_forward(x, w, ad, use_merged);
        CHECK(y(0) == 4.0);
        CHECK(y(1) == 0.0);
    }

    // A = 0 reproduces the base bit-exactly, both paths.
    Rng rng(31);
    const Mat wr = num::gaussian_init(5, 3, 1.0, rng);
    iec::LoraAdapter zero;
    zero.target = "z";
    zero.a = Mat::Zero(5, 2);
    zero.b = num::gaussian_init(2, 3, 1.0, rng);
    const Mat mz = iec::lora_merged(wr, zero);
    CHECK(std::memcmp(mz.data(), wr.data(), sizeof(double) * size_t(wr.size())) == 0);
    Vec xr(3);
    xr << 0.5, -1.25, 2.0;
    const Vec base_y = Vec(wr * xr);
    for (const bool use_merged : {false, true}) {
        const Vec y = iec::lora_forward(xr, wr, zero, use_merged);
        CHECK(std::memcmp(y.data(), base_y.data(), sizeof(double) * size_t(y.size())) == 0);
    }

    // R = 0 is the identity adaptation.
    iec::LoraAdapter rank0;
    rank0.target = "r0";
    rank0.a = Mat(5, 0);
    rank0.b = Mat(0, 3);
    CHECK(rank0.rank() == 0);
    const Mat m0 = iec::lora_merged(wr, rank0);
    CHECK(std::memcmp(m0.data(), wr.data(), sizeof(double) * size_t(wr.size())) == 0);

    iec::LoraAdapter bad;
    bad.target = "bad";
    bad.a = Mat::Zero(4, 2);  // wrong out-dim for wr [5x3]
    bad.b = Mat::Zero(2, 3);
    CHECK_THROWS_WITH(iec::lora_merged(wr, bad), doctest::Contains("'bad'"));
    CHECK_THROWS_AS(iec::lora_forward(Vec::Zero(4), wr, zero), ShapeError);
}

TEST_CASE("lora merged and two-path evaluations agree on random instances") {
    Rng rng(417);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Index out = Index(1 + rng.below(64));
        const Index in = Index(1 + rng.below(64));
        const Index r = Index(rng.below(9));  // 0..8
        const Mat w = num::gaussian_init(out, in, 1.0, rng);
        iec::LoraAdapter ad;
        ad.target = "t";
        ad.a = num::gaussian_init(out, r, 1.0, rng);
        ad.b = num::gaussian_init(r, in, 1.0, rng);
        Vec x(in);
        for (Index i = 0; i < in; ++i) x(i) = rng.gaussian();
        const Vec two = iec::lora_forward(x, w, ad, false);
        const Vec one = iec::lora_forward(x, w, ad, true);
        worst = std::max(worst, (two - one).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-10);
    INFO("max abs merged/two-path difference ", worst);
}

TEST_CASE("analyzer registration shapes and deterministic frozen bases") {
    iec::AnalyzerConfig cfg;
    ParamStore s1, s2;
    Rng r1(9), r2(9);
    iec::register_analyzer(s1, cfg, r1);
    iec::register_analyzer(s2, cfg, r2);

    CHECK(s1.value("an.probes").rows() == 7);
    CHECK(s1.value("an.probes").cols() == cfg.d_gte);
    CHECK(s1.value("an.wq.base").rows() == cfg.d_gte);
    CHECK(s1.value("an.head.base").rows() == 7);
    CHECK(s1.value("an.head.a").rows() == 7);
    CHECK(s1.value("an.head.a").cols() == cfg.lora_rank);
    CHECK(s1.value("an.wk.b").rows() == cfg.lora_rank);
    CHECK(s1.value("an.wk.b").isZero(0.0));
    CHECK(s1.value("an.bias").isZero(0.0));
    // Scaled-identity query map: gain * sqrt(d) on the diagonal.
    CHECK(s1.value("an.wq.base")(0, 0) ==
          doctest::Approx(cfg.attn_gain * std::sqrt(double(cfg.d_gte))));
    CHECK(s1.value("an.wq.base")(0, 1) == 0.0);
    CHECK(s1.value("an.wk.base")(3, 3) == 1.0);
    CHECK(s1.value("an.ff2.base").isZero(0.0));
    // Probes are the entity-label embeddings, unit norm, and double as read-outs.
    CHECK(s1.value("an.probes").row(2).norm() == doctest::Approx(1.0));
    CHECK(std::memcmp(s1.value("an.probes").data(), s1.value("an.head.base").data(),
                      sizeof(double) * size_t(s1.value("an.probes").size())) == 0);

    CHECK(iec::analyzer_base_digest(s1) == iec::analyzer_base_digest(s2));

    CHECK_THROWS_AS([&] { iec::AnalyzerConfig c; c.lora_rank = -1; c.validate(); }(),
                    ConfigError);
    CHECK_THROWS_AS([&] { iec::AnalyzerConfig c; c.threshold = 1.0; c.validate(); }(),
                    ConfigError);
    CHECK_THROWS_AS([&] { iec::AnalyzerConfig c; c.d_gte = 4; c.validate(); }(), ConfigError);
}

TEST_CASE("zeroed adapters reproduce the frozen-base decision bit-exactly") {
    iec::AnalyzerConfig cfg;
    ParamStore fresh, zeroed;
    Rng r1(5), r2(5);
    iec::register_analyzer(fresh, cfg, r1);   // B = 0, A random: products vanish
    iec::register_analyzer(zeroed, cfg, r2);  // explicitly A = 0 as well
    for (const std::string t : {"wq", "wk", "wv", "ff1", "ff2", "head"}) {
        zeroed.value("an." + t + ".a").setZero();
    }

    const auto rec = emo_record("read this with a scared and gloomy tone");
    iec::AnalyzerCache c1, c2;
    iec::analyzer_probs(fresh, cfg, rec, &c1);
    iec::analyzer_probs(zeroed, cfg, rec, &c2);
    CHECK(std::memcmp(c1.logits.data(), c2.logits.data(), sizeof(double) * 7) == 0);
    CHECK(iec::analyze_calibrated(fresh, cfg, rec) == iec::analyze_calibrated(zeroed, cfg, rec));
    // Purity: repeated runs agree exactly.
    iec::AnalyzerCache c3;
    iec::analyzer_probs(fresh, cfg, rec, &c3);
    CHECK(std::memcmp(c1.logits.data(), c3.logits.data(), sizeof(double) * 7) == 0);
}

TEST_CASE("analyzer loss hand values") {
    Vec p = Vec::Constant(7, 0.5);
    Vec dlogits;
    const double loss = iec::analyzer_loss(p, {iec::Emotion::angry}, &dlogits);
    CHECK(loss == doctest::Approx(std::log(2.0)));
    CHECK(dlogits(0) == doctest::Approx(0.5 / 7.0));
    CHECK(dlogits(1) == doctest::Approx(-0.5 / 7.0));

    // Perfect confidence on the right labels drives the loss toward zero.
    Vec q = Vec::Constant(7, 1e-9);
    q(5) = 1.0 - 1e-9;
    CHECK(iec::analyzer_loss(q, {iec::Emotion::sad}) < 1e-6);
    CHECK_THROWS_AS(iec::analyzer_loss(Vec::Zero(3), {iec::Emotion::sad}), ShapeError);
}

TEST_CASE("analyzer adapter gradients match finite differences") {
    iec::AnalyzerConfig cfg;
    ParamStore store;
    Rng rng(23);
    iec::register_analyzer(store, cfg, rng);
    // Make every adapter factor non-zero so all gradient paths are live.
    for (const std::string t : {"wq", "wk", "wv", "ff1", "ff2", "head"}) {
        store.value("an." + t + ".b") = num::gaussian_init(cfg.lora_rank, cfg.d_gte, 0.05, rng);
    }
    store.value("an.bias") = num::gaussian_init(7, 1, 0.1, rng);

    const auto rec = emo_record("please sound furious but end composed");
    const std::vector<iec::Emotion> gt{iec::Emotion::angry, iec::Emotion::neutral};
    const auto loss_at = [&] {
        return iec::analyzer_loss(iec::analyzer_probs(store, cfg, rec), gt, nullptr);
    };

    store.zero_grads();
    iec::AnalyzerCache cache;
    const Vec probs = iec::analyzer_probs(store, cfg, rec, &cache);
    Vec dlogits;
    iec::analyzer_loss(probs, gt, &dlogits);
    iec::analyzer_backward(store, dlogits, cache);

    // Central differences over sampled trainable coordinates.
    std::vector<std::string> trainable{"an.bias"};
    for (const std::string t : {"wq", "wk", "wv", "ff1", "ff2", "head"}) {
        trainable.push_back("an." + t + ".a");
        trainable.push_back("an." + t + ".b");
    }
    Rng pick(77);
    const double step = 1e-5;
    double max_rel = 0.0;
    int checked = 0;
    for (int i = 0; i < 48; ++i) {
        const auto& name = trainable[pick.below(trainable.size())];
        Mat& value = store.value(name);
        const Index row = Index(pick.below(std::uint64_t(value.rows())));
        const Index col = Index(pick.below(std::uint64_t(value.cols())));
        const double saved = value(row, col);
        value(row, col) = saved + step;
        const double up = loss_at();
        value(row, col) = saved - step;
        const double down = loss_at();
        value(row, col) = saved;
        const double fd = (up - down) / (2.0 * step);
        const double an = store.grad(name)(row, col);
        max_rel = std::max(max_rel,
                           std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
        ++checked;
    }
    REQUIRE(checked >= 32);
    CHECK(max_rel < 1e-3);
    INFO("worst analyzer adapter relative error ", max_rel);

    // Frozen bases never receive gradients.
    for (const std::string name :
         {"an.probes", "an.wq.base", "an.wk.base", "an.wv.base", "an.ff1.base", "an.ff2.base",
          "an.head.base"}) {
        CHECK(store.grad(name).isZero(0.0));
    }
}

TEST_CASE("calibration no-op, freezing, and measurable learning") {
    iec::AnalyzerConfig cfg;
    ParamStore store;
    Rng rng(41);
    iec::register_analyzer(store, cfg, rng);

    std::vector<std::pair<text::InstructionRecord, std::vector<iec::Emotion>>> train;
    CHECK_THROWS_AS(iec::calibrate_analyzer(store, cfg, train, num::AdamConfig{}, 1),
                    InvalidInput);

    // Templated micro-corpus over three entities.
    const std::vector<std::string> templates{"sound %s in this scene", "please be %s now",
                                             "read it %s", "act %s today"};
    const std::vector<std::pair<std::string, iec::Emotion>> kws{
        {"happy", iec::Emotion::happy},     {"joyful", iec::Emotion::happy},
        {"delighted", iec::Emotion::happy}, {"angry", iec::Emotion::angry},
        {"furious", iec::Emotion::angry},   {"irate", iec::Emotion::angry},
        {"sad", iec::Emotion::sad},         {"tearful", iec::Emotion::sad},
        {"gloomy", iec::Emotion::sad}};
    auto render = [&](int i) {
        const auto& [kw, e] = kws[size_t(i) % kws.size()];
        std::string s = templates[size_t(i) % templates.size()];
        s.replace(s.find("%s"), 2, kw);
        return std::make_pair(emo_record(s), std::vector<iec::Emotion>{e});
    };
    for (int i = 0; i < 60; ++i) train.push_back(render(i));
    std::vector<std::pair<text::InstructionRecord, std::vector<iec::Emotion>>> held;
    for (int i = 60; i < 80; ++i) held.push_back(render(i));

    // epochs = 0 changes nothing, bit for bit.
    std::vector<Mat> before;
    for (const auto& name : store.names()) before.push_back(store.value(name));
    const auto empty_trace = iec::calibrate_analyzer(store, cfg, train, num::AdamConfig{}, 0);
    CHECK(empty_trace.empty());
    {
        size_t i = 0;
        for (const auto& name : store.names()) {
            const Mat& now = store.value(name);
            CHECK(std::memcmp(now.data(), before[i].data(),
                              sizeof(double) * size_t(now.size())) == 0);
            ++i;
        }
    }

    const std::uint64_t frozen = iec::analyzer_base_digest(store);
    num::AdamConfig adam;
    adam.lr = 0.02;
    const auto trace = iec::calibrate_analyzer(store, cfg, train, adam, 20);
    REQUIRE(trace.size() == 20);
    CHECK(trace.back() < trace.front());
    CHECK(trace.back() < 0.15);
    CHECK(iec::analyzer_base_digest(store) == frozen);
    CHECK_FALSE(store.value("an.wk.b").isZero(0.0));

    int correct = 0;
    for (const auto& [rec, gt] : held) {
        if (iec::analyze_calibrated(store, cfg, rec) == gt) ++correct;
    }
    CHECK(correct >= 18);
    INFO("held-out micro accuracy ", correct, "/20");
}

TEST_CASE("calibrated decisions respect the threshold with ties included") {
    iec::AnalyzerConfig cfg;
    ParamStore store;
    Rng rng(3);
    iec::register_analyzer(store, cfg, rng);
    const auto rec = emo_record("be startled by the calm ending");

    const Vec probs = iec::analyzer_probs(store, cfg, rec);
    iec::AnalyzerConfig tie = cfg;
    tie.threshold = probs(3);  // exactly at one class's probability
    const auto with_tie = iec::analyze_calibrated(store, tie, rec);
    CHECK(std::find(with_tie.begin(), with_tie.end(), iec::Emotion::fear) != with_tie.end());

    // Push every logit far negative: the empty decision falls back to neutral.
    store.value("an.bias").setConstant(-50.0);
    CHECK(labels_of(iec::analyze_calibrated(store, cfg, rec)) ==
          std::vector<std::string>{"neutral"});

    CHECK_THROWS_AS(iec::analyze_calibrated(
                        store, cfg,
                        {"s1", text::InstructionKind::duration, "x",
                         text::InstructionSource::fixture}),
                    InvalidInput);

    // Outputs always come from the closed vocabulary, in vocabulary order.
    store.value("an.bias").setConstant(50.0);
    const auto all = iec::analyze_calibrated(store, cfg, rec);
    REQUIRE(all.size() == 7);
    for (int i = 0; i < 7; ++i) CHECK(all[size_t(i)] == static_cast<iec::Emotion>(i));
}

TEST_CASE("entity embeddings are positional over list order") {
    const Index d = 16;
    const Mat hs = iec::embed_entities({iec::Emotion::happy, iec::Emotion::sad}, d);
    const Mat sh = iec::embed_entities({iec::Emotion::sad, iec::Emotion::happy}, d);
    REQUIRE(hs.rows() == 2);
    REQUIRE(hs.cols() == d);
    const Vec pe0 = text::positional_encoding(0, d);
    const Vec pe1 = text::positional_encoding(1, d);
    // Same rows, swapped, once the positional part is subtracted.
    CHECK((hs.row(0).transpose() - pe0 - (sh.row(1).transpose() - pe1)).cwiseAbs().maxCoeff() <
          1e-12);
    CHECK((hs.row(1).transpose() - pe1 - (sh.row(0).transpose() - pe0)).cwiseAbs().maxCoeff() <
          1e-12);
    const Mat again = iec::embed_entities({iec::Emotion::happy, iec::Emotion::sad}, d);
    CHECK(std::memcmp(hs.data(), again.data(), sizeof(double) * size_t(hs.size())) == 0);
    CHECK(iec::embed_entities({iec::Emotion::neutral}, d).rows() == 1);
    CHECK_THROWS_AS(iec::embed_entities({}, d), InvalidInput);

    // Pooled embedding is the order-free mean of label embeddings.
    const Vec pooled = iec::entity_embedding({iec::Emotion::happy, iec::Emotion::sad}, d);
    const Vec swapped = iec::entity_embedding({iec::Emotion::sad, iec::Emotion::happy}, d);
    CHECK((pooled - swapped).cwiseAbs().maxCoeff() == 0.0);
    const Vec one = iec::entity_embedding({iec::Emotion::happy}, d);
    CHECK((one - text::token_embedding("happy", d)).cwiseAbs().maxCoeff() == 0.0);
    const Vec mean = 0.5 * (text::token_embedding("happy", d) + text::token_embedding("sad", d));
    CHECK((pooled - mean).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(iec::entity_embedding({}, d), InvalidInput);
}

TEST_CASE("prosody parameters register and outputs have one value per phoneme") {
    text::ModelDims dims;
    dims.d_gte = 16;
    dims.d_m = 6;
    dims.rnn_hidden = 4;
    ParamStore store;
    Rng rng(8);
    iec::register_prosody(store, dims, rng);

    CHECK(store.value("iec.fuse.reduce").rows() == 6);
    CHECK(store.value("iec.fuse.reduce").cols() == 16);
    CHECK(store.value("iec.fuse.wq").rows() == 6);
    CHECK(store.value("iec.rnn.fwd.wz").rows() == 4);
    CHECK(store.value("iec.rnn.fwd.wz").cols() == 6);
    CHECK(store.value("iec.head_pitch.w").cols() == 8);
    CHECK(store.value("iec.head_energy.b").rows() == 1);

    const Mat tp = num::gaussian_init(5, 6, 1.0, rng);
    const Mat emo = iec::embed_entities({iec::Emotion::fear, iec::Emotion::happy}, 16);
    const auto pred = iec::predict_prosody(store, tp, emo);
    CHECK(pred.pitch.size() == 5);
    CHECK(pred.energy.size() == 5);
    CHECK(pred.pitch.allFinite());
    CHECK(pred.energy.allFinite());
}

TEST_CASE("prosody attention collapses to the single entity key") {
    text::ModelDims dims;
    dims.d_gte = 16;
    dims.d_m = 6;
    dims.rnn_hidden = 4;
    ParamStore store;
    Rng rng(12);
    iec::register_prosody(store, dims, rng);

    const Mat tp = num::gaussian_init(4, 6, 1.0, rng);
    const Mat emo = iec::embed_entities({iec::Emotion::surprise}, 16);
    iec::ProsodyCache cache;
    iec::predict_prosody(store, tp, emo, &cache);
    REQUIRE(cache.fuse.attn.w.rows() == 4);
    REQUIRE(cache.fuse.attn.w.cols() == 1);
    CHECK((cache.fuse.attn.w.array() == 1.0).all());
    // Every fused row equals the lone value row.
    const Mat fused = cache.fuse.attn.w * cache.fuse.v;
    for (Index i = 1; i < fused.rows(); ++i) {
        CHECK((fused.row(i) - fused.row(0)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("prosody prediction matches a direct straight-line evaluation") {
    text::ModelDims dims;
    dims.d_gte = 8;
    dims.d_m = 4;
    dims.rnn_hidden = 3;
    ParamStore store;
    Rng rng(19);
    iec::register_prosody(store, dims, rng);

    const Index L = 3;
    const Mat tp = num::gaussian_init(L, 4, 1.0, rng);
    const Mat emo = iec::embed_entities({iec::Emotion::angry, iec::Emotion::sad}, 8);

    const auto pred = iec::predict_prosody(store, tp, emo);

    // Independent evaluation from the stored parameters.
    const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const Mat red = emo * store.value("iec.fuse.reduce").transpose();
    const Mat q = tp * store.value("iec.fuse.wq").transpose();
    const Mat k = red * store.value("iec.fuse.wk").transpose();
    const Mat v = red * store.value("iec.fuse.wv").transpose();
    Mat fused(L, 4);
    for (Index i = 0; i < L; ++i) {
        Vec scores(k.rows());
        for (Index j = 0; j < k.rows(); ++j) scores(j) = q.row(i).dot(k.row(j)) / 2.0;  // sqrt(4)
        const double m = scores.maxCoeff();
        Vec w = (scores.array() - m).exp().matrix();
        w /= w.sum();
        fused.row(i) = tp.row(i) + (w.transpose() * v).row(0);
    }
    const auto cell = [&](const std::string& p, const Vec& u, const Vec& s) {
        const Vec z = (store.value(p + ".wz") * u + store.value(p + ".uz") * s +
                       store.value(p + ".bz").col(0))
                          .unaryExpr(sig);
        const Vec r = (store.value(p + ".wr") * u + store.value(p + ".ur") * s +
                       store.value(p + ".br").col(0))
                          .unaryExpr(sig);
        const Vec h = (store.value(p + ".wh") * u +
                       store.value(p + ".uh") * Vec((r.array() * s.array()).matrix()) +
                       store.value(p + ".bh").col(0))
                          .array()
                          .tanh()
                          .matrix();
        return Vec(((1.0 - z.array()) * s.array() + z.array() * h.array()).matrix());
    };
    Mat hidden(L, 6);
    Vec sf = Vec::Zero(3), sb = Vec::Zero(3);
    for (Index t = 0; t < L; ++t) {
        sf = cell("iec.rnn.fwd", fused.row(t).transpose(), sf);
        hidden.block(t, 0, 1, 3) = sf.transpose();
    }
    for (Index t = L - 1; t >= 0; --t) {
        sb = cell("iec.rnn.bwd", fused.row(t).transpose(), sb);
        hidden.block(t, 3, 1, 3) = sb.transpose();
    }
    for (Index t = 0; t < L; ++t) {
        const double pitch = store.value("iec.head_pitch.w").row(0).dot(hidden.row(t)) +
                             store.value("iec.head_pitch.b")(0, 0);
        const double energy = store.value("iec.head_energy.w").row(0).dot(hidden.row(t)) +
                              store.value("iec.head_energy.b")(0, 0);
        CHECK(pred.pitch(t) == doctest::Approx(pitch).epsilon(1e-12));
        CHECK(pred.energy(t) == doctest::Approx(energy).epsilon(1e-12));
    }
}

TEST_CASE("prosody path gradients match finite differences") {
    text::ModelDims dims;
    dims.d_gte = 10;
    dims.d_m = 5;
    dims.rnn_hidden = 3;
    ParamStore store;
    Rng rng(29);
    iec::register_prosody(store, dims, rng);
    store.create("x", num::gaussian_init(4, 5, 1.0, rng));

    const Mat emo = iec::embed_entities({iec::Emotion::happy, iec::Emotion::fear}, 10);
    Vec pitch_t(4), energy_t(4);
    pitch_t << 0.4, -0.3, 0.8, 0.1;
    energy_t << -0.2, 0.5, -0.6, 0.3;

    const auto loss_fn = [&](ParamStore& s) {
        iec::ProsodyCache cache;
        const auto pred = iec::predict_prosody(s, s.value("x"), emo, &cache);
        const Vec dp = 2.0 * (pred.pitch - pitch_t);
        const Vec de = 2.0 * (pred.energy - energy_t);
        s.grad("x") += iec::predict_prosody_backward(s, dp, de, cache);
        return (pred.pitch - pitch_t).squaredNorm() + (pred.energy - energy_t).squaredNorm();
    };
    const auto report = num::grad_check(loss_fn, store, 48, 1e-3, 91);
    CHECK(report.pass);
    CHECK(report.checked >= 32);
    INFO("prosody grad check worst ", report.worst_name, "[", report.worst_index, "] rel ",
         report.max_rel_err);
}
