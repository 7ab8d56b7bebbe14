#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sfms/predictor.hpp"

using namespace sfms;
using namespace sfms::pred;
using GD = ad::Graph<double>;
using VD = ad::V<double>;
using MD = Mat<double>;

namespace {

MD random_mat(int r, int c, std::uint64_t seed, double scale = 1.0) {
    rng::Rng gen(seed);
    MD m(r, c);
    for (double& v : m.a) v = scale * gen.normal();
    return m;
}

VD project(GD& g, VD y, std::uint64_t seed) {
    return ad::sum_all(ad::mul(y, ad::constant(g, random_mat(y.rows(), y.cols(), seed))));
}

// Central-difference check of d loss / d x and d loss / d (probed params).
double fd_error_net(const MD& x, const ParamStore<double>& ps,
                    const std::vector<std::string>& probe,
                    const std::function<VD(GD&, Binder<double>&, VD)>& build,
                    double h = 1e-5) {
    ParamStore<double> store = ps;
    GD g;
    Binder<double> B(g, store, true);
    VD xl = ad::leaf(g, x, true);
    VD loss = build(g, B, xl);
    g.backward(loss.id);

    MD grad_x = g.grad(xl.id);
    std::map<int, MD> grad_p;
    B.for_each_grad([&](int idx, const MD& grad) { grad_p[idx] = grad; });

    auto eval = [&](const ParamStore<double>& p, const MD& xin) {
        ParamStore<double> local = p;
        GD g2;
        Binder<double> B2(g2, local, false);
        return build(g2, B2, ad::leaf(g2, xin, false)).val()(0, 0);
    };

    double worst = 0;
    auto update = [&](double an, double fd) {
        double err = std::abs(an - fd) / std::max({1e-4, std::abs(an), std::abs(fd)});
        worst = std::max(worst, err);
    };
    for (std::size_t j = 0; j < x.size(); ++j) {
        MD hi = x, lo = x;
        hi.a[j] += h;
        lo.a[j] -= h;
        update(grad_x.a[j], (eval(ps, hi) - eval(ps, lo)) / (2 * h));
    }
    for (const std::string& name : probe) {
        int idx = ps.index_of(name);
        REQUIRE(grad_p.count(idx));
        for (std::size_t j = 0; j < ps.at(name).size(); ++j) {
            ParamStore<double> hi = ps, lo = ps;
            hi.at(name).a[j] += h;
            lo.at(name).a[j] -= h;
            update(grad_p[idx].a[j], (eval(hi, x) - eval(lo, x)) / (2 * h));
        }
    }
    return worst;
}

PredictorConfig tiny_cfg(int layers = 2) {
    PredictorConfig cfg;
    cfg.past = 6;
    cfg.future = 3;
    cfg.num_classes = 10;
    cfg.stack = {16, 2, layers, 32};
    cfg.audio_kernel = 5;
    cfg.audio_vocab = 32;
    return cfg;
}

ParamStore<double> fresh_params(const PredictorConfig& cfg, int d_speaker,
                                std::uint64_t seed = 11) {
    ParamStore<double> ps;
    register_predictor(ps, cfg, d_speaker, seed);
    return ps;
}

PredictorInput<double> random_input(const PredictorConfig& cfg, int d_speaker,
                                    std::uint64_t seed) {
    PredictorInput<double> in;
    in.speaker = random_mat(cfg.window(), d_speaker, seed);
    rng::Rng r(rng::derive(seed, "classes"));
    in.past.resize(cfg.past);
    for (int& c : in.past) c = static_cast<int>(r.uniform_int(cfg.num_classes));
    in.future_in.resize(cfg.future);
    for (int& c : in.future_in) c = static_cast<int>(r.uniform_int(cfg.num_classes));
    return in;
}

MD logits_of(const PredictorConfig& cfg, ParamStore<double>& ps,
             const PredictorInput<double>& in) {
    GD g;
    Binder<double> B(g, ps, false);
    return predict_logits(B, cfg, g, in).val();
}

}  // namespace

TEST_CASE("mel encoder pools four strips into one row") {
    PredictorConfig cfg = tiny_cfg();
    ParamStore<double> ps = fresh_params(cfg, 3);
    GD g;
    Binder<double> B(g, ps, false);
    VD out = encode_audio_mel(B, cfg, ad::constant(g, random_mat(160, 128, 1)));
    CHECK(out.rows() == 40);
    CHECK(out.cols() == cfg.stack.model_dim);

    GD g2;
    Binder<double> B2(g2, ps, false);
    CHECK_THROWS_AS(encode_audio_mel(B2, cfg, ad::constant(g2, random_mat(10, 128, 1))),
                    ValidationError);
    GD g3;
    Binder<double> B3(g3, ps, false);
    CHECK_THROWS_AS(encode_audio_mel(B3, cfg, ad::constant(g3, random_mat(16, 64, 1))),
                    DimensionError);
}

TEST_CASE("unit-kernel mel encoder maps equal strips to equal rows") {
    PredictorConfig cfg = tiny_cfg();
    cfg.audio_kernel = 1;
    ParamStore<double> ps = fresh_params(cfg, 3);
    MD strip = random_mat(1, 128, 7);
    MD mel(32, 128);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 128; ++c) mel(r, c) = strip(0, c);

    GD g;
    Binder<double> B(g, ps, false);
    MD out = encode_audio_mel(B, cfg, ad::constant(g, mel)).val();
    REQUIRE(out.rows == 8);
    for (int r = 1; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) CHECK(out(r, c) == out(0, c));
}

TEST_CASE("mel encoder gradients agree with finite differences") {
    PredictorConfig cfg = tiny_cfg();
    ParamStore<double> ps = fresh_params(cfg, 3);
    MD mel = random_mat(16, 128, 21);
    double err = fd_error_net(mel, ps, {"pred/audio/conv/w", "pred/audio/conv/b"},
                              [&](GD& g, Binder<double>& B, VD x) {
                                  return project(g, encode_audio_mel(B, cfg, x), 31);
                              });
    CHECK(err < 1e-5);
}

TEST_CASE("token encoder resamples the embedded stream at the nearest rate") {
    PredictorConfig cfg = tiny_cfg();
    ParamStore<double> ps = fresh_params(cfg, 3);
    std::vector<int> tokens = {3, 1, 4, 1, 5};

    // Matching rates: the resampling map is the identity.
    GD g;
    Binder<double> B(g, ps, false);
    MD out = encode_audio_tokens(B, cfg, tokens, 5, g).val();
    MD pe = seq::sinusoidal_pe_range<double>(5, cfg.stack.model_dim);
    const MD& table = ps.at("pred/audio/embed");
    for (int t = 0; t < 5; ++t)
        for (int c = 0; c < cfg.stack.model_dim; ++c)
            CHECK(out(t, c) == table(tokens[t], c) + pe(t, c));

    // A constant stream stays constant after removing the position code.
    GD g2;
    Binder<double> B2(g2, ps, false);
    MD up = encode_audio_tokens(B2, cfg, {7, 7, 7}, 12, g2).val();
    MD pe3 = seq::sinusoidal_pe_range<double>(3, cfg.stack.model_dim);
    for (int t = 0; t < 12; ++t) {
        int src = std::min(2, (2 * t + 1) * 3 / 24);
        for (int c = 0; c < cfg.stack.model_dim; ++c)
            CHECK(up(t, c) - pe3(src, c) == doctest::Approx(table(7, c)).epsilon(1e-12));
    }

    GD g3;
    Binder<double> B3(g3, ps, false);
    CHECK_THROWS_AS(encode_audio_tokens(B3, cfg, {}, 4, g3), ValidationError);
    CHECK_THROWS_AS(encode_audio_tokens(B3, cfg, {cfg.audio_vocab}, 4, g3), ValidationError);
    CHECK_THROWS_AS(encode_audio_tokens(B3, cfg, {0}, 0, g3), ValidationError);
}

TEST_CASE("logit head emits one row per future slot") {
    PredictorConfig cfg = tiny_cfg();
    ParamStore<double> ps = fresh_params(cfg, 3);
    PredictorInput<double> in = random_input(cfg, 3, 41);
    MD logits = logits_of(cfg, ps, in);
    CHECK(logits.rows == cfg.future);
    CHECK(logits.cols == cfg.num_classes);

    PredictorInput<double> bad = in;
    bad.past.pop_back();
    GD g;
    Binder<double> B(g, ps, false);
    CHECK_THROWS_AS(predict_logits(B, cfg, g, bad), DimensionError);
    bad = in;
    bad.speaker = random_mat(cfg.window() + 1, 3, 1);
    CHECK_THROWS_AS(predict_logits(B, cfg, g, bad), DimensionError);
    bad = in;
    bad.future_in[0] = cfg.num_classes;
    CHECK_THROWS_AS(predict_logits(B, cfg, g, bad), ValidationError);
}

TEST_CASE("a fresh fusion gate makes the logits audio-independent") {
    PredictorConfig cfg = tiny_cfg();
    cfg.use_audio = true;
    ParamStore<double> ps = fresh_params(cfg, 3);
    PredictorInput<double> in = random_input(cfg, 3, 43);
    in.audio_mel = random_mat(4 * cfg.window(), 128, 1);
    MD a = logits_of(cfg, ps, in);
    in.audio_mel = random_mat(4 * cfg.window(), 128, 2);
    MD b = logits_of(cfg, ps, in);
    CHECK(a.a == b.a);

    // Opening the gate makes the audio matter.
    ps.at("pred/fuse/alpha")(0, 0) = 0.5;
    MD c = logits_of(cfg, ps, in);
    in.audio_mel = random_mat(4 * cfg.window(), 128, 1);
    MD d = logits_of(cfg, ps, in);
    CHECK(c.a != d.a);
}

TEST_CASE("future slots never see later autoregressive inputs") {
    PredictorConfig cfg = tiny_cfg();
    ParamStore<double> ps = fresh_params(cfg, 3);
    PredictorInput<double> in = random_input(cfg, 3, 47);
    MD base = logits_of(cfg, ps, in);

    PredictorInput<double> bumped = in;
    bumped.future_in[2] = (in.future_in[2] + 1) % cfg.num_classes;
    MD after = logits_of(cfg, ps, bumped);
    for (int j = 0; j < 2; ++j)
        for (int c = 0; c < cfg.num_classes; ++c) CHECK(after(j, c) == base(j, c));
    bool last_changed = false;
    for (int c = 0; c < cfg.num_classes; ++c)
        if (after(2, c) != base(2, c)) last_changed = true;
    CHECK(last_changed);
}

TEST_CASE("future slots see the speaker only up to the frame they predict") {
    // One layer: with more, allowed speaker rows relay masked information.
    PredictorConfig cfg = tiny_cfg(1);
    ParamStore<double> ps = fresh_params(cfg, 3);
    PredictorInput<double> in = random_input(cfg, 3, 53);
    MD base = logits_of(cfg, ps, in);

    // Slot 0 predicts frame `past`; speaker rows past+1.. are masked for it.
    PredictorInput<double> bumped = in;
    for (int r = cfg.past + 1; r < cfg.window(); ++r) bumped.speaker(r, 0) += 10.0;
    MD after = logits_of(cfg, ps, bumped);
    for (int c = 0; c < cfg.num_classes; ++c) CHECK(after(0, c) == base(0, c));

    // An allowed speaker row does reach slot 0.
    bumped = in;
    bumped.speaker(cfg.past, 0) += 10.0;
    after = logits_of(cfg, ps, bumped);
    bool changed = false;
    for (int c = 0; c < cfg.num_classes; ++c)
        if (after(0, c) != base(0, c)) changed = true;
    CHECK(changed);
}

TEST_CASE("prediction loss matches closed forms") {
    ClassWeights unit;
    unit.w.assign(5, 1.0);

    GD g;
    VD uniform = ad::constant(g, MD::full(4, 5, 0.7));
    PredLoss<double> lu = prediction_loss(uniform, {1, 2, 3, 4}, unit, 0.0, 0.1);
    CHECK(lu.total.val()(0, 0) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    MD margin = MD::zeros(4, 5);
    std::vector<int> target = {0, 2, 1, 4};
    for (int j = 0; j < 4; ++j) margin(j, target[j]) = 50.0;
    GD g2;
    PredLoss<double> lm = prediction_loss(ad::constant(g2, margin), target, unit, 0.0, 0.1);
    CHECK(lm.total.val()(0, 0) < 1e-12);

    // Zero class weight silences the matching slots entirely.
    ClassWeights w0;
    w0.w.assign(5, 1.0);
    w0.w[0] = 0.0;
    GD g3;
    PredLoss<double> lz =
        prediction_loss(ad::constant(g3, random_mat(4, 5, 3)), {0, 0, 0, 0}, w0, 0.0, 0.1);
    CHECK(lz.ce.val()(0, 0) == 0.0);

    // Near-deterministic indicators collapse the soft-DTW pull to ~0.
    MD keyed = MD::zeros(4, 5);
    for (int j = 0; j < 4; ++j) {
        keyed(j, 0) = -40.0;
        keyed(j, 1 + j) = 40.0;
    }
    GD g4;
    PredLoss<double> ld =
        prediction_loss(ad::constant(g4, keyed), {1, 2, 3, 4}, unit, 1.0, 1e-6);
    CHECK(std::abs(ld.dtw.val()(0, 0)) < 1e-4);

    GD g5;
    VD x = ad::constant(g5, MD::zeros(2, 5));
    CHECK_THROWS_AS(prediction_loss(x, {0}, unit, 0.0, 0.1), DimensionError);
    CHECK_THROWS_AS(prediction_loss(x, {0, 5}, unit, 0.0, 0.1), ValidationError);
    ClassWeights shorter;
    shorter.w.assign(4, 1.0);
    CHECK_THROWS_AS(prediction_loss(x, {0, 0}, shorter, 0.0, 0.1), DimensionError);
}

TEST_CASE("default class weights follow the keyframe budget heuristic") {
    PredictorConfig cfg = tiny_cfg();
    cfg.w0 = 0.25;
    ClassWeights cw = ClassWeights::defaults(cfg, 3);
    REQUIRE(static_cast<int>(cw.w.size()) == cfg.num_classes);
    CHECK(cw.w[0] == 0.25);
    for (int i = 1; i < cfg.num_classes; ++i)
        CHECK(cw.w[i] == doctest::Approx(9.0 / 3.0).epsilon(1e-15));

    cfg.w_key = 2.5;
    ClassWeights fixed = ClassWeights::defaults(cfg, 3);
    for (int i = 1; i < cfg.num_classes; ++i) CHECK(fixed.w[i] == 2.5);
}

TEST_CASE("rollout generates a valid token and motion horizon") {
    pipeline::PipelineConfig rcfg;
    rcfg.d = 3;
    rcfg.K = 2;
    rcfg.window = 8;
    rcfg.stack = {8, 2, 1, 16};
    rcfg.conv_kernel = 3;
    rcfg.conv_out = 6;
    rcfg.quant.fsq_levels = {3, 3};
    ParamStore<real> recon_ps;
    pipeline::register_recon_models(recon_ps, rcfg, 5);

    PredictorConfig cfg;
    cfg.past = 8;
    cfg.future = 4;
    cfg.num_classes = rcfg.quant.codebook_size() + 1;
    cfg.stack = {16, 2, 1, 32};
    ParamStore<real> pred_ps;
    register_predictor(pred_ps, cfg, 3, 7);

    SynthSpec spec;
    spec.T = 24;
    spec.d = 3;
    DyadContext prefix;
    prefix.speaker = synth_sequence(spec, 61).seq;
    SynthSpec lspec = spec;
    lspec.T = 8;
    prefix.listener = synth_sequence(lspec, 62).seq;

    RolloutResult a = rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 8,
                              RolloutMode::kGreedy, 1.0, 9);
    CHECK(a.tokens.length == 8);
    CHECK(static_cast<int>(a.tokens.classes.size()) == 8);
    CHECK(a.tokens.codebook_size == rcfg.quant.codebook_size());
    for (int c : a.tokens.classes) {
        CHECK(c >= 0);
        CHECK(c <= rcfg.quant.codebook_size());
    }
    CHECK(a.motion.T() == 8);
    CHECK(a.motion.d() == 3);
    CHECK(a.motion.frames.all_finite());
    CHECK(a.motion.fps == prefix.listener.fps);

    RolloutResult b = rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 8,
                              RolloutMode::kGreedy, 1.0, 10);
    CHECK(a.tokens.classes == b.tokens.classes);
    CHECK(a.motion.frames.a == b.motion.frames.a);

    // Near-zero temperature collapses sampling onto the greedy path.
    RolloutResult c = rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 8,
                              RolloutMode::kSample, 1e-4, 11);
    CHECK(c.tokens.classes == a.tokens.classes);

    CHECK_THROWS_AS(rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 0,
                            RolloutMode::kGreedy, 1.0, 9),
                    ValidationError);
    CHECK_THROWS_AS(rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 8,
                            RolloutMode::kSample, 0.0, 9),
                    ValidationError);
    CHECK_THROWS_AS(rollout(prefix, pred_ps, cfg, recon_ps, rcfg, 32,
                            RolloutMode::kGreedy, 1.0, 9),
                    ValidationError);

    DyadContext swapped;
    swapped.speaker = prefix.listener;
    swapped.listener = prefix.speaker;
    CHECK_THROWS_AS(rollout(swapped, pred_ps, cfg, recon_ps, rcfg, 4,
                            RolloutMode::kGreedy, 1.0, 9),
                    ValidationError);
}
