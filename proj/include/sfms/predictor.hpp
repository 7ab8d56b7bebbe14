#pragma once

// Autoregressive listener-token prediction. The context window is 96 rows:
// 48 speaker frames (optionally fused with audio), 40 past listener classes,
// and 8 future slots whose inputs are the previous frame's class. A boolean
// attention mask keeps the future slots causal: slot j sees the speaker only
// up to the frame it predicts, the whole listener past, and slots <= j.

#include <string>
#include <vector>

#include "sfms/inpainter.hpp"
#include "sfms/motion_data.hpp"
#include "sfms/seqmodel.hpp"

namespace sfms::pred {

struct PredictorConfig {
    int past = 40;
    int future = 8;
    int num_classes = 257;  // codebook size + 1; class 0 = transition
    seq::StackDims stack;
    int audio_kernel = 5;
    int audio_vocab = 512;
    bool use_audio = false;
    double w0 = 1.0;
    double w_key = 0.0;  // 0 -> (past+future)/K heuristic
    double dtw_weight = 0.1;
    double dtw_gamma = 0.1;
    double neutral_prob = 0.25;
    int neutral_min = 4;
    int neutral_max = 16;

    int window() const { return past + future; }
};

struct ClassWeights {
    std::vector<double> w;

    static ClassWeights defaults(const PredictorConfig& cfg, int K) {
        ClassWeights cw;
        cw.w.assign(cfg.num_classes, cfg.w_key > 0
                                         ? cfg.w_key
                                         : static_cast<double>(cfg.window()) / std::max(1, K));
        cw.w[0] = cfg.w0;
        return cw;
    }
};

template <class R>
void register_predictor(ParamStore<R>& ps, const PredictorConfig& cfg, int d_speaker,
                        std::uint64_t seed) {
    int D = cfg.stack.model_dim;
    ps.add("pred/embed", cfg.num_classes, D, Init::kNormal02, seed);
    seq::register_linear(ps, "pred/spk", d_speaker, D, seed);
    ps.add("pred/stream/spk", 1, D, Init::kNormal02, seed);
    ps.add("pred/stream/past", 1, D, Init::kNormal02, seed);
    ps.add("pred/stream/fut", 1, D, Init::kNormal02, seed);
    ps.add("pred/audio/conv/w", cfg.audio_kernel * 128, D, Init::kXavier, seed);
    ps.add("pred/audio/conv/b", 1, D, Init::kZeros, seed);
    ps.add("pred/audio/embed", cfg.audio_vocab, D, Init::kNormal02, seed);
    seq::register_gated_fusion(ps, "pred/fuse", D, cfg.stack.ffn, seed);
    seq::register_encoder_stack(ps, "pred/enc", cfg.stack, seed);
    seq::register_linear(ps, "pred/head", D, cfg.num_classes, seed);
}

// Mel spectrogram (4T x 128) -> T x D: shared 1-D convolution over time, then
// non-overlapping max pooling with stride 4.
template <class R>
ad::V<R> encode_audio_mel(Binder<R>& B, const PredictorConfig& cfg, ad::V<R> mel) {
    if (mel.cols() != 128) throw DimensionError("encode_audio_mel: expected 128 mel bands");
    if (mel.rows() % 4 != 0)
        throw ValidationError("encode_audio_mel: mel length must be divisible by 4");
    ad::V<R> x = ad::conv1d_same(mel, B("pred/audio/conv/w"), B("pred/audio/conv/b"),
                                 cfg.audio_kernel);
    return ad::maxpool_time(x, 4);
}

// Token stream -> T x D: embedding + position encoding at the native token
// rate, then nearest-rate row resampling to T rows.
template <class R>
ad::V<R> encode_audio_tokens(Binder<R>& B, const PredictorConfig& cfg,
                             const std::vector<int>& tokens, int T_out, ad::Graph<R>& g) {
    if (tokens.empty()) throw ValidationError("encode_audio_tokens: empty token stream");
    if (T_out < 1) throw ValidationError("encode_audio_tokens: need T_out >= 1");
    for (int t : tokens)
        if (t < 0 || t >= cfg.audio_vocab)
            throw ValidationError("encode_audio_tokens: token id out of range");
    int n = static_cast<int>(tokens.size());
    ad::V<R> emb = ad::gather_rows(B("pred/audio/embed"), tokens);
    emb = ad::add(emb, ad::constant(g, seq::sinusoidal_pe_range<R>(n, cfg.stack.model_dim)));
    std::vector<int> src(T_out);
    for (int t = 0; t < T_out; ++t) {
        int s = static_cast<int>((static_cast<long>(2 * t + 1) * n) / (2 * T_out));
        src[t] = std::min(n - 1, s);
    }
    return ad::gather_rows(emb, src);
}

template <class R>
struct PredictorInput {
    Mat<R> speaker;                // window x d frames
    Mat<R> audio_mel;              // (4*window) x 128, empty when absent
    std::vector<int> audio_tokens;  // empty when absent
    std::vector<int> past;          // cfg.past classes
    std::vector<int> future_in;     // cfg.future autoregressive input classes
};

// 0/1 attention mask over the 96-row context (see header comment).
template <class R>
Mat<R> context_mask(const PredictorConfig& cfg) {
    int S = cfg.window(), P = cfg.past, F = cfg.future;
    int n = S + P + F;
    Mat<R> allowed = Mat<R>::zeros(n, n);
    for (int r = 0; r < S + P; ++r)
        for (int c = 0; c < S + P; ++c) allowed(r, c) = R(1);
    for (int j = 0; j < F; ++j) {
        int r = S + P + j;
        for (int c = 0; c <= P + j; ++c) allowed(r, c) = R(1);     // speaker, causally
        for (int c = S; c < S + P; ++c) allowed(r, c) = R(1);      // listener past
        for (int c = S + P; c <= r; ++c) allowed(r, c) = R(1);     // earlier slots + self
    }
    return allowed;
}

template <class R>
ad::V<R> predict_logits(Binder<R>& B, const PredictorConfig& cfg, ad::Graph<R>& g,
                        const PredictorInput<R>& in) {
    int S = cfg.window(), P = cfg.past, F = cfg.future;
    int D = cfg.stack.model_dim;
    if (in.speaker.rows != S) throw DimensionError("predict_logits: speaker window length");
    if (static_cast<int>(in.past.size()) != P)
        throw DimensionError("predict_logits: past length mismatch");
    if (static_cast<int>(in.future_in.size()) != F)
        throw DimensionError("predict_logits: future input length mismatch");
    for (int c : in.past)
        if (c < 0 || c >= cfg.num_classes)
            throw ValidationError("predict_logits: past class out of range");
    for (int c : in.future_in)
        if (c < 0 || c >= cfg.num_classes)
            throw ValidationError("predict_logits: future input class out of range");

    ad::V<R> spk = seq::linear(B, "pred/spk", ad::constant(g, in.speaker));
    spk = ad::add(spk, ad::constant(g, seq::sinusoidal_pe_range<R>(S, D)));
    if (cfg.use_audio && (in.audio_mel.rows > 0 || !in.audio_tokens.empty())) {
        ad::V<R> au = in.audio_mel.rows > 0
                          ? encode_audio_mel(B, cfg, ad::constant(g, in.audio_mel))
                          : encode_audio_tokens(B, cfg, in.audio_tokens, S, g);
        if (au.rows() != S) throw DimensionError("predict_logits: audio rows != window");
        spk = seq::gated_fusion(B, "pred/fuse", spk, au, cfg.stack.heads);
    }
    spk = ad::add(spk, ad::tile_rows(B("pred/stream/spk"), S));

    ad::V<R> past = ad::gather_rows(B("pred/embed"), in.past);
    std::vector<int> past_pos(P), fut_pos(F);
    for (int i = 0; i < P; ++i) past_pos[i] = i;
    for (int j = 0; j < F; ++j) fut_pos[j] = P + j;
    past = ad::add(past, ad::constant(g, seq::sinusoidal_pe<R>(past_pos, D)));
    past = ad::add(past, ad::tile_rows(B("pred/stream/past"), P));

    ad::V<R> fut = ad::gather_rows(B("pred/embed"), in.future_in);
    fut = ad::add(fut, ad::constant(g, seq::sinusoidal_pe<R>(fut_pos, D)));
    fut = ad::add(fut, ad::tile_rows(B("pred/stream/fut"), F));

    ad::V<R> ctx = ad::concat_rows(ad::concat_rows(spk, past), fut);
    Mat<R> allowed = context_mask<R>(cfg);
    ctx = seq::encoder_stack(B, "pred/enc", ctx, cfg.stack, &allowed);
    ad::V<R> slots = ad::slice_rows(ctx, S + P, S + P + F);
    return seq::linear(B, "pred/head", slots);  // F x num_classes
}

template <class R>
struct PredLoss {
    ad::V<R> ce;
    ad::V<R> dtw;  // invalid when dtw_weight == 0
    ad::V<R> total;
};

// Weighted cross-entropy averaged over the future slots, plus an optional
// soft-DTW pull between the keyframe-indicator curves.
template <class R>
PredLoss<R> prediction_loss(ad::V<R> logits, const std::vector<int>& target,
                            const ClassWeights& weights, double dtw_weight, double dtw_gamma) {
    int F = logits.rows(), C = logits.cols();
    if (static_cast<int>(target.size()) != F)
        throw DimensionError("prediction_loss: target length mismatch");
    if (static_cast<int>(weights.w.size()) != C)
        throw DimensionError("prediction_loss: weight vector length mismatch");
    for (int t : target)
        if (t < 0 || t >= C) throw ValidationError("prediction_loss: target class out of range");

    ad::V<R> logp = ad::log_softmax_rows(logits);
    PredLoss<R> out;
    for (int j = 0; j < F; ++j) {
        ad::V<R> term = ad::scale(ad::pick(logp, j, target[j]),
                                  static_cast<R>(-weights.w[target[j]] / F));
        out.ce = (j == 0) ? term : ad::add(out.ce, term);
    }
    out.total = out.ce;
    if (dtw_weight > 0) {
        ad::V<R> probs = ad::softmax_rows(logits);
        ad::V<R> indicator = ad::rsub_scalar(R(1), ad::slice_cols(probs, 0, 1));  // F x 1
        std::vector<double> target_ind(F);
        for (int j = 0; j < F; ++j) target_ind[j] = target[j] > 0 ? 1.0 : 0.0;
        out.dtw = ad::soft_dtw_to(indicator, target_ind, dtw_gamma);
        out.total = ad::add(out.total, ad::scale(out.dtw, static_cast<R>(dtw_weight)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

enum class RolloutMode { kGreedy, kSample };

struct RolloutResult {
    quant::TokenSequence tokens;  // the generated horizon
    MotionSequence motion;        // decoded generated frames
};

RolloutResult rollout(const DyadContext& prefix, ParamStore<real>& pred_ps,
                      const PredictorConfig& cfg, ParamStore<real>& recon_ps,
                      const pipeline::PipelineConfig& rcfg, int horizon, RolloutMode mode,
                      double temperature, std::uint64_t seed);

}  // namespace sfms::pred
