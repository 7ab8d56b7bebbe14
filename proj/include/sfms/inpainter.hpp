#pragma once

// Sparse-to-dense reconstruction pipeline: keyframe encoder, quantization
// with straight-through values, a transition encoder whose queries are the
// concatenation of each transition position's PE with pooled keyframe
// context, and a decoder that interleaves keyframe and transition latents by
// frame index before an encoder stack and linear head.

#include <optional>
#include <string>
#include <vector>

#include "sfms/motion_data.hpp"
#include "sfms/quantizer.hpp"
#include "sfms/sampler.hpp"
#include "sfms/seqmodel.hpp"

namespace sfms::pipeline {

enum class Mode { kDynamic, kStatic, kDense };

Mode mode_from_name(const std::string& name);
const char* mode_name(Mode m);

struct PipelineConfig {
    int d = 8;
    int K = 7;
    int window = 48;
    seq::StackDims stack;  // shared by scorer encoder and decoder
    int conv_kernel = 5;
    int conv_out = 64;
    quant::QuantSpec quant;
    Mode mode = Mode::kDynamic;

    sampler::ScorerDims scorer_dims() const { return {d, conv_kernel, conv_out, stack}; }
};

// Keyframe positions for the static-placement baseline: K frames evenly
// spread as floor(i*T/K).
std::vector<int> static_indices(int T, int K);

template <class R>
void register_recon_models(ParamStore<R>& ps, const PipelineConfig& cfg, std::uint64_t seed) {
    sampler::register_scorer(ps, "scorer", cfg.scorer_dims(), seed);
    quant::register_keyframe_encoder(ps, "kfenc", cfg.d, cfg.stack.model_dim, seed);
    quant::register_quantizer(ps, "quant", cfg.quant, cfg.stack.model_dim, seed);
    seq::register_linear(ps, "tf/q", 2 * cfg.stack.model_dim, cfg.stack.model_dim, seed);
    seq::register_linear(ps, "tf/k", 2 * cfg.stack.model_dim, cfg.stack.model_dim, seed);
    seq::register_linear(ps, "tf/v", cfg.stack.model_dim, cfg.stack.model_dim, seed);
    seq::register_linear(ps, "tf/o", cfg.stack.model_dim, cfg.stack.model_dim, seed);
    seq::register_ffn(ps, "tf/ffn", cfg.stack.model_dim, cfg.stack.ffn, seed);
    seq::register_encoder_stack(ps, "dec/enc", cfg.stack, seed);
    seq::register_linear(ps, "dec/head", cfg.stack.model_dim, cfg.d, seed);
}

// Per-keyframe embeddings in ascending frame order: K x D.
template <class R>
ad::V<R> encode_keyframes(Binder<R>& B, ad::V<R> frames, const std::vector<int>& indices) {
    return quant::encode_frames(B, "kfenc", ad::gather_rows(frames, indices));
}

template <class R>
struct QuantizeOut {
    ad::V<R> z_q;              // K x D straight-through values fed downstream
    ad::V<R> codebook_loss;    // invalid for FSQ
    ad::V<R> commitment_loss;  // invalid for FSQ
    std::vector<int> token_ids;  // 1..N per keyframe
};

template <class R>
QuantizeOut<R> quantize_keyframes(Binder<R>& B, const PipelineConfig& cfg, ad::V<R> z_kf) {
    QuantizeOut<R> out;
    int K = z_kf.rows();
    if (cfg.quant.kind == quant::Kind::kVq) {
        ad::V<R> book = B("quant/vq/codebook");
        const Mat<R>& entries = book.val();
        std::vector<int> ids(K);
        const Mat<R>& zv = z_kf.val();
        for (int k = 0; k < K; ++k) {
            std::vector<R> row(zv.cols);
            for (int c = 0; c < zv.cols; ++c) row[c] = zv(k, c);
            ids[k] = quant::vq_encode(row, entries).first;
        }
        ad::V<R> rows = ad::gather_rows(book, ids);
        R inv_k = R(1) / static_cast<R>(K);
        out.codebook_loss = ad::scale(quant::vq_codebook_loss(z_kf, rows), inv_k);
        out.commitment_loss = ad::scale(quant::vq_commit_loss(z_kf, rows), inv_k);
        out.z_q = ad::value_override(z_kf, rows.val());
        out.token_ids.resize(K);
        for (int k = 0; k < K; ++k) out.token_ids[k] = ids[k] + 1;
    } else {
        ad::V<R> p = seq::linear(B, "quant/fsq/proj", z_kf);
        const Mat<R>& pv = p.val();
        Mat<R> q_vals(pv.rows, pv.cols);
        out.token_ids.resize(K);
        for (int k = 0; k < K; ++k) {
            std::vector<R> row(pv.cols);
            for (int c = 0; c < pv.cols; ++c) row[c] = pv(k, c);
            auto [id, zq] = quant::fsq_encode(row, cfg.quant.fsq_levels);
            out.token_ids[k] = id + 1;
            for (int c = 0; c < pv.cols; ++c) q_vals(k, c) = zq[c];
        }
        ad::V<R> q_st = ad::value_override(p, std::move(q_vals));
        out.z_q = seq::linear(B, "quant/fsq/unproj", q_st);
    }
    return out;
}

enum class TransitionPe { kAbsolute, kSymmetricDiff };

// Transition latents: queries concatenate PE(position) with mean-pooled
// keyframe context; keys concatenate PE(keyframe position) with the
// quantized embeddings. kSymmetricDiff is a diagnostic mode where key PEs use
// |t_kf - t| so equidistant keyframes become indistinguishable.
template <class R>
ad::V<R> encode_transitions(Binder<R>& B, const seq::StackDims& dims, ad::V<R> z_q,
                            const std::vector<int>& t_kf, const std::vector<int>& t_tf,
                            TransitionPe pe_mode = TransitionPe::kAbsolute,
                            Mat<R>* attn_out = nullptr) {
    ad::Graph<R>& g = *z_q.g;
    int D = dims.model_dim;
    if (t_tf.empty()) {
        ad::V<R> q = ad::constant(g, Mat<R>(0, D));
        return q;
    }
    ad::V<R> pooled = ad::tile_rows(ad::mean_rows(z_q), static_cast<int>(t_tf.size()));
    ad::V<R> q_pe = ad::constant(g, seq::sinusoidal_pe<R>(t_tf, D));
    ad::V<R> q = seq::linear(B, "tf/q", ad::concat_cols(q_pe, pooled));
    ad::V<R> v = seq::linear(B, "tf/v", z_q);

    ad::V<R> attn;
    if (pe_mode == TransitionPe::kAbsolute) {
        ad::V<R> k_pe = ad::constant(g, seq::sinusoidal_pe<R>(t_kf, D));
        ad::V<R> k = seq::linear(B, "tf/k", ad::concat_cols(k_pe, z_q));
        attn = seq::attention_core(q, k, v, dims.heads, static_cast<const Mat<R>*>(nullptr),
                                   attn_out);
    } else {
        if (attn_out) *attn_out = Mat<R>::zeros(static_cast<int>(t_tf.size()),
                                                static_cast<int>(t_kf.size()));
        for (std::size_t i = 0; i < t_tf.size(); ++i) {
            std::vector<int> diffs(t_kf.size());
            for (std::size_t j = 0; j < t_kf.size(); ++j)
                diffs[j] = std::abs(t_kf[j] - t_tf[i]);
            ad::V<R> k_pe = ad::constant(g, seq::sinusoidal_pe<R>(diffs, D));
            ad::V<R> k = seq::linear(B, "tf/k", ad::concat_cols(k_pe, z_q));
            ad::V<R> qi = ad::slice_rows(q, static_cast<int>(i), static_cast<int>(i) + 1);
            Mat<R> attn_row;
            ad::V<R> oi = seq::attention_core(qi, k, v, dims.heads,
                                              static_cast<const Mat<R>*>(nullptr),
                                              attn_out ? &attn_row : nullptr);
            if (attn_out) attn_out->map().row(static_cast<int>(i)) = attn_row.map().row(0);
            attn = (i == 0) ? oi : ad::concat_rows(attn, oi);
        }
    }
    ad::V<R> a = seq::linear(B, "tf/o", attn);
    return ad::add(a, seq::ffn(B, "tf/ffn", a));
}

// Interleave keyframe and transition latents by frame index, add PE, decode
// through the stack and linear head to T x d.
template <class R>
ad::V<R> decode_full(Binder<R>& B, const PipelineConfig& cfg, ad::V<R> z_q,
                     const std::vector<int>& t_kf, ad::V<R> z_tf,
                     const std::vector<int>& t_tf, int T) {
    ad::Graph<R>& g = *z_q.g;
    ad::V<R> x = t_tf.empty() ? z_q : ad::interleave_rows(z_q, t_kf, z_tf, t_tf, T);
    x = ad::add(x, ad::constant(g, seq::sinusoidal_pe_range<R>(T, cfg.stack.model_dim)));
    x = seq::encoder_stack(B, "dec/enc", x, cfg.stack);
    return seq::linear(B, "dec/head", x);
}

// One full differentiable pass for a fixed keyframe placement.
template <class R>
struct SparseForward {
    ad::V<R> recon;       // T x d
    ad::V<R> motion_mse;  // 1x1, mean over all entries
    ad::V<R> codebook_loss, commitment_loss;  // invalid for FSQ
    std::vector<int> token_ids;
    std::vector<int> indices;
};

template <class R>
SparseForward<R> sparse_forward(Binder<R>& B, const PipelineConfig& cfg, ad::V<R> frames,
                                const std::vector<int>& indices,
                                ad::V<R> st_row = {}) {  // optional 1xT straight-through mask
    int T = frames.rows();
    SparseForward<R> out;
    out.indices = indices;
    ad::V<R> z_kf = encode_keyframes(B, frames, indices);
    if (st_row.valid()) {
        ad::V<R> st_col = ad::gather_rows(ad::transpose(st_row), indices);
        z_kf = ad::mul_colvec(z_kf, st_col);
    }
    QuantizeOut<R> q = quantize_keyframes(B, cfg, z_kf);
    out.codebook_loss = q.codebook_loss;
    out.commitment_loss = q.commitment_loss;
    out.token_ids = q.token_ids;
    std::vector<int> t_tf;
    {
        std::vector<char> is_kf(T, 0);
        for (int i : indices) is_kf[i] = 1;
        for (int t = 0; t < T; ++t)
            if (!is_kf[t]) t_tf.push_back(t);
    }
    ad::V<R> z_tf = encode_transitions(B, cfg.stack, q.z_q, indices, t_tf);
    out.recon = decode_full(B, cfg, q.z_q, indices, z_tf, t_tf, T);
    ad::V<R> diff = ad::sub(out.recon, frames);
    out.motion_mse = ad::mean_all(ad::mul(diff, diff));
    return out;
}

// Dense baseline: every frame is embedded and quantized; no sampler, no
// transition encoder. Same decoder and codebook budget.
template <class R>
SparseForward<R> dense_forward(Binder<R>& B, const PipelineConfig& cfg, ad::V<R> frames) {
    int T = frames.rows();
    std::vector<int> all(T);
    for (int t = 0; t < T; ++t) all[t] = t;
    SparseForward<R> out;
    out.indices = all;
    ad::V<R> z = quant::encode_frames(B, "kfenc", frames);
    QuantizeOut<R> q = quantize_keyframes(B, cfg, z);
    out.codebook_loss = q.codebook_loss;
    out.commitment_loss = q.commitment_loss;
    out.token_ids = q.token_ids;
    out.recon = decode_full(B, cfg, q.z_q, all, ad::V<R>{}, {}, T);
    ad::V<R> diff = ad::sub(out.recon, frames);
    out.motion_mse = ad::mean_all(ad::mul(diff, diff));
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation-mode reconstruction (deterministic: noise-free top-k of logits)
// ---------------------------------------------------------------------------

struct ReconLossReport {
    double motion_l2 = 0;
    double quant_codebook = 0;
    double quant_commit = 0;
    double mask_loss = 0;
    double alpha = 0;
    double total = 0;

    // The ledger identity; every logged report is produced by this expression.
    static ReconLossReport make(double motion_l2, double quant_codebook, double quant_commit,
                                double mask_loss, double alpha) {
        ReconLossReport r;
        r.motion_l2 = motion_l2;
        r.quant_codebook = quant_codebook;
        r.quant_commit = quant_commit;
        r.mask_loss = mask_loss;
        r.alpha = alpha;
        r.total = motion_l2 + quant_codebook + quant_commit + alpha * mask_loss;
        return r;
    }
};

// Sum_c |p_c - p_max| over the softmax of the frame logits; zero exactly when
// the distribution is uniform, so it counteracts score collapse.
double mask_loss_value(const std::vector<double>& logits);

struct ReconOutput {
    MotionSequence recon;
    quant::TokenSequence tokens;
    ReconLossReport report;
    std::vector<int> indices;
};

ReconOutput reconstruct(const MotionSequence& seq, ParamStore<real>& ps,
                        const PipelineConfig& cfg, double alpha);

// Mean evaluation-mode reconstruction MSE over a dataset.
double eval_recon_mse(const std::vector<MotionSequence>& data, ParamStore<real>& ps,
                      const PipelineConfig& cfg);

// Tokenize one window with the frozen models (evaluation mode).
quant::TokenSequence tokenize(const MotionSequence& seq, const std::vector<int>& kf_indices,
                              ParamStore<real>& ps, const PipelineConfig& cfg);

// Deterministic keyframe choice for a window in evaluation mode.
std::vector<int> eval_keyframe_indices(const Mat<real>& frames, ParamStore<real>& ps,
                                       const PipelineConfig& cfg);

// Decode a token window (ids at given positions) back to motion. Windows with
// no keyframes decode to neutral (all-zero) frames.
Mat<real> decode_token_window(const std::vector<int>& classes, ParamStore<real>& ps,
                              const PipelineConfig& cfg);

}  // namespace sfms::pipeline
