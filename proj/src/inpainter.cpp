#include "sfms/inpainter.hpp"

#include <cmath>

namespace sfms::pipeline {

Mode mode_from_name(const std::string& name) {
    if (name == "dynamic") return Mode::kDynamic;
    if (name == "static") return Mode::kStatic;
    if (name == "dense") return Mode::kDense;
    throw ValidationError("unknown pipeline mode: '" + name + "' (dynamic|static|dense)");
}

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::kDynamic: return "dynamic";
        case Mode::kStatic: return "static";
        case Mode::kDense: return "dense";
    }
    return "?";
}

std::vector<int> static_indices(int T, int K) {
    if (K < 1 || K > T) throw ValidationError("static_indices: need 1 <= K <= T");
    std::vector<int> idx(K);
    for (int i = 0; i < K; ++i) idx[i] = static_cast<int>(static_cast<long>(i) * T / K);
    return idx;
}

double mask_loss_value(const std::vector<double>& logits) {
    if (logits.empty()) throw ValidationError("mask_loss_value: empty logits");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double s = 0;
    for (double v : logits) s += std::exp(v - mx);
    double p_max = 0, total = 0;
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx) / s;
        p_max = std::max(p_max, p[i]);
    }
    for (double v : p) total += p_max - v;
    return total;
}

namespace {

// Evaluation-mode forward over one window. No noise, no gradients.
struct WindowEval {
    Mat<real> recon;
    std::vector<int> indices;
    std::vector<int> token_ids;  // 1..N, aligned with indices
    double motion_mse = 0;
    double qcb = 0, qcm = 0;
    double mask = 0;
};

std::vector<int> window_eval_indices(ad::Graph<real>& g, Binder<real>& B, const Mat<real>& frames,
                                     const PipelineConfig& cfg, std::vector<double>* logits_out) {
    int T = frames.rows;
    if (cfg.mode == Mode::kStatic) return static_indices(T, cfg.K);
    if (cfg.mode == Mode::kDense) {
        std::vector<int> all(T);
        for (int t = 0; t < T; ++t) all[t] = t;
        return all;
    }
    ad::V<real> fr = ad::constant(g, frames);
    ad::V<real> logits = sampler::score_logits(B, "scorer", fr, cfg.scorer_dims());
    const Mat<real>& lv = logits.val();
    std::vector<real> lvec(lv.a.begin(), lv.a.end());
    if (logits_out) logits_out->assign(lv.a.begin(), lv.a.end());
    return sampler::topk_indices(lvec, cfg.K);
}

WindowEval eval_window(const Mat<real>& frames, ParamStore<real>& ps, const PipelineConfig& cfg) {
    ad::Graph<real> g;
    Binder<real> B(g, ps, false);
    WindowEval out;
    std::vector<double> logits;
    out.indices = window_eval_indices(g, B, frames, cfg,
                                      cfg.mode == Mode::kDynamic ? &logits : nullptr);
    out.mask = cfg.mode == Mode::kDynamic ? mask_loss_value(logits) : 0.0;

    ad::V<real> fr = ad::constant(g, frames);
    SparseForward<real> fwd = cfg.mode == Mode::kDense
                                  ? dense_forward(B, cfg, fr)
                                  : sparse_forward(B, cfg, fr, out.indices);
    out.recon = fwd.recon.val();
    out.token_ids = fwd.token_ids;
    out.motion_mse = static_cast<double>(fwd.motion_mse.val()(0, 0));
    if (cfg.quant.kind == quant::Kind::kVq) {
        out.qcb = static_cast<double>(fwd.codebook_loss.val()(0, 0));
        out.qcm = static_cast<double>(fwd.commitment_loss.val()(0, 0));
    }
    return out;
}

}  // namespace

std::vector<int> eval_keyframe_indices(const Mat<real>& frames, ParamStore<real>& ps,
                                       const PipelineConfig& cfg) {
    ad::Graph<real> g;
    Binder<real> B(g, ps, false);
    return window_eval_indices(g, B, frames, cfg, nullptr);
}

quant::TokenSequence tokenize(const MotionSequence& seq, const std::vector<int>& kf_indices,
                              ParamStore<real>& ps, const PipelineConfig& cfg) {
    int T = seq.frames.rows;
    ad::Graph<real> g;
    Binder<real> B(g, ps, false);
    ad::V<real> fr = ad::constant(g, seq.frames);
    ad::V<real> z_kf = encode_keyframes(B, fr, kf_indices);
    QuantizeOut<real> q = quantize_keyframes(B, cfg, z_kf);
    quant::TokenSequence ts;
    ts.length = T;
    ts.classes.assign(T, 0);
    for (std::size_t i = 0; i < kf_indices.size(); ++i) ts.classes[kf_indices[i]] = q.token_ids[i];
    ts.codebook_kind = cfg.quant.kind;
    ts.codebook_size = cfg.quant.codebook_size();
    ts.validate();
    return ts;
}

ReconOutput reconstruct(const MotionSequence& seq, ParamStore<real>& ps,
                        const PipelineConfig& cfg, double alpha) {
    seq.validate();
    int T = seq.frames.rows;
    if (T % cfg.window != 0)
        throw ValidationError("reconstruct: sequence length " + std::to_string(T) +
                              " is not a multiple of the window " + std::to_string(cfg.window));
    if (seq.frames.cols != cfg.d)
        throw DimensionError("reconstruct: sequence has " + std::to_string(seq.frames.cols) +
                             " channels, pipeline expects " + std::to_string(cfg.d));
    int n_win = T / cfg.window;

    ReconOutput out;
    out.recon.frames = Mat<real>(T, cfg.d);
    out.recon.fps = seq.fps;
    out.recon.schema = seq.schema;
    out.tokens.length = T;
    out.tokens.classes.assign(T, 0);
    out.tokens.codebook_kind = cfg.quant.kind;
    out.tokens.codebook_size = cfg.quant.codebook_size();

    double motion = 0, qcb = 0, qcm = 0, mask = 0;
    for (int w = 0; w < n_win; ++w) {
        int t0 = w * cfg.window;
        Mat<real> win(cfg.window, cfg.d);
        win.map() = seq.frames.map().middleRows(t0, cfg.window);
        WindowEval ev = eval_window(win, ps, cfg);
        out.recon.frames.map().middleRows(t0, cfg.window) = ev.recon.map();
        for (std::size_t i = 0; i < ev.indices.size(); ++i) {
            out.tokens.classes[t0 + ev.indices[i]] = ev.token_ids[i];
            out.indices.push_back(t0 + ev.indices[i]);
        }
        motion += ev.motion_mse;
        qcb += ev.qcb;
        qcm += ev.qcm;
        mask += ev.mask;
    }
    out.tokens.validate();
    out.report = ReconLossReport::make(motion / n_win, qcb / n_win, qcm / n_win, mask / n_win,
                                       alpha);
    if (!out.recon.frames.all_finite())
        throw NumericalError("reconstruct: non-finite values in decoded motion");
    return out;
}

double eval_recon_mse(const std::vector<MotionSequence>& data, ParamStore<real>& ps,
                      const PipelineConfig& cfg) {
    if (data.empty()) throw ValidationError("eval_recon_mse: empty dataset");
    double total = 0;
    for (const MotionSequence& seq : data) {
        ReconOutput out = reconstruct(seq, ps, cfg, 0.0);
        double se = 0;
        for (std::size_t i = 0; i < seq.frames.size(); ++i) {
            double d = static_cast<double>(out.recon.frames.a[i]) -
                       static_cast<double>(seq.frames.a[i]);
            se += d * d;
        }
        total += se / static_cast<double>(seq.frames.size());
    }
    return total / static_cast<double>(data.size());
}

Mat<real> decode_token_window(const std::vector<int>& classes, ParamStore<real>& ps,
                              const PipelineConfig& cfg) {
    int T = static_cast<int>(classes.size());
    if (T < 1) throw ValidationError("decode_token_window: empty window");
    int N = cfg.quant.codebook_size();
    std::vector<int> t_kf, ids;
    for (int t = 0; t < T; ++t) {
        if (classes[t] < 0 || classes[t] > N)
            throw ValidationError("decode_token_window: class out of range at frame " +
                                  std::to_string(t));
        if (classes[t] > 0) {
            t_kf.push_back(t);
            ids.push_back(classes[t] - 1);
        }
    }
    if (t_kf.empty()) return Mat<real>::zeros(T, cfg.d);  // neutral fallback

    ad::Graph<real> g;
    Binder<real> B(g, ps, false);
    int K = static_cast<int>(t_kf.size());
    ad::V<real> z_q;
    if (cfg.quant.kind == quant::Kind::kVq) {
        z_q = ad::gather_rows(B("quant/vq/codebook"), ids);
    } else {
        int n = static_cast<int>(cfg.quant.fsq_levels.size());
        Mat<real> vals(K, n);
        for (int k = 0; k < K; ++k) {
            std::vector<real> v = quant::fsq_values_for_code<real>(ids[k], cfg.quant.fsq_levels);
            for (int c = 0; c < n; ++c) vals(k, c) = v[c];
        }
        z_q = seq::linear(B, "quant/fsq/unproj", ad::constant(g, std::move(vals)));
    }
    std::vector<int> t_tf;
    {
        std::vector<char> is_kf(T, 0);
        for (int t : t_kf) is_kf[t] = 1;
        for (int t = 0; t < T; ++t)
            if (!is_kf[t]) t_tf.push_back(t);
    }
    ad::V<real> z_tf = encode_transitions(B, cfg.stack, z_q, t_kf, t_tf);
    ad::V<real> recon = decode_full(B, cfg, z_q, t_kf, z_tf, t_tf, T);
    return recon.val();
}

}  // namespace sfms::pipeline
