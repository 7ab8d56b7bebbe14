#include "sfms/predictor.hpp"

#include <algorithm>
#include <cmath>

#include "sfms/inpainter.hpp"

namespace sfms::pred {

namespace {

// Tokenizes the longest window-multiple suffix of the listener prefix with the
// frozen reconstruction model, then left-pads with the neutral class up to the
// predictor's past length.
std::vector<int> prefix_classes(const MotionSequence& listener, ParamStore<real>& recon_ps,
                                const pipeline::PipelineConfig& rcfg) {
    int T = listener.T();
    int W = rcfg.window;
    int usable = (T / W) * W;
    std::vector<int> classes(T - usable, 0);
    for (int t0 = T - usable; t0 < T; t0 += W) {
        MotionSequence win;
        win.frames = Mat<real>(W, listener.d());
        win.frames.map() = listener.frames.map().middleRows(t0, W);
        win.fps = listener.fps;
        win.schema = listener.schema;
        std::vector<int> idx = pipeline::eval_keyframe_indices(win.frames, recon_ps, rcfg);
        quant::TokenSequence ts = pipeline::tokenize(win, idx, recon_ps, rcfg);
        classes.insert(classes.end(), ts.classes.begin(), ts.classes.end());
    }
    return classes;
}

int pick_class(const Mat<real>& logits, int row, RolloutMode mode, double temperature,
               std::uint64_t seed) {
    int C = logits.cols;
    if (mode == RolloutMode::kGreedy) {
        int arg = 0;
        for (int c = 1; c < C; ++c)
            if (logits(row, c) > logits(row, arg)) arg = c;
        return arg;
    }
    double mx = -HUGE_VAL;
    for (int c = 0; c < C; ++c)
        mx = std::max(mx, static_cast<double>(logits(row, c)) / temperature);
    std::vector<double> p(C);
    double z = 0;
    for (int c = 0; c < C; ++c) {
        p[c] = std::exp(static_cast<double>(logits(row, c)) / temperature - mx);
        z += p[c];
    }
    rng::Rng r(seed);
    double u = r.uniform01() * z;
    double acc = 0;
    for (int c = 0; c < C; ++c) {
        acc += p[c];
        if (u < acc) return c;
    }
    return C - 1;
}

}  // namespace

RolloutResult rollout(const DyadContext& prefix, ParamStore<real>& pred_ps,
                      const PredictorConfig& cfg, ParamStore<real>& recon_ps,
                      const pipeline::PipelineConfig& rcfg, int horizon, RolloutMode mode,
                      double temperature, std::uint64_t seed) {
    if (horizon <= 0) throw ValidationError("rollout: horizon must be positive");
    if (mode == RolloutMode::kSample && !(temperature > 0))
        throw ValidationError("rollout: sampling temperature must be positive");
    // The listener prefix may be shorter than the speaker track: the speaker
    // must extend over the generated horizon.
    prefix.listener.validate();
    prefix.speaker.validate();
    if (prefix.listener.T() > prefix.speaker.T())
        throw ValidationError("rollout: listener prefix longer than speaker track");
    if (cfg.use_audio && prefix.audio.kind == AudioFeatures::Kind::kMel &&
        prefix.audio.mel.rows > 0)
        prefix.audio.validate(prefix.speaker.T());

    int L = prefix.listener.T();
    int F = cfg.future;
    int blocks = (horizon + F - 1) / F;
    if (prefix.speaker.T() < L + blocks * F)
        throw ValidationError("rollout: speaker track too short for the requested horizon");

    // classes[t] aligns with listener frame t; generated classes are appended.
    std::vector<int> classes = prefix_classes(prefix.listener, recon_ps, rcfg);
    for (int c : classes)
        if (c < 0 || c >= cfg.num_classes)
            throw ValidationError("rollout: tokenizer vocabulary exceeds predictor classes");

    int d_spk = prefix.speaker.d();
    MotionSequence motion;
    motion.frames = Mat<real>(0, rcfg.d);
    motion.fps = prefix.listener.fps;
    motion.schema = prefix.listener.schema;

    std::vector<real> motion_rows;
    for (int blk = 0; blk < blocks; ++blk) {
        int t_end = L + blk * F;  // first frame this block generates

        // Past classes: the trailing `past` classes before t_end, neutral-padded
        // on the left when the history is shorter.
        std::vector<int> past(cfg.past, 0);
        for (int i = 0; i < cfg.past; ++i) {
            int t = t_end - cfg.past + i;
            if (t >= 0) past[i] = classes[t];
        }

        // Speaker window [t_end - past, t_end + future), zero-padded on the left.
        Mat<real> spk = Mat<real>::zeros(cfg.window(), d_spk);
        for (int i = 0; i < cfg.window(); ++i) {
            int t = t_end - cfg.past + i;
            if (t >= 0 && t < prefix.speaker.T())
                for (int c = 0; c < d_spk; ++c) spk(i, c) = prefix.speaker.frames(t, c);
        }

        Mat<real> mel;
        if (cfg.use_audio && prefix.audio.kind == AudioFeatures::Kind::kMel &&
            prefix.audio.mel.rows > 0) {
            mel = Mat<real>::zeros(4 * cfg.window(), 128);
            for (int i = 0; i < cfg.window(); ++i) {
                int t = t_end - cfg.past + i;
                if (t >= 0 && 4 * t + 3 < prefix.audio.mel.rows)
                    for (int r = 0; r < 4; ++r)
                        for (int c = 0; c < 128; ++c) mel(4 * i + r, c) = prefix.audio.mel(4 * t + r, c);
            }
        }

        // Slot j's logits depend on AR inputs only up to slot j, so each pass
        // fixes one more input and re-reads the next row.
        std::vector<int> fut_in(F, 0);
        fut_in[0] = t_end - 1 >= 0 ? classes[t_end - 1] : 0;
        std::vector<int> fut_out(F, 0);
        for (int j = 0; j < F; ++j) {
            ad::Graph<real> g;
            Binder<real> B(g, pred_ps, false);
            PredictorInput<real> in;
            in.speaker = spk;
            in.audio_mel = mel;
            in.past = past;
            in.future_in = fut_in;
            ad::V<real> logits = predict_logits(B, cfg, g, in);
            fut_out[j] = pick_class(logits.val(), j, mode, temperature,
                                    rng::derive(seed, "rollout", blk, j));
            if (j + 1 < F) fut_in[j + 1] = fut_out[j];
        }
        classes.insert(classes.end(), fut_out.begin(), fut_out.end());

        // Decode the trailing window of classes so the new frames see real
        // keyframe context, then keep only this block's frames.
        int total = static_cast<int>(classes.size());
        std::vector<int> tail(classes.end() - std::min(total, rcfg.window), classes.end());
        if (static_cast<int>(tail.size()) < rcfg.window)
            tail.insert(tail.begin(), rcfg.window - tail.size(), 0);
        Mat<real> dec = pipeline::decode_token_window(tail, recon_ps, rcfg);
        for (int i = rcfg.window - F; i < rcfg.window; ++i)
            for (int c = 0; c < rcfg.d; ++c) motion_rows.push_back(dec(i, c));
    }

    RolloutResult out;
    out.tokens.length = horizon;
    out.tokens.codebook_kind = rcfg.quant.kind;
    out.tokens.codebook_size = rcfg.quant.codebook_size();
    out.tokens.classes.assign(classes.begin() + L, classes.begin() + L + horizon);
    out.tokens.validate();

    out.motion = std::move(motion);
    out.motion.frames = Mat<real>(horizon, rcfg.d);
    for (int t = 0; t < horizon; ++t)
        for (int c = 0; c < rcfg.d; ++c)
            out.motion.frames(t, c) = motion_rows[static_cast<std::size_t>(t) * rcfg.d + c];
    if (!out.motion.frames.all_finite()) throw NumericalError("rollout: non-finite motion");
    return out;
}

}  // namespace sfms::pred
