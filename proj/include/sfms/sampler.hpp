#pragma once

// Differentiable keyframe discovery. The relaxed top-k sampler runs K rounds
// of suppressed Gumbel-softmax: after each round the selected mass is
// log-suppressed out of the logits so the next round picks a different frame.
// The hard mask takes the top-K entries of the accumulated soft mass; the
// straight-through vector carries the hard values forward and the soft
// gradient backward.

#include <map>
#include <string>
#include <vector>

#include "sfms/autodiff.hpp"
#include "sfms/params.hpp"
#include "sfms/seqmodel.hpp"

namespace sfms::sampler {

constexpr double kSuppressEps = 1e-20;  // guards log(0) only

struct KeyframeMask {
    std::vector<real> soft;              // relaxed k-hot, entries in [0, K]
    std::vector<real> hard;              // exact k-hot
    std::vector<real> straight_through;  // numerically equals hard
    std::vector<int> indices;            // ascending positions of the ones
};

// Gumbel(0,1) noise; the uniform draw is clamped to [1e-12, 1 - 1e-12] so the
// double log stays finite.
template <class R>
std::vector<R> gumbel_noise(int n, std::uint64_t seed) {
    if (n < 1) throw ValidationError("gumbel_noise: need n >= 1");
    rng::Rng r(seed);
    std::vector<R> g(n);
    for (int i = 0; i < n; ++i) {
        double u = r.uniform01();
        if (u < 1e-12) u = 1e-12;
        if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
        g[i] = static_cast<R>(-std::log(-std::log(u)));
    }
    return g;
}

// Top-K positions of `v`, ties resolved toward the lower index; result ascending.
template <class R>
std::vector<int> topk_indices(const std::vector<R>& v, int K) {
    std::vector<int> order(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
    std::vector<int> idx(order.begin(), order.begin() + K);
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace detail {
template <class R>
void softmax_inplace(std::vector<R>& x) {
    R mx = x[0];
    for (R v : x) mx = std::max(mx, v);
    double s = 0;
    for (R& v : x) {
        double e = std::exp(static_cast<double>(v - mx));
        v = static_cast<R>(e);
        s += e;
    }
    R inv = static_cast<R>(1.0 / s);
    for (R& v : x) v *= inv;
}
}  // namespace detail

template <class R>
struct SoftTopk {
    std::vector<R> soft;
    std::vector<R> hard;
    std::vector<R> straight_through;
    std::vector<int> indices;
};

// Plain-array relaxed top-k (no tape); used for sampling studies and
// evaluation where no gradient is needed.
template <class R>
SoftTopk<R> soft_topk_mask(const std::vector<R>& logits, int K, R tau,
                           const std::vector<R>& noise) {
    int T = static_cast<int>(logits.size());
    if (K < 1 || K > T) throw ValidationError("soft_topk_mask: need 1 <= K <= T");
    if (!(tau > 0)) throw ValidationError("soft_topk_mask: tau must be positive");
    if (static_cast<int>(noise.size()) != T)
        throw ValidationError("soft_topk_mask: noise length must equal T");

    std::vector<R> A(T);
    for (int i = 0; i < T; ++i) A[i] = logits[i] + noise[i];
    std::vector<R> hot1(T, R(0)), hotK(T, R(0));
    for (int k = 0; k < K; ++k) {
        for (int i = 0; i < T; ++i) {
            R m = std::max(R(1) - hot1[i], static_cast<R>(kSuppressEps));
            A[i] += std::log(m);
        }
        std::vector<R> h = A;
        for (R& v : h) v /= tau;
        detail::softmax_inplace(h);
        hot1 = h;
        for (int i = 0; i < T; ++i) hotK[i] += h[i];
    }

    SoftTopk<R> out;
    out.soft = hotK;
    out.indices = topk_indices(hotK, K);
    out.hard.assign(T, R(0));
    for (int i : out.indices) out.hard[i] = R(1);
    out.straight_through = out.hard;  // forward value; graph version carries the gradient
    return out;
}

// Tape version: same algorithm over a 1xT logits node. The straight-through
// node's values are exactly the hard mask; its gradient is the soft mask's.
template <class R>
struct SoftTopkGraph {
    ad::V<R> soft;              // 1xT
    ad::V<R> straight_through;  // 1xT
    std::vector<R> hard;
    std::vector<int> indices;
};

template <class R>
SoftTopkGraph<R> soft_topk_mask_graph(ad::V<R> logits_row, int K, R tau,
                                      const std::vector<R>& noise) {
    if (logits_row.rows() != 1) throw DimensionError("soft_topk_mask_graph: logits must be 1xT");
    int T = logits_row.cols();
    if (K < 1 || K > T) throw ValidationError("soft_topk_mask: need 1 <= K <= T");
    if (!(tau > 0)) throw ValidationError("soft_topk_mask: tau must be positive");
    if (static_cast<int>(noise.size()) != T)
        throw ValidationError("soft_topk_mask: noise length must equal T");
    ad::Graph<R>& g = *logits_row.g;

    Mat<R> noise_m(1, T);
    for (int i = 0; i < T; ++i) noise_m(0, i) = noise[i];
    ad::V<R> A = ad::add(logits_row, ad::constant(g, std::move(noise_m)));
    ad::V<R> hot1 = ad::constant(g, Mat<R>::zeros(1, T));
    ad::V<R> hotK;
    for (int k = 0; k < K; ++k) {
        ad::V<R> m = ad::max_scalar(ad::rsub_scalar(R(1), hot1), static_cast<R>(kSuppressEps));
        A = ad::add(A, ad::log_(m));
        hot1 = ad::softmax_rows(ad::scale(A, R(1) / tau));
        hotK = (k == 0) ? hot1 : ad::add(hotK, hot1);
    }

    SoftTopkGraph<R> out;
    out.soft = hotK;
    const Mat<R>& soft_v = hotK.val();
    std::vector<R> soft_vec(soft_v.a.begin(), soft_v.a.end());
    out.indices = topk_indices(soft_vec, K);
    Mat<R> hard_m = Mat<R>::zeros(1, T);
    for (int i : out.indices) hard_m(0, i) = R(1);
    out.hard.assign(hard_m.a.begin(), hard_m.a.end());
    out.straight_through = ad::value_override(hotK, std::move(hard_m));
    return out;
}

// Exact unordered top-K set probabilities under sequential softmax sampling
// without replacement, by enumeration over subsets and their orderings.
// Guarded to T <= 12, K <= 4.
std::map<std::vector<int>, double> topk_set_probabilities(const std::vector<double>& logits,
                                                          int K);

// Minimal reconstruction error wins; exact ties go to the lexicographically
// smallest index set.
template <class MaskT>
const MaskT& select_best_placement(const std::vector<std::pair<MaskT, double>>& candidates) {
    if (candidates.empty()) throw ValidationError("select_best_placement: empty candidate list");
    int best = 0;
    for (int i = 1; i < static_cast<int>(candidates.size()); ++i) {
        const auto& [mask, err] = candidates[i];
        if (!std::isfinite(err)) throw ValidationError("select_best_placement: non-finite error");
        if (err < candidates[best].second ||
            (err == candidates[best].second && mask.indices < candidates[best].first.indices))
            best = i;
    }
    if (!std::isfinite(candidates[0].second))
        throw ValidationError("select_best_placement: non-finite error");
    return candidates[best].first;
}

// --- per-frame logit scorer ----------------------------------------------------
// 1-D convolution over time -> linear projection -> sinusoidal PE -> encoder
// blocks -> scalar head. Emits one logit per frame (1xT row).

struct ScorerDims {
    int d = 8;
    int conv_kernel = 5;
    int conv_out = 64;
    seq::StackDims stack;
};

template <class R>
void register_scorer(ParamStore<R>& ps, const std::string& prefix, const ScorerDims& dims,
                     std::uint64_t seed) {
    ps.add(prefix + "/conv/w", dims.conv_kernel * dims.d, dims.conv_out, Init::kXavier, seed);
    ps.add(prefix + "/conv/b", 1, dims.conv_out, Init::kZeros, seed);
    seq::register_linear(ps, prefix + "/proj", dims.conv_out, dims.stack.model_dim, seed);
    seq::register_encoder_stack(ps, prefix + "/enc", dims.stack, seed);
    seq::register_linear(ps, prefix + "/head", dims.stack.model_dim, 1, seed);
}

template <class R>
ad::V<R> score_logits(Binder<R>& B, const std::string& prefix, ad::V<R> frames,
                      const ScorerDims& dims) {
    if (frames.cols() != dims.d) throw DimensionError("score_logits: channel count mismatch");
    ad::V<R> x = ad::conv1d_same(frames, B(prefix + "/conv/w"), B(prefix + "/conv/b"),
                                 dims.conv_kernel);
    x = seq::linear(B, prefix + "/proj", x);
    Mat<R> pe = seq::sinusoidal_pe_range<R>(frames.rows(), dims.stack.model_dim);
    x = ad::add(x, ad::constant(*frames.g, std::move(pe)));
    x = seq::encoder_stack(B, prefix + "/enc", x, dims.stack);
    ad::V<R> logits_col = seq::linear(B, prefix + "/head", x);  // Tx1
    return ad::transpose(logits_col);                           // 1xT
}

}  // namespace sfms::sampler
