#pragma once

// Shared differentiable sequence-model substrate: sinusoidal position
// encoding, multi-head self/cross attention, pre-norm encoder blocks, and the
// gated dual-encoder fusion block. Everything is templated on the scalar so
// the gradient contract can be verified in double precision.

#include <string>
#include <vector>

#include "sfms/autodiff.hpp"
#include "sfms/params.hpp"

namespace sfms::seq {

// Interleaved sin/cos over a geometric frequency ladder; row for position 0
// is (0, 1, 0, 1, ...).
template <class R>
Mat<R> sinusoidal_pe(const std::vector<int>& positions, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ValidationError("sinusoidal_pe: dim must be even and >= 2");
    Mat<R> pe(static_cast<int>(positions.size()), dim);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (int i = 0; i < dim / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / dim);
            double angle = positions[r] * freq;
            pe(static_cast<int>(r), 2 * i) = static_cast<R>(std::sin(angle));
            pe(static_cast<int>(r), 2 * i + 1) = static_cast<R>(std::cos(angle));
        }
    }
    return pe;
}

template <class R>
Mat<R> sinusoidal_pe_range(int count, int dim) {
    std::vector<int> pos(count);
    for (int i = 0; i < count; ++i) pos[i] = i;
    return sinusoidal_pe<R>(pos, dim);
}

struct StackDims {
    int model_dim = 64;
    int heads = 4;
    int layers = 2;
    int ffn = 128;
};

// --- linear -----------------------------------------------------------------

template <class R>
void register_linear(ParamStore<R>& ps, const std::string& prefix, int in, int out,
                     std::uint64_t seed, bool zero = false) {
    ps.add(prefix + "/w", in, out, zero ? Init::kZeros : Init::kXavier, seed);
    ps.add(prefix + "/b", 1, out, Init::kZeros, seed);
}

template <class R>
ad::V<R> linear(Binder<R>& B, const std::string& prefix, ad::V<R> x) {
    return ad::add_rowvec(ad::matmul(x, B(prefix + "/w")), B(prefix + "/b"));
}

// --- attention ---------------------------------------------------------------

template <class R>
void register_attention(ParamStore<R>& ps, const std::string& prefix, int dim,
                        std::uint64_t seed) {
    register_linear(ps, prefix + "/q", dim, dim, seed);
    register_linear(ps, prefix + "/k", dim, dim, seed);
    register_linear(ps, prefix + "/v", dim, dim, seed);
    register_linear(ps, prefix + "/o", dim, dim, seed);
}

// Scaled dot-product attention over already-projected Q, K, V. `allowed` is
// an optional Tq x Tk 0/1 matrix; zero entries get probability exactly 0.
// When attn_out is given it receives the head-averaged attention weights.
template <class R>
ad::V<R> attention_core(ad::V<R> q, ad::V<R> k, ad::V<R> v, int heads, const Mat<R>* allowed,
                        Mat<R>* attn_out = nullptr) {
    int dim = q.cols();
    if (dim % heads != 0) throw DimensionError("attention: model_dim not divisible by heads");
    int dh = dim / heads;
    R inv_sqrt = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));
    if (attn_out) *attn_out = Mat<R>::zeros(q.rows(), k.rows());
    ad::V<R> out;
    for (int h = 0; h < heads; ++h) {
        ad::V<R> qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        ad::V<R> kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        ad::V<R> vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        ad::V<R> scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        ad::V<R> probs = allowed ? ad::softmax_rows_masked(scores, *allowed)
                                 : ad::softmax_rows(scores);
        if (attn_out)
            attn_out->map() += probs.val().map() * (R(1) / static_cast<R>(heads));
        ad::V<R> oh = ad::matmul(probs, vh);
        out = (h == 0) ? oh : ad::concat_cols(out, oh);
    }
    return out;
}

template <class R>
ad::V<R> attention(Binder<R>& B, const std::string& prefix, ad::V<R> x, ad::V<R> y, int heads,
                   const Mat<R>* allowed = nullptr, Mat<R>* attn_out = nullptr) {
    ad::V<R> q = linear(B, prefix + "/q", x);
    ad::V<R> k = linear(B, prefix + "/k", y);
    ad::V<R> v = linear(B, prefix + "/v", y);
    ad::V<R> core = attention_core(q, k, v, heads, allowed, attn_out);
    return linear(B, prefix + "/o", core);
}

// --- feed-forward ------------------------------------------------------------

template <class R>
void register_ffn(ParamStore<R>& ps, const std::string& prefix, int dim, int hidden,
                  std::uint64_t seed) {
    register_linear(ps, prefix + "/1", dim, hidden, seed);
    register_linear(ps, prefix + "/2", hidden, dim, seed);
}

template <class R>
ad::V<R> ffn(Binder<R>& B, const std::string& prefix, ad::V<R> x) {
    return linear(B, prefix + "/2", ad::gelu(linear(B, prefix + "/1", x)));
}

// --- encoder stack (pre-norm residual blocks) ---------------------------------

template <class R>
void register_encoder_stack(ParamStore<R>& ps, const std::string& prefix, const StackDims& dims,
                            std::uint64_t seed) {
    if (dims.model_dim % dims.heads != 0)
        throw ValidationError("encoder stack: model_dim must be divisible by heads");
    for (int l = 0; l < dims.layers; ++l) {
        std::string lp = prefix + "/l" + std::to_string(l);
        ps.add(lp + "/ln1/g", 1, dims.model_dim, Init::kOnes, seed);
        ps.add(lp + "/ln1/b", 1, dims.model_dim, Init::kZeros, seed);
        register_attention(ps, lp + "/attn", dims.model_dim, seed);
        ps.add(lp + "/ln2/g", 1, dims.model_dim, Init::kOnes, seed);
        ps.add(lp + "/ln2/b", 1, dims.model_dim, Init::kZeros, seed);
        register_ffn(ps, lp + "/ffn", dims.model_dim, dims.ffn, seed);
    }
}

template <class R>
ad::V<R> encoder_stack(Binder<R>& B, const std::string& prefix, ad::V<R> x, const StackDims& dims,
                       const Mat<R>* allowed = nullptr) {
    if (x.cols() != dims.model_dim) throw DimensionError("encoder stack: input dim mismatch");
    for (int l = 0; l < dims.layers; ++l) {
        std::string lp = prefix + "/l" + std::to_string(l);
        ad::V<R> h = ad::layernorm_rows(x, B(lp + "/ln1/g"), B(lp + "/ln1/b"));
        x = ad::add(x, attention(B, lp + "/attn", h, h, dims.heads, allowed));
        ad::V<R> h2 = ad::layernorm_rows(x, B(lp + "/ln2/g"), B(lp + "/ln2/b"));
        x = ad::add(x, ffn(B, lp + "/ffn", h2));
    }
    return x;
}

// --- gated dual-encoder fusion -------------------------------------------------
//
//   x~ = SelfAtt(x)
//   x <- x + x~ + alpha * CrossAtt(x~, y)
//   x <- x + FFN(x)
//
// alpha starts at 0 so the fused pathway opens gradually.

template <class R>
void register_gated_fusion(ParamStore<R>& ps, const std::string& prefix, int dim, int ffn_dim,
                           std::uint64_t seed) {
    register_attention(ps, prefix + "/self", dim, seed);
    register_attention(ps, prefix + "/cross", dim, seed);
    register_ffn(ps, prefix + "/ffn", dim, ffn_dim, seed);
    ps.add(prefix + "/alpha", 1, 1, Init::kZeros, seed);
}

template <class R>
ad::V<R> gated_fusion(Binder<R>& B, const std::string& prefix, ad::V<R> x, ad::V<R> y, int heads) {
    if (x.cols() != y.cols()) throw DimensionError("gated_fusion: model dim mismatch");
    ad::V<R> xt = attention(B, prefix + "/self", x, x, heads);
    ad::V<R> cross = attention(B, prefix + "/cross", xt, y, heads);
    ad::V<R> gated = ad::mul_scalarvar(cross, B(prefix + "/alpha"));
    x = ad::add(ad::add(x, xt), gated);
    return ad::add(x, ffn(B, prefix + "/ffn", x));
}

}  // namespace sfms::seq
