#pragma once

// Keyframe discretization: VQ (nearest learned codeword, trained with
// codebook + commitment terms under stop-gradients) and FSQ (bounded
// per-channel rounding on a fixed grid whose implicit codebook is the
// Cartesian product of channel levels). Also owns the per-frame keyframe
// embedding MLP and token-sequence assembly/serialization.

#include <string>
#include <utility>
#include <vector>

#include "sfms/autodiff.hpp"
#include "sfms/motion_data.hpp"
#include "sfms/params.hpp"
#include "sfms/seqmodel.hpp"

namespace sfms::quant {

enum class Kind { kVq, kFsq };

struct Codebook {
    Kind kind = Kind::kFsq;
    Mat<real> vq_entries;         // N x D when kVq
    std::vector<int> fsq_levels;  // per-channel level counts when kFsq

    int size() const {
        if (kind == Kind::kVq) return vq_entries.rows;
        int n = 1;
        for (int l : fsq_levels) n *= l;
        return n;
    }

    void validate() const {
        if (kind == Kind::kVq) {
            if (vq_entries.rows < 1 || vq_entries.cols < 1)
                throw ValidationError("vq codebook needs N >= 1, D >= 1");
            if (!vq_entries.all_finite())
                throw ValidationError("vq codebook contains non-finite entries");
        } else {
            if (fsq_levels.empty()) throw ValidationError("fsq needs at least one channel");
            for (int l : fsq_levels)
                if (l < 2) throw ValidationError("fsq levels must all be >= 2");
        }
    }
};

// --- VQ -------------------------------------------------------------------------

// Nearest codeword by Euclidean distance; exact ties go to the lowest id.
template <class R>
std::pair<int, std::vector<R>> vq_encode(const std::vector<R>& z, const Mat<R>& entries) {
    if (static_cast<int>(z.size()) != entries.cols)
        throw DimensionError("vq_encode: dimension mismatch with codebook");
    int best = 0;
    double best_d2 = -1;
    for (int j = 0; j < entries.rows; ++j) {
        double d2 = 0;
        for (int c = 0; c < entries.cols; ++c) {
            double diff = static_cast<double>(z[c]) - static_cast<double>(entries(j, c));
            d2 += diff * diff;
        }
        if (j == 0 || d2 < best_d2) {
            best = j;
            best_d2 = d2;
        }
    }
    std::vector<R> row(entries.cols);
    for (int c = 0; c < entries.cols; ++c) row[c] = entries(best, c);
    return {best, std::move(row)};
}

// Both loss values equal ||z - z_q||^2 (squared norms); only the gradient
// routing differs, which lives in the graph builders below.
template <class R>
std::pair<R, R> vq_losses(const std::vector<R>& z, const std::vector<R>& z_q) {
    if (z.size() != z_q.size()) throw DimensionError("vq_losses: dimension mismatch");
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        double d = static_cast<double>(z[i]) - static_cast<double>(z_q[i]);
        s += d * d;
    }
    return {static_cast<R>(s), static_cast<R>(s)};
}

// ||sg(z) - z_q||^2 summed over all entries: pulls codewords toward encodings.
template <class R>
ad::V<R> vq_codebook_loss(ad::V<R> z, ad::V<R> z_q) {
    ad::V<R> d = ad::sub(ad::detach(z), z_q);
    return ad::sum_all(ad::mul(d, d));
}

// ||sg(z_q) - z||^2: pulls encodings toward their codewords.
template <class R>
ad::V<R> vq_commit_loss(ad::V<R> z, ad::V<R> z_q) {
    ad::V<R> d = ad::sub(z, ad::detach(z_q));
    return ad::sum_all(ad::mul(d, d));
}

// --- FSQ ------------------------------------------------------------------------

// Per channel: b = (L-1)/2 * tanh(z), rounded to the symmetric unit-spaced
// grid of exactly L levels, then normalized back to [-1, 1]. Level index ->
// normalized value: (idx - (L-1)/2) / ((L-1)/2).
template <class R>
std::pair<int, R> fsq_quantize_channel(R z, int L) {
    double half = (L - 1) / 2.0;
    double b = half * std::tanh(static_cast<double>(z));
    int idx = static_cast<int>(std::lround(b + half));
    if (idx < 0) idx = 0;
    if (idx > L - 1) idx = L - 1;
    return {idx, static_cast<R>((idx - half) / half)};
}

inline int fsq_digits_to_code(const std::vector<int>& digits, const std::vector<int>& levels) {
    int id = 0, stride = 1;
    for (std::size_t c = 0; c < levels.size(); ++c) {
        id += digits[c] * stride;
        stride *= levels[c];
    }
    return id;
}

inline std::vector<int> fsq_code_to_digits(int id, const std::vector<int>& levels) {
    std::vector<int> digits(levels.size());
    for (std::size_t c = 0; c < levels.size(); ++c) {
        digits[c] = id % levels[c];
        id /= levels[c];
    }
    return digits;
}

template <class R>
std::pair<int, std::vector<R>> fsq_encode(const std::vector<R>& z,
                                          const std::vector<int>& levels) {
    if (z.size() != levels.size())
        throw DimensionError("fsq_encode: channel count mismatch with levels");
    std::vector<int> digits(levels.size());
    std::vector<R> z_q(levels.size());
    for (std::size_t c = 0; c < levels.size(); ++c) {
        auto [idx, v] = fsq_quantize_channel(z[c], levels[c]);
        digits[c] = idx;
        z_q[c] = v;
    }
    return {fsq_digits_to_code(digits, levels), std::move(z_q)};
}

template <class R>
std::vector<R> fsq_values_for_code(int id, const std::vector<int>& levels) {
    std::vector<int> digits = fsq_code_to_digits(id, levels);
    std::vector<R> z_q(levels.size());
    for (std::size_t c = 0; c < levels.size(); ++c) {
        double half = (levels[c] - 1) / 2.0;
        z_q[c] = static_cast<R>((digits[c] - half) / half);
    }
    return z_q;
}

// --- keyframe embedding -----------------------------------------------------------

// Position-free two-layer MLP applied per frame.
template <class R>
void register_keyframe_encoder(ParamStore<R>& ps, const std::string& prefix, int d, int dim,
                               std::uint64_t seed) {
    seq::register_linear(ps, prefix + "/1", d, dim, seed);
    seq::register_linear(ps, prefix + "/2", dim, dim, seed);
}

template <class R>
ad::V<R> encode_frames(Binder<R>& B, const std::string& prefix, ad::V<R> frames) {
    return seq::linear(B, prefix + "/2", ad::gelu(seq::linear(B, prefix + "/1", frames)));
}

// --- quantizer parameters ----------------------------------------------------------

struct QuantSpec {
    Kind kind = Kind::kFsq;
    int vq_size = 256;
    std::vector<int> fsq_levels = {4, 4, 4, 4};

    int codebook_size() const {
        if (kind == Kind::kVq) return vq_size;
        int n = 1;
        for (int l : fsq_levels) n *= l;
        return n;
    }
};

template <class R>
void register_quantizer(ParamStore<R>& ps, const std::string& prefix, const QuantSpec& spec,
                        int dim, std::uint64_t seed) {
    if (spec.kind == Kind::kVq) {
        ps.add(prefix + "/vq/codebook", spec.vq_size, dim, Init::kUniformSym, seed,
               static_cast<R>(1.0 / spec.vq_size));
    } else {
        int n = static_cast<int>(spec.fsq_levels.size());
        seq::register_linear(ps, prefix + "/fsq/proj", dim, n, seed);
        seq::register_linear(ps, prefix + "/fsq/unproj", n, dim, seed);
    }
}

template <class R>
Codebook codebook_from_store(const ParamStore<R>& ps, const std::string& prefix,
                             const QuantSpec& spec) {
    Codebook book;
    if (spec.kind == Kind::kVq) {
        book.kind = Kind::kVq;
        const Mat<R>& entries = ps.at(prefix + "/vq/codebook");
        book.vq_entries = Mat<real>(entries.rows, entries.cols);
        for (std::size_t i = 0; i < entries.size(); ++i)
            book.vq_entries.a[i] = static_cast<real>(entries.a[i]);
    } else {
        book.kind = Kind::kFsq;
        book.fsq_levels = spec.fsq_levels;
    }
    book.validate();
    return book;
}

// --- token sequences -----------------------------------------------------------------

struct TokenSequence {
    int length = 0;
    std::vector<int> classes;  // 0 = transition, 1..N = keyframe token
    Kind codebook_kind = Kind::kFsq;
    int codebook_size = 0;

    std::vector<int> keyframe_indices() const {
        std::vector<int> idx;
        for (int t = 0; t < length; ++t)
            if (classes[t] > 0) idx.push_back(t);
        return idx;
    }

    void validate() const {
        if (length < 1 || static_cast<int>(classes.size()) != length)
            throw ValidationError("token sequence length mismatch");
        for (int c : classes)
            if (c < 0 || c > codebook_size)
                throw ValidationError("token class out of range [0, codebook size]");
    }
};

void write_tokens(const std::string& path, const TokenSequence& tokens);
TokenSequence read_tokens(const std::string& path);

}  // namespace sfms::quant
