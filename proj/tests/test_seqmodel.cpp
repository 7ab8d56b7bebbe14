#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "sfms/seqmodel.hpp"

using namespace sfms;
using namespace sfms::seq;
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
// build() must bind params through the Binder and push x through the network.
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

void zero_param(ParamStore<double>& ps, const std::string& name) {
    std::fill(ps.at(name).a.begin(), ps.at(name).a.end(), 0.0);
}

}  // namespace

TEST_CASE("positional encoding starts at the documented row") {
    MD pe = sinusoidal_pe<double>({0, 3, 3}, 8);
    for (int c = 0; c < 8; c += 2) {
        CHECK(pe(0, c) == 0.0);
        CHECK(pe(0, c + 1) == 1.0);
    }
    // Equal positions produce identical rows.
    for (int c = 0; c < 8; ++c) CHECK(pe(1, c) == pe(2, c));
    // First frequency is 1, so column 0/1 at position 3 are sin(3)/cos(3).
    CHECK(pe(1, 0) == doctest::Approx(std::sin(3.0)).epsilon(1e-12));
    CHECK(pe(1, 1) == doctest::Approx(std::cos(3.0)).epsilon(1e-12));
    CHECK_THROWS_AS(sinusoidal_pe<double>({0}, 7), ValidationError);
    CHECK_THROWS_AS(sinusoidal_pe<double>({0}, 0), ValidationError);

    MD ranged = sinusoidal_pe_range<double>(4, 8);
    MD manual = sinusoidal_pe<double>({0, 1, 2, 3}, 8);
    for (std::size_t i = 0; i < ranged.size(); ++i) CHECK(ranged.a[i] == manual.a[i]);
}

TEST_CASE("positional encoding dot products are shift invariant") {
    const int dim = 64;
    std::vector<int> pos(40);
    std::iota(pos.begin(), pos.end(), 0);
    MD pe = sinusoidal_pe<double>(pos, dim);
    auto dot = [&](int a, int b) {
        double s = 0;
        for (int c = 0; c < dim; ++c) s += pe(a, c) * pe(b, c);
        return s;
    };
    for (int k = 1; k <= 6; ++k)
        for (int t = 0; t + k < 30; ++t)
            CHECK(dot(t, t + k) == doctest::Approx(dot(0, k)).epsilon(1e-9));
}

TEST_CASE("linear layer matches the closed form") {
    ParamStore<double> ps;
    register_linear(ps, "lin", 3, 2, std::uint64_t(5));
    GD g;
    Binder<double> B(g, ps, false);
    MD x = random_mat(4, 3, 100);
    VD out = linear(B, "lin", ad::leaf(g, x, false));
    const MD& w = ps.at("lin/w");
    const MD& b = ps.at("lin/b");
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 2; ++c) {
            double want = b(0, c);
            for (int k = 0; k < 3; ++k) want += x(r, k) * w(k, c);
            CHECK(out.val()(r, c) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("attention rows are convex mixtures of values") {
    ParamStore<double> ps;
    register_attention(ps, "att", 8, std::uint64_t(3));
    GD g;
    Binder<double> B(g, ps, false);
    MD x = random_mat(5, 8, 200);
    Mat<double> attn;
    VD xa = ad::leaf(g, x, false);
    attention(B, "att", xa, xa, 2, static_cast<const Mat<double>*>(nullptr), &attn);
    REQUIRE(attn.rows == 5);
    REQUIRE(attn.cols == 5);
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 5; ++c) {
            CHECK(attn(r, c) >= 0.0);
            s += attn(r, c);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("masked attention zeroes disallowed columns and rejects empty rows") {
    ParamStore<double> ps;
    register_attention(ps, "att", 8, std::uint64_t(3));
    MD x = random_mat(4, 8, 300);
    MD allowed = MD::zeros(4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c <= r; ++c) allowed(r, c) = 1;  // lower triangular

    GD g;
    Binder<double> B(g, ps, false);
    Mat<double> attn;
    VD xa = ad::leaf(g, x, false);
    attention(B, "att", xa, xa, 2, &allowed, &attn);
    for (int r = 0; r < 4; ++r)
        for (int c = r + 1; c < 4; ++c) CHECK(attn(r, c) == 0.0);

    MD none = MD::zeros(4, 4);
    GD g2;
    Binder<double> B2(g2, ps, false);
    VD xb = ad::leaf(g2, x, false);
    CHECK_THROWS_AS(attention(B2, "att", xb, xb, 2, &none), NumericalError);
}

TEST_CASE("causal mask blocks information flow from later rows") {
    ParamStore<double> ps;
    StackDims dims{16, 4, 2, 32};
    register_encoder_stack(ps, "enc", dims, 17);
    MD allowed = MD::zeros(6, 6);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c <= r; ++c) allowed(r, c) = 1;

    MD x = random_mat(6, 16, 400);
    auto run = [&](const MD& in) {
        GD g;
        Binder<double> B(g, ps, false);
        return encoder_stack(B, "enc", ad::leaf(g, in, false), dims, &allowed).val();
    };
    MD base = run(x);
    const int j = 3;
    MD bumped = x;
    for (int c = 0; c < 16; ++c) bumped(j, c) += 0.37;
    MD out = run(bumped);
    for (int r = 0; r < j; ++r)
        for (int c = 0; c < 16; ++c) CHECK(out(r, c) == base(r, c));
    bool later_changed = false;
    for (int r = j; r < 6; ++r)
        for (int c = 0; c < 16; ++c)
            if (out(r, c) != base(r, c)) later_changed = true;
    CHECK(later_changed);
}

TEST_CASE("encoder stack with zeroed output projections is the identity") {
    ParamStore<double> ps;
    StackDims dims{16, 2, 2, 32};
    register_encoder_stack(ps, "enc", dims, 23);
    for (int l = 0; l < dims.layers; ++l) {
        std::string lp = "enc/l" + std::to_string(l);
        zero_param(ps, lp + "/attn/o/w");
        zero_param(ps, lp + "/ffn/2/w");
    }
    MD x = random_mat(5, 16, 500);
    GD g;
    Binder<double> B(g, ps, false);
    MD out = encoder_stack(B, "enc", ad::leaf(g, x, false), dims).val();
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(out.a[i] == x.a[i]);
}

TEST_CASE("encoder stack is equivariant to row permutations") {
    ParamStore<double> ps;
    StackDims dims{16, 4, 2, 32};
    register_encoder_stack(ps, "enc", dims, 31);
    MD x = random_mat(6, 16, 600);
    std::vector<int> perm = {4, 0, 5, 2, 1, 3};
    MD px(6, 16);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 16; ++c) px(r, c) = x(perm[r], c);

    auto run = [&](const MD& in) {
        GD g;
        Binder<double> B(g, ps, false);
        return encoder_stack(B, "enc", ad::leaf(g, in, false), dims).val();
    };
    MD a = run(x);
    MD b = run(px);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 16; ++c)
            CHECK(b(r, c) == doctest::Approx(a(perm[r], c)).epsilon(1e-12));
}

TEST_CASE("encoder stack gradients match finite differences") {
    ParamStore<double> ps;
    StackDims dims{8, 2, 1, 16};
    register_encoder_stack(ps, "enc", dims, 41);
    MD x = random_mat(3, 8, 700, 0.5);
    double err = fd_error_net(
        x, ps, {"enc/l0/attn/q/w", "enc/l0/ffn/1/w", "enc/l0/ln1/g"},
        [&](GD& g, Binder<double>& B, VD xl) {
            return project(g, encoder_stack(B, "enc", xl, dims), 999);
        });
    CHECK(err < 1e-3);
}

TEST_CASE("gated fusion with alpha zero ignores the second stream bitwise") {
    ParamStore<double> ps;
    register_gated_fusion(ps, "fuse", 16, 32, 51);
    MD x = random_mat(4, 16, 800);
    MD y1 = random_mat(6, 16, 801);
    MD y2 = random_mat(6, 16, 802);
    auto run = [&](const MD& y) {
        GD g;
        Binder<double> B(g, ps, false);
        return gated_fusion(B, "fuse", ad::leaf(g, x, false), ad::leaf(g, y, false), 4).val();
    };
    MD a = run(y1);
    MD b = run(y2);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.a[i] == b.a[i]);
    // Once the gate opens, the second stream matters.
    ps.at("fuse/alpha")(0, 0) = 0.5;
    MD c = run(y1);
    MD d = run(y2);
    bool differ = false;
    for (std::size_t i = 0; i < c.size(); ++i)
        if (c.a[i] != d.a[i]) differ = true;
    CHECK(differ);
}

TEST_CASE("gated fusion gradients, including the gate, match finite differences") {
    ParamStore<double> ps;
    register_gated_fusion(ps, "fuse", 8, 16, 61);
    ps.at("fuse/alpha")(0, 0) = 0.3;
    MD x = random_mat(3, 8, 900, 0.5);
    MD y = random_mat(4, 8, 901, 0.5);
    double err = fd_error_net(
        x, ps, {"fuse/alpha", "fuse/cross/v/w", "fuse/ffn/1/w"},
        [&](GD& g, Binder<double>& B, VD xl) {
            VD yl = ad::constant(g, y);
            return project(g, gated_fusion(B, "fuse", xl, yl, 2), 998);
        });
    CHECK(err < 1e-3);
}

TEST_CASE("attention rejects dims not divisible by heads") {
    ParamStore<double> ps;
    register_attention(ps, "att", 6, std::uint64_t(3));
    GD g;
    Binder<double> B(g, ps, false);
    MD x = random_mat(2, 6, 950);
    VD xa = ad::leaf(g, x, false);
    CHECK_THROWS_AS(attention(B, "att", xa, xa, 4), DimensionError);
}
