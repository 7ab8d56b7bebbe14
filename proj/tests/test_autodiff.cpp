#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <vector>

#include "sfms/autodiff.hpp"
#include "sfms/metrics.hpp"

using namespace sfms;
using D = double;
using GD = ad::Graph<D>;
using VD = ad::V<D>;

namespace {

Mat<D> randm(int r, int c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Mat<D> m(r, c);
    rng::Rng rng(seed);
    for (D& v : m.a) v = rng.uniform(lo, hi);
    return m;
}

// Fixed random projection so the loss gradient is non-uniform across entries.
VD project(GD& g, VD y, std::uint64_t seed) {
    return ad::sum_all(ad::mul(y, ad::constant(g, randm(y.rows(), y.cols(), seed))));
}

using Build = std::function<VD(GD&, std::vector<VD>&)>;

// Max combined abs/rel error between tape gradients and central finite
// differences over every entry of every input.
double grad_check(std::vector<Mat<D>> inputs, const Build& build, double h = 1e-5) {
    GD g;
    std::vector<VD> leaves;
    leaves.reserve(inputs.size());
    for (auto& m : inputs) leaves.push_back(ad::leaf(g, m, true));
    VD loss = build(g, leaves);
    g.backward(loss.id);
    std::vector<Mat<D>> grads;
    grads.reserve(leaves.size());
    for (auto& v : leaves) grads.push_back(g.grad(v.id));

    auto eval = [&](const std::vector<Mat<D>>& xs) {
        GD g2;
        std::vector<VD> ls;
        ls.reserve(xs.size());
        for (const auto& m : xs) ls.push_back(ad::leaf(g2, Mat<D>(m), false));
        return static_cast<double>(build(g2, ls).val()(0, 0));
    };

    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            std::vector<Mat<D>> xs = inputs;
            xs[i].a[j] += h;
            double fp = eval(xs);
            xs[i].a[j] -= 2 * h;
            double fm = eval(xs);
            double fd = (fp - fm) / (2 * h);
            double an = grads[i].a[j];
            double err = std::abs(an - fd) / std::max({1e-4, std::abs(an), std::abs(fd)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

constexpr double kTol = 1e-3;

}  // namespace

TEST_CASE("elementwise binary ops") {
    Mat<D> a = randm(3, 4, 1), b = randm(3, 4, 2);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::add(v[0], v[1]), 10);
          }) < kTol);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::sub(v[0], v[1]), 11);
          }) < kTol);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::mul(v[0], v[1]), 12);
          }) < kTol);
}

TEST_CASE("scalar-argument ops") {
    Mat<D> a = randm(2, 5, 3);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::scale(v[0], D(1.7)), 13);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::add_scalar(v[0], D(-0.4)), 14);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::rsub_scalar(D(2.0), v[0]), 15);
          }) < kTol);
}

TEST_CASE("learnable scalar gate") {
    Mat<D> a = randm(3, 3, 4);
    Mat<D> s(1, 1);
    s(0, 0) = 0.3;
    CHECK(grad_check({a, s}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::mul_scalarvar(v[0], v[1]), 16);
          }) < kTol);
}

TEST_CASE("smooth nonlinearities") {
    Mat<D> a = randm(3, 4, 5, -2.0, 2.0);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::sigmoid(v[0]), 17);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::gelu(v[0]), 18);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::tanh_(v[0]), 19);
          }) < kTol);
    Mat<D> pos = randm(3, 4, 6, 0.5, 3.0);
    CHECK(grad_check({pos}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::log_(v[0]), 20);
          }) < kTol);
}

TEST_CASE("kinked ops away from their kinks") {
    Mat<D> a = randm(3, 4, 7, 0.2, 1.5);
    for (std::size_t i = 0; i < a.size(); i += 2) a.a[i] = -a.a[i];
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::abs_(v[0]), 21);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::max_scalar(v[0], D(0.05)), 22);
          }) < kTol);
}

TEST_CASE("matmul and transpose") {
    Mat<D> a = randm(3, 4, 8), b = randm(4, 2, 9);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::matmul(v[0], v[1]), 23);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::transpose(v[0]), 24);
          }) < kTol);
}

TEST_CASE("row/column broadcasts") {
    Mat<D> a = randm(4, 3, 30);
    Mat<D> row = randm(1, 3, 31);
    Mat<D> col = randm(4, 1, 32);
    CHECK(grad_check({a, row}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::add_rowvec(v[0], v[1]), 33);
          }) < kTol);
    CHECK(grad_check({a, col}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::mul_colvec(v[0], v[1]), 34);
          }) < kTol);
}

TEST_CASE("reductions") {
    Mat<D> a = randm(3, 5, 40);
    CHECK(grad_check({a}, [](GD&, std::vector<VD>& v) { return ad::sum_all(v[0]); }) < kTol);
    CHECK(grad_check({a}, [](GD&, std::vector<VD>& v) { return ad::mean_all(v[0]); }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::mean_rows(v[0]), 41);
          }) < kTol);
    CHECK(grad_check({a}, [](GD&, std::vector<VD>& v) { return ad::max_all(v[0]); }) < kTol);
    CHECK(grad_check({a}, [](GD&, std::vector<VD>& v) { return ad::logsumexp_all(v[0]); }) <
          kTol);
    CHECK(grad_check({a}, [](GD&, std::vector<VD>& v) { return ad::pick(v[0], 1, 3); }) < kTol);
}

TEST_CASE("logsumexp is stable for large inputs") {
    GD g;
    Mat<D> big(1, 3, {1000.0, 999.0, 998.0});
    VD x = ad::leaf(g, big, true);
    VD y = ad::logsumexp_all(x);
    double expect = 1000.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
    CHECK(y.val()(0, 0) == doctest::Approx(expect).epsilon(1e-12));
    g.backward(y.id);
    CHECK(g.grad(x.id).all_finite());
}

TEST_CASE("softmax family") {
    Mat<D> a = randm(3, 5, 50);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::softmax_rows(v[0]), 51);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::log_softmax_rows(v[0]), 52);
          }) < kTol);
    Mat<D> allowed = Mat<D>::zeros(3, 5);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c <= 2 + r; ++c) allowed(r, c) = 1;
    CHECK(grad_check({a}, [allowed](GD& g, std::vector<VD>& v) {
              return project(g, ad::softmax_rows_masked(v[0], allowed), 53);
          }) < kTol);
}

TEST_CASE("masked softmax zeroes disallowed entries and renormalizes") {
    GD g;
    Mat<D> x = randm(2, 4, 55);
    Mat<D> allowed(2, 4, {1, 1, 0, 0, 1, 1, 1, 0});
    VD p = ad::softmax_rows_masked(ad::leaf(g, x, false), allowed);
    for (int r = 0; r < 2; ++r) {
        double s = 0;
        for (int c = 0; c < 4; ++c) {
            if (allowed(r, c) == 0) CHECK(p.val()(r, c) == 0.0);
            s += p.val()(r, c);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Mat<D> none = Mat<D>::zeros(1, 3);
    VD q = ad::leaf(g, randm(1, 3, 56), false);
    CHECK_THROWS_AS(ad::softmax_rows_masked(q, none), NumericalError);
}

TEST_CASE("layernorm") {
    Mat<D> a = randm(3, 6, 60);
    Mat<D> gm = randm(1, 6, 61, 0.5, 1.5);
    Mat<D> bt = randm(1, 6, 62);
    CHECK(grad_check({a, gm, bt}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::layernorm_rows(v[0], v[1], v[2]), 63);
          }) < kTol);
}

TEST_CASE("shape surgery") {
    Mat<D> a = randm(3, 4, 70), b = randm(2, 4, 71), c = randm(3, 2, 72);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::concat_rows(v[0], v[1]), 73);
          }) < kTol);
    CHECK(grad_check({a, c}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::concat_cols(v[0], v[1]), 74);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::slice_rows(v[0], 1, 3), 75);
          }) < kTol);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::slice_cols(v[0], 1, 4), 76);
          }) < kTol);
    Mat<D> row = randm(1, 4, 77);
    CHECK(grad_check({row}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::tile_rows(v[0], 5), 78);
          }) < kTol);
    // Duplicate gather indices must accumulate.
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::gather_rows(v[0], {2, 0, 2, 1}), 79);
          }) < kTol);
}

TEST_CASE("interleave_rows covers and routes gradients") {
    Mat<D> a = randm(2, 3, 80), b = randm(3, 3, 81);
    CHECK(grad_check({a, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::interleave_rows(v[0], {1, 3}, v[1], {0, 2, 4}, 5), 82);
          }) < kTol);

    GD g;
    VD x = ad::leaf(g, a, false), y = ad::leaf(g, b, false);
    VD z = ad::interleave_rows(x, {1, 3}, y, {0, 2, 4}, 5);
    CHECK(z.val()(1, 0) == a(0, 0));
    CHECK(z.val()(3, 2) == a(1, 2));
    CHECK(z.val()(0, 1) == b(0, 1));
    CHECK_THROWS_AS(ad::interleave_rows(x, {0, 1}, y, {1, 2, 3}, 5), DimensionError);
    CHECK_THROWS_AS(ad::interleave_rows(x, {0, 1}, y, {2, 3, 4}, 6), DimensionError);
}

TEST_CASE("conv1d_same") {
    Mat<D> x = randm(6, 3, 90);
    Mat<D> w = randm(5 * 3, 2, 91);
    Mat<D> b = randm(1, 2, 92);
    CHECK(grad_check({x, w, b}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::conv1d_same(v[0], v[1], v[2], 5), 93);
          }) < kTol);
}

TEST_CASE("conv1d_same with kernel 1 is a per-frame linear map") {
    GD g;
    Mat<D> x = randm(4, 3, 94), w = randm(3, 2, 95), b = randm(1, 2, 96);
    VD y = ad::conv1d_same(ad::leaf(g, x, false), ad::leaf(g, w, false), ad::leaf(g, b, false), 1);
    Mat<D> expect;
    matmul_into(x, w, expect);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 2; ++c)
            CHECK(y.val()(r, c) == doctest::Approx(expect(r, c) + b(0, c)).epsilon(1e-12));
}

TEST_CASE("maxpool_time") {
    Mat<D> x = randm(8, 3, 100);
    CHECK(grad_check({x}, [](GD& g, std::vector<VD>& v) {
              return project(g, ad::maxpool_time(v[0], 4), 101);
          }) < kTol);
    GD g;
    VD y = ad::maxpool_time(ad::leaf(g, x, false), 4);
    CHECK(y.rows() == 2);
    for (int c = 0; c < 3; ++c) {
        double m = x(0, c);
        for (int t = 1; t < 4; ++t) m = std::max(m, x(t, c));
        CHECK(y.val()(0, c) == m);
    }
}

TEST_CASE("value_override carries given values forward, identity backward") {
    GD g;
    Mat<D> a = randm(2, 3, 110);
    Mat<D> hard(2, 3, {1, 0, 0, 0, 1, 0});
    Mat<D> c = randm(2, 3, 111);
    VD x = ad::leaf(g, a, true);
    VD st = ad::value_override(x, hard);
    for (std::size_t i = 0; i < hard.size(); ++i) CHECK(st.val().a[i] == hard.a[i]);
    VD loss = ad::sum_all(ad::mul(st, ad::constant(g, c)));
    g.backward(loss.id);
    // d loss / d x == c exactly: the override is transparent to gradients.
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(g.grad(x.id).a[i] == c.a[i]);
}

TEST_CASE("detach blocks gradients but passes values") {
    GD g;
    Mat<D> a = randm(2, 2, 120);
    VD x = ad::leaf(g, a, true);
    VD d = ad::detach(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(d.val().a[i] == a.a[i]);
    VD loss = ad::add(ad::sum_all(ad::mul(d, d)), ad::sum_all(x));
    g.backward(loss.id);
    // Only the direct sum path contributes: gradient is exactly one.
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(g.grad(x.id).a[i] == 1.0);
}

TEST_CASE("dead subgraphs do not contribute gradients") {
    GD g;
    Mat<D> a = randm(2, 2, 130);
    VD x = ad::leaf(g, a, true);
    VD dead = ad::scale(x, D(100.0));   // never reaches the loss
    (void)dead;
    VD loss = ad::sum_all(x);
    g.backward(loss.id);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(g.grad(x.id).a[i] == 1.0);
}

TEST_CASE("backward requires a scalar loss") {
    GD g;
    VD x = ad::leaf(g, randm(2, 2, 140), true);
    CHECK_THROWS_AS(g.backward(x.id), DimensionError);
}

TEST_CASE("soft_dtw_to gradient and agreement with the metric kernel") {
    Mat<D> a = randm(5, 1, 150, -0.5, 1.5);
    std::vector<double> b = {0.0, 1.0, 1.0, 0.0};
    for (double gamma : {0.05, 0.1, 0.5}) {
        CHECK(grad_check({a}, [b, gamma](GD&, std::vector<VD>& v) {
                  return ad::soft_dtw_to(v[0], b, gamma);
              }) < kTol);
        GD g;
        VD node = ad::soft_dtw_to(ad::leaf(g, a, false), b, gamma);
        std::vector<double> av(a.a.begin(), a.a.end());
        CHECK(node.val()(0, 0) ==
              doctest::Approx(metrics::soft_dtw(av, b, gamma)).epsilon(1e-9));
    }
    GD g;
    VD col = ad::leaf(g, a, false);
    CHECK_THROWS_AS(ad::soft_dtw_to(col, b, 0.0), ValidationError);
    VD wide = ad::leaf(g, randm(2, 2, 151), false);
    CHECK_THROWS_AS(ad::soft_dtw_to(wide, b, 0.1), DimensionError);
}

TEST_CASE("shared leaves accumulate gradient across uses") {
    Mat<D> a = randm(2, 3, 160);
    CHECK(grad_check({a}, [](GD& g, std::vector<VD>& v) {
              VD twice = ad::add(ad::mul(v[0], v[0]), ad::scale(v[0], D(3.0)));
              return project(g, twice, 161);
          }) < kTol);
}
