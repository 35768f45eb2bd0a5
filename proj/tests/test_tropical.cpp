#include <doctest.h>

#include <cmath>

#include "morphnn/rng.hpp"
#include "morphnn/tropical.hpp"

using namespace morphnn;

namespace {

// Brute-force oracle: enumerate every candidate of every reduction, fully
// independent of the library kernels.
struct OracleVec {
    Tensor y;
    std::vector<Selection> arg;
};

OracleVec oracle_vecmul(const Tensor& W, const Tensor& x, const Tensor* bias,
                        TropicalMode mode) {
    bool mx = mode == TropicalMode::MAX_PLUS;
    std::size_t m = W.extent(0), n = W.extent(1);
    OracleVec out{Tensor({m}), std::vector<Selection>(m, 0)};
    for (std::size_t i = 0; i < m; ++i) {
        double best = bias ? (*bias)[i] : (mx ? kNegInf : kPosInf);
        Selection arg = 0;
        for (std::size_t j = 0; j < n; ++j) {
            double cand = x[j] + W.at(i, j);
            if (mx ? cand > best : cand < best) {
                best = cand;
                arg = static_cast<Selection>(j + 1);
            }
        }
        out.y[i] = best;
        out.arg[i] = arg;
    }
    return out;
}

Tensor oracle_matmul(const Tensor& A, const Tensor& B, TropicalMode mode) {
    bool mx = mode == TropicalMode::MAX_PLUS;
    std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
    Tensor C({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double best = mx ? kNegInf : kPosInf;
            for (std::size_t l = 0; l < k; ++l) {
                double cand = A.at(i, l) + B.at(l, j);
                if (mx ? cand > best : cand < best) best = cand;
            }
            C.at(i, j) = best;
        }
    return C;
}

Tensor oracle_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                     TropicalMode mode, int padding, int stride) {
    bool mx = mode == TropicalMode::MAX_PLUS;
    std::size_t ci = input.extent(0), h = input.extent(1), w = input.extent(2);
    std::size_t co = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out({co, oh, ow});
    for (std::size_t c = 0; c < co; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double best = bias ? (*bias)[c] : (mx ? kNegInf : kPosInf);
                for (std::size_t ic = 0; ic < ci; ++ic)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            long iy = static_cast<long>(oy * stride + ky) - padding;
                            long ix = static_cast<long>(ox * stride + kx) - padding;
                            double pix = (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                          ix >= static_cast<long>(w))
                                             ? (mx ? kNegInf : kPosInf)
                                             : input.data()[(ic * h + iy) * w + ix];
                            double cand = pix + kernel.data()[((c * ci + ic) * kh + ky) * kw + kx];
                            if (std::isnan(cand)) continue; // neutral pad + neutral tap
                            if (mx ? cand > best : cand < best) best = cand;
                        }
                out.data()[(c * oh + oy) * ow + ox] = best;
            }
    return out;
}

Tensor rand_tensor(const std::vector<std::size_t>& shape, Rng& rng, double lo = -5,
                   double hi = 5) {
    Tensor t(shape);
    for (double& v : t) v = rng.uniform(lo, hi);
    return t;
}

double dyadic(Rng& rng) {
    return (static_cast<double>(rng.index(4097)) - 2048.0) / 256.0;
}

} // namespace

TEST_SUITE_BEGIN("tropical");

TEST_CASE("vecmul basic examples") {
    SUBCASE("max of shifted inputs") {
        Tensor W({2, 2}, 0.0);
        auto [y, arg] = tropical_vecmul(W, Tensor::vector({1, 2}), nullptr,
                                        TropicalMode::MAX_PLUS);
        CHECK(y[0] == 2.0);
        CHECK(y[1] == 2.0);
        CHECK(arg[0] == 2);
        CHECK(arg[1] == 2);
    }
    SUBCASE("tropical identity") {
        Tensor I = tropical_identity(2);
        auto [y, arg] = tropical_vecmul(I, Tensor::vector({3, -1}), nullptr,
                                        TropicalMode::MAX_PLUS);
        CHECK(y[0] == 3.0);
        CHECK(y[1] == -1.0);
    }
    SUBCASE("bias can win") {
        Tensor W = Tensor::matrix(2, 2, {1, -2, 0, 4});
        Tensor bias = Tensor::vector({3, -9});
        auto [y, arg] = tropical_vecmul(W, Tensor::vector({0.5, 0.25}), &bias,
                                        TropicalMode::MAX_PLUS);
        CHECK(y[0] == 3.0);
        CHECK(y[1] == 4.25);
        CHECK(arg[0] == 0);
        CHECK(arg[1] == 2);
    }
}

TEST_CASE("vecmul matches exhaustive enumeration bitwise") {
    Rng rng(101);
    for (int t = 0; t < 400; ++t) {
        std::size_t m = 1 + rng.index(4), n = 1 + rng.index(4);
        Tensor W = rand_tensor({m, n}, rng);
        // sprinkle neutral elements
        for (double& v : W)
            if (rng.bernoulli(0.15)) v = kNegInf;
        Tensor x = rand_tensor({n}, rng);
        Tensor bias = rand_tensor({m}, rng);
        TropicalMode mode = rng.bernoulli(0.5) ? TropicalMode::MAX_PLUS : TropicalMode::MIN_PLUS;
        if (mode == TropicalMode::MIN_PLUS)
            for (double& v : W)
                if (v == kNegInf) v = kPosInf;
        auto got = tropical_vecmul(W, x, &bias, mode);
        auto want = oracle_vecmul(W, x, &bias, mode);
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(got.y[i] == want.y[i]);
            CHECK(got.arg[i] == want.arg[i]);
        }
    }
}

TEST_CASE("vecmul tie-break prefers bias then lowest index") {
    Tensor W = Tensor::matrix(1, 3, {0, 0, 0});
    Tensor bias = Tensor::vector({2.0});
    // candidates: bias 2, x_j + 0 = 2 for all j -> bias wins
    auto r = tropical_vecmul(W, Tensor::vector({2, 2, 2}), &bias, TropicalMode::MAX_PLUS);
    CHECK(r.arg[0] == 0);
    // without bias, lowest input index wins
    auto r2 = tropical_vecmul(W, Tensor::vector({2, 2, 2}), nullptr, TropicalMode::MAX_PLUS);
    CHECK(r2.arg[0] == 1);
}

TEST_CASE("degenerate row throws") {
    Tensor W({1, 2}, kNegInf);
    CHECK_THROWS_AS(tropical_vecmul(W, Tensor::vector({0, 0}), nullptr, TropicalMode::MAX_PLUS),
                    DegenerateRowError);
    Tensor bias = Tensor::vector({1.0});
    auto r = tropical_vecmul(W, Tensor::vector({0, 0}), &bias, TropicalMode::MAX_PLUS);
    CHECK(r.y[0] == 1.0); // bias fallback
}

TEST_CASE("shape errors") {
    Tensor W({2, 3}, 0.0);
    CHECK_THROWS_AS(tropical_vecmul(W, Tensor::vector({1, 2}), nullptr, TropicalMode::MAX_PLUS),
                    ShapeError);
    Tensor A({2, 2}, 0.0), B({3, 2}, 0.0);
    CHECK_THROWS_AS(tropical_matmul(A, B, TropicalMode::MAX_PLUS), ShapeError);
}

TEST_CASE("matmul examples and associativity") {
    SUBCASE("identity absorbs") {
        Rng rng(5);
        Tensor B = rand_tensor({3, 3}, rng);
        Tensor C = tropical_matmul(tropical_identity(3), B, TropicalMode::MAX_PLUS);
        for (std::size_t i = 0; i < B.size(); ++i) CHECK(C[i] == B[i]);
    }
    SUBCASE("hand example") {
        Tensor A = Tensor::matrix(2, 2, {1, 2, 3, 4});
        Tensor B = Tensor::matrix(2, 2, {0, -1, 5, 0});
        Tensor C = tropical_matmul(A, B, TropicalMode::MAX_PLUS);
        CHECK(C.at(0, 0) == 7.0);
        CHECK(C.at(0, 1) == 2.0);
        CHECK(C.at(1, 0) == 9.0);
        CHECK(C.at(1, 1) == 4.0);
    }
    SUBCASE("associativity is exact on dyadic values") {
        Rng rng(7);
        for (int t = 0; t < 50; ++t) {
            Tensor A({3, 3}), B({3, 3}), C({3, 3});
            for (double& v : A) v = dyadic(rng);
            for (double& v : B) v = dyadic(rng);
            for (double& v : C) v = dyadic(rng);
            Tensor l = tropical_matmul(tropical_matmul(A, B, TropicalMode::MAX_PLUS), C,
                                       TropicalMode::MAX_PLUS);
            Tensor r = tropical_matmul(A, tropical_matmul(B, C, TropicalMode::MAX_PLUS),
                                       TropicalMode::MAX_PLUS);
            for (std::size_t i = 0; i < l.size(); ++i) CHECK(l[i] == r[i]);
        }
    }
    SUBCASE("matmul matches oracle") {
        Rng rng(11);
        for (int t = 0; t < 200; ++t) {
            std::size_t m = 1 + rng.index(4), k = 1 + rng.index(4), n = 1 + rng.index(4);
            Tensor A = rand_tensor({m, k}, rng);
            Tensor B = rand_tensor({k, n}, rng);
            TropicalMode mode =
                rng.bernoulli(0.5) ? TropicalMode::MAX_PLUS : TropicalMode::MIN_PLUS;
            Tensor got = tropical_matmul(A, B, mode);
            Tensor want = oracle_matmul(A, B, mode);
            for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
        }
    }
}

TEST_CASE("duality: min-plus equals negated max-plus on negated operands") {
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        std::size_t m = 1 + rng.index(4), n = 1 + rng.index(4);
        Tensor W = rand_tensor({m, n}, rng);
        Tensor x = rand_tensor({n}, rng);
        Tensor bias = rand_tensor({m}, rng);
        Tensor Wn = W, xn = x, bn = bias;
        for (double& v : Wn) v = -v;
        for (double& v : xn) v = -v;
        for (double& v : bn) v = -v;
        Tensor a = tropical_vecmul(W, x, &bias, TropicalMode::MIN_PLUS).y;
        Tensor b = tropical_vecmul(Wn, xn, &bn, TropicalMode::MAX_PLUS).y;
        for (std::size_t i = 0; i < m; ++i) CHECK(a[i] == -b[i]);
    }
}

TEST_CASE("monotonicity of dilations") {
    Rng rng(17);
    for (int t = 0; t < 100; ++t) {
        std::size_t m = 1 + rng.index(4), n = 1 + rng.index(4);
        Tensor W = rand_tensor({m, n}, rng);
        Tensor bias = rand_tensor({m}, rng);
        Tensor x = rand_tensor({n}, rng);
        Tensor x2 = x;
        for (double& v : x2) v += rng.uniform(0.0, 2.0);
        Tensor a = tropical_vecmul(W, x, &bias, TropicalMode::MAX_PLUS).y;
        Tensor b = tropical_vecmul(W, x2, &bias, TropicalMode::MAX_PLUS).y;
        for (std::size_t i = 0; i < m; ++i) CHECK(a[i] <= b[i]);
    }
}

TEST_CASE("conv2d examples") {
    SUBCASE("1x1 zero kernel with neutral bias is the identity") {
        Rng rng(19);
        Tensor input = rand_tensor({2, 3, 3}, rng);
        Tensor kernel({2, 2, 1, 1}, kNegInf);
        kernel.data()[0 * 2 + 0] = 0.0; // channel 0 -> 0
        kernel.data()[(1 * 2 + 1)] = 0.0;
        Tensor bias({2}, kNegInf);
        auto r = tropical_conv2d(input, kernel, &bias, TropicalMode::MAX_PLUS, 0);
        for (std::size_t i = 0; i < input.size(); ++i) CHECK(r.y[i] == input[i]);
    }
    SUBCASE("zeros stay zero under zero kernel") {
        Tensor input({1, 3, 3}, 0.0);
        Tensor kernel({1, 1, 3, 3}, 0.0);
        Tensor bias({1}, kNegInf);
        auto r = tropical_conv2d(input, kernel, &bias, TropicalMode::MAX_PLUS, 1);
        CHECK(r.y.shape() == std::vector<std::size_t>{1, 3, 3});
        for (double v : r.y) CHECK(v == 0.0);
    }
    SUBCASE("2x2 window takes the max") {
        Tensor input({1, 2, 2}, {1, 2, 3, 4});
        Tensor kernel({1, 1, 2, 2}, 0.0);
        auto r = tropical_conv2d(input, kernel, nullptr, TropicalMode::MAX_PLUS, 0);
        CHECK(r.y.size() == 1);
        CHECK(r.y[0] == 4.0);
    }
    SUBCASE("kernel larger than padded input") {
        Tensor input({1, 2, 2}, 0.0);
        Tensor kernel({1, 1, 5, 5}, 0.0);
        CHECK_THROWS_AS(tropical_conv2d(input, kernel, nullptr, TropicalMode::MAX_PLUS, 0),
                        ShapeError);
    }
}

TEST_CASE("conv2d matches oracle across modes, padding and stride") {
    Rng rng(23);
    for (int t = 0; t < 120; ++t) {
        std::size_t ci = 1 + rng.index(2), co = 1 + rng.index(2);
        std::size_t h = 2 + rng.index(3), w = 2 + rng.index(3);
        std::size_t k = 1 + rng.index(std::min(h, w));
        int padding = static_cast<int>(rng.index(2));
        int stride = 1 + static_cast<int>(rng.index(2));
        TropicalMode mode = rng.bernoulli(0.5) ? TropicalMode::MAX_PLUS : TropicalMode::MIN_PLUS;
        Tensor input = rand_tensor({ci, h, w}, rng);
        Tensor kernel = rand_tensor({co, ci, k, k}, rng);
        for (double& v : kernel)
            if (rng.bernoulli(0.1)) v = tropical_neutral(mode);
        Tensor bias = rand_tensor({co}, rng);
        auto got = tropical_conv2d(input, kernel, &bias, mode, padding, stride);
        Tensor want = oracle_conv2d(input, kernel, &bias, mode, padding, stride);
        REQUIRE(got.y.shape() == want.shape());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.y[i] == want[i]);
    }
}

TEST_CASE("conv selections replay to the winning candidate") {
    Rng rng(29);
    Tensor input = rand_tensor({2, 4, 4}, rng);
    Tensor kernel = rand_tensor({3, 2, 3, 3}, rng);
    Tensor bias = rand_tensor({3}, rng, 3.0, 8.0); // occasionally wins
    auto r = tropical_conv2d(input, kernel, &bias, TropicalMode::MAX_PLUS, 1);
    std::size_t kh = 3, kw = 3;
    std::size_t oh = r.y.extent(1), ow = r.y.extent(2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t oi = (c * oh + oy) * ow + ox;
                Selection s = r.sel[oi];
                if (s == 0) {
                    CHECK(r.y[oi] == bias[c]);
                    continue;
                }
                std::size_t ki = static_cast<std::size_t>(s - 1);
                std::size_t kx = ki % kw, ky = (ki / kw) % kh, ic = ki / (kh * kw);
                long iy = static_cast<long>(oy) - 1 + static_cast<long>(ky);
                long ix = static_cast<long>(ox) - 1 + static_cast<long>(kx);
                REQUIRE(iy >= 0);
                REQUIRE(ix >= 0);
                double cand = input.data()[(ic * 4 + iy) * 4 + ix] +
                              kernel.data()[((c * 2 + ic) * 3 + ky) * 3 + kx];
                CHECK(r.y[oi] == cand);
            }
}

TEST_CASE("soft tropical vecmul") {
    SUBCASE("single candidate is exact at any temperature") {
        Tensor W = Tensor::matrix(1, 1, {1.5});
        for (double t : {0.1, 1.0, 10.0}) {
            Tensor y = soft_tropical_vecmul(W, Tensor::vector({2.0}), nullptr,
                                            TropicalMode::MAX_PLUS, t);
            CHECK(y[0] == doctest::Approx(3.5).epsilon(1e-12));
        }
    }
    SUBCASE("two equal candidates give t log 2") {
        Tensor W = Tensor::matrix(1, 2, {0, 0});
        Tensor y = soft_tropical_vecmul(W, Tensor::vector({0, 0}), nullptr,
                                        TropicalMode::MAX_PLUS, 1.0);
        CHECK(y[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        Tensor y2 = soft_tropical_vecmul(W, Tensor::vector({0, 0}), nullptr,
                                         TropicalMode::MAX_PLUS, 0.01);
        CHECK(std::abs(y2[0]) < 0.01);
    }
    SUBCASE("gap bound 0 <= soft - hard <= t log n") {
        Rng rng(31);
        for (int t = 0; t < 100; ++t) {
            std::size_t m = 1 + rng.index(3), n = 1 + rng.index(4);
            Tensor W = rand_tensor({m, n}, rng);
            Tensor x = rand_tensor({n}, rng);
            Tensor bias = rand_tensor({m}, rng);
            double temp = rng.uniform(0.05, 2.0);
            Tensor soft = soft_tropical_vecmul(W, x, &bias, TropicalMode::MAX_PLUS, temp);
            Tensor hard = tropical_vecmul(W, x, &bias, TropicalMode::MAX_PLUS).y;
            double bound = temp * std::log(static_cast<double>(n + 1));
            for (std::size_t i = 0; i < m; ++i) {
                CHECK(soft[i] >= hard[i] - 1e-12);
                CHECK(soft[i] <= hard[i] + bound + 1e-12);
            }
            // MIN_PLUS approaches from below
            Tensor softm = soft_tropical_vecmul(W, x, &bias, TropicalMode::MIN_PLUS, temp);
            Tensor hardm = tropical_vecmul(W, x, &bias, TropicalMode::MIN_PLUS).y;
            for (std::size_t i = 0; i < m; ++i) CHECK(softm[i] <= hardm[i] + 1e-12);
        }
    }
    SUBCASE("non-positive temperature rejected") {
        Tensor W({1, 1}, 0.0);
        CHECK_THROWS_AS(soft_tropical_vecmul(W, Tensor::vector({0.0}), nullptr,
                                             TropicalMode::MAX_PLUS, 0.0),
                        ValueError);
    }
}

TEST_CASE("soft tropical conv approaches the hard conv") {
    Rng rng(37);
    Tensor input = rand_tensor({2, 4, 4}, rng);
    Tensor kernel = rand_tensor({2, 2, 3, 3}, rng);
    Tensor bias = rand_tensor({2}, rng);
    auto hard = tropical_conv2d(input, kernel, &bias, TropicalMode::MAX_PLUS, 1);
    Tensor soft = soft_tropical_conv2d(input, kernel, &bias, TropicalMode::MAX_PLUS, 1, 1e-3);
    for (std::size_t i = 0; i < hard.y.size(); ++i)
        CHECK(soft[i] == doctest::Approx(hard.y[i]).epsilon(1e-6));
}

TEST_CASE("weight validation rejects the wrong infinity and NaN") {
    Tensor W({1, 1}, kPosInf);
    CHECK_THROWS_AS(tropical_vecmul(W, Tensor::vector({0.0}), nullptr, TropicalMode::MAX_PLUS),
                    ValueError);
    Tensor W2({1, 1}, std::vector<double>{std::nan("")});
    CHECK_THROWS_AS(tropical_vecmul(W2, Tensor::vector({0.0}), nullptr, TropicalMode::MAX_PLUS),
                    ValueError);
}

TEST_SUITE_END();
