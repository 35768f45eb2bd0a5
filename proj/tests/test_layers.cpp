#include <doctest.h>

#include <cmath>

#include "morphnn/init.hpp"
#include "morphnn/layers.hpp"
#include "morphnn/linalg.hpp"

using namespace morphnn;

namespace {

ParamSet params_for(const NetworkSpec& spec, std::uint64_t seed) {
    return init_network(spec, InitScheme{}, seed);
}

Tensor single(const NetworkSpec& spec, const ParamSet& params, std::vector<double> x) {
    std::size_t n = x.size();
    Tensor X({1, n}, std::move(x));
    ForwardPass pass = forward(spec, params, std::move(X));
    return pass.output();
}

NetworkSpec one_layer(LayerSpec l) {
    NetworkSpec spec;
    spec.input_shape = {l.n_in};
    spec.output_size = l.n_out;
    l.is_output_layer = true;
    spec.layers = {l};
    return spec;
}

} // namespace

TEST_SUITE_BEGIN("layers");

TEST_CASE("mp_forward examples") {
    SUBCASE("zero matrix takes the max") {
        Tensor W({2, 2}, 0.0);
        Tensor w0({2}, kNegInf);
        Tensor y = mp_forward(Tensor::vector({1, 2}), W, w0);
        CHECK(y[0] == 2.0);
        CHECK(y[1] == 2.0);
    }
    SUBCASE("bias dominates") {
        Tensor W({2, 2}, -1000.0);
        Tensor w0({2}, 5.0);
        Tensor y = mp_forward(Tensor::vector({0, 0}), W, w0);
        CHECK(y[0] == 5.0);
        CHECK(y[1] == 5.0);
    }
}

TEST_CASE("dep_forward examples") {
    Tensor W({2, 2}, 0.0), M({2, 2}, 0.0);
    SUBCASE("lambda 1 reduces to the unbiased MP") {
        Rng rng(3);
        Tensor Wr({2, 2});
        for (double& v : Wr) v = rng.normal();
        Tensor y = dep_forward(Tensor::vector({1, 3}), Wr, M, Tensor({2}, 1.0));
        Tensor want = tropical_vecmul(Wr, Tensor::vector({1, 3}), nullptr,
                                      TropicalMode::MAX_PLUS).y;
        CHECK(y[0] == want[0]);
        CHECK(y[1] == want[1]);
    }
    SUBCASE("lambda 1/2 is the mean of max and min") {
        Tensor y = dep_forward(Tensor::vector({1, 3}), W, M, Tensor({2}, 0.5));
        CHECK(y[0] == 2.0);
        CHECK(y[1] == 2.0);
    }
    SUBCASE("lambda 3/4 weighting") {
        Tensor y = dep_forward(Tensor::vector({0, 4}), W, M, Tensor({2}, 0.75));
        CHECK(y[0] == 3.0);
        CHECK(y[1] == 3.0);
    }
    SUBCASE("lambda outside [0,1] rejected") {
        CHECK_THROWS_AS(dep_forward(Tensor::vector({0, 4}), W, M, Tensor({2}, 1.5)),
                        ValueError);
    }
}

TEST_CASE("mpm_forward examples") {
    Tensor W({2, 2}, 0.0);
    Tensor w0({2}, kNegInf), m0({2}, kPosInf);
    SUBCASE("max plus min") {
        Tensor y = mpm_forward(Tensor::vector({1, 3}), W, w0, m0, Tensor({2}, 1.0));
        CHECK(y[0] == 4.0);
        CHECK(y[1] == 4.0);
    }
    SUBCASE("alpha 0 zeroes the output") {
        Tensor y = mpm_forward(Tensor::vector({1, 3}), W, w0, m0, Tensor({2}, 0.0));
        CHECK(y[0] == 0.0);
        CHECK(y[1] == 0.0);
    }
}

TEST_CASE("RMPM equals MPM plus the identity") {
    LayerSpec rmpm;
    rmpm.kind = LayerKind::RMPM;
    rmpm.n_in = 5;
    rmpm.n_out = 5;
    rmpm.activation = Activation::Scale;
    rmpm.residual = true;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 5;
    out.n_out = 5;
    out.is_output_layer = true;
    NetworkSpec res_spec;
    res_spec.input_shape = {5};
    res_spec.output_size = 5;
    res_spec.layers = {rmpm, out};

    ParamSet params = params_for(res_spec, 9);
    // identity output head isolates the residual layer
    Tensor& A = params.at("L1.A").value;
    A.fill(0.0);
    for (int i = 0; i < 5; ++i) A.at(i, i) = 1.0;
    params.at("L1.b").value.fill(0.0);

    // matching MPM net sharing the same morphological parameters
    NetworkSpec plain = res_spec;
    plain.layers[0].kind = LayerKind::MPM;
    plain.layers[0].residual = false;

    Rng rng(4);
    for (int t = 0; t < 25; ++t) {
        std::vector<double> x(5);
        for (double& v : x) v = rng.normal();
        Tensor with_res = single(res_spec, params, x);
        Tensor without = single(plain, params, x);
        for (int i = 0; i < 5; ++i) CHECK(with_res[i] == without[i] + x[i]);
    }
}

TEST_CASE("RMPM worked example: morphological sum [4,4] plus input [1,3] gives [5,7]") {
    LayerSpec l;
    l.kind = LayerKind::RMPM;
    l.n_in = 2;
    l.n_out = 2;
    l.residual = true;
    l.activation = Activation::Scale;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 2;
    out.n_out = 2;
    out.bias = false;
    out.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {2};
    spec.output_size = 2;
    spec.layers = {l, out};
    ParamSet params = params_for(spec, 90);
    params.at("L0.W").value.fill(0.0);
    params.at("L0.w0").value.fill(kNegInf);
    params.at("L0.m0").value.fill(kPosInf);
    params.at("L0.alpha").value.fill(1.0);
    Tensor& A = params.at("L1.A").value;
    A.fill(0.0);
    A.at(0, 0) = A.at(1, 1) = 1.0;
    Tensor y = single(spec, params, {1.0, 3.0});
    CHECK(y[0] == 5.0);
    CHECK(y[1] == 7.0);
}

TEST_CASE("MPM-SVD with identity frame and unit sigma equals MPM with alpha 1") {
    NetworkSpec svd_spec;
    svd_spec.input_shape = {4};
    svd_spec.output_size = 4;
    LayerSpec l;
    l.kind = LayerKind::MPM_SVD;
    l.n_in = 4;
    l.n_out = 4;
    l.activation = Activation::Svd;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 4;
    out.n_out = 4;
    out.bias = false;
    out.is_output_layer = true;
    svd_spec.layers = {l, out};
    ParamSet params = params_for(svd_spec, 91);
    Tensor I({4, 4}, 0.0);
    for (int i = 0; i < 4; ++i) I.at(i, i) = 1.0;
    params.at("L0.U").value = I;
    params.at("L0.V").value = I;
    params.at("L0.sigma").value.fill(1.0);
    params.at("L1.A").value = I;

    NetworkSpec mpm_spec = svd_spec;
    mpm_spec.layers[0].kind = LayerKind::MPM;
    mpm_spec.layers[0].activation = Activation::Scale;
    ParamSet mpm_params;
    for (const char* n : {"L0.W", "L0.w0", "L0.m0"})
        mpm_params.add(params.at(n));
    mpm_params.add(Parameter("L0.alpha", Tensor({4}, 1.0), ParamRole::Activation));
    mpm_params.add(Parameter("L1.A", I, ParamRole::LinearWeight));

    Rng rng(92);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x(4);
        for (double& v : x) v = rng.normal();
        Tensor a = single(svd_spec, params, x);
        Tensor b = single(mpm_spec, mpm_params, x);
        for (int i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
    }
}

TEST_CASE("residual with alpha 0 is the identity") {
    LayerSpec l;
    l.kind = LayerKind::RMPM;
    l.n_in = 3;
    l.n_out = 3;
    l.residual = true;
    l.activation = Activation::Scale;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 3;
    out.n_out = 3;
    out.bias = false;
    out.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {3};
    spec.output_size = 3;
    spec.layers = {l, out};
    ParamSet params = params_for(spec, 10);
    params.at("L0.alpha").value.fill(0.0);
    Tensor& A = params.at("L1.A").value;
    A.fill(0.0);
    for (int i = 0; i < 3; ++i) A.at(i, i) = 1.0;
    Tensor y = single(spec, params, {0.3, -0.4, 0.9});
    CHECK(y[0] == 0.3);
    CHECK(y[1] == -0.4);
    CHECK(y[2] == 0.9);
}

TEST_CASE("dropout rate 1 masks every candidate; biases keep rows alive") {
    LayerSpec l;
    l.kind = LayerKind::MPM;
    l.n_in = 4;
    l.n_out = 4;
    l.activation = Activation::Scale;
    l.dropout_rate = 1.0;
    NetworkSpec spec = one_layer(l);
    ParamSet params = params_for(spec, 11);
    Rng rng(12);
    Tensor X({1, 4}, {0.1, 0.2, 0.3, 0.4});
    ForwardPass pass = forward(spec, params, std::move(X), true, &rng);
    // all candidates dropped -> every row falls back to its biases
    // (output layer: alpha fixed to 1)
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(pass.output()[i] ==
              params.at("L0.w0").value[i] + params.at("L0.m0").value[i]);
}

TEST_CASE("dropout mask statistics") {
    Rng rng(13);
    SUBCASE("rate 0 keeps everything") {
        Tensor m = sample_dropout_mask({100}, 0.0, rng);
        for (double v : m) CHECK(v == 1.0);
    }
    SUBCASE("rate 1 drops everything") {
        Tensor m = sample_dropout_mask({100}, 1.0, rng);
        for (double v : m) CHECK(v == 0.0);
    }
    SUBCASE("rate 0.3 keeps about 70%") {
        Tensor m = sample_dropout_mask({100000}, 0.3, rng);
        double kept = 0;
        for (double v : m) kept += v;
        CHECK(kept / 100000.0 == doctest::Approx(0.7).epsilon(0.015));
    }
    SUBCASE("rate outside [0,1] rejected") {
        CHECK_THROWS_AS(sample_dropout_mask({4}, 1.5, rng), ValueError);
    }
}

TEST_CASE("MPM with neutral biases and alpha 1 equals 2 * DEP(1/2) with shared weights") {
    std::size_t n = 6;
    Rng rng(21);
    Tensor W({n, n});
    for (double& v : W) v = rng.normal();
    Tensor w0({n}, kNegInf), m0({n}, kPosInf), alpha({n}, 1.0), lambda({n}, 0.5);
    for (int t = 0; t < 50; ++t) {
        Tensor x({n});
        for (double& v : x) v = rng.normal();
        Tensor a = mpm_forward(x, W, w0, m0, alpha);
        Tensor b = dep_forward(x, W, W, lambda);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(a[i] == doctest::Approx(2.0 * b[i]).epsilon(1e-15));
    }
}

TEST_CASE("translation covariance of unbiased MP layers") {
    Rng rng(23);
    Tensor W({4, 4});
    for (double& v : W) v = rng.normal();
    for (int t = 0; t < 20; ++t) {
        Tensor x({4});
        for (double& v : x) v = rng.normal();
        double c = rng.uniform(-3, 3);
        Tensor xc = x;
        for (double& v : xc) v += c;
        Tensor a = tropical_vecmul(W, xc, nullptr, TropicalMode::MAX_PLUS).y;
        Tensor b = tropical_vecmul(W, x, nullptr, TropicalMode::MAX_PLUS).y;
        for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(b[i] + c));
    }
}

TEST_CASE("MPM-SVD layer matches the dense U diag(sigma) V^T oracle") {
    LayerSpec l;
    l.kind = LayerKind::MPM_SVD;
    l.n_in = 4;
    l.n_out = 4;
    l.activation = Activation::Svd;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 4;
    out.n_out = 4;
    out.bias = false;
    out.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {4};
    spec.output_size = 4;
    spec.layers = {l, out};
    ParamSet params = params_for(spec, 31);
    Tensor& A = params.at("L1.A").value;
    A.fill(0.0);
    for (int i = 0; i < 4; ++i) A.at(i, i) = 1.0;

    const Tensor& U = params.at("L0.U").value;
    const Tensor& V = params.at("L0.V").value;
    const Tensor& sigma = params.at("L0.sigma").value;
    const Tensor& W = params.at("L0.W").value;
    const Tensor& w0 = params.at("L0.w0").value;
    const Tensor& m0 = params.at("L0.m0").value;

    Rng rng(32);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x(4);
        for (double& v : x) v = rng.normal();
        Tensor got = single(spec, params, x);
        Tensor xv = Tensor::vector(x);
        Tensor mx = tropical_vecmul(W, xv, &w0, TropicalMode::MAX_PLUS).y;
        Tensor mn = tropical_vecmul(W, xv, &m0, TropicalMode::MIN_PLUS).y;
        Tensor y({4});
        for (int i = 0; i < 4; ++i) y[i] = mx[i] + mn[i];
        Tensor want({4}, 0.0);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double m = 0.0;
                for (int k = 0; k < 4; ++k) m += U.at(i, k) * sigma[k] * V.at(j, k);
                want[i] += m * y[j];
            }
        for (int i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
    SUBCASE("sigma 0 zeroes the output") {
        params.at("L0.sigma").value.fill(0.0);
        Tensor got = single(spec, params, {0.5, -0.5, 1.0, 0.0});
        for (int i = 0; i < 4; ++i) CHECK(got[i] == 0.0);
    }
}

TEST_CASE("hybrid block: identity affine + tropical identity doubles the input") {
    LayerSpec h;
    h.kind = LayerKind::HYBRID_BLOCK;
    h.n_in = 3;
    h.n_out = 3;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 3;
    out.n_out = 3;
    out.bias = false;
    out.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {3};
    spec.output_size = 3;
    spec.layers = {h, out};
    ParamSet params = params_for(spec, 41);
    Tensor& A = params.at("L0.A").value;
    A.fill(0.0);
    for (int i = 0; i < 3; ++i) A.at(i, i) = 1.0;
    params.at("L0.b").value.fill(0.0);
    params.at("L0.W").value = tropical_identity(3);
    params.at("L0.w0").value.fill(kNegInf);
    params.at("L0.m0").value.fill(kPosInf);
    Tensor& Ao = params.at("L1.A").value;
    Ao.fill(0.0);
    for (int i = 0; i < 3; ++i) Ao.at(i, i) = 1.0;

    // tropical identity as shared W: off-diagonal candidates are excluded
    // from both paths, so max path = x_i and min path = x_i
    Tensor y = single(spec, params, {0.7, -1.1, 0.2});
    CHECK(y[0] == doctest::Approx(1.4));
    CHECK(y[1] == doctest::Approx(-2.2));
    CHECK(y[2] == doctest::Approx(0.4));

    SUBCASE("zero affine with constant bias gives a constant output") {
        params.at("L0.A").value.fill(0.0);
        params.at("L0.b").value.fill(0.3);
        Tensor y1 = single(spec, params, {5.0, -2.0, 0.1});
        Tensor y2 = single(spec, params, {-1.0, 7.0, 3.3});
        for (int i = 0; i < 3; ++i) CHECK(y1[i] == y2[i]);
    }
}

TEST_CASE("morph conv block: depthwise zero kernel with sentinel biases doubles the input") {
    LayerSpec c;
    c.kind = LayerKind::MORPH_CONV_S1;
    c.in_ch = 1;
    c.out_ch = 1;
    c.kh = c.kw = 1;
    c.padding = 0;
    LayerSpec fl;
    fl.kind = LayerKind::FLATTEN;
    fl.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {1, 3, 3};
    spec.output_size = 9;
    spec.layers = {c, fl};
    ParamSet params = params_for(spec, 53);
    params.at("L0.W").value.fill(0.0);
    params.at("L0.w0").value.fill(kNegInf);
    params.at("L0.m0").value.fill(kPosInf);
    // center-one 3x3 activation kernel = identity
    Tensor& act = params.at("L0.actK").value;
    act.fill(0.0);
    act.data()[4] = 1.0;

    Rng rng(54);
    Tensor X({1, 1, 3, 3});
    for (double& v : X) v = rng.normal();
    Tensor input = X;
    ForwardPass pass = forward(spec, params, std::move(X));
    for (std::size_t i = 0; i < 9; ++i)
        CHECK(pass.output()[i] == doctest::Approx(2.0 * input[i]));
}

TEST_CASE("morph conv setting 2 activation matches the dense per-tap reconstruction") {
    LayerSpec c;
    c.kind = LayerKind::MORPH_CONV_S2;
    c.in_ch = 2;
    c.out_ch = 2;
    c.kh = c.kw = 3;
    c.padding = 1;
    LayerSpec fl;
    fl.kind = LayerKind::FLATTEN;
    fl.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {2, 4, 4};
    spec.output_size = 2 * 4 * 4;
    spec.layers = {c, fl};
    ParamSet params = params_for(spec, 61);

    Rng rng(62);
    Tensor X({1, 2, 4, 4});
    for (double& v : X) v = rng.normal();
    Tensor input = X;
    ForwardPass pass = forward(spec, params, std::move(X));

    // oracle: morphological sum then dense conv with K[a,b,t] = U_t S_t V_t^T
    Tensor img({2, 4, 4}, std::vector<double>(input.begin(), input.end()));
    auto mx = tropical_conv2d(img, params.at("L0.W").value, &params.at("L0.w0").value,
                              TropicalMode::MAX_PLUS, 1);
    auto mn = tropical_conv2d(img, params.at("L0.W").value, &params.at("L0.m0").value,
                              TropicalMode::MIN_PLUS, 1);
    Tensor s({2, 4, 4});
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = mx.y[i] + mn.y[i];
    const Tensor& U = params.at("L0.act_U").value;
    const Tensor& V = params.at("L0.act_V").value;
    const Tensor& sg = params.at("L0.act_sigma").value;
    Tensor K({2, 2, 3, 3});
    for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 2; ++k)
                    acc += U[t * 4 + a * 2 + k] * sg[t * 2 + k] * V[t * 4 + b * 2 + k];
                K.data()[(a * 2 + b) * 9 + t] = acc;
            }
    Tensor want({2, 4, 4}, 0.0);
    for (int co = 0; co < 2; ++co)
        for (int oy = 0; oy < 4; ++oy)
            for (int ox = 0; ox < 4; ++ox) {
                double acc = 0.0;
                for (int ci = 0; ci < 2; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int iy = oy - 1 + ky, ix = ox - 1 + kx;
                            if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
                            acc += s.data()[(ci * 4 + iy) * 4 + ix] *
                                   K.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                        }
                want.data()[(co * 4 + oy) * 4 + ox] = acc;
            }
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(pass.output()[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("maxout layer takes the per-unit max over pieces") {
    LayerSpec m;
    m.kind = LayerKind::MAXOUT;
    m.n_in = 3;
    m.n_out = 2;
    m.pool = 3;
    NetworkSpec spec = one_layer(m);
    ParamSet params = params_for(spec, 71);
    const Tensor& A = params.at("L0.A").value;
    const Tensor& b = params.at("L0.b").value;
    Rng rng(72);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x(3);
        for (double& v : x) v = rng.normal();
        Tensor got = single(spec, params, x);
        for (std::size_t i = 0; i < 2; ++i) {
            double want = kNegInf;
            for (std::size_t p = 0; p < 3; ++p) {
                std::size_t r = i + p * 2;
                double acc = b[r];
                for (std::size_t j = 0; j < 3; ++j) acc += A.at(r, j) * x[j];
                want = std::max(want, acc);
            }
            CHECK(got[i] == doctest::Approx(want).epsilon(1e-14));
        }
    }
}

TEST_CASE("validator rejects malformed specs") {
    SUBCASE("residual with mismatched sizes") {
        LayerSpec l;
        l.kind = LayerKind::RMPM;
        l.n_in = 4;
        l.n_out = 3;
        l.residual = true;
        LayerSpec out;
        out.kind = LayerKind::LINEAR;
        out.n_in = 3;
        out.n_out = 3;
        out.is_output_layer = true;
        NetworkSpec spec;
        spec.input_shape = {4};
        spec.output_size = 3;
        spec.layers = {l, out};
        CHECK_THROWS_AS(spec.validate(), ShapeError);
    }
    SUBCASE("output flag must sit on the last layer") {
        LayerSpec l;
        l.kind = LayerKind::LINEAR;
        l.n_in = 2;
        l.n_out = 2;
        l.is_output_layer = true;
        NetworkSpec spec;
        spec.input_shape = {2};
        spec.output_size = 2;
        spec.layers = {l, l};
        CHECK_THROWS_AS(spec.validate(), ValueError);
    }
    SUBCASE("shape chaining is enforced") {
        LayerSpec a;
        a.kind = LayerKind::LINEAR;
        a.n_in = 2;
        a.n_out = 3;
        LayerSpec b;
        b.kind = LayerKind::LINEAR;
        b.n_in = 4;
        b.n_out = 1;
        b.is_output_layer = true;
        NetworkSpec spec;
        spec.input_shape = {2};
        spec.output_size = 1;
        spec.layers = {a, b};
        CHECK_THROWS_AS(spec.validate(), ShapeError);
    }
    SUBCASE("missing parameters are reported") {
        LayerSpec l;
        l.kind = LayerKind::LINEAR;
        l.n_in = 2;
        l.n_out = 2;
        NetworkSpec spec = one_layer(l);
        ParamSet empty;
        Tensor X({1, 2}, 0.0);
        CHECK_THROWS_AS(forward(spec, empty, std::move(X)), ValueError);
    }
}

TEST_CASE("maxpool layer: max-plus conv with zero kernel, stride = window") {
    LayerSpec p;
    p.kind = LayerKind::MAXPOOL;
    p.kh = p.kw = 2;
    p.stride = 2;
    LayerSpec fl;
    fl.kind = LayerKind::FLATTEN;
    fl.is_output_layer = true;
    NetworkSpec spec;
    spec.input_shape = {1, 4, 4};
    spec.output_size = 4;
    spec.layers = {p, fl};
    ParamSet none;
    Tensor X({1, 1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    ForwardPass pass = forward(spec, none, std::move(X));
    CHECK(pass.output()[0] == 6.0);
    CHECK(pass.output()[1] == 8.0);
    CHECK(pass.output()[2] == 14.0);
    CHECK(pass.output()[3] == 16.0);
}

TEST_SUITE_END();
