#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "morphnn/init.hpp"
#include "morphnn/pruning.hpp"
#include "morphnn/runner.hpp"
#include "morphnn/serialize.hpp"
#include "morphnn/theory.hpp"

using namespace morphnn;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("morphnn_ckpt_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

} // namespace

TEST_SUITE_BEGIN("serialize");

TEST_CASE("spec JSON round trip preserves every layer field") {
    NetworkSpec spec = make_preset("rmpm-drop");
    std::string text = spec_to_json(spec);
    NetworkSpec back = spec_from_json(text);
    CHECK(back.layers.size() == spec.layers.size());
    CHECK(back.input_shape == spec.input_shape);
    CHECK(back.output_size == spec.output_size);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& a = spec.layers[i];
        const LayerSpec& b = back.layers[i];
        CHECK(a.kind == b.kind);
        CHECK(a.n_in == b.n_in);
        CHECK(a.n_out == b.n_out);
        CHECK(a.residual == b.residual);
        CHECK(a.dropout_rate == b.dropout_rate);
        CHECK(a.activation == b.activation);
        CHECK(a.is_output_layer == b.is_output_layer);
    }
    // conv preset too
    NetworkSpec conv = make_preset("mpm-lenet5");
    NetworkSpec conv_back = spec_from_json(spec_to_json(conv));
    CHECK(count_trainable_params(conv_back) == count_trainable_params(conv));
}

TEST_CASE("spec JSON rejects unknown kinds and versions") {
    CHECK_THROWS_AS(spec_from_json("{\"version\": 2, \"input_shape\": [1], "
                                   "\"output_size\": 1, \"layers\": []}"),
                    IoError);
    CHECK_THROWS_AS(
        spec_from_json("{\"version\": 1, \"input_shape\": [1], \"output_size\": 1, "
                       "\"layers\": [{\"kind\": \"bogus\"}]}"),
        ValueError);
}

TEST_CASE("checkpoint round trip is bitwise for values, masks and flags") {
    TempDir tmp;
    NetworkSpec spec;
    spec.input_shape = {6};
    spec.output_size = 3;
    LayerSpec a;
    a.kind = LayerKind::MPM_SVD;
    a.n_in = 6;
    a.n_out = 6;
    a.activation = Activation::Svd;
    LayerSpec b;
    b.kind = LayerKind::MPM;
    b.n_in = 6;
    b.n_out = 3;
    b.activation = Activation::Scale;
    b.is_output_layer = true;
    spec.layers = {a, b};
    ParamSet params = init_network(spec, InitScheme{}, 31);
    PruneMask mask = l1_masks(params, 0.25);
    apply_masks(params, mask);

    save_checkpoint(tmp.path.string(), spec, params);
    auto [spec2, params2] = load_checkpoint(tmp.path.string());
    CHECK(spec2.layers.size() == spec.layers.size());
    std::size_t count = 0;
    for (const auto& [id, p] : params) {
        const Parameter& q = params2.at(id);
        CHECK(q.trainable == p.trainable);
        CHECK(q.role == p.role);
        REQUIRE(q.value.shape() == p.value.shape());
        // bitwise comparison, infinities included
        CHECK(std::memcmp(p.value.data(), q.value.data(),
                          p.value.size() * sizeof(double)) == 0);
        CHECK(p.mask.has_value() == q.mask.has_value());
        if (p.mask)
            for (std::size_t i = 0; i < p.mask->size(); ++i)
                CHECK((*p.mask)[i] == (*q.mask)[i]);
        ++count;
    }
    CHECK(params2.size() == count);

    // forwards agree exactly after reload
    Rng rng(32);
    Tensor X({2, 6});
    for (double& v : X) v = rng.normal();
    Tensor X2 = X;
    ForwardPass p1 = forward(spec, params, std::move(X));
    ForwardPass p2 = forward(spec2, params2, std::move(X2));
    for (std::size_t i = 0; i < p1.output().size(); ++i)
        CHECK(p1.output()[i] == p2.output()[i]);
}

TEST_CASE("an affine-builder checkpoint evaluates exactly after reload") {
    TempDir tmp;
    AffineTarget t{Tensor::vector({1.25, -0.75, 2.0}), 0.5, 1.0};
    BuiltNetwork net = build_affine_mpm(t);
    save_checkpoint(tmp.path.string(), net.spec, net.params);
    auto [spec, params] = load_checkpoint(tmp.path.string());
    Rng rng(51);
    for (int s = 0; s < 100; ++s) {
        Tensor X({1, 3});
        double norm = 0.0;
        for (double& v : X) {
            v = rng.normal();
            norm += std::abs(v);
        }
        for (double& v : X) v *= rng.uniform01() / norm;
        double want = 0.5;
        for (int i = 0; i < 3; ++i) want += t.a[i] * X[i];
        ForwardPass pass = forward(spec, params, std::move(X));
        CHECK(std::abs(pass.output()[0] - want) <= 1e-12);
    }
}

TEST_CASE("loading a truncated blob fails cleanly") {
    TempDir tmp;
    NetworkSpec spec;
    spec.input_shape = {2};
    spec.output_size = 2;
    LayerSpec l;
    l.kind = LayerKind::LINEAR;
    l.n_in = 2;
    l.n_out = 2;
    l.is_output_layer = true;
    spec.layers = {l};
    ParamSet params = init_network(spec, InitScheme{}, 1);
    save_checkpoint(tmp.path.string(), spec, params);
    std::filesystem::resize_file(tmp.path / "params.bin", 8);
    CHECK_THROWS_AS(load_checkpoint(tmp.path.string()), IoError);
}

TEST_SUITE_END();
