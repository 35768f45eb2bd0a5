#include "morphnn/init.hpp"

#include <cmath>

#include "morphnn/linalg.hpp"

namespace morphnn {

InitScheme mp_init_scheme() {
    InitScheme s;
    s.morph_mean = -5.0 / 3.0;
    s.morph_std = 3.0;
    return s;
}

double glorot_limit(const std::vector<std::size_t>& shape) {
    double fan_in, fan_out;
    if (shape.size() == 2) {
        fan_out = static_cast<double>(shape[0]);
        fan_in = static_cast<double>(shape[1]);
    } else if (shape.size() == 4) {
        double rf = static_cast<double>(shape[2] * shape[3]);
        fan_out = static_cast<double>(shape[0]) * rf;
        fan_in = static_cast<double>(shape[1]) * rf;
    } else {
        throw ShapeError("glorot_limit: weight shape must be 2-d or 4-d");
    }
    return std::sqrt(6.0 / (fan_in + fan_out));
}

namespace {

void fill_normal(Tensor& t, double mean, double std, Rng& rng) {
    for (double& v : t) v = rng.normal(mean, std);
}

void fill_glorot(Tensor& t, Rng& rng) {
    double lim = glorot_limit(t.shape());
    for (double& v : t) v = rng.uniform(-lim, lim);
}

// Glorot sample -> SVD; V's sign convention keeps sigma >= 0 (Jacobi already
// does), retries on a degenerate draw.
SvdResult sampled_frame(std::size_t n, const std::vector<std::size_t>& fan_shape, Rng& rng) {
    for (int attempt = 0; attempt < 4; ++attempt) {
        Tensor sample({n, n});
        double lim = glorot_limit(fan_shape);
        for (double& v : sample) v = rng.uniform(-lim, lim);
        try {
            return jacobi_svd(sample);
        } catch (const ValueError&) {
            // resample
        }
    }
    throw ValueError("frame initialization: repeated rank-deficient Glorot samples");
}

} // namespace

ParamSet init_network(const NetworkSpec& spec, const InitScheme& scheme, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ParamSet params;
    for (const ParamDef& d : param_defs(spec))
        params.add(Parameter(d.id, Tensor(d.shape, 0.0), d.role, d.trainable));

    long first_morph = -1;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerKind k = spec.layers[i].kind;
        bool morph = k == LayerKind::MP || k == LayerKind::DEP || k == LayerKind::MPM ||
                     k == LayerKind::RMPM || k == LayerKind::MPM_SVD ||
                     k == LayerKind::HYBRID_BLOCK || k == LayerKind::MORPH_CONV_S1 ||
                     k == LayerKind::MORPH_CONV_S2;
        if (morph) {
            first_morph = static_cast<long>(i);
            break;
        }
    }

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        auto id = [&](const char* name) { return "L" + std::to_string(i) + "." + name; };
        auto have = [&](const char* name) { return params.contains(id(name)); };
        auto tensor = [&](const char* name) -> Tensor& { return params.at(id(name)).value; };
        bool zero_layer = scheme.zero_first_morph_layer && static_cast<long>(i) == first_morph;

        switch (l.kind) {
            case LayerKind::LINEAR:
            case LayerKind::LINEAR_CONV:
            case LayerKind::MAXOUT:
                fill_glorot(tensor("A"), rng);
                // linear biases start at zero
                break;
            case LayerKind::MP:
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    if (have("w0"))
                        fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                if (have("alpha")) fill_normal(tensor("alpha"), 0.0, scheme.act_std, rng);
                break;
            case LayerKind::DEP:
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("M"), scheme.morph_mean, scheme.morph_std, rng);
                    if (have("w0"))
                        fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    if (have("m0"))
                        fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                if (have("lambda"))
                    for (double& v : tensor("lambda")) v = rng.uniform01();
                if (have("alpha")) fill_normal(tensor("alpha"), 0.0, scheme.act_std, rng);
                break;
            case LayerKind::MPM:
            case LayerKind::RMPM:
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                if (have("alpha")) fill_normal(tensor("alpha"), 0.0, scheme.act_std, rng);
                break;
            case LayerKind::MPM_SVD: {
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                if (have("sigma")) {
                    SvdResult f = sampled_frame(l.n_out, {l.n_out, l.n_out}, rng);
                    tensor("U") = std::move(f.U);
                    tensor("V") = std::move(f.V);
                    tensor("sigma") = std::move(f.sigma);
                }
                break;
            }
            case LayerKind::HYBRID_BLOCK:
                fill_glorot(tensor("A"), rng);
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                break;
            case LayerKind::MORPH_CONV_S1:
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                fill_normal(tensor("actK"), 0.0, scheme.conv_act_std, rng);
                break;
            case LayerKind::MORPH_CONV_S2: {
                if (!zero_layer) {
                    fill_normal(tensor("W"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("w0"), scheme.morph_mean, scheme.morph_std, rng);
                    fill_normal(tensor("m0"), scheme.morph_mean, scheme.morph_std, rng);
                }
                std::size_t n = l.out_ch;
                Tensor& u = tensor("act_U");
                Tensor& v = tensor("act_V");
                Tensor& s = tensor("act_sigma");
                std::vector<std::size_t> fan{n, n, 3, 3};
                for (std::size_t t = 0; t < 9; ++t) {
                    SvdResult f = sampled_frame(n, fan, rng);
                    for (std::size_t a = 0; a < n * n; ++a) {
                        u[t * n * n + a] = f.U[a];
                        v[t * n * n + a] = f.V[a];
                    }
                    for (std::size_t a = 0; a < n; ++a) s[t * n + a] = f.sigma[a];
                }
                break;
            }
            case LayerKind::RELU:
            case LayerKind::MAXPOOL:
            case LayerKind::FLATTEN:
                break;
        }
    }
    return params;
}

} // namespace morphnn
