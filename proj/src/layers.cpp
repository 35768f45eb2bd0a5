#include "morphnn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace morphnn {

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, int padding, int stride) {
    long v = static_cast<long>(in) + 2 * padding - static_cast<long>(k);
    if (v < 0) throw ShapeError("conv layer: kernel larger than padded input");
    return static_cast<std::size_t>(v / stride) + 1;
}

std::string pid(std::size_t layer, const char* name) {
    return "L" + std::to_string(layer) + "." + name;
}

} // namespace

std::vector<std::size_t> layer_output_shape(const LayerSpec& layer,
                                            const std::vector<std::size_t>& in) {
    switch (layer.kind) {
        case LayerKind::RELU:
        case LayerKind::FLATTEN: {
            if (layer.kind == LayerKind::FLATTEN) {
                std::size_t n = 1;
                for (std::size_t e : in) n *= e;
                return {n};
            }
            return in;
        }
        case LayerKind::MAXPOOL:
        case LayerKind::LINEAR_CONV:
        case LayerKind::MORPH_CONV_S1:
        case LayerKind::MORPH_CONV_S2: {
            if (in.size() != 3) throw ShapeError("conv layer expects [C x H x W] input");
            std::size_t out_ch = layer.kind == LayerKind::MAXPOOL ? in[0] : layer.out_ch;
            std::size_t in_ch = layer.kind == LayerKind::MAXPOOL ? in[0] : layer.in_ch;
            if (in[0] != in_ch) throw ShapeError("conv layer: input channels mismatch");
            return {out_ch, conv_out(in[1], layer.kh, layer.padding, layer.stride),
                    conv_out(in[2], layer.kw, layer.padding, layer.stride)};
        }
        default: {
            if (in.size() != 1 || in[0] != layer.n_in)
                throw ShapeError("layer expects flat input of width " +
                                 std::to_string(layer.n_in) + ", got " + shape_str(in));
            return {layer.n_out};
        }
    }
}

void NetworkSpec::validate() const {
    if (layers.empty()) throw ValueError("network spec has no layers");
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        if (l.residual) {
            if (!(l.kind == LayerKind::RMPM || l.kind == LayerKind::MPM))
                throw ValueError("residual flag only applies to MPM-family layers");
            if (l.n_in != l.n_out)
                throw ShapeError("residual layer requires n_in == n_out");
            if (l.is_output_layer)
                throw ValueError("output layer cannot be residual");
        }
        if (l.kind == LayerKind::RMPM && !l.is_output_layer && l.n_in == l.n_out && !l.residual)
            throw ValueError("RMPM layer with matching sizes must set residual");
        if (l.is_output_layer != (i + 1 == layers.size()))
            throw ValueError("exactly the last layer must be flagged is_output_layer");
        if (l.dropout_rate < 0.0 || l.dropout_rate > 1.0)
            throw ValueError("dropout rate outside [0,1]");
        if (!l.lambda_mode.learnable &&
            (l.lambda_mode.fixed < 0.0 || l.lambda_mode.fixed > 1.0))
            throw ValueError("fixed lambda outside [0,1]");
        cur = layer_output_shape(l, cur);
    }
    if (cur.size() != 1 || cur[0] != output_size)
        throw ShapeError("network output " + shape_str(cur) + " does not match output_size " +
                         std::to_string(output_size));
}

std::vector<ParamDef> param_defs(const NetworkSpec& spec) {
    std::vector<ParamDef> defs;
    auto add = [&](std::size_t i, const char* name, std::vector<std::size_t> shape,
                   ParamRole role, bool trainable = true) {
        defs.push_back({pid(i, name), std::move(shape), role, trainable});
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        bool act = !l.is_output_layer;
        switch (l.kind) {
            case LayerKind::LINEAR:
                add(i, "A", {l.n_out, l.n_in}, ParamRole::LinearWeight);
                if (l.bias) add(i, "b", {l.n_out}, ParamRole::Bias);
                break;
            case LayerKind::LINEAR_CONV:
                add(i, "A", {l.out_ch, l.in_ch, l.kh, l.kw}, ParamRole::LinearWeight);
                if (l.bias) add(i, "b", {l.out_ch}, ParamRole::Bias);
                break;
            case LayerKind::MP:
                add(i, "W", {l.n_out, l.n_in}, ParamRole::TropicalMax);
                if (l.bias) add(i, "w0", {l.n_out}, ParamRole::Bias);
                if (l.activation == Activation::Scale && act)
                    add(i, "alpha", {l.n_out}, ParamRole::Activation);
                break;
            case LayerKind::DEP:
                add(i, "W", {l.n_out, l.n_in}, ParamRole::TropicalMax);
                add(i, "M", {l.n_out, l.n_in}, ParamRole::TropicalMin);
                if (l.bias) {
                    add(i, "w0", {l.n_out}, ParamRole::Bias);
                    add(i, "m0", {l.n_out}, ParamRole::Bias);
                }
                if (l.lambda_mode.learnable) add(i, "lambda", {l.n_out}, ParamRole::Lambda);
                if (l.activation == Activation::Scale && act)
                    add(i, "alpha", {l.n_out}, ParamRole::Activation);
                break;
            case LayerKind::MPM:
            case LayerKind::RMPM:
                add(i, "W", {l.n_out, l.n_in}, ParamRole::TropicalShared);
                add(i, "w0", {l.n_out}, ParamRole::Bias);
                add(i, "m0", {l.n_out}, ParamRole::Bias);
                if (act && l.activation == Activation::Scale)
                    add(i, "alpha", {l.n_out}, ParamRole::Activation);
                break;
            case LayerKind::MPM_SVD:
                add(i, "W", {l.n_out, l.n_in}, ParamRole::TropicalShared);
                add(i, "w0", {l.n_out}, ParamRole::Bias);
                add(i, "m0", {l.n_out}, ParamRole::Bias);
                if (act && l.activation == Activation::Svd) {
                    add(i, "sigma", {l.n_out}, ParamRole::Activation);
                    add(i, "U", {l.n_out, l.n_out}, ParamRole::Frame, false);
                    add(i, "V", {l.n_out, l.n_out}, ParamRole::Frame, false);
                }
                break;
            case LayerKind::HYBRID_BLOCK: {
                std::size_t mid = l.hybrid_mid();
                add(i, "A", {mid, l.n_in}, ParamRole::LinearWeight);
                if (l.bias) add(i, "b", {mid}, ParamRole::Bias);
                add(i, "W", {l.n_out, mid}, ParamRole::TropicalShared);
                add(i, "w0", {l.n_out}, ParamRole::Bias);
                add(i, "m0", {l.n_out}, ParamRole::Bias);
                break;
            }
            case LayerKind::MORPH_CONV_S1:
                add(i, "W", {l.out_ch, l.in_ch, l.kh, l.kw}, ParamRole::TropicalShared);
                add(i, "w0", {l.out_ch}, ParamRole::Bias);
                add(i, "m0", {l.out_ch}, ParamRole::Bias);
                add(i, "actK", {l.out_ch, 1, 3, 3}, ParamRole::Activation);
                break;
            case LayerKind::MORPH_CONV_S2:
                add(i, "W", {l.out_ch, l.in_ch, l.kh, l.kw}, ParamRole::TropicalShared);
                add(i, "w0", {l.out_ch}, ParamRole::Bias);
                add(i, "m0", {l.out_ch}, ParamRole::Bias);
                add(i, "act_sigma", {9, l.out_ch}, ParamRole::Activation);
                add(i, "act_U", {9, l.out_ch, l.out_ch}, ParamRole::Frame, false);
                add(i, "act_V", {9, l.out_ch, l.out_ch}, ParamRole::Frame, false);
                break;
            case LayerKind::MAXOUT:
                add(i, "A", {l.n_out * l.pool, l.n_in}, ParamRole::LinearWeight);
                if (l.bias) add(i, "b", {l.n_out * l.pool}, ParamRole::Bias);
                break;
            case LayerKind::RELU:
            case LayerKind::MAXPOOL:
            case LayerKind::FLATTEN:
                break;
        }
    }
    return defs;
}

std::size_t count_trainable_params(const NetworkSpec& spec) {
    std::size_t n = 0;
    for (const ParamDef& d : param_defs(spec))
        if (d.trainable) n += Tensor::count(d.shape);
    return n;
}

Tensor sample_dropout_mask(const std::vector<std::size_t>& shape, double rate, Rng& rng) {
    if (rate < 0.0 || rate > 1.0) throw ValueError("dropout rate outside [0,1]");
    Tensor mask(shape, 1.0);
    if (rate == 0.0) return mask;
    for (double& v : mask) v = rng.uniform01() < rate ? 0.0 : 1.0;
    return mask;
}

namespace {

// Effective candidate mask for a tropical weight tensor: prune mask from the
// parameter combined with a fresh dropout mask when training. Shared-weight
// layers additionally exclude non-finite entries from both paths (a removed
// candidate is the one representation valid for max and min alike).
Tensor candidate_mask(const ParamSet& params, const std::string& w_id, double dropout_rate,
                      bool train_mode, Rng* rng) {
    const Parameter& p = params.at(w_id);
    Tensor mask;
    auto ensure = [&] {
        if (mask.size() == 0) mask = Tensor(p.value.shape(), 1.0);
    };
    if (p.mask) mask = *p.mask;
    if (p.role == ParamRole::TropicalShared) {
        for (std::size_t i = 0; i < p.value.size(); ++i)
            if (!std::isfinite(p.value[i])) {
                ensure();
                mask[i] = 0.0;
            }
    }
    if (train_mode && dropout_rate > 0.0) {
        if (!rng) throw ValueError("training forward with dropout requires an rng");
        Tensor drop = sample_dropout_mask(p.value.shape(), dropout_rate, *rng);
        ensure();
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] *= drop[i];
    }
    return mask;
}

Tensor transpose(const Tensor& A) {
    Tensor T({A.extent(1), A.extent(0)});
    for (std::size_t i = 0; i < A.extent(0); ++i)
        for (std::size_t j = 0; j < A.extent(1); ++j) T.at(j, i) = A.at(i, j);
    return T;
}

// Depthwise max-pool expressed as a max-plus convolution whose kernel is 0
// on the own-channel window and -inf across channels.
Tensor pool_kernel(std::size_t channels, std::size_t kh, std::size_t kw) {
    Tensor k({channels, channels, kh, kw}, kNegInf);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < kh; ++y)
            for (std::size_t x = 0; x < kw; ++x)
                k.data()[((c * channels + c) * kh + y) * kw + x] = 0.0;
    return k;
}

// Maxout piece selector: out i = max over its P stacked pre-activations.
Tensor maxout_selector(std::size_t n_out, std::size_t pieces) {
    Tensor w({n_out, n_out * pieces}, kNegInf);
    for (std::size_t i = 0; i < n_out; ++i)
        for (std::size_t k = 0; k < pieces; ++k) w.at(i, i + k * n_out) = 0.0;
    return w;
}

int emit_layer(Tape& tape, const NetworkSpec& spec, std::size_t li, const ParamSet& params,
               int x, bool train_mode, Rng* rng) {
    const LayerSpec& l = spec.layers[li];
    bool act = !l.is_output_layer;
    switch (l.kind) {
        case LayerKind::LINEAR:
        case LayerKind::LINEAR_CONV: {
            std::string b = l.bias ? pid(li, "b") : "";
            if (l.kind == LayerKind::LINEAR) return tape.add_linear(x, pid(li, "A"), b);
            return tape.add_linear_conv(x, pid(li, "A"), b, l.padding, l.stride, 1);
        }
        case LayerKind::RELU:
            return tape.add_relu(x);
        case LayerKind::FLATTEN: {
            const Tensor& v = tape.value(x);
            std::size_t feats = v.size() / v.extent(0);
            return tape.add_reshape(x, {feats});
        }
        case LayerKind::MAXPOOL: {
            std::size_t c = tape.value(x).extent(1);
            return tape.add_tropical_conv_const(x, pool_kernel(c, l.kh, l.kw),
                                                TropicalMode::MAX_PLUS, l.padding, l.stride);
        }
        case LayerKind::MP: {
            Tensor mask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            int y = tape.add_tropical_vecmul(x, pid(li, "W"), l.bias ? pid(li, "w0") : "",
                                             l.mode, std::move(mask));
            if (l.activation == Activation::Scale && act)
                y = tape.add_scale(y, pid(li, "alpha"), 0.0, 1.0);
            return y;
        }
        case LayerKind::DEP: {
            Tensor wmask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            Tensor mmask = candidate_mask(params, pid(li, "M"), l.dropout_rate, train_mode, rng);
            int mx = tape.add_tropical_vecmul(x, pid(li, "W"), l.bias ? pid(li, "w0") : "",
                                              TropicalMode::MAX_PLUS, std::move(wmask));
            int mn = tape.add_tropical_vecmul(x, pid(li, "M"), l.bias ? pid(li, "m0") : "",
                                              TropicalMode::MIN_PLUS, std::move(mmask));
            int y;
            if (l.lambda_mode.learnable) {
                int a = tape.add_scale(mx, pid(li, "lambda"), 0.0, 1.0);
                int b = tape.add_scale(mn, pid(li, "lambda"), 1.0, -1.0);
                y = tape.add_add(a, b);
            } else {
                int a = tape.add_scale(mx, "", 0.0, 0.0, l.lambda_mode.fixed);
                int b = tape.add_scale(mn, "", 0.0, 0.0, 1.0 - l.lambda_mode.fixed);
                y = tape.add_add(a, b);
            }
            if (l.activation == Activation::Scale && act)
                y = tape.add_scale(y, pid(li, "alpha"), 0.0, 1.0);
            else if (l.activation == Activation::Sigmoid && act)
                y = tape.add_sigmoid(y);
            return y;
        }
        case LayerKind::MPM:
        case LayerKind::RMPM: {
            Tensor mask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            int mx = tape.add_tropical_vecmul(x, pid(li, "W"), pid(li, "w0"),
                                              TropicalMode::MAX_PLUS, mask);
            int mn = tape.add_tropical_vecmul(x, pid(li, "W"), pid(li, "m0"),
                                              TropicalMode::MIN_PLUS, std::move(mask));
            int y = tape.add_add(mx, mn);
            if (act && l.activation == Activation::Scale)
                y = tape.add_scale(y, pid(li, "alpha"), 0.0, 1.0);
            if (l.residual) y = tape.add_add(y, x);
            return y;
        }
        case LayerKind::MPM_SVD: {
            Tensor mask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            int mx = tape.add_tropical_vecmul(x, pid(li, "W"), pid(li, "w0"),
                                              TropicalMode::MAX_PLUS, mask);
            int mn = tape.add_tropical_vecmul(x, pid(li, "W"), pid(li, "m0"),
                                              TropicalMode::MIN_PLUS, std::move(mask));
            int y = tape.add_add(mx, mn);
            if (act && l.activation == Activation::Svd) {
                y = tape.add_linear_const(y, transpose(params.at(pid(li, "V")).value));
                y = tape.add_scale(y, pid(li, "sigma"), 0.0, 1.0);
                y = tape.add_linear_const(y, params.at(pid(li, "U")).value);
            }
            return y;
        }
        case LayerKind::HYBRID_BLOCK: {
            int lin = tape.add_linear(x, pid(li, "A"), l.bias ? pid(li, "b") : "");
            Tensor mask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            int mx = tape.add_tropical_vecmul(lin, pid(li, "W"), pid(li, "w0"),
                                              TropicalMode::MAX_PLUS, mask);
            int mn = tape.add_tropical_vecmul(lin, pid(li, "W"), pid(li, "m0"),
                                              TropicalMode::MIN_PLUS, std::move(mask));
            return tape.add_add(mx, mn);
        }
        case LayerKind::MORPH_CONV_S1:
        case LayerKind::MORPH_CONV_S2: {
            Tensor mask = candidate_mask(params, pid(li, "W"), l.dropout_rate, train_mode, rng);
            int mx = tape.add_tropical_conv(x, pid(li, "W"), pid(li, "w0"),
                                            TropicalMode::MAX_PLUS, l.padding, l.stride, mask);
            int mn = tape.add_tropical_conv(x, pid(li, "W"), pid(li, "m0"),
                                            TropicalMode::MIN_PLUS, l.padding, l.stride,
                                            std::move(mask));
            int y = tape.add_add(mx, mn);
            if (!act) return y;
            if (l.kind == LayerKind::MORPH_CONV_S1)
                return tape.add_linear_conv(y, pid(li, "actK"), "", 1, 1,
                                            static_cast<int>(l.out_ch));
            return tape.add_svd_conv(y, pid(li, "act_sigma"), pid(li, "act_U"),
                                     pid(li, "act_V"), 1);
        }
        case LayerKind::MAXOUT: {
            int lin = tape.add_linear(x, pid(li, "A"), l.bias ? pid(li, "b") : "");
            return tape.add_tropical_vecmul_const(lin, maxout_selector(l.n_out, l.pool),
                                                  TropicalMode::MAX_PLUS);
        }
    }
    throw ValueError("unknown layer kind");
}

} // namespace

ForwardPass forward(const NetworkSpec& spec, const ParamSet& params, Tensor X,
                    bool train_mode, Rng* rng) {
    for (const ParamDef& d : param_defs(spec)) {
        const Parameter& p = params.at(d.id); // throws on missing parameter
        if (p.value.shape() != d.shape)
            throw ShapeError("parameter " + d.id + " has shape " + shape_str(p.value.shape()) +
                             ", spec expects " + shape_str(d.shape));
    }
    std::vector<std::size_t> expect{X.extent(0)};
    expect.insert(expect.end(), spec.input_shape.begin(), spec.input_shape.end());
    require_shape(X, expect, "network input");

    ForwardPass pass{Tape(&params), -1};
    int x = pass.tape.add_input(std::move(X));
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        x = emit_layer(pass.tape, spec, i, params, x, train_mode, rng);
    pass.output_id = x;
    return pass;
}

GradCheckReport grad_check(const NetworkSpec& spec, ParamSet& params, Tensor x, double eps,
                           double tolerance, Rng& rng) {
    ForwardBuilder builder = [&spec, &params](Tape& tape, const Tensor& X) {
        // Rebuild on the caller's tape against the same parameter set.
        int in = tape.add_input(X);
        int cur = in;
        for (std::size_t i = 0; i < spec.layers.size(); ++i)
            cur = emit_layer(tape, spec, i, params, cur, false, nullptr);
        return cur;
    };
    return grad_check_fn(builder, params, std::move(x), eps, tolerance, rng);
}

// ---------------------------------------------------------------------------
// Single-layer convenience forwards
// ---------------------------------------------------------------------------

Tensor mp_forward(const Tensor& x, const Tensor& W, const Tensor& w0, TropicalMode mode) {
    return tropical_vecmul(W, x, &w0, mode).y;
}

Tensor dep_forward(const Tensor& x, const Tensor& W, const Tensor& M, const Tensor& lambda,
                   const Tensor* w0, const Tensor* m0) {
    for (double l : lambda)
        if (l < 0.0 || l > 1.0) throw ValueError("dep_forward: lambda outside [0,1]");
    Tensor mx = tropical_vecmul(W, x, w0, TropicalMode::MAX_PLUS).y;
    Tensor mn = tropical_vecmul(M, x, m0, TropicalMode::MIN_PLUS).y;
    Tensor y({mx.size()});
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = lambda[i] * mx[i] + (1.0 - lambda[i]) * mn[i];
    return y;
}

Tensor mpm_forward(const Tensor& x, const Tensor& W, const Tensor& w0, const Tensor& m0,
                   const Tensor& alpha) {
    Tensor mx = tropical_vecmul(W, x, &w0, TropicalMode::MAX_PLUS).y;
    Tensor mn = tropical_vecmul(W, x, &m0, TropicalMode::MIN_PLUS).y;
    Tensor y({mx.size()});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha[i] * (mx[i] + mn[i]);
    return y;
}

} // namespace morphnn
