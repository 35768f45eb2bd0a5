#include "morphnn/theory.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "morphnn/linalg.hpp"

namespace morphnn {

// ---------------------------------------------------------------------------
// Collapse
// ---------------------------------------------------------------------------

CollapsedLayer collapse_stack(const std::vector<MaxPlusLayer>& layers) {
    if (layers.size() < 2) throw ValueError("collapse_stack: need at least 2 layers");
    std::size_t top = layers.size() - 1;
    auto as_column = [](const Tensor& v) {
        return Tensor({v.size(), 1}, std::vector<double>(v.begin(), v.end()));
    };
    auto as_vector = [](const Tensor& m) {
        return Tensor::vector(std::vector<double>(m.begin(), m.end()));
    };

    // w_eq0 = w0^(L) v OR_k (W^(L) x ... x W^(L-k+1)) x w0^(L-k);
    // W_eq  = W^(L) x ... x W^(1)  (tropical products).
    Tensor prefix = layers[top].W;
    Tensor acc = layers[top].w0;
    for (std::size_t i = top; i-- > 0;) {
        Tensor term = as_vector(
            tropical_matmul(prefix, as_column(layers[i].w0), TropicalMode::MAX_PLUS));
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = std::max(acc[k], term[k]);
        prefix = tropical_matmul(prefix, layers[i].W, TropicalMode::MAX_PLUS);
    }
    return {std::move(prefix), std::move(acc)};
}

Tensor collapsed_forward(const CollapsedLayer& layer, const Tensor& x) {
    return tropical_vecmul(layer.W_eq, x, &layer.w_eq0, TropicalMode::MAX_PLUS).y;
}

Tensor stack_forward(const std::vector<MaxPlusLayer>& layers, const Tensor& x) {
    Tensor cur = x;
    for (const MaxPlusLayer& l : layers)
        cur = tropical_vecmul(l.W, cur, &l.w0, TropicalMode::MAX_PLUS).y;
    return cur;
}

// ---------------------------------------------------------------------------
// Random nets for the audits
// ---------------------------------------------------------------------------

BuiltNetwork random_mp_only_net(std::size_t d_in, std::size_t depth, std::size_t width,
                                std::size_t n_out, Rng& rng) {
    NetworkSpec spec;
    spec.input_shape = {d_in};
    spec.output_size = n_out;
    for (std::size_t i = 0; i < depth; ++i) {
        LayerSpec l;
        l.kind = LayerKind::MP;
        l.n_in = i == 0 ? d_in : width;
        l.n_out = i + 1 == depth ? n_out : width;
        l.mode = rng.bernoulli(0.5) ? TropicalMode::MAX_PLUS : TropicalMode::MIN_PLUS;
        l.is_output_layer = i + 1 == depth;
        spec.layers.push_back(l);
    }
    BuiltNetwork net{spec, ParamSet()};
    for (const ParamDef& d : param_defs(spec)) {
        Parameter p(d.id, Tensor(d.shape), d.role, d.trainable);
        for (double& v : p.value) v = rng.normal();
        net.params.add(std::move(p));
    }
    return net;
}

BuiltNetwork random_dep_net(std::size_t d_in, std::size_t depth, std::size_t width,
                            bool biased, Activation activation, Rng& rng) {
    NetworkSpec spec;
    spec.input_shape = {d_in};
    spec.output_size = 1;
    for (std::size_t i = 0; i < depth; ++i) {
        LayerSpec l;
        l.kind = LayerKind::DEP;
        l.n_in = i == 0 ? d_in : width;
        l.n_out = i + 1 == depth ? 1 : width;
        l.bias = biased;
        l.activation = activation;
        l.lambda_mode = LambdaMode::fixed_at(0.0); // placeholder, set per unit below
        l.is_output_layer = i + 1 == depth;
        spec.layers.push_back(l);
    }
    // Per-unit lambdas: use the learnable representation so each unit gets
    // its own fixed value for the audit.
    for (auto& l : spec.layers) l.lambda_mode = LambdaMode::learned();
    BuiltNetwork net{spec, ParamSet()};
    for (const ParamDef& d : param_defs(spec)) {
        Parameter p(d.id, Tensor(d.shape), d.role, d.trainable);
        if (d.role == ParamRole::Lambda) {
            for (double& v : p.value) v = rng.uniform01();
        } else if (d.role == ParamRole::Activation) {
            for (double& v : p.value) v = rng.normal(0.0, 1.0 / 3.46);
        } else {
            for (double& v : p.value) v = rng.normal();
        }
        net.params.add(std::move(p));
    }
    return net;
}

// ---------------------------------------------------------------------------
// Theorem audits
// ---------------------------------------------------------------------------

namespace {

struct SafePoint {
    Tensor x;
    ForwardPass pass;
};

// Forward at a random point, resampling while any tropical reduction is
// within tie range (the theorems hold a.e.; tie points have measure zero).
std::optional<SafePoint> sample_safe_point(const NetworkSpec& spec, const ParamSet& params,
                                           std::size_t d, Rng& rng, std::size_t& resampled) {
    const double tie_floor = 1e-9;
    for (int attempt = 0; attempt < 32; ++attempt) {
        Tensor x({1, d});
        for (double& v : x) v = rng.normal();
        ForwardPass pass = forward(spec, params, x);
        if (pass.tape.min_margin() > tie_floor)
            return SafePoint{std::move(x), std::move(pass)};
        ++resampled;
    }
    return std::nullopt;
}

bool layer_of(const std::string& param_id, std::size_t& layer) {
    if (param_id.empty() || param_id[0] != 'L') return false;
    std::size_t dot = param_id.find('.');
    if (dot == std::string::npos) return false;
    layer = static_cast<std::size_t>(std::stoul(param_id.substr(1, dot - 1)));
    return true;
}

} // namespace

AuditReport check_thm1(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng) {
    if (spec.output_size != 1) throw ValueError("check_thm1: single-output network required");
    AuditReport rep;
    std::size_t d = spec.input_shape.at(0);
    for (std::size_t t = 0; t < n_trials; ++t) {
        std::uint64_t seed_probe = rng.next_u64();
        Rng sampler(seed_probe);
        auto point = sample_safe_point(spec, params, d, sampler, rep.resampled_ties);
        if (!point) continue;
        ++rep.trials;
        GradMap grads = point->pass.tape.backward(point->pass.output_id,
                                                  Tensor({1, 1}, std::vector<double>{1.0}));
        const Tensor& g = grads.at(kInputGradId);
        double sum = 0.0;
        bool ok = true;
        for (double v : g) {
            if (v != 0.0 && v != 1.0) ok = false;
            sum += v;
        }
        if (sum != 0.0 && sum != 1.0) ok = false;
        rep.worst = std::max(rep.worst, sum);
        if (!ok && rep.violations++ == 0) rep.failing_seed = seed_probe;
    }
    return rep;
}

AuditReport check_thm2(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng) {
    AuditReport rep;
    std::size_t d = spec.input_shape.at(0);
    std::size_t m = spec.output_size;
    for (std::size_t t = 0; t < n_trials; ++t) {
        std::uint64_t seed_probe = rng.next_u64();
        Rng sampler(seed_probe);
        auto point = sample_safe_point(spec, params, d, sampler, rep.resampled_ties);
        if (!point) continue;
        ++rep.trials;
        const Tensor& x = point->x;
        // One backward per output; per layer, union the touched entries.
        std::map<std::size_t, std::set<std::string>> touched;
        for (std::size_t k = 0; k < m; ++k) {
            ForwardPass p = forward(spec, params, x);
            Tensor seed({1, m}, 0.0);
            seed[k] = 1.0;
            GradMap grads = p.tape.backward(p.output_id, seed);
            for (const auto& [id, g] : grads) {
                std::size_t layer;
                if (!layer_of(id, layer)) continue;
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (g[i] != 0.0)
                        touched[layer].insert(id + "#" + std::to_string(i));
            }
        }
        std::size_t worst_layer = 0;
        for (const auto& [layer, entries] : touched)
            worst_layer = std::max(worst_layer, entries.size());
        rep.worst = std::max(rep.worst, static_cast<double>(worst_layer));
        if (worst_layer > m && rep.violations++ == 0) rep.failing_seed = seed_probe;
    }
    return rep;
}

AuditReport check_thm3(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng) {
    if (spec.output_size != 1) throw ValueError("check_thm3: single-output network required");
    bool unbiased = true, identity = true;
    std::size_t sigmoid_layers = 0;
    for (const LayerSpec& l : spec.layers) {
        if (l.kind != LayerKind::DEP) throw ValueError("check_thm3: DEP-only network required");
        if (l.bias) unbiased = false;
        if (l.is_output_layer) continue;
        if (l.activation == Activation::Sigmoid) {
            ++sigmoid_layers;
            identity = false;
        } else if (l.activation != Activation::None) {
            throw ValueError("check_thm3: only identity or sigmoid activations are audited");
        }
    }
    // Sigmoid derivative peaks at 1/4, so L activated layers bound the norm
    // by (1/4)^L.
    double bound = identity ? 1.0 : std::pow(0.25, static_cast<double>(sigmoid_layers));
    const double tol = 1e-9;

    AuditReport rep;
    std::size_t d = spec.input_shape.at(0);
    for (std::size_t t = 0; t < n_trials; ++t) {
        std::uint64_t seed_probe = rng.next_u64();
        Rng sampler(seed_probe);
        auto point = sample_safe_point(spec, params, d, sampler, rep.resampled_ties);
        if (!point) continue;
        ++rep.trials;
        GradMap grads = point->pass.tape.backward(point->pass.output_id,
                                                  Tensor({1, 1}, std::vector<double>{1.0}));
        const Tensor& g = grads.at(kInputGradId);
        double l1 = 0.0;
        bool ok = true;
        for (double v : g) {
            if (v < 0.0) ok = false;
            l1 += std::abs(v);
        }
        if (l1 > bound + tol) ok = false;
        if (unbiased && identity && std::abs(l1 - 1.0) > tol) ok = false;
        rep.worst = std::max(rep.worst, l1);
        if (!ok && rep.violations++ == 0) rep.failing_seed = seed_probe;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Theorem 4 builders
// ---------------------------------------------------------------------------

namespace {

struct MpmStackBuilder {
    NetworkSpec spec;
    ParamSet params;

    // One MPM layer with shared bias w0 == m0 and explicit weights; alpha
    // defaults to ones (identity scaling).
    void add_layer(const Tensor& W, const Tensor& bias, const Tensor* alpha, bool output) {
        std::size_t li = spec.layers.size();
        LayerSpec l;
        l.kind = LayerKind::MPM;
        l.n_in = W.extent(1);
        l.n_out = W.extent(0);
        l.activation = Activation::Scale;
        l.is_output_layer = output;
        spec.layers.push_back(l);
        std::string prefix = "L" + std::to_string(li) + ".";
        params.add(Parameter(prefix + "W", W, ParamRole::TropicalShared));
        params.add(Parameter(prefix + "w0", bias, ParamRole::Bias));
        params.add(Parameter(prefix + "m0", bias, ParamRole::Bias));
        if (!output) {
            Tensor a({W.extent(0)}, 1.0);
            if (alpha) a = *alpha;
            params.add(Parameter(prefix + "alpha", std::move(a), ParamRole::Activation));
        }
    }

    BuiltNetwork finish(std::size_t d_in) {
        spec.input_shape = {d_in};
        spec.output_size = spec.layers.back().n_out;
        spec.validate();
        return {std::move(spec), std::move(params)};
    }
};

// Layer-1 routing: unit (t*d + i) extracts x_i for parallel block t and is
// scaled by that block's coefficient.
void emit_extraction_layer(MpmStackBuilder& b, const std::vector<const AffineTarget*>& targets,
                           std::size_t d, double C) {
    std::size_t T = targets.size();
    Tensor W({T * d, d}, 0.0);
    Tensor bias({T * d}, -C);
    Tensor alpha({T * d}, 1.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            W.at(t * d + i, i) = C;
            alpha[t * d + i] = targets[t]->a[i];
        }
    b.add_layer(W, bias, &alpha, false);
}

// Summation layer l (block width win -> win-1): the last two block entries
// are summed, the rest pass through.
void emit_sum_layer(MpmStackBuilder& b, std::size_t T, std::size_t win, double C) {
    std::size_t wout = win - 1;
    Tensor W({T * wout, T * win}, 0.0);
    Tensor bias({T * wout}, -C);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i + 1 < wout; ++i) {
            W.at(t * wout + i, t * win + i) = C;
            bias[t * wout + i] = -C;
        }
        std::size_t r = t * wout + (wout - 1);
        W.at(r, t * win + win - 2) = C;
        W.at(r, t * win + win - 1) = -C;
        bias[r] = 0.0;
    }
    b.add_layer(W, bias, nullptr, false);
}

} // namespace

BuiltNetwork build_affine_mpm(const AffineTarget& target) {
    std::size_t d = target.a.size();
    if (d == 0) throw ValueError("build_affine_mpm: empty coefficient vector");
    if (target.radius <= 0.0) throw ValueError("build_affine_mpm: radius must be positive");
    double maxa = 0.0;
    for (double v : target.a) maxa = std::max(maxa, std::abs(v));
    double C = (1.0 + maxa) * target.radius;

    MpmStackBuilder b;
    std::vector<const AffineTarget*> one{&target};
    emit_extraction_layer(b, one, d, C);
    for (std::size_t win = d; win >= 2; --win) emit_sum_layer(b, 1, win, C);
    // Bias layer: (0 v (x+b)) + (0 ^ (x+b)) = x + b exactly.
    Tensor Wb({1, 1}, std::vector<double>{target.b});
    Tensor zero({1}, 0.0);
    b.add_layer(Wb, zero, nullptr, true);
    return b.finish(d);
}

BuiltNetwork build_maxplusmin_mpm(const std::vector<AffineTarget>& maxes,
                                  const std::vector<AffineTarget>& mins, double radius) {
    if (maxes.empty() || mins.empty())
        throw ValueError("build_maxplusmin_mpm: need at least one target on each side");
    std::vector<const AffineTarget*> targets;
    for (const auto& t : maxes) targets.push_back(&t);
    for (const auto& t : mins) targets.push_back(&t);
    std::size_t d = targets[0]->a.size();
    double maxa = 0.0, maxb = 0.0;
    for (const AffineTarget* t : targets) {
        if (t->a.size() != d)
            throw ShapeError("build_maxplusmin_mpm: targets must share the input dimension");
        for (double v : t->a) maxa = std::max(maxa, std::abs(v));
        maxb = std::max(maxb, std::abs(t->b));
    }
    std::size_t T = targets.size();
    double C = (1.0 + static_cast<double>(T) * maxa) * radius + maxb + 1.0;

    MpmStackBuilder b;
    emit_extraction_layer(b, targets, d, C);
    for (std::size_t win = d; win >= 2; --win) emit_sum_layer(b, T, win, C);
    // Per-target bias layer.
    {
        Tensor W({T, T}, 0.0);
        Tensor bias({T}, -C);
        for (std::size_t t = 0; t < T; ++t) W.at(t, t) = targets[t]->b + C;
        b.add_layer(W, bias, nullptr, false);
    }
    // Combining layer: +C' routes the max targets, -C' the min targets.
    double Cp = (1.0 + static_cast<double>(T) * maxa) * radius + maxb + 1.0;
    {
        Tensor W({1, T}, 0.0);
        for (std::size_t k = 0; k < maxes.size(); ++k) W.at(0, k) = Cp;
        for (std::size_t k = maxes.size(); k < T; ++k) W.at(0, k) = -Cp;
        Tensor zero({1}, 0.0);
        b.add_layer(W, zero, nullptr, true);
    }
    return b.finish(d);
}

// ---------------------------------------------------------------------------
// Theorem 5 embeddings
// ---------------------------------------------------------------------------

namespace {

double vector_l1(const Tensor& v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
}

struct AffineRef {
    const Tensor* A;
    const Tensor* b; // may be null
};

std::vector<AffineRef> parse_relu_reference(const NetworkSpec& ref, const ParamSet& params) {
    std::vector<AffineRef> layers;
    for (std::size_t i = 0; i < ref.layers.size(); ++i) {
        const LayerSpec& l = ref.layers[i];
        if (l.kind == LayerKind::LINEAR) {
            std::string prefix = "L" + std::to_string(i) + ".";
            layers.push_back({&params.at(prefix + "A").value,
                              l.bias ? &params.at(prefix + "b").value : nullptr});
        } else if (l.kind != LayerKind::RELU) {
            throw ValueError("embed_relu_into_hybrid: reference must alternate LINEAR/RELU");
        }
    }
    if (layers.empty()) throw ValueError("embed_relu_into_hybrid: no linear layers found");
    return layers;
}

} // namespace

BuiltNetwork embed_relu_into_hybrid(const NetworkSpec& reference, const ParamSet& ref_params,
                                    double radius) {
    std::vector<AffineRef> ref = parse_relu_reference(reference, ref_params);
    NetworkSpec spec;
    ParamSet params;
    spec.input_shape = reference.input_shape;
    spec.output_size = reference.output_size;

    double norm_prod = 1.0;  // prod of ||A^i||_1 so far
    double bias_term = 0.0;  // sum_i (prod_{j>i} ||A^j||_1) ||b^i||_1
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const AffineRef& r = ref[i];
        std::size_t n_out = r.A->extent(0), n_in = r.A->extent(1);
        double an = matrix_l1_norm(*r.A);
        norm_prod *= an;
        bias_term = an * bias_term + (r.b ? vector_l1(*r.b) : 0.0);
        std::string prefix = "L" + std::to_string(spec.layers.size()) + ".";
        bool last = i + 1 == ref.size();
        if (last) {
            LayerSpec l;
            l.kind = LayerKind::LINEAR;
            l.n_in = n_in;
            l.n_out = n_out;
            l.bias = r.b != nullptr;
            l.is_output_layer = true;
            spec.layers.push_back(l);
            params.add(Parameter(prefix + "A", *r.A, ParamRole::LinearWeight));
            if (r.b) params.add(Parameter(prefix + "b", *r.b, ParamRole::Bias));
            break;
        }
        double C = norm_prod * radius + bias_term + 1.0;
        LayerSpec l;
        l.kind = LayerKind::HYBRID_BLOCK;
        l.n_in = n_in;
        l.n_out = n_out;
        l.n_mid = n_out;
        l.bias = r.b != nullptr;
        spec.layers.push_back(l);
        params.add(Parameter(prefix + "A", *r.A, ParamRole::LinearWeight));
        if (r.b) params.add(Parameter(prefix + "b", *r.b, ParamRole::Bias));
        Tensor W({n_out, n_out}, 0.0);
        for (std::size_t k = 0; k < n_out; ++k) W.at(k, k) = C;
        params.add(Parameter(prefix + "W", std::move(W), ParamRole::TropicalShared));
        params.add(Parameter(prefix + "w0", Tensor({n_out}, C), ParamRole::Bias));
        params.add(Parameter(prefix + "m0", Tensor({n_out}, -C), ParamRole::Bias));
    }
    spec.validate();
    return {std::move(spec), std::move(params)};
}

BuiltNetwork embed_maxout_into_hybrid(const NetworkSpec& reference, const ParamSet& ref_params,
                                      double radius) {
    NetworkSpec spec;
    ParamSet params;
    spec.input_shape = reference.input_shape;
    spec.output_size = reference.output_size;

    double norm_prod = 1.0; // prod of sum_p ||A_p||_1
    double bias_term = 0.0;
    for (std::size_t i = 0; i < reference.layers.size(); ++i) {
        const LayerSpec& rl = reference.layers[i];
        std::string rprefix = "L" + std::to_string(i) + ".";
        std::string prefix = "L" + std::to_string(spec.layers.size()) + ".";
        if (rl.kind == LayerKind::LINEAR) {
            if (!rl.is_output_layer)
                throw ValueError("embed_maxout_into_hybrid: LINEAR allowed only as output");
            LayerSpec l = rl;
            spec.layers.push_back(l);
            params.add(Parameter(prefix + "A", ref_params.at(rprefix + "A").value,
                                 ParamRole::LinearWeight));
            if (rl.bias)
                params.add(Parameter(prefix + "b", ref_params.at(rprefix + "b").value,
                                     ParamRole::Bias));
            continue;
        }
        if (rl.kind != LayerKind::MAXOUT)
            throw ValueError("embed_maxout_into_hybrid: reference must be MAXOUT layers "
                             "with a LINEAR output");
        std::size_t N = rl.n_out, P = rl.pool;
        const Tensor& A = ref_params.at(rprefix + "A").value; // [N*P x n_in]
        const Tensor* bvec = rl.bias ? &ref_params.at(rprefix + "b").value : nullptr;

        double piece_norms = 0.0, piece_bias = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            Tensor Ap({N, A.extent(1)});
            for (std::size_t r = 0; r < N; ++r)
                for (std::size_t c = 0; c < A.extent(1); ++c)
                    Ap.at(r, c) = A.at(p * N + r, c);
            piece_norms += matrix_l1_norm(Ap);
            if (bvec)
                for (std::size_t r = 0; r < N; ++r) piece_bias += std::abs((*bvec)[p * N + r]);
        }
        norm_prod *= piece_norms;
        bias_term = piece_norms * bias_term + piece_bias;
        double C = norm_prod * radius + bias_term + 1.0;

        LayerSpec l;
        l.kind = LayerKind::HYBRID_BLOCK;
        l.n_in = rl.n_in;
        l.n_mid = N * P;
        l.n_out = N;
        l.bias = rl.bias;
        spec.layers.push_back(l);
        params.add(Parameter(prefix + "A", A, ParamRole::LinearWeight));
        if (bvec) params.add(Parameter(prefix + "b", *bvec, ParamRole::Bias));
        // Pieces of unit i live at columns i + k*N; both biases sit at -C so
        // the max path returns the piece max + C and the min path -C.
        Tensor W({N, N * P}, 0.0);
        for (std::size_t r = 0; r < N; ++r)
            for (std::size_t k = 0; k < P; ++k) W.at(r, r + k * N) = C;
        params.add(Parameter(prefix + "W", std::move(W), ParamRole::TropicalShared));
        params.add(Parameter(prefix + "w0", Tensor({N}, -C), ParamRole::Bias));
        params.add(Parameter(prefix + "m0", Tensor({N}, -C), ParamRole::Bias));
    }
    spec.validate();
    return {std::move(spec), std::move(params)};
}

// ---------------------------------------------------------------------------
// Representation identity
// ---------------------------------------------------------------------------

ReprResult repr_identity_eval(const Tensor& alphas, const Tensor& x, double grid_step) {
    if (alphas.size() != x.size()) throw ShapeError("repr_identity_eval: size mismatch");
    if (grid_step <= 0.0) throw ValueError("repr_identity_eval: positive step required");
    double sum_alpha = 0.0;
    for (double a : alphas) {
        if (a < 0.0) throw ValueError("repr_identity_eval: weights must be nonnegative");
        sum_alpha += a;
    }
    if (sum_alpha > 1.0 + 1e-12)
        throw ValueError("repr_identity_eval: weights must sum to at most 1");

    // Zero weights contribute nothing (their erosion terms vanish).
    std::vector<double> a, xs;
    for (std::size_t i = 0; i < alphas.size(); ++i)
        if (alphas[i] > 0.0) {
            a.push_back(alphas[i]);
            xs.push_back(x[i]);
        }
    double exact = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) exact += a[i] * xs[i];

    bool sums_to_one = std::abs(sum_alpha - 1.0) <= 1e-12;
    std::size_t n_free = sums_to_one ? a.size() - 1 : a.size();
    ReprResult res{exact, exact, 0.0, Tensor()};
    if (n_free == 0) return res; // identity is immediate

    // Analytic optimum: r_i = x_i - exact makes every min-term equal.
    res.r_star = Tensor({n_free});
    for (std::size_t i = 0; i < n_free; ++i) res.r_star[i] = xs[i] - exact;

    // Last-term coefficient: alpha_i / alpha_n (sum = 1) or alpha_i / (1 - sum).
    double denom = sums_to_one ? a.back() : 1.0 - sum_alpha;
    double coeff_sum = 0.0;
    for (std::size_t i = 0; i < n_free; ++i) coeff_sum += a[i] / denom;
    double lipschitz = std::max(1.0, coeff_sum);
    res.gap_bound = lipschitz * grid_step / 2.0;

    auto objective = [&](const std::vector<double>& r) {
        double m = kPosInf;
        double carried = 0.0;
        for (std::size_t i = 0; i < n_free; ++i) {
            m = std::min(m, xs[i] - r[i]);
            carried += a[i] * r[i];
        }
        double last = sums_to_one ? xs.back() + carried / denom : carried / denom;
        return std::min(m, last);
    };

    // Step-aligned grid covering r* +- 2.
    std::vector<std::vector<double>> grids(n_free);
    for (std::size_t i = 0; i < n_free; ++i) {
        double lo = std::floor((res.r_star[i] - 2.0) / grid_step) * grid_step;
        double hi = res.r_star[i] + 2.0;
        for (double v = lo; v <= hi; v += grid_step) grids[i].push_back(v);
    }
    double best = kNegInf;
    std::vector<double> r(n_free, 0.0);
    std::function<void(std::size_t)> sweep = [&](std::size_t dim) {
        if (dim == n_free) {
            best = std::max(best, objective(r));
            return;
        }
        for (double v : grids[dim]) {
            r[dim] = v;
            sweep(dim + 1);
        }
    };
    sweep(0);
    res.approx = best;
    return res;
}

// ---------------------------------------------------------------------------
// Landscapes
// ---------------------------------------------------------------------------

Tensor landscape_grid(LandscapeRequest& req) {
    Parameter& p1 = req.params.at(req.param1);
    Parameter& p2 = req.params.at(req.param2);
    if (req.index1 >= p1.value.size() || req.index2 >= p2.value.size())
        throw ValueError("landscape: free-parameter index out of range");
    Tensor grid({req.n1, req.n2});
    for (std::size_t i = 0; i < req.n1; ++i) {
        double v1 = req.lo1 + (req.hi1 - req.lo1) * static_cast<double>(i) /
                                  static_cast<double>(req.n1 - 1);
        p1.value[req.index1] = v1;
        for (std::size_t j = 0; j < req.n2; ++j) {
            double v2 = req.lo2 + (req.hi2 - req.lo2) * static_cast<double>(j) /
                                      static_cast<double>(req.n2 - 1);
            p2.value[req.index2] = v2;
            ForwardPass pass = forward(req.spec, req.params, req.X);
            LossResult l = mse(pass.output(), req.y);
            grid.at(i, j) = l.loss;
        }
    }
    return grid;
}

std::string landscape_csv(const LandscapeRequest& req, const Tensor& grid) {
    std::ostringstream os;
    os.precision(12);
    os << "param1\\param2";
    for (std::size_t j = 0; j < req.n2; ++j)
        os << "," << req.lo2 + (req.hi2 - req.lo2) * static_cast<double>(j) /
                         static_cast<double>(req.n2 - 1);
    os << "\n";
    for (std::size_t i = 0; i < req.n1; ++i) {
        os << req.lo1 + (req.hi1 - req.lo1) * static_cast<double>(i) /
                  static_cast<double>(req.n1 - 1);
        for (std::size_t j = 0; j < req.n2; ++j) os << "," << grid.at(i, j);
        os << "\n";
    }
    return os.str();
}

std::size_t count_local_minima(const Tensor& grid) {
    // Weak minima: cells with no strictly lower 8-neighbor. Piecewise-linear
    // tropical surfaces produce flat valleys, so minima are counted as
    // 8-connected components of such cells rather than single points.
    std::size_t n1 = grid.extent(0), n2 = grid.extent(1);
    auto in_range = [&](long i, long j) {
        return i >= 0 && j >= 0 && i < static_cast<long>(n1) && j < static_cast<long>(n2);
    };
    std::vector<char> weak(n1 * n2, 0);
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t j = 0; j < n2; ++j) {
            bool ok = true;
            for (int di = -1; di <= 1 && ok; ++di)
                for (int dj = -1; dj <= 1 && ok; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    long ni = static_cast<long>(i) + di, nj = static_cast<long>(j) + dj;
                    if (in_range(ni, nj) && grid.at(ni, nj) < grid.at(i, j)) ok = false;
                }
            weak[i * n2 + j] = ok;
        }
    std::vector<char> visited(n1 * n2, 0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t j = 0; j < n2; ++j) {
            if (!weak[i * n2 + j] || visited[i * n2 + j]) continue;
            ++count;
            std::vector<std::pair<std::size_t, std::size_t>> stack{{i, j}};
            visited[i * n2 + j] = 1;
            while (!stack.empty()) {
                auto [ci, cj] = stack.back();
                stack.pop_back();
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        long ni = static_cast<long>(ci) + di, nj = static_cast<long>(cj) + dj;
                        if (!in_range(ni, nj)) continue;
                        std::size_t k = static_cast<std::size_t>(ni) * n2 +
                                        static_cast<std::size_t>(nj);
                        if (weak[k] && !visited[k]) {
                            visited[k] = 1;
                            stack.push_back({static_cast<std::size_t>(ni),
                                             static_cast<std::size_t>(nj)});
                        }
                    }
            }
        }
    return count;
}

LandscapeRequest landscape_mp_example() {
    LandscapeRequest req;
    LayerSpec l;
    l.kind = LayerKind::MP;
    l.n_in = 2;
    l.n_out = 1;
    l.bias = false;
    l.is_output_layer = true;
    req.spec.layers = {l};
    req.spec.input_shape = {2};
    req.spec.output_size = 1;
    req.params.add(Parameter("L0.W", Tensor({1, 2}, 0.0), ParamRole::TropicalMax));
    req.param1 = req.param2 = "L0.W";
    req.index1 = 0;
    req.index2 = 1;
    req.X = Tensor({3, 2}, {-1.7, 1.0, 5.0, -2.2, 1.0, 1.0});
    req.y = Tensor({3, 1}, {2.3, 3.7, 4.7});
    return req;
}

LandscapeRequest landscape_hybrid_example() {
    LandscapeRequest req;
    LayerSpec mp;
    mp.kind = LayerKind::MP;
    mp.n_in = 2;
    mp.n_out = 2;
    mp.bias = false;
    LayerSpec out;
    out.kind = LayerKind::LINEAR;
    out.n_in = 2;
    out.n_out = 1;
    out.bias = false;
    out.is_output_layer = true;
    req.spec.layers = {mp, out};
    req.spec.input_shape = {2};
    req.spec.output_size = 1;
    // w12 = w21 = 0 and the output weights fixed to 1; w11, w22 free.
    req.params.add(Parameter("L0.W", Tensor({2, 2}, 0.0), ParamRole::TropicalMax));
    Parameter a("L1.A", Tensor({1, 2}, 1.0), ParamRole::LinearWeight);
    a.trainable = false;
    req.params.add(std::move(a));
    req.param1 = req.param2 = "L0.W";
    req.index1 = 0; // W[0][0]
    req.index2 = 3; // W[1][1]
    req.X = Tensor({3, 2}, {1.2, -2.4, -3.36, 2.34, -2.1, -1.5});
    req.y = Tensor({3, 1}, {1.4, 2.16, 2.4});
    return req;
}

// ---------------------------------------------------------------------------
// Mean-shift study
// ---------------------------------------------------------------------------

MeanShiftResult mean_shift_run(MeanShiftModel model, std::size_t batch_size,
                               std::size_t epochs, double lr, std::uint64_t seed,
                               std::size_t d) {
    Rng rng(seed);
    ParamSet params;
    params.add(Parameter("w", Tensor({d}, 0.0),
                         model == MeanShiftModel::LINEAR ? ParamRole::LinearWeight
                                                         : ParamRole::TropicalMax));
    AdamConfig cfg;
    cfg.lr = lr;
    Adam adam(cfg);

    MeanShiftResult res;
    res.history = Tensor({std::max<std::size_t>(epochs, 1), d + 2});
    Tensor& w = params.at("w").value;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        Tensor& grad = params.at("w").grad;
        grad.fill(0.0);
        double inv_b = 1.0 / static_cast<double>(batch_size);
        for (std::size_t b = 0; b < batch_size; ++b) {
            std::vector<double> x(d);
            for (double& v : x) v = rng.normal();
            if (model == MeanShiftModel::LINEAR) {
                double target = 0.0, pred = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    target += 10.0 * x[i];
                    pred += w[i] * x[i];
                }
                double c = 2.0 * (pred - target) * inv_b;
                for (std::size_t i = 0; i < d; ++i) grad[i] += c * x[i];
            } else {
                double target = kNegInf, pred = kNegInf;
                std::size_t sel = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    target = std::max(target, x[i] + 10.0);
                    double cand = x[i] + w[i];
                    if (cand > pred) {
                        pred = cand;
                        sel = i;
                    }
                }
                grad[sel] += 2.0 * (pred - target) * inv_b;
            }
        }
        adam.step(params);
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += w[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (w[i] - mean) * (w[i] - mean);
        double sd = std::sqrt(var / static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i) res.history.at(epoch, i) = w[i];
        res.history.at(epoch, d) = mean;
        res.history.at(epoch, d + 1) = sd;
        res.final_mean = mean;
        res.final_std = sd;
    }
    return res;
}

std::string mean_shift_csv(const MeanShiftResult& r) {
    std::ostringstream os;
    os.precision(10);
    std::size_t d = r.history.extent(1) - 2;
    os << "epoch";
    for (std::size_t i = 0; i < d; ++i) os << ",w" << (i + 1);
    os << ",mean,std\n";
    for (std::size_t e = 0; e < r.history.extent(0); ++e) {
        os << (e + 1);
        for (std::size_t c = 0; c < d + 2; ++c) os << "," << r.history.at(e, c);
        os << "\n";
    }
    return os.str();
}

} // namespace morphnn
