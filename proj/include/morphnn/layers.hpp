#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "morphnn/autograd.hpp"
#include "morphnn/rng.hpp"
#include "morphnn/tensor.hpp"

namespace morphnn {

enum class LayerKind {
    MP,            // biased max-plus (or min-plus) perceptron layer
    DEP,           // convex combination of dilation and erosion, separate weights
    MPM,           // sum of biased dilation and erosion with shared weights, scaled
    RMPM,          // MPM with identity residual
    MPM_SVD,       // MPM-style sum followed by fixed orthonormal frame, learnable diag
    LINEAR,        // dense affine map
    HYBRID_BLOCK,  // affine map followed by the shared-weight morphological sum
    MORPH_CONV_S1, // morphological conv block, depthwise 3x3 linear activation
    MORPH_CONV_S2, // morphological conv block, per-tap fixed-frame activation
    RELU,
    MAXOUT,        // P affine pieces, elementwise max
    LINEAR_CONV,   // dense 2-d convolution
    MAXPOOL,       // max pooling (max-plus conv with zero kernel, stride = window)
    FLATTEN,
};

enum class Activation { None, Scale, Svd, Sigmoid };

struct LambdaMode {
    bool learnable = true;
    double fixed = 0.5; // used when !learnable

    static LambdaMode learned() { return {true, 0.5}; }
    static LambdaMode fixed_at(double v) { return {false, v}; }
};

struct LayerSpec {
    LayerKind kind = LayerKind::LINEAR;
    std::size_t n_in = 0, n_out = 0;

    // Convolution / pooling geometry (channels-first).
    std::size_t in_ch = 0, out_ch = 0, kh = 0, kw = 0;
    int padding = 0, stride = 1;

    LambdaMode lambda_mode = LambdaMode::learned();
    Activation activation = Activation::None;
    bool residual = false;
    bool is_output_layer = false;
    double dropout_rate = 0.0;
    bool bias = true;              // w0/m0 for morphological, b for linear
    TropicalMode mode = TropicalMode::MAX_PLUS; // MP layers only
    std::size_t pool = 2;          // Maxout pieces P
    std::size_t n_mid = 0;         // HYBRID_BLOCK: affine output width (defaults to n_out)

    std::size_t hybrid_mid() const { return n_mid ? n_mid : n_out; }
};

/// Declarative description of a layer stack from which parameters are
/// materialized. Serializes to versioned JSON (see serialize.hpp).
struct NetworkSpec {
    std::vector<LayerSpec> layers;
    std::vector<std::size_t> input_shape; // {d} or {C, H, W}
    std::size_t output_size = 0;

    /// Checks shape chaining, the residual size constraint, and that exactly
    /// the last layer is flagged as output. Throws on violation.
    void validate() const;
};

/// Output feature shape of one layer given its input feature shape.
std::vector<std::size_t> layer_output_shape(const LayerSpec& layer,
                                            const std::vector<std::size_t>& in);

struct ParamDef {
    std::string id;
    std::vector<std::size_t> shape;
    ParamRole role;
    bool trainable;
};

/// Stable parameter ids are "L<i>.<name>" with names W, w0, m0, M, alpha,
/// sigma, U, V, lambda, A, b, actK, act_sigma, act_U, act_V.
std::vector<ParamDef> param_defs(const NetworkSpec& spec);

/// Learnable parameter count, computed from the spec arithmetic alone.
std::size_t count_trainable_params(const NetworkSpec& spec);

/// Independent Bernoulli(1 - rate) keep mask. Dropped tropical candidates
/// are replaced by the path's neutral element for one forward pass; no
/// rescaling happens at inference.
Tensor sample_dropout_mask(const std::vector<std::size_t>& shape, double rate, Rng& rng);

struct ForwardPass {
    Tape tape;
    int output_id;

    const Tensor& output() const { return tape.value(output_id); }
};

/// Records one forward pass of the whole stack over a batch X
/// ([B x d] or [B x C x H x W]). train_mode enables weight dropout, drawing
/// masks from rng; prune masks attached to parameters apply in any mode.
ForwardPass forward(const NetworkSpec& spec, const ParamSet& params, Tensor X,
                    bool train_mode = false, Rng* rng = nullptr);

/// grad_check specialization for a network spec (see autograd.hpp).
GradCheckReport grad_check(const NetworkSpec& spec, ParamSet& params, Tensor x, double eps,
                           double tolerance, Rng& rng);

// --- single-layer convenience forwards (thin wrappers over one-layer specs,
//     used by tests and the theory module) ---

Tensor mp_forward(const Tensor& x, const Tensor& W, const Tensor& w0,
                  TropicalMode mode = TropicalMode::MAX_PLUS);
Tensor dep_forward(const Tensor& x, const Tensor& W, const Tensor& M, const Tensor& lambda,
                   const Tensor* w0 = nullptr, const Tensor* m0 = nullptr);
Tensor mpm_forward(const Tensor& x, const Tensor& W, const Tensor& w0, const Tensor& m0,
                   const Tensor& alpha);

} // namespace morphnn
