#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "morphnn/layers.hpp"
#include "morphnn/optim.hpp"
#include "morphnn/rng.hpp"

namespace morphnn {

// ---------------------------------------------------------------------------
// Tropical stack collapse
// ---------------------------------------------------------------------------

struct MaxPlusLayer {
    Tensor W;  // [n_out x n_in]
    Tensor w0; // [n_out]
};

/// Single biased max-plus layer equal to a whole stack on every input:
/// W_eq is the right-to-left tropical product, w_eq0 the supremum of the
/// bias propagation terms.
struct CollapsedLayer {
    Tensor W_eq;
    Tensor w_eq0;
};

CollapsedLayer collapse_stack(const std::vector<MaxPlusLayer>& layers);
Tensor collapsed_forward(const CollapsedLayer& layer, const Tensor& x);
Tensor stack_forward(const std::vector<MaxPlusLayer>& layers, const Tensor& x);

// ---------------------------------------------------------------------------
// Gradient-structure audits (executable theorem checks)
// ---------------------------------------------------------------------------

struct AuditReport {
    std::size_t trials = 0;
    std::size_t violations = 0;
    std::size_t resampled_ties = 0;
    double worst = 0.0;            // worst audited magnitude (context-dependent)
    std::uint64_t failing_seed = 0; // reproduces the first violation

    bool pass() const { return trials > 0 && violations == 0; }
};

struct BuiltNetwork {
    NetworkSpec spec;
    ParamSet params;
};

/// Random stack of biased max-plus / min-plus MP layers (mode drawn per
/// layer), weights standard normal.
BuiltNetwork random_mp_only_net(std::size_t d_in, std::size_t depth, std::size_t width,
                                std::size_t n_out, Rng& rng);

/// Random DEP-only stack with fixed per-unit lambdas in [0,1].
BuiltNetwork random_dep_net(std::size_t d_in, std::size_t depth, std::size_t width,
                            bool biased, Activation activation, Rng& rng);

/// For max-/min-plus-only nets with one output: the input gradient at a
/// non-tie point is 0 or a standard basis vector (entries in {0,1}, at most
/// one 1), checked bitwise.
AuditReport check_thm1(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng);

/// For the same family with m outputs: per layer, at most m weight/bias
/// entries carry nonzero gradient.
AuditReport check_thm2(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng);

/// For DEP-only nets: input gradient nonnegative with l1 norm <= 1
/// (== 1 for unbiased identity-activation nets; <= (1/4)^L for L
/// sigmoid-activated layers).
AuditReport check_thm3(const NetworkSpec& spec, const ParamSet& params, std::size_t n_trials,
                       Rng& rng);

// ---------------------------------------------------------------------------
// Universal-approximation constructions
// ---------------------------------------------------------------------------

struct AffineTarget {
    Tensor a;      // coefficients [d]
    double b = 0.0;
    double radius = 1.0; // l1 ball radius the construction is exact on
};

/// MPM stack computing a^T x + b exactly on the l1 ball of the target's
/// radius; d+1 layers, routing constant C = (1 + max|a_i|) * R.
BuiltNetwork build_affine_mpm(const AffineTarget& target);

/// MPM stack computing max_k(a_k^T x + b_k) + min_m(c_m^T x + d_m) exactly
/// on the ball: parallel affine builders merged by one +-C' routing layer.
BuiltNetwork build_maxplusmin_mpm(const std::vector<AffineTarget>& maxes,
                                  const std::vector<AffineTarget>& mins, double radius);

/// Replaces every ReLU of a reference MLP (LINEAR/RELU alternation) with a
/// morphological layer; exact on the l1 ball of radius R with per-layer
/// constants above the operator-norm bound.
BuiltNetwork embed_relu_into_hybrid(const NetworkSpec& reference, const ParamSet& ref_params,
                                    double radius);

/// Same for a maxout reference net (MAXOUT layers, LINEAR output): the
/// per-unit max over P pieces becomes one morphological layer.
BuiltNetwork embed_maxout_into_hybrid(const NetworkSpec& reference, const ParamSet& ref_params,
                                      double radius);

// ---------------------------------------------------------------------------
// Representation-theorem identities
// ---------------------------------------------------------------------------

struct ReprResult {
    double exact;      // sum_i alpha_i x_i
    double approx;     // max over the grid of the min-expression
    double gap_bound;  // a-priori |approx - exact| bound, linear in the step
    Tensor r_star;     // analytic optimum of the free variables
};

/// Evaluates the sup-min identity for nonnegative weights with sum <= 1 on
/// a finite grid (step-aligned, covering the analytic optimum +-2). The
/// sum-1 form divides by the last weight; the sum<1 form uses the biased
/// variant. Zero weights are dropped (their erosion terms vanish).
ReprResult repr_identity_eval(const Tensor& alphas, const Tensor& x, double grid_step);

// ---------------------------------------------------------------------------
// Loss-landscape grids and the mean-shift study
// ---------------------------------------------------------------------------

struct LandscapeRequest {
    NetworkSpec spec;
    ParamSet params;
    std::string param1, param2; // parameter ids
    std::size_t index1 = 0, index2 = 0;
    double lo1 = -10, hi1 = 10, lo2 = -10, hi2 = 10;
    std::size_t n1 = 64, n2 = 64;
    Tensor X; // [S x d]
    Tensor y; // [S x 1] regression targets (mean squared error)
};

/// Dense loss surface over the two free parameters; everything else frozen.
Tensor landscape_grid(LandscapeRequest& req);
std::string landscape_csv(const LandscapeRequest& req, const Tensor& grid);

/// Grid cells strictly below all existing neighbors (8-neighborhood).
std::size_t count_local_minima(const Tensor& grid);

/// The two Appendix-style example surfaces: a single unbiased max-plus MP,
/// and a 2-MP + fixed linear output hybrid with free diagonal weights.
LandscapeRequest landscape_mp_example();
LandscapeRequest landscape_hybrid_example();

enum class MeanShiftModel { LINEAR, MP };

struct MeanShiftResult {
    Tensor history; // [epochs x (d+2)]: w_1..w_d, mean, std
    double final_mean = 0.0;
    double final_std = 0.0;
};

/// Trains w (init 0) with online Adam on fresh standard-normal batches
/// against f(x) = sum_i 10 x_i (LINEAR) or g(x) = max_i(x_i + 10) (MP),
/// recording per-epoch weight statistics.
MeanShiftResult mean_shift_run(MeanShiftModel model, std::size_t batch_size,
                               std::size_t epochs, double lr, std::uint64_t seed,
                               std::size_t d = 10);
std::string mean_shift_csv(const MeanShiftResult& r);

} // namespace morphnn
