#pragma once

#include <cstdint>
#include <vector>

#include "morphnn/tensor.hpp"

namespace morphnn {

/// The two tropical semirings. Every MIN_PLUS result is the negation of the
/// MAX_PLUS result on negated operands.
enum class TropicalMode { MAX_PLUS, MIN_PLUS };

inline double tropical_neutral(TropicalMode mode) {
    return mode == TropicalMode::MAX_PLUS ? kNegInf : kPosInf;
}

inline TropicalMode dual_mode(TropicalMode mode) {
    return mode == TropicalMode::MAX_PLUS ? TropicalMode::MIN_PLUS : TropicalMode::MAX_PLUS;
}

/// Selection index of a tropical reduction: 0 picks the bias, j+1 picks
/// input j. Ties resolve to the lowest code, bias ranked before inputs,
/// so replay in backward is deterministic.
using Selection = std::int32_t;

struct VecmulResult {
    Tensor y;                    // [n_out]
    std::vector<Selection> arg;  // [n_out]
};

/// Biased tropical matrix-vector product:
///   MAX_PLUS: y_i = bias_i v max_j(x_j + W_ij), dually for MIN_PLUS.
/// W: [n_out x n_in], x: [n_in] finite, bias: optional [n_out].
/// A row with no finite candidate throws DegenerateRowError.
VecmulResult tropical_vecmul(const Tensor& W, const Tensor& x, const Tensor* bias,
                             TropicalMode mode);

/// Tropical matrix product: C_ij = max_k(A_ik + B_kj) (or min). Exact
/// associativity whenever the additions themselves are exact.
Tensor tropical_matmul(const Tensor& A, const Tensor& B, TropicalMode mode);

struct ConvResult {
    Tensor y;                    // [C_out x H' x W']
    std::vector<Selection> sel;  // one per output element; 0 = bias,
                                 // 1 + ((ci*kH + ky)*kW + kx) otherwise
};

/// Tropical 2-D convolution, channels-first. Padding cells hold the mode's
/// neutral element so they can never be selected. Output extent per axis is
/// floor((in + 2*padding - k) / stride) + 1.
ConvResult tropical_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                           TropicalMode mode, int padding, int stride = 1);

/// LogSumExp relaxation of tropical_vecmul:
///   MAX_PLUS: y_i = t * log sum_j exp((x_j + W_ij)/t), bias term included.
/// Converges to the hard op from above (MAX) / below (MIN) as t -> 0+;
/// the gap is bounded by t*log(#candidates).
Tensor soft_tropical_vecmul(const Tensor& W, const Tensor& x, const Tensor* bias,
                            TropicalMode mode, double temperature);

/// Soft counterpart of tropical_conv2d.
Tensor soft_tropical_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                            TropicalMode mode, int padding, double temperature,
                            int stride = 1);

// ---------------------------------------------------------------------------
// Batched kernels. X holds one sample per row; these are what the autograd
// nodes call. An optional 0/1 mask over W excludes candidates (weight dropout
// and pruning substitute the neutral element through it). margin_out, when
// given, receives the smallest (best - runner-up) gap across all reductions,
// for tie detection.
// ---------------------------------------------------------------------------

void tropical_vecmul_batch(const Tensor& W, const double* w_mask, const Tensor& X,
                           const Tensor* bias, TropicalMode mode, Tensor& Y,
                           std::vector<Selection>& args, double* margin_out = nullptr);

void tropical_conv2d_batch(const Tensor& X, const Tensor& kernel, const double* k_mask,
                           const Tensor* bias, TropicalMode mode, int padding, int stride,
                           Tensor& Y, std::vector<Selection>& sel,
                           double* margin_out = nullptr);

void soft_tropical_vecmul_batch(const Tensor& W, const Tensor& X, const Tensor* bias,
                                TropicalMode mode, double temperature, Tensor& Y);

/// Validates a weight tensor for the mode: entries in R united with the
/// mode's neutral element, never NaN. Entries excluded by the mask (0) are
/// not inspected; shared-weight layers use this to carry candidates removed
/// from both paths.
void check_tropical_weights(const Tensor& W, TropicalMode mode, const char* what,
                            const double* mask = nullptr);

} // namespace morphnn
