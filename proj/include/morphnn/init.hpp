#pragma once

#include <cstdint>

#include "morphnn/autograd.hpp"
#include "morphnn/layers.hpp"

namespace morphnn {

/// Distribution table for parameter materialization. Linear weights always
/// use Glorot uniform, learnable lambdas U([0,1]), Setting-2 frames come
/// from the SVD of a Glorot sample; the knobs below cover the rest.
struct InitScheme {
    double morph_mean = 0.0;  // morphological weights and biases
    double morph_std = 1.0;
    double act_std = 1.0 / 3.46; // per-unit scaling activations (zero mean)
    double conv_act_std = 1.0;   // Setting-1 activation conv kernels
    bool zero_first_morph_layer = false; // non-zero-mean inputs (MNIST family)
};

/// The scheme used for max-plus MP networks: weight mean -5/3, std 3.
InitScheme mp_init_scheme();

/// Materializes every parameter of the spec, deterministically in the seed.
ParamSet init_network(const NetworkSpec& spec, const InitScheme& scheme, std::uint64_t seed);

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)) for a weight shape
/// (matrices and conv kernels).
double glorot_limit(const std::vector<std::size_t>& shape);

} // namespace morphnn
