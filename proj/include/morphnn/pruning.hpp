#pragma once

#include <map>
#include <string>
#include <vector>

#include "morphnn/data.hpp"
#include "morphnn/layers.hpp"

namespace morphnn {

/// Binary keep masks over the prunable parameters (morphological W and
/// linear A matrices; biases, activations, lambdas and frames are never
/// masked).
struct PruneMask {
    std::map<std::string, Tensor> masks;
};

bool is_prunable(const Parameter& p);

/// Per layer independently, masks the floor(ratio * count) smallest-|w|
/// entries; ties broken by index order.
PruneMask l1_masks(const ParamSet& params, double ratio);

/// SNIP connection sensitivity at initialization: s = |g (*) w| from the
/// training cross-entropy on the given batches (averaged), keeping the
/// global top keep_count entries across all prunable parameters.
PruneMask snip_masks(const NetworkSpec& spec, const ParamSet& params,
                     const std::vector<Batch>& batches, std::size_t keep_count);

/// Installs masks: masked linear entries are stored as 0, max-path-only
/// candidates as -inf and min-path-only as +inf; shared-weight candidates
/// keep their value and are excluded from both paths at evaluation time.
/// Gradients of masked entries are forced to zero from here on.
void apply_masks(ParamSet& params, const PruneMask& mask);

struct SparsityReport {
    struct Row {
        std::string id;
        std::size_t kept, total;
    };
    std::vector<Row> rows;
    std::size_t kept = 0, total = 0;

    std::string csv() const;
};

SparsityReport sparsity_report(const ParamSet& params);

} // namespace morphnn
