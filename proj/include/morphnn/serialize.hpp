#pragma once

#include <string>
#include <utility>

#include "morphnn/layers.hpp"

namespace morphnn {

/// Versioned JSON spec document; field names follow the LayerSpec fields.
std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

/// Checkpoint directory layout:
///   spec.json      - network spec
///   manifest.json  - id -> {offset, shape, dtype, role, trainable, mask_offset}
///   params.bin     - flat little-endian f64 blob (masks appended)
void save_checkpoint(const std::string& dir, const NetworkSpec& spec, const ParamSet& params);
std::pair<NetworkSpec, ParamSet> load_checkpoint(const std::string& dir);

} // namespace morphnn
