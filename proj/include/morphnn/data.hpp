#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "morphnn/rng.hpp"
#include "morphnn/tensor.hpp"

namespace morphnn {

/// Labeled image set; pixel values scaled into [0,1].
struct Dataset {
    Tensor images; // [N x 1 x H x W] (or [N x D] after flatten())
    std::vector<int> labels;
    std::string name;

    std::size_t size() const { return labels.size(); }
    Dataset subset(const std::vector<std::size_t>& indices) const;
    Dataset flattened() const; // [N x D]
};

/// Reads an IDX image/label pair (the distribution format of MNIST and
/// Fashion-MNIST). Gzip-compressed files are detected by their 1f 8b magic
/// and inflated transparently. Throws IoError on bad magic, truncation, or
/// an image/label count mismatch.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the dataset back to raw IDX; a load/write/load cycle is bitwise
/// stable.
void write_idx(const Dataset& ds, const std::string& images_path,
               const std::string& labels_path);

struct SplitPlan {
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
};

/// Seeded shuffle then partition; train size is floor(fraction * N).
std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitPlan& plan);

struct Batch {
    Tensor x; // [B x ...] matching the dataset layout
    std::vector<int> labels;
};

/// Batches with a per-epoch reshuffle drawn from a seed stream; the last
/// partial batch is kept.
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t shuffle_seed);

    void begin_epoch();
    std::optional<Batch> next();
    std::size_t batches_per_epoch() const;

private:
    const Dataset* ds_;
    std::size_t batch_size_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

enum class RegressionFn { SIN6, SQUARE, LIN20 };

/// f(x) for the Appendix-style regression targets: 6 sin(x), x^2, 20x.
double regression_target(RegressionFn fn, double x);

struct RegressionData {
    Tensor x; // [n x 1]
    Tensor y; // [n x 1]
};

/// x uniform on [lo, hi], y = f(x) + N(0, noise_std^2).
RegressionData synth_regression(RegressionFn fn, std::size_t n, double noise_std, double lo,
                                double hi, std::uint64_t seed);

} // namespace morphnn
