#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "morphnn/autograd.hpp"
#include "morphnn/tensor.hpp"

namespace morphnn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Frozen parameters are untouched, masked
/// entries stay at their neutral value even if a gradient is forged, and
/// Lambda-role parameters are clamped back to [0,1] after each step.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update from the gradients accumulated in p.grad.
    /// Throws DivergenceError naming the parameter on NaN/Inf gradients.
    void step(ParamSet& params);

    long step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Moments {
        Tensor m, v;
    };
    AdamConfig cfg_;
    std::map<std::string, Moments> moments_;
    long step_ = 0;
};

/// Mean cross-entropy with stabilized softmax; also returns the softmax
/// probabilities for reuse in backward passes.
std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits,
                                                const std::vector<int>& labels);

struct LossResult {
    double loss;
    Tensor grad; // d loss / d prediction
};

/// Mean over the batch of -log softmax(logits)[label]; grad = (softmax - onehot)/B.
LossResult cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Mean squared error over all elements; grad = 2(pred - target)/N.
LossResult mse(const Tensor& pred, const Tensor& target);

/// Fraction of rows whose argmax matches the label; ties go to the lowest
/// class index.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

} // namespace morphnn
