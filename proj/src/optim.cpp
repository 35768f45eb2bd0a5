#include "morphnn/optim.hpp"

#include <algorithm>
#include <cmath>

namespace morphnn {

void Adam::step(ParamSet& params) {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [id, p] : params) {
        if (!p.trainable) continue;
        auto it = moments_.find(id);
        if (it == moments_.end())
            it = moments_.emplace(id, Moments{Tensor(p.value.shape(), 0.0),
                                              Tensor(p.value.shape(), 0.0)}).first;
        Tensor& m = it->second.m;
        Tensor& v = it->second.v;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            if (p.mask && (*p.mask)[i] == 0.0) continue;
            double g = p.grad[i];
            if (!std::isfinite(g))
                throw DivergenceError("non-finite gradient in parameter " + id + "[" +
                                      std::to_string(i) + "] at step " +
                                      std::to_string(step_));
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        if (p.role == ParamRole::Lambda)
            for (double& x : p.value) x = std::clamp(x, 0.0, 1.0);
    }
}

std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits,
                                                const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B x K]");
    std::size_t batch = logits.extent(0), k = logits.extent(1);
    if (labels.size() != batch) throw ShapeError("cross_entropy: label count mismatch");
    Tensor probs({batch, k});
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k)
            throw ValueError("cross_entropy: label out of range: " + std::to_string(labels[b]));
        const double* row = logits.data() + b * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
        double log_denom = std::log(denom);
        for (std::size_t j = 0; j < k; ++j)
            probs.data()[b * k + j] = std::exp(row[j] - mx) / denom;
        loss += -(row[labels[b]] - mx - log_denom);
    }
    return {loss / static_cast<double>(batch), std::move(probs)};
}

LossResult cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    auto [loss, probs] = softmax_cross_entropy(logits, labels);
    std::size_t batch = logits.extent(0), k = logits.extent(1);
    Tensor grad({batch, k});
    double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < k; ++j) {
            double onehot = static_cast<std::size_t>(labels[b]) == j ? 1.0 : 0.0;
            grad.data()[b * k + j] = (probs.data()[b * k + j] - onehot) * inv_b;
        }
    return {loss, std::move(grad)};
}

LossResult mse(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) throw ShapeError("mse: shapes differ");
    double inv_n = 1.0 / static_cast<double>(pred.size());
    Tensor grad(pred.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d * inv_n;
    }
    return {loss * inv_n, std::move(grad)};
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("accuracy: logits must be [B x K]");
    std::size_t batch = logits.extent(0), k = logits.extent(1);
    if (labels.size() != batch) throw ShapeError("accuracy: label count mismatch");
    std::size_t hits = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = logits.data() + b * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        if (best == static_cast<std::size_t>(labels[b])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch);
}

} // namespace morphnn
