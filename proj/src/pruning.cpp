#include "morphnn/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace morphnn {

bool is_prunable(const Parameter& p) {
    switch (p.role) {
        case ParamRole::LinearWeight:
        case ParamRole::TropicalShared:
        case ParamRole::TropicalMax:
        case ParamRole::TropicalMin:
            return true;
        default:
            return false;
    }
}

PruneMask l1_masks(const ParamSet& params, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0) throw ValueError("l1 pruning ratio must be in [0,1)");
    PruneMask out;
    for (const auto& [id, p] : params) {
        if (!is_prunable(p)) continue;
        std::size_t n = p.value.size();
        std::size_t kill = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
        Tensor mask(p.value.shape(), 1.0);
        if (kill > 0) {
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return std::abs(p.value[a]) < std::abs(p.value[b]);
            });
            for (std::size_t i = 0; i < kill; ++i) mask[order[i]] = 0.0;
        }
        out.masks.emplace(id, std::move(mask));
    }
    return out;
}

PruneMask snip_masks(const NetworkSpec& spec, const ParamSet& params,
                     const std::vector<Batch>& batches, std::size_t keep_count) {
    if (keep_count == 0) throw ValueError("snip: keep_count must be positive");
    if (batches.empty()) throw ValueError("snip: at least one batch required");

    std::map<std::string, Tensor> sensitivity;
    for (const auto& [id, p] : params)
        if (is_prunable(p)) sensitivity.emplace(id, Tensor(p.value.shape(), 0.0));

    std::size_t total = 0;
    for (const auto& [id, s] : sensitivity) total += s.size();
    if (keep_count > total)
        throw ValueError("snip: keep_count exceeds prunable parameter count");

    for (const Batch& b : batches) {
        Tensor x = b.x;
        if (spec.input_shape.size() == 1 && x.rank() != 2)
            x = Tensor({x.extent(0), x.size() / x.extent(0)},
                       std::vector<double>(x.begin(), x.end()));
        ForwardPass pass = forward(spec, params, std::move(x));
        int loss = pass.tape.add_cross_entropy(pass.output_id, b.labels);
        GradMap grads = pass.tape.backward(loss, Tensor({1}, std::vector<double>{1.0}));
        for (auto& [id, s] : sensitivity) {
            auto it = grads.find(id);
            if (it == grads.end()) continue;
            const Tensor& w = params.at(id).value;
            for (std::size_t i = 0; i < s.size(); ++i) s[i] += std::abs(it->second[i] * w[i]);
        }
    }
    double inv = 1.0 / static_cast<double>(batches.size());
    for (auto& [id, s] : sensitivity)
        for (double& v : s) v *= inv;

    // Global ranking; ties keep the earlier (parameter order, index) entry.
    struct Entry {
        double s;
        std::size_t param_idx, flat;
    };
    std::vector<Entry> entries;
    entries.reserve(total);
    std::vector<const std::string*> ids;
    std::size_t pi = 0;
    for (const auto& [id, s] : sensitivity) {
        ids.push_back(&id);
        for (std::size_t i = 0; i < s.size(); ++i) entries.push_back({s[i], pi, i});
        ++pi;
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.s != b.s) return a.s > b.s;
        if (a.param_idx != b.param_idx) return a.param_idx < b.param_idx;
        return a.flat < b.flat;
    });

    PruneMask out;
    for (const auto& [id, s] : sensitivity)
        out.masks.emplace(id, Tensor(s.shape(), 0.0));
    for (std::size_t i = 0; i < keep_count; ++i)
        out.masks.at(*ids[entries[i].param_idx])[entries[i].flat] = 1.0;
    return out;
}

void apply_masks(ParamSet& params, const PruneMask& mask) {
    for (const auto& [id, m] : mask.masks) {
        Parameter& p = params.at(id);
        if (!p.value.same_shape(m)) throw ShapeError("prune mask shape mismatch for " + id);
        p.mask = m;
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i] != 0.0) continue;
            switch (p.role) {
                case ParamRole::LinearWeight: p.value[i] = 0.0; break;
                case ParamRole::TropicalMax: p.value[i] = kNegInf; break;
                case ParamRole::TropicalMin: p.value[i] = kPosInf; break;
                default: break; // shared weights: per-path exclusion via the mask
            }
            p.grad[i] = 0.0;
        }
    }
}

std::string SparsityReport::csv() const {
    std::ostringstream os;
    os << "parameter,kept,total\n";
    for (const Row& r : rows) os << r.id << "," << r.kept << "," << r.total << "\n";
    os << "TOTAL," << kept << "," << total << "\n";
    return os.str();
}

SparsityReport sparsity_report(const ParamSet& params) {
    SparsityReport rep;
    for (const auto& [id, p] : params) {
        if (!is_prunable(p)) continue;
        std::size_t kept = p.value.size();
        if (p.mask) {
            kept = 0;
            for (double v : *p.mask)
                if (v != 0.0) ++kept;
        }
        rep.rows.push_back({id, kept, p.value.size()});
        rep.kept += kept;
        rep.total += p.value.size();
    }
    return rep;
}

} // namespace morphnn
