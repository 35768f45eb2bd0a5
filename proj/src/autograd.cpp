#include "morphnn/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "morphnn/optim.hpp"
#include "morphnn/parallel.hpp"

namespace morphnn {

Parameter& ParamSet::add(Parameter p) {
    auto [it, inserted] = params_.emplace(p.id, std::move(p));
    if (!inserted) throw ValueError("duplicate parameter id: " + it->first);
    return it->second;
}

Parameter& ParamSet::at(const std::string& id) {
    auto it = params_.find(id);
    if (it == params_.end()) throw ValueError("missing parameter: " + id);
    return it->second;
}

const Parameter& ParamSet::at(const std::string& id) const {
    auto it = params_.find(id);
    if (it == params_.end()) throw ValueError("missing parameter: " + id);
    return it->second;
}

void ParamSet::zero_grads() {
    for (auto& [id, p] : params_) p.grad.fill(0.0);
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [id, p] : params_)
        if (p.trainable) n += p.value.size();
    return n;
}

const Tensor* Tape::param_value(const std::string& id) const {
    return id.empty() ? nullptr : &params_->at(id).value;
}

Tensor& Tape::grad_buffer(int id) {
    Tensor& g = node_grads_.at(id);
    if (g.size() == 0) g = Tensor(nodes_.at(id)->value.shape(), 0.0);
    return g;
}

Tensor& Tape::param_grad(const std::string& id, const std::vector<std::size_t>& shape) {
    auto it = grads_.find(id);
    if (it == grads_.end()) it = grads_.emplace(id, Tensor(shape, 0.0)).first;
    return it->second;
}

int Tape::push(std::unique_ptr<Node> node) {
    node->id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    return nodes_.back()->id;
}

double Tape::min_margin() const {
    double m = kPosInf;
    for (const auto& n : nodes_) m = std::min(m, n->margin());
    return m;
}

GradMap Tape::backward(int output_id, const Tensor& seed) {
    if (consumed_) throw StateError("tape already consumed by a previous backward");
    consumed_ = true;
    if (!seed.same_shape(nodes_.at(output_id)->value))
        throw ShapeError("backward: seed shape does not match output");
    node_grads_.assign(nodes_.size(), Tensor());
    node_grads_[output_id] = seed;
    for (int id = output_id; id >= 0; --id)
        if (node_grads_[id].size() > 0) nodes_[id]->backward(*this, node_grads_[id]);
    // Masked entries never contribute a gradient.
    for (auto& [id, g] : grads_) {
        if (id == kInputGradId || !params_->contains(id)) continue;
        const Parameter& p = params_->at(id);
        if (p.mask)
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (*p.mask)[i];
    }
    node_grads_.clear();
    return std::move(grads_);
}

namespace {

std::size_t feature_count(const Tensor& batched) {
    return batched.size() / batched.extent(0);
}

// ---------------------------------------------------------------------------
// Shared linear-convolution kernels (zero padding, grouped).
// ---------------------------------------------------------------------------

struct LinConvGeom {
    std::size_t ci, h, w, co, kh, kw, oh, ow, gi, go;
    int padding, stride, groups;
};

LinConvGeom lin_conv_geometry(const Tensor& X, const Tensor& K, int padding, int stride,
                              int groups) {
    if (X.rank() != 4 || K.rank() != 4) throw ShapeError("linear conv: need 4-d input and kernel");
    LinConvGeom g;
    g.ci = X.extent(1);
    g.h = X.extent(2);
    g.w = X.extent(3);
    g.co = K.extent(0);
    g.kh = K.extent(2);
    g.kw = K.extent(3);
    g.padding = padding;
    g.stride = stride;
    g.groups = groups;
    if (groups < 1 || g.ci % groups != 0 || g.co % groups != 0)
        throw ShapeError("linear conv: channels not divisible by groups");
    g.gi = g.ci / groups;
    g.go = g.co / groups;
    if (K.extent(1) != g.gi) throw ShapeError("linear conv: kernel channel extent mismatch");
    long ph = static_cast<long>(g.h) + 2 * padding - static_cast<long>(g.kh);
    long pw = static_cast<long>(g.w) + 2 * padding - static_cast<long>(g.kw);
    if (ph < 0 || pw < 0) throw ShapeError("linear conv: kernel larger than padded input");
    g.oh = static_cast<std::size_t>(ph / stride) + 1;
    g.ow = static_cast<std::size_t>(pw / stride) + 1;
    return g;
}

Tensor lin_conv_forward(const Tensor& X, const Tensor& K, const Tensor* bias,
                        const LinConvGeom& g) {
    std::size_t batch = X.extent(0);
    Tensor Y({batch, g.co, g.oh, g.ow});
    const double* bptr = bias ? bias->data() : nullptr;
    std::size_t in_plane = g.h * g.w, in_sample = g.ci * in_plane;
    std::size_t out_plane = g.oh * g.ow, out_sample = g.co * out_plane;
    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const double* xin = X.data() + b * in_sample;
            for (std::size_t co = 0; co < g.co; ++co) {
                std::size_t cbase = (co / g.go) * g.gi;
                const double* kbase = K.data() + co * g.gi * g.kh * g.kw;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        double acc = bptr ? bptr[co] : 0.0;
                        long iy0 = static_cast<long>(oy) * g.stride - g.padding;
                        long ix0 = static_cast<long>(ox) * g.stride - g.padding;
                        for (std::size_t c = 0; c < g.gi; ++c) {
                            const double* plane = xin + (cbase + c) * in_plane;
                            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                                long iy = iy0 + static_cast<long>(ky);
                                if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                    long ix = ix0 + static_cast<long>(kx);
                                    if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                    acc += plane[iy * g.w + ix] * kbase[(c * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        Y.data()[b * out_sample + (co * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
    });
    return Y;
}

void lin_conv_backward(const Tensor& X, const Tensor& K, const Tensor& G,
                       const LinConvGeom& g, Tensor* dX, Tensor* dK, Tensor* db) {
    std::size_t batch = X.extent(0);
    std::size_t in_plane = g.h * g.w, in_sample = g.ci * in_plane;
    std::size_t out_plane = g.oh * g.ow, out_sample = g.co * out_plane;
    if (dX) {
        parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b) {
                double* dxin = dX->data() + b * in_sample;
                for (std::size_t co = 0; co < g.co; ++co) {
                    std::size_t cbase = (co / g.go) * g.gi;
                    const double* kbase = K.data() + co * g.gi * g.kh * g.kw;
                    for (std::size_t oy = 0; oy < g.oh; ++oy) {
                        for (std::size_t ox = 0; ox < g.ow; ++ox) {
                            double gv = G.data()[b * out_sample + (co * g.oh + oy) * g.ow + ox];
                            if (gv == 0.0) continue;
                            long iy0 = static_cast<long>(oy) * g.stride - g.padding;
                            long ix0 = static_cast<long>(ox) * g.stride - g.padding;
                            for (std::size_t c = 0; c < g.gi; ++c) {
                                double* plane = dxin + (cbase + c) * in_plane;
                                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                                    long iy = iy0 + static_cast<long>(ky);
                                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                        long ix = ix0 + static_cast<long>(kx);
                                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                        plane[iy * g.w + ix] +=
                                            gv * kbase[(c * g.kh + ky) * g.kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    if (dK || db) {
        parallel_for(g.co, [&](std::size_t c0, std::size_t c1) {
            for (std::size_t co = c0; co < c1; ++co) {
                std::size_t cbase = (co / g.go) * g.gi;
                double* dkbase = dK ? dK->data() + co * g.gi * g.kh * g.kw : nullptr;
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* xin = X.data() + b * in_sample;
                    for (std::size_t oy = 0; oy < g.oh; ++oy) {
                        for (std::size_t ox = 0; ox < g.ow; ++ox) {
                            double gv = G.data()[b * out_sample + (co * g.oh + oy) * g.ow + ox];
                            if (gv == 0.0) continue;
                            if (db) (*db)[co] += gv;
                            if (!dkbase) continue;
                            long iy0 = static_cast<long>(oy) * g.stride - g.padding;
                            long ix0 = static_cast<long>(ox) * g.stride - g.padding;
                            for (std::size_t c = 0; c < g.gi; ++c) {
                                const double* plane = xin + (cbase + c) * in_plane;
                                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                                    long iy = iy0 + static_cast<long>(ky);
                                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                        long ix = ix0 + static_cast<long>(kx);
                                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                        dkbase[(c * g.kh + ky) * g.kw + kx] +=
                                            gv * plane[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Nodes
// ---------------------------------------------------------------------------

struct InputNode : Node {
    OpKind kind() const override { return OpKind::Input; }
    void backward(Tape& tape, const Tensor& g) const override {
        Tensor& gi = tape.param_grad(kInputGradId, value.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
};

struct AddNode : Node {
    OpKind kind() const override { return OpKind::Add; }
    void backward(Tape& tape, const Tensor& g) const override {
        for (int in : inputs) {
            Tensor& gi = tape.grad_buffer(in);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    }
};

struct ScaleNode : Node {
    std::string param;
    double base = 0.0, coeff = 1.0, factor = 1.0;

    OpKind kind() const override { return OpKind::Scale; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& x = tape.value(inputs[0]);
        std::size_t batch = x.extent(0), n = feature_count(x);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        if (param.empty()) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
            return;
        }
        const Tensor& p = *tape.param_value(param);
        Tensor& gp = tape.param_grad(param, p.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t k = b * n + i;
                gx[k] += (base + coeff * p[i]) * g[k];
                gp[i] += coeff * x[k] * g[k];
            }
        }
    }
};

struct LinearNode : Node {
    std::string a_id, b_id;
    Tensor a_const;

    const Tensor& weights(const Tape& tape) const {
        return a_id.empty() ? a_const : *tape.param_value(a_id);
    }
    OpKind kind() const override { return OpKind::Linear; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& A = weights(tape);
        const Tensor& x = tape.value(inputs[0]);
        std::size_t batch = x.extent(0), n = A.extent(1), m = A.extent(0);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t i = 0; i < m; ++i) {
                    double gv = g[b * m + i];
                    if (gv == 0.0) continue;
                    const double* arow = A.data() + i * n;
                    double* gxr = gx.data() + b * n;
                    for (std::size_t j = 0; j < n; ++j) gxr[j] += gv * arow[j];
                }
        });
        if (!a_id.empty()) {
            Tensor& ga = tape.param_grad(a_id, A.shape());
            parallel_for(m, [&](std::size_t i0, std::size_t i1) {
                for (std::size_t i = i0; i < i1; ++i) {
                    double* garow = ga.data() + i * n;
                    for (std::size_t b = 0; b < batch; ++b) {
                        double gv = g[b * m + i];
                        if (gv == 0.0) continue;
                        const double* xr = x.data() + b * n;
                        for (std::size_t j = 0; j < n; ++j) garow[j] += gv * xr[j];
                    }
                }
            });
        }
        if (!b_id.empty()) {
            Tensor& gb = tape.param_grad(b_id, {m});
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < m; ++i) gb[i] += g[b * m + i];
        }
    }
};

struct TropicalVecmulNode : Node {
    std::string w_id, bias_id;
    Tensor w_const;
    TropicalMode mode{};
    Tensor mask; // empty when no candidates are excluded
    std::vector<Selection> sel;
    double margin_ = kPosInf;

    double margin() const override { return margin_; }
    OpKind kind() const override { return OpKind::TropicalVecmul; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& W = w_id.empty() ? w_const : *tape.param_value(w_id);
        std::size_t batch = g.extent(0), m = W.extent(0);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        std::size_t n = W.extent(1);
        parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t i = 0; i < m; ++i) {
                    Selection s = sel[b * m + i];
                    if (s > 0) gx[b * n + (s - 1)] += g[b * m + i];
                }
        });
        Tensor* gw = w_id.empty() ? nullptr : &tape.param_grad(w_id, W.shape());
        Tensor* gb = bias_id.empty() ? nullptr : &tape.param_grad(bias_id, {m});
        if (!gw && !gb) return;
        parallel_for(m, [&](std::size_t i0, std::size_t i1) {
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t b = 0; b < batch; ++b) {
                    Selection s = sel[b * m + i];
                    double gv = g[b * m + i];
                    if (s == 0) {
                        if (gb) (*gb)[i] += gv;
                    } else if (gw) {
                        gw->data()[i * n + (s - 1)] += gv;
                    }
                }
        });
    }
};

struct TropicalConvNode : Node {
    std::string k_id, bias_id;
    Tensor k_const;
    TropicalMode mode{};
    int padding = 0, stride = 1;
    Tensor mask;
    std::vector<Selection> sel;
    double margin_ = kPosInf;

    double margin() const override { return margin_; }
    OpKind kind() const override { return OpKind::TropicalConv; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& K = k_id.empty() ? k_const : *tape.param_value(k_id);
        const Tensor& x = tape.value(inputs[0]);
        std::size_t batch = g.extent(0);
        std::size_t co = g.extent(1), oh = g.extent(2), ow = g.extent(3);
        std::size_t kh = K.extent(2), kw = K.extent(3);
        std::size_t h = x.extent(2), w = x.extent(3);
        std::size_t out_sample = co * oh * ow;
        Tensor& gx = tape.grad_buffer(inputs[0]);
        std::size_t in_plane = h * w, in_sample = x.extent(1) * in_plane;
        auto decode = [&](Selection s, std::size_t oy, std::size_t ox, std::size_t& ci,
                          long& iy, long& ix, std::size_t& ki) {
            ki = static_cast<std::size_t>(s - 1);
            std::size_t kx = ki % kw, ky = (ki / kw) % kh;
            ci = ki / (kh * kw);
            iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
            ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx);
        };
        parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t c = 0; c < co; ++c)
                    for (std::size_t oy = 0; oy < oh; ++oy)
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            std::size_t oi = b * out_sample + (c * oh + oy) * ow + ox;
                            Selection s = sel[oi];
                            if (s == 0) continue;
                            std::size_t ci, ki;
                            long iy, ix;
                            decode(s, oy, ox, ci, iy, ix, ki);
                            gx[b * in_sample + ci * in_plane + iy * w + ix] += g[oi];
                        }
        });
        Tensor* gk = k_id.empty() ? nullptr : &tape.param_grad(k_id, K.shape());
        Tensor* gb = bias_id.empty() ? nullptr : &tape.param_grad(bias_id, {co});
        if (!gk && !gb) return;
        std::size_t k_per_out = K.extent(1) * kh * kw;
        parallel_for(co, [&](std::size_t c0, std::size_t c1) {
            for (std::size_t c = c0; c < c1; ++c)
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t oy = 0; oy < oh; ++oy)
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            std::size_t oi = b * out_sample + (c * oh + oy) * ow + ox;
                            Selection s = sel[oi];
                            if (s == 0) {
                                if (gb) (*gb)[c] += g[oi];
                            } else if (gk) {
                                gk->data()[c * k_per_out + (s - 1)] += g[oi];
                            }
                        }
        });
    }
};

struct SoftTropicalNode : Node {
    std::string w_id, bias_id;
    TropicalMode mode{};
    double temperature = 1.0;

    OpKind kind() const override { return OpKind::SoftTropical; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& W = *tape.param_value(w_id);
        const Tensor& x = tape.value(inputs[0]);
        std::size_t batch = x.extent(0), n = W.extent(1), m = W.extent(0);
        double sign = mode == TropicalMode::MAX_PLUS ? 1.0 : -1.0;
        Tensor& gx = tape.grad_buffer(inputs[0]);
        Tensor& gw = tape.param_grad(w_id, W.shape());
        Tensor* gb = bias_id.empty() ? nullptr : &tape.param_grad(bias_id, {m});
        const Tensor* bias = bias_id.empty() ? nullptr : tape.param_value(bias_id);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < m; ++i) {
                double y = value[b * m + i];
                double gv = g[b * m + i];
                if (gv == 0.0) continue;
                if (gb && std::isfinite((*bias)[i]))
                    (*gb)[i] += gv * std::exp(sign * ((*bias)[i] - y) / temperature);
                for (std::size_t j = 0; j < n; ++j) {
                    double wv = W.data()[i * n + j];
                    if (!std::isfinite(wv)) continue;
                    double p = std::exp(sign * (x[b * n + j] + wv - y) / temperature);
                    gw.data()[i * n + j] += gv * p;
                    gx[b * n + j] += gv * p;
                }
            }
        }
    }
};

struct LinearConvNode : Node {
    std::string k_id, b_id;
    int padding = 0, stride = 1, groups = 1;

    OpKind kind() const override { return OpKind::LinearConv; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& K = *tape.param_value(k_id);
        const Tensor& x = tape.value(inputs[0]);
        LinConvGeom geom = lin_conv_geometry(x, K, padding, stride, groups);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        Tensor& gk = tape.param_grad(k_id, K.shape());
        Tensor* gb = b_id.empty() ? nullptr : &tape.param_grad(b_id, {K.extent(0)});
        lin_conv_backward(x, K, g, geom, &gx, &gk, gb);
    }
};

struct SvdConvNode : Node {
    std::string sigma_id, u_id, v_id;
    int padding = 0;
    Tensor materialized; // kernel assembled from U diag(sigma) V^T per tap

    OpKind kind() const override { return OpKind::SvdConv; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& x = tape.value(inputs[0]);
        LinConvGeom geom = lin_conv_geometry(x, materialized, padding, 1, 1);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        Tensor gk(materialized.shape(), 0.0);
        lin_conv_backward(x, materialized, g, geom, &gx, &gk, nullptr);
        const Tensor& U = *tape.param_value(u_id);
        const Tensor& V = *tape.param_value(v_id);
        const Tensor& sigma = *tape.param_value(sigma_id);
        Tensor& gs = tape.param_grad(sigma_id, sigma.shape());
        std::size_t n = U.extent(1);
        std::size_t kh = materialized.extent(2), kw = materialized.extent(3);
        std::size_t taps = kh * kw;
        // d(sigma_t[k]) = sum_ab U_t[a,k] dK[a,b,t] V_t[b,k]
        for (std::size_t t = 0; t < taps; ++t) {
            const double* u = U.data() + t * n * n;
            const double* v = V.data() + t * n * n;
            for (std::size_t k = 0; k < n; ++k) {
                double acc = 0.0;
                for (std::size_t a = 0; a < n; ++a) {
                    double ua = u[a * n + k];
                    if (ua == 0.0) continue;
                    for (std::size_t b = 0; b < n; ++b)
                        acc += ua * gk.data()[(a * n + b) * taps + t] * v[b * n + k];
                }
                gs[t * n + k] += acc;
            }
        }
    }
};

struct ReluNode : Node {
    OpKind kind() const override { return OpKind::Relu; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& x = tape.value(inputs[0]);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) gx[i] += g[i];
    }
};

struct SigmoidNode : Node {
    OpKind kind() const override { return OpKind::Sigmoid; }
    void backward(Tape& tape, const Tensor& g) const override {
        Tensor& gx = tape.grad_buffer(inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * value[i] * (1.0 - value[i]);
    }
};

struct ConcatNode : Node {
    OpKind kind() const override { return OpKind::Concat; }
    void backward(Tape& tape, const Tensor& g) const override {
        std::size_t batch = value.extent(0), total = feature_count(value);
        std::size_t offset = 0;
        for (int in : inputs) {
            Tensor& gi = tape.grad_buffer(in);
            std::size_t n = feature_count(gi);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t j = 0; j < n; ++j)
                    gi[b * n + j] += g[b * total + offset + j];
            offset += n;
        }
    }
};

struct ReshapeNode : Node {
    OpKind kind() const override { return OpKind::Reshape; }
    void backward(Tape& tape, const Tensor& g) const override {
        Tensor& gi = tape.grad_buffer(inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
};

struct ReduceSumNode : Node {
    OpKind kind() const override { return OpKind::ReduceSum; }
    void backward(Tape& tape, const Tensor& g) const override {
        Tensor& gi = tape.grad_buffer(inputs[0]);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[0];
    }
};

struct CrossEntropyNode : Node {
    std::vector<int> labels;
    Tensor probs; // cached softmax, [B x K]

    OpKind kind() const override { return OpKind::CrossEntropy; }
    void backward(Tape& tape, const Tensor& g) const override {
        Tensor& gx = tape.grad_buffer(inputs[0]);
        std::size_t batch = probs.extent(0), k = probs.extent(1);
        double inv_b = 1.0 / static_cast<double>(batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < k; ++j) {
                double onehot = (static_cast<std::size_t>(labels[b]) == j) ? 1.0 : 0.0;
                gx[b * k + j] += g[0] * (probs[b * k + j] - onehot) * inv_b;
            }
    }
};

struct MseNode : Node {
    Tensor target;

    OpKind kind() const override { return OpKind::Mse; }
    void backward(Tape& tape, const Tensor& g) const override {
        const Tensor& pred = tape.value(inputs[0]);
        Tensor& gx = tape.grad_buffer(inputs[0]);
        double inv_n = 1.0 / static_cast<double>(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i)
            gx[i] += g[0] * 2.0 * (pred[i] - target[i]) * inv_n;
    }
};

} // namespace

// ---------------------------------------------------------------------------
// Graph construction (eager forward)
// ---------------------------------------------------------------------------

int Tape::add_input(Tensor X) {
    if (X.rank() < 2) throw ShapeError("input must be batched: [B x features...]");
    if (!X.all_finite()) throw ValueError("input activations must be finite");
    auto n = std::make_unique<InputNode>();
    n->value = std::move(X);
    return push(std::move(n));
}

int Tape::add_add(int a, int b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) throw ShapeError("add: operand shapes differ");
    auto n = std::make_unique<AddNode>();
    n->inputs = {a, b};
    n->value = va;
    for (std::size_t i = 0; i < vb.size(); ++i) n->value[i] += vb[i];
    return push(std::move(n));
}

int Tape::add_scale(int x, const std::string& param, double base, double coeff,
                    double factor) {
    const Tensor& vx = value(x);
    auto n = std::make_unique<ScaleNode>();
    n->inputs = {x};
    n->param = param;
    n->base = base;
    n->coeff = coeff;
    n->factor = factor;
    n->value = vx;
    if (param.empty()) {
        for (double& v : n->value) v *= factor;
    } else {
        const Tensor& p = *param_value(param);
        std::size_t feats = feature_count(vx);
        if (p.size() != feats) throw ShapeError("scale: parameter length must match features");
        std::size_t batch = vx.extent(0);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < feats; ++i)
                n->value[b * feats + i] *= base + coeff * p[i];
    }
    return push(std::move(n));
}

namespace {

Tensor linear_forward(const Tensor& A, const Tensor* b, const Tensor& X) {
    if (A.rank() != 2 || X.rank() != 2 || X.extent(1) != A.extent(1))
        throw ShapeError("linear: shape mismatch " + shape_str(A.shape()) + " vs " +
                         shape_str(X.shape()));
    std::size_t batch = X.extent(0), n = A.extent(1), m = A.extent(0);
    Tensor Y({batch, m});
    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t bi = b0; bi < b1; ++bi) {
            const double* xr = X.data() + bi * n;
            double* yr = Y.data() + bi * m;
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = A.data() + i * n;
                double acc = b ? (*b)[i] : 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += arow[j] * xr[j];
                yr[i] = acc;
            }
        }
    });
    return Y;
}

} // namespace

int Tape::add_linear(int x, const std::string& A, const std::string& b) {
    auto n = std::make_unique<LinearNode>();
    n->inputs = {x};
    n->a_id = A;
    n->b_id = b;
    n->value = linear_forward(*param_value(A), b.empty() ? nullptr : param_value(b), value(x));
    return push(std::move(n));
}

int Tape::add_linear_const(int x, Tensor A) {
    auto n = std::make_unique<LinearNode>();
    n->inputs = {x};
    n->a_const = std::move(A);
    n->value = linear_forward(n->a_const, nullptr, value(x));
    return push(std::move(n));
}

int Tape::add_linear_conv(int x, const std::string& K, const std::string& b, int padding,
                          int stride, int groups) {
    auto n = std::make_unique<LinearConvNode>();
    n->inputs = {x};
    n->k_id = K;
    n->b_id = b;
    n->padding = padding;
    n->stride = stride;
    n->groups = groups;
    const Tensor& kern = *param_value(K);
    LinConvGeom geom = lin_conv_geometry(value(x), kern, padding, stride, groups);
    n->value = lin_conv_forward(value(x), kern, b.empty() ? nullptr : param_value(b), geom);
    return push(std::move(n));
}

int Tape::add_svd_conv(int x, const std::string& sigma, const std::string& u_frames,
                       const std::string& v_frames, int padding) {
    auto n = std::make_unique<SvdConvNode>();
    n->inputs = {x};
    n->sigma_id = sigma;
    n->u_id = u_frames;
    n->v_id = v_frames;
    n->padding = padding;
    const Tensor& U = *param_value(u_frames);
    const Tensor& V = *param_value(v_frames);
    const Tensor& s = *param_value(sigma);
    if (U.rank() != 3 || !U.same_shape(V) || s.extent(0) != U.extent(0) ||
        s.extent(1) != U.extent(1))
        throw ShapeError("svd conv: frame/sigma shape mismatch");
    std::size_t taps = U.extent(0), nch = U.extent(1);
    std::size_t kh = static_cast<std::size_t>(std::sqrt(static_cast<double>(taps)));
    if (kh * kh != taps) throw ShapeError("svd conv: taps must form a square kernel");
    // K[a,b,t] = sum_k U_t[a,k] sigma_t[k] V_t[b,k]
    Tensor K({nch, nch, kh, kh}, 0.0);
    for (std::size_t t = 0; t < taps; ++t) {
        const double* u = U.data() + t * nch * nch;
        const double* v = V.data() + t * nch * nch;
        for (std::size_t a = 0; a < nch; ++a)
            for (std::size_t b = 0; b < nch; ++b) {
                double acc = 0.0;
                for (std::size_t k = 0; k < nch; ++k)
                    acc += u[a * nch + k] * s[t * nch + k] * v[b * nch + k];
                K.data()[(a * nch + b) * taps + t] = acc;
            }
    }
    LinConvGeom geom = lin_conv_geometry(value(x), K, padding, 1, 1);
    n->value = lin_conv_forward(value(x), K, nullptr, geom);
    n->materialized = std::move(K);
    return push(std::move(n));
}

int Tape::add_tropical_vecmul(int x, const std::string& W, const std::string& bias,
                              TropicalMode mode, Tensor mask) {
    auto n = std::make_unique<TropicalVecmulNode>();
    n->inputs = {x};
    n->w_id = W;
    n->bias_id = bias;
    n->mode = mode;
    n->mask = std::move(mask);
    const Tensor& w = *param_value(W);
    check_tropical_weights(w, mode, "tropical_vecmul",
                           n->mask.size() ? n->mask.data() : nullptr);
    const Tensor* b = bias.empty() ? nullptr : param_value(bias);
    if (b) check_tropical_weights(*b, mode, "tropical_vecmul bias");
    tropical_vecmul_batch(w, n->mask.size() ? n->mask.data() : nullptr, value(x), b, mode,
                          n->value, n->sel, &n->margin_);
    return push(std::move(n));
}

int Tape::add_tropical_vecmul_const(int x, Tensor W, TropicalMode mode) {
    auto n = std::make_unique<TropicalVecmulNode>();
    n->inputs = {x};
    n->w_const = std::move(W);
    n->mode = mode;
    tropical_vecmul_batch(n->w_const, nullptr, value(x), nullptr, mode, n->value, n->sel,
                          &n->margin_);
    return push(std::move(n));
}

int Tape::add_tropical_conv(int x, const std::string& K, const std::string& bias,
                            TropicalMode mode, int padding, int stride, Tensor mask) {
    auto n = std::make_unique<TropicalConvNode>();
    n->inputs = {x};
    n->k_id = K;
    n->bias_id = bias;
    n->mode = mode;
    n->padding = padding;
    n->stride = stride;
    n->mask = std::move(mask);
    const Tensor& k = *param_value(K);
    check_tropical_weights(k, mode, "tropical_conv",
                           n->mask.size() ? n->mask.data() : nullptr);
    const Tensor* b = bias.empty() ? nullptr : param_value(bias);
    tropical_conv2d_batch(value(x), k, n->mask.size() ? n->mask.data() : nullptr, b, mode,
                          padding, stride, n->value, n->sel, &n->margin_);
    return push(std::move(n));
}

int Tape::add_tropical_conv_const(int x, Tensor K, TropicalMode mode, int padding,
                                  int stride) {
    auto n = std::make_unique<TropicalConvNode>();
    n->inputs = {x};
    n->k_const = std::move(K);
    n->mode = mode;
    n->padding = padding;
    n->stride = stride;
    tropical_conv2d_batch(value(x), n->k_const, nullptr, nullptr, mode, padding, stride,
                          n->value, n->sel, &n->margin_);
    return push(std::move(n));
}

int Tape::add_soft_tropical(int x, const std::string& W, const std::string& bias,
                            TropicalMode mode, double temperature) {
    auto n = std::make_unique<SoftTropicalNode>();
    n->inputs = {x};
    n->w_id = W;
    n->bias_id = bias;
    n->mode = mode;
    n->temperature = temperature;
    soft_tropical_vecmul_batch(*param_value(W), value(x),
                               bias.empty() ? nullptr : param_value(bias), mode, temperature,
                               n->value);
    return push(std::move(n));
}

int Tape::add_relu(int x) {
    auto n = std::make_unique<ReluNode>();
    n->inputs = {x};
    n->value = value(x);
    for (double& v : n->value) v = std::max(0.0, v);
    return push(std::move(n));
}

int Tape::add_sigmoid(int x) {
    auto n = std::make_unique<SigmoidNode>();
    n->inputs = {x};
    n->value = value(x);
    for (double& v : n->value) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(n));
}

int Tape::add_concat(const std::vector<int>& xs) {
    if (xs.empty()) throw ValueError("concat: no inputs");
    std::size_t batch = value(xs[0]).extent(0);
    std::size_t total = 0;
    for (int x : xs) {
        if (value(x).extent(0) != batch) throw ShapeError("concat: batch sizes differ");
        total += feature_count(value(x));
    }
    auto n = std::make_unique<ConcatNode>();
    n->inputs = xs;
    n->value = Tensor({batch, total});
    std::size_t offset = 0;
    for (int x : xs) {
        const Tensor& v = value(x);
        std::size_t feats = feature_count(v);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < feats; ++j)
                n->value[b * total + offset + j] = v[b * feats + j];
        offset += feats;
    }
    return push(std::move(n));
}

int Tape::add_reshape(int x, std::vector<std::size_t> feature_shape) {
    const Tensor& v = value(x);
    std::vector<std::size_t> shape{v.extent(0)};
    shape.insert(shape.end(), feature_shape.begin(), feature_shape.end());
    if (Tensor::count(shape) != v.size()) throw ShapeError("reshape: element count changed");
    auto n = std::make_unique<ReshapeNode>();
    n->inputs = {x};
    n->value = Tensor(shape, std::vector<double>(v.begin(), v.end()));
    return push(std::move(n));
}

int Tape::add_reduce_sum(int x) {
    auto n = std::make_unique<ReduceSumNode>();
    n->inputs = {x};
    double acc = 0.0;
    for (double v : value(x)) acc += v;
    n->value = Tensor({1}, std::vector<double>{acc});
    return push(std::move(n));
}

int Tape::add_cross_entropy(int logits, std::vector<int> labels) {
    auto n = std::make_unique<CrossEntropyNode>();
    n->inputs = {logits};
    n->labels = std::move(labels);
    auto [loss, probs] = softmax_cross_entropy(value(logits), n->labels);
    n->value = Tensor({1}, std::vector<double>{loss});
    n->probs = std::move(probs);
    return push(std::move(n));
}

int Tape::add_mse(int pred, Tensor target) {
    const Tensor& p = value(pred);
    if (!p.same_shape(target)) throw ShapeError("mse: prediction/target shapes differ");
    auto n = std::make_unique<MseNode>();
    n->inputs = {pred};
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double d = p[i] - target[i];
        acc += d * d;
    }
    n->value = Tensor({1}, std::vector<double>{acc / static_cast<double>(p.size())});
    n->target = std::move(target);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check_fn(const ForwardBuilder& builder, ParamSet& params, Tensor x,
                              double eps, double tolerance, Rng& rng, int max_retries) {
    double margin_floor = 10.0 * eps;
    std::vector<std::size_t> batched_shape{1};
    batched_shape.insert(batched_shape.end(), x.shape().begin(), x.shape().end());

    auto eval_scalar = [&](const Tensor& xv, double* margin) {
        Tape tape(&params);
        Tensor X(batched_shape, std::vector<double>(xv.begin(), xv.end()));
        int out = builder(tape, X);
        int s = tape.add_reduce_sum(out);
        if (margin) *margin = tape.min_margin();
        return tape.value(s)[0];
    };

    // Find a point safely away from every tropical tie.
    GradMap analytic;
    bool found = false;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        Tape tape(&params);
        Tensor X(batched_shape, std::vector<double>(x.begin(), x.end()));
        int out = builder(tape, X);
        int s = tape.add_reduce_sum(out);
        if (tape.min_margin() > margin_floor) {
            analytic = tape.backward(s, Tensor({1}, std::vector<double>{1.0}));
            found = true;
            break;
        }
        for (double& v : x) v += rng.uniform(-100.0 * eps, 100.0 * eps);
    }
    if (!found)
        throw DegeneratePointError("grad_check: tropical tie persists after " +
                                   std::to_string(max_retries) + " resamples");

    GradCheckReport report;
    auto compare = [&](double a, double n, const std::string& where) {
        double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
        if (err > report.max_rel_err) {
            report.max_rel_err = err;
            report.location = where;
        }
    };

    for (auto& [id, p] : params) {
        if (!p.trainable) continue;
        const Tensor* ga = nullptr;
        if (auto it = analytic.find(id); it != analytic.end()) ga = &it->second;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            double saved = p.value[i];
            p.value[i] = saved + eps;
            double fp = eval_scalar(x, nullptr);
            p.value[i] = saved - eps;
            double fm = eval_scalar(x, nullptr);
            p.value[i] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = ga ? (*ga)[i] : 0.0;
            compare(a, numeric, id + "[" + std::to_string(i) + "]");
        }
    }
    const Tensor* gi = nullptr;
    if (auto it = analytic.find(kInputGradId); it != analytic.end()) gi = &it->second;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double saved = x[i];
        x[i] = saved + eps;
        double fp = eval_scalar(x, nullptr);
        x[i] = saved - eps;
        double fm = eval_scalar(x, nullptr);
        x[i] = saved;
        double numeric = (fp - fm) / (2.0 * eps);
        double a = gi ? (*gi)[i] : 0.0;
        compare(a, numeric, std::string("input[") + std::to_string(i) + "]");
    }
    if (report.max_rel_err > tolerance && report.location.empty())
        report.location = "unknown";
    return report;
}

} // namespace morphnn
