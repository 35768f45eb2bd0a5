#include "morphnn/tropical.hpp"

#include <cmath>

#include "morphnn/parallel.hpp"

namespace morphnn {

Tensor tropical_identity(std::size_t n, double off_diagonal) {
    Tensor t({n, n}, off_diagonal);
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 0.0;
    return t;
}

void check_tropical_weights(const Tensor& W, TropicalMode mode, const char* what,
                            const double* mask) {
    double bad = mode == TropicalMode::MAX_PLUS ? kPosInf : kNegInf;
    for (std::size_t i = 0; i < W.size(); ++i) {
        if (mask && mask[i] == 0.0) continue;
        double v = W[i];
        if (std::isnan(v))
            throw ValueError(std::string(what) + ": NaN in tropical weights");
        if (v == bad)
            throw ValueError(std::string(what) + ": weight holds the opposite mode's infinity");
    }
}

namespace {

template <bool kMax>
inline bool better(double a, double b) {
    if constexpr (kMax)
        return a > b;
    else
        return a < b;
}

// Core reduction over one row of candidates; bias is candidate 0.
template <bool kMax>
inline void reduce_row(const double* w, const double* x, std::size_t n, const double* mask,
                       double bias, bool has_bias, double& best, Selection& arg,
                       double& second) {
    best = has_bias ? bias : (kMax ? kNegInf : kPosInf);
    second = kMax ? kNegInf : kPosInf;
    arg = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (mask && mask[j] == 0.0) continue;
        double cand = x[j] + w[j];
        if (better<kMax>(cand, best)) {
            second = best;
            best = cand;
            arg = static_cast<Selection>(j + 1);
        } else if (better<kMax>(cand, second)) {
            second = cand;
        }
    }
}

template <bool kMax>
void vecmul_batch_impl(const Tensor& W, const double* w_mask, const Tensor& X,
                       const Tensor* bias, Tensor& Y, std::vector<Selection>& args,
                       double* margin_out) {
    std::size_t n_out = W.extent(0), n_in = W.extent(1);
    std::size_t batch = X.extent(0);
    Y = Tensor({batch, n_out});
    args.assign(batch * n_out, 0);
    const double* bptr = bias ? bias->data() : nullptr;
    std::vector<double> margins(batch, kPosInf);

    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const double* x = X.data() + b * n_in;
            double* y = Y.data() + b * n_out;
            Selection* arg = args.data() + b * n_out;
            double min_margin = kPosInf;
            for (std::size_t i = 0; i < n_out; ++i) {
                double best, second;
                reduce_row<kMax>(W.data() + i * n_in, x, n_in,
                                 w_mask ? w_mask + i * n_in : nullptr,
                                 bptr ? bptr[i] : 0.0, bptr != nullptr, best, arg[i], second);
                if (!std::isfinite(best))
                    throw DegenerateRowError("tropical row " + std::to_string(i) +
                                             " has no finite candidate");
                y[i] = best;
                double gap = kMax ? best - second : second - best;
                if (gap < min_margin) min_margin = gap;
            }
            margins[b] = min_margin;
        }
    });
    if (margin_out) {
        double m = kPosInf;
        for (double v : margins) m = std::min(m, v);
        *margin_out = m;
    }
}

} // namespace

void tropical_vecmul_batch(const Tensor& W, const double* w_mask, const Tensor& X,
                           const Tensor* bias, TropicalMode mode, Tensor& Y,
                           std::vector<Selection>& args, double* margin_out) {
    if (W.rank() != 2) throw ShapeError("tropical_vecmul: W must be a matrix");
    if (X.rank() != 2 || X.extent(1) != W.extent(1))
        throw ShapeError("tropical_vecmul: input width " + shape_str(X.shape()) +
                         " does not match W " + shape_str(W.shape()));
    if (bias && bias->shape() != std::vector<std::size_t>{W.extent(0)})
        throw ShapeError("tropical_vecmul: bias length does not match W rows");
    if (mode == TropicalMode::MAX_PLUS)
        vecmul_batch_impl<true>(W, w_mask, X, bias, Y, args, margin_out);
    else
        vecmul_batch_impl<false>(W, w_mask, X, bias, Y, args, margin_out);
}

VecmulResult tropical_vecmul(const Tensor& W, const Tensor& x, const Tensor* bias,
                             TropicalMode mode) {
    if (x.rank() != 1) throw ShapeError("tropical_vecmul: x must be a vector");
    if (!x.all_finite()) throw ValueError("tropical_vecmul: activations must be finite");
    check_tropical_weights(W, mode, "tropical_vecmul");
    if (bias) check_tropical_weights(*bias, mode, "tropical_vecmul bias");

    Tensor X({1, x.size()}, std::vector<double>(x.begin(), x.end()));
    Tensor Y;
    std::vector<Selection> args;
    tropical_vecmul_batch(W, nullptr, X, bias, mode, Y, args);
    return {Tensor::vector(std::vector<double>(Y.begin(), Y.end())), std::move(args)};
}

Tensor tropical_matmul(const Tensor& A, const Tensor& B, TropicalMode mode) {
    if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(0))
        throw ShapeError("tropical_matmul: inner dimensions disagree, " + shape_str(A.shape()) +
                         " vs " + shape_str(B.shape()));
    std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
    bool mx = mode == TropicalMode::MAX_PLUS;
    Tensor C({m, n}, tropical_neutral(mode));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            double a = A.at(i, l);
            if (a == tropical_neutral(mode)) continue;
            for (std::size_t j = 0; j < n; ++j) {
                double cand = a + B.at(l, j);
                double& c = C.at(i, j);
                if (mx ? cand > c : cand < c) c = cand;
            }
        }
    }
    return C;
}

namespace {

struct ConvGeom {
    std::size_t ci, h, w, co, kh, kw, oh, ow;
    int padding, stride;
};

ConvGeom conv_geometry(const std::vector<std::size_t>& in_shape, const Tensor& kernel,
                       int padding, int stride) {
    if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [Co x Ci x kH x kW]");
    ConvGeom g;
    g.ci = in_shape[0];
    g.h = in_shape[1];
    g.w = in_shape[2];
    g.co = kernel.extent(0);
    g.kh = kernel.extent(2);
    g.kw = kernel.extent(3);
    g.padding = padding;
    g.stride = stride;
    if (kernel.extent(1) != g.ci)
        throw ShapeError("conv2d: kernel input channels do not match input");
    if (padding < 0 || stride < 1) throw ValueError("conv2d: bad padding/stride");
    long ph = static_cast<long>(g.h) + 2 * padding - static_cast<long>(g.kh);
    long pw = static_cast<long>(g.w) + 2 * padding - static_cast<long>(g.kw);
    if (ph < 0 || pw < 0) throw ShapeError("conv2d: kernel larger than padded input");
    g.oh = static_cast<std::size_t>(ph / stride) + 1;
    g.ow = static_cast<std::size_t>(pw / stride) + 1;
    return g;
}

template <bool kMax>
void conv_batch_impl(const Tensor& X, const Tensor& kernel, const double* k_mask,
                     const Tensor* bias, const ConvGeom& g, Tensor& Y,
                     std::vector<Selection>& sel, double* margin_out) {
    std::size_t batch = X.extent(0);
    Y = Tensor({batch, g.co, g.oh, g.ow});
    sel.assign(Y.size(), 0);
    const double* bptr = bias ? bias->data() : nullptr;
    std::size_t in_plane = g.h * g.w;
    std::size_t in_sample = g.ci * in_plane;
    std::size_t out_plane = g.oh * g.ow;
    std::size_t out_sample = g.co * out_plane;
    std::vector<double> margins(batch, kPosInf);

    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const double* xin = X.data() + b * in_sample;
            double min_margin = kPosInf;
            for (std::size_t co = 0; co < g.co; ++co) {
                const double* kbase = kernel.data() + co * g.ci * g.kh * g.kw;
                const double* mbase = k_mask ? k_mask + co * g.ci * g.kh * g.kw : nullptr;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        double best = bptr ? bptr[co] : (kMax ? kNegInf : kPosInf);
                        double second = kMax ? kNegInf : kPosInf;
                        Selection s = 0;
                        long iy0 = static_cast<long>(oy) * g.stride - g.padding;
                        long ix0 = static_cast<long>(ox) * g.stride - g.padding;
                        for (std::size_t ci = 0; ci < g.ci; ++ci) {
                            const double* plane = xin + ci * in_plane;
                            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                                long iy = iy0 + static_cast<long>(ky);
                                if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                    long ix = ix0 + static_cast<long>(kx);
                                    if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                    std::size_t ki = (ci * g.kh + ky) * g.kw + kx;
                                    if (mbase && mbase[ki] == 0.0) continue;
                                    double cand = plane[iy * g.w + ix] + kbase[ki];
                                    if (better<kMax>(cand, best)) {
                                        second = best;
                                        best = cand;
                                        s = static_cast<Selection>(ki + 1);
                                    } else if (better<kMax>(cand, second)) {
                                        second = cand;
                                    }
                                }
                            }
                        }
                        if (!std::isfinite(best))
                            throw DegenerateRowError("tropical conv output has no finite candidate");
                        std::size_t oi = (co * g.oh + oy) * g.ow + ox;
                        Y.data()[b * out_sample + oi] = best;
                        sel[b * out_sample + oi] = s;
                        double gap = kMax ? best - second : second - best;
                        if (gap < min_margin) min_margin = gap;
                    }
                }
            }
            margins[b] = min_margin;
        }
    });
    if (margin_out) {
        double m = kPosInf;
        for (double v : margins) m = std::min(m, v);
        *margin_out = m;
    }
}

} // namespace

void tropical_conv2d_batch(const Tensor& X, const Tensor& kernel, const double* k_mask,
                           const Tensor* bias, TropicalMode mode, int padding, int stride,
                           Tensor& Y, std::vector<Selection>& sel, double* margin_out) {
    if (X.rank() != 4) throw ShapeError("conv2d: input must be [B x C x H x W]");
    ConvGeom g = conv_geometry({X.extent(1), X.extent(2), X.extent(3)}, kernel, padding, stride);
    if (bias && bias->shape() != std::vector<std::size_t>{g.co})
        throw ShapeError("conv2d: bias length does not match output channels");
    if (mode == TropicalMode::MAX_PLUS)
        conv_batch_impl<true>(X, kernel, k_mask, bias, g, Y, sel, margin_out);
    else
        conv_batch_impl<false>(X, kernel, k_mask, bias, g, Y, sel, margin_out);
}

ConvResult tropical_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                           TropicalMode mode, int padding, int stride) {
    if (input.rank() != 3) throw ShapeError("conv2d: input must be [C x H x W]");
    if (!input.all_finite()) throw ValueError("conv2d: activations must be finite");
    check_tropical_weights(kernel, mode, "tropical_conv2d");
    Tensor X({1, input.extent(0), input.extent(1), input.extent(2)},
             std::vector<double>(input.begin(), input.end()));
    Tensor Y;
    std::vector<Selection> sel;
    tropical_conv2d_batch(X, kernel, nullptr, bias, mode, padding, stride, Y, sel);
    Tensor out({Y.extent(1), Y.extent(2), Y.extent(3)},
               std::vector<double>(Y.begin(), Y.end()));
    return {std::move(out), std::move(sel)};
}

namespace {

// Stabilized logsumexp accumulator over candidates c/t; sign = +1 for
// MAX_PLUS, -1 for MIN_PLUS (which uses -t log sum exp(-c/t)).
struct SoftAcc {
    double m = kNegInf; // running max of sign*c/t
    double s = 0.0;

    void add(double c, double sign, double t) {
        double v = sign * c / t;
        if (v <= m) {
            s += std::exp(v - m);
        } else {
            s = s * std::exp(m - v) + 1.0;
            m = v;
        }
    }
    double value(double sign, double t) const {
        return sign * t * (m + std::log(s));
    }
};

} // namespace

void soft_tropical_vecmul_batch(const Tensor& W, const Tensor& X, const Tensor* bias,
                                TropicalMode mode, double temperature, Tensor& Y) {
    if (temperature <= 0.0) throw ValueError("soft tropical op: temperature must be positive");
    if (X.rank() != 2 || X.extent(1) != W.extent(1))
        throw ShapeError("soft_tropical_vecmul: shape mismatch");
    std::size_t n_out = W.extent(0), n_in = W.extent(1), batch = X.extent(0);
    double sign = mode == TropicalMode::MAX_PLUS ? 1.0 : -1.0;
    Y = Tensor({batch, n_out});
    const double* bptr = bias ? bias->data() : nullptr;
    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
            const double* x = X.data() + b * n_in;
            for (std::size_t i = 0; i < n_out; ++i) {
                SoftAcc acc;
                if (bptr && std::isfinite(bptr[i])) acc.add(bptr[i], sign, temperature);
                const double* w = W.data() + i * n_in;
                for (std::size_t j = 0; j < n_in; ++j)
                    if (std::isfinite(w[j])) acc.add(x[j] + w[j], sign, temperature);
                if (acc.m == kNegInf)
                    throw DegenerateRowError("soft tropical row has no finite candidate");
                Y.data()[b * n_out + i] = acc.value(sign, temperature);
            }
        }
    });
}

Tensor soft_tropical_vecmul(const Tensor& W, const Tensor& x, const Tensor* bias,
                            TropicalMode mode, double temperature) {
    if (x.rank() != 1) throw ShapeError("soft_tropical_vecmul: x must be a vector");
    Tensor X({1, x.size()}, std::vector<double>(x.begin(), x.end()));
    Tensor Y;
    soft_tropical_vecmul_batch(W, X, bias, mode, temperature, Y);
    return Tensor::vector(std::vector<double>(Y.begin(), Y.end()));
}

Tensor soft_tropical_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                            TropicalMode mode, int padding, double temperature, int stride) {
    if (temperature <= 0.0) throw ValueError("soft tropical op: temperature must be positive");
    if (input.rank() != 3) throw ShapeError("conv2d: input must be [C x H x W]");
    ConvGeom g = conv_geometry(input.shape(), kernel, padding, stride);
    double sign = mode == TropicalMode::MAX_PLUS ? 1.0 : -1.0;
    Tensor Y({g.co, g.oh, g.ow});
    const double* bptr = bias ? bias->data() : nullptr;
    std::size_t in_plane = g.h * g.w;
    for (std::size_t co = 0; co < g.co; ++co) {
        const double* kbase = kernel.data() + co * g.ci * g.kh * g.kw;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                SoftAcc acc;
                if (bptr && std::isfinite(bptr[co])) acc.add(bptr[co], sign, temperature);
                long iy0 = static_cast<long>(oy) * g.stride - g.padding;
                long ix0 = static_cast<long>(ox) * g.stride - g.padding;
                for (std::size_t ci = 0; ci < g.ci; ++ci) {
                    const double* plane = input.data() + ci * in_plane;
                    for (std::size_t ky = 0; ky < g.kh; ++ky) {
                        long iy = iy0 + static_cast<long>(ky);
                        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                        for (std::size_t kx = 0; kx < g.kw; ++kx) {
                            long ix = ix0 + static_cast<long>(kx);
                            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                            double kv = kbase[(ci * g.kh + ky) * g.kw + kx];
                            if (std::isfinite(kv))
                                acc.add(plane[iy * g.w + ix] + kv, sign, temperature);
                        }
                    }
                }
                if (acc.m == kNegInf)
                    throw DegenerateRowError("soft tropical conv output has no finite candidate");
                Y.data()[(co * g.oh + oy) * g.ow + ox] = acc.value(sign, temperature);
            }
        }
    }
    return Y;
}

} // namespace morphnn
