#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "morphnn/rng.hpp"
#include "morphnn/tensor.hpp"
#include "morphnn/tropical.hpp"

namespace morphnn {

/// What a parameter tensor does inside its layer; drives pruning and
/// initialization rules.
enum class ParamRole {
    LinearWeight,    // dense matrices / linear conv kernels
    TropicalShared,  // shared max+min path weights (MPM family)
    TropicalMax,     // max-path-only weights (MP, DEP W)
    TropicalMin,     // min-path-only weights (DEP M)
    Bias,            // w0, m0, linear b
    Activation,      // alpha, sigma, activation conv kernels
    Lambda,          // DEP mixing coefficients, clamped to [0,1]
    Frame,           // frozen orthonormal U/V frames
};

/// Named tensor with gradient accumulator, optimizer-state slots held by the
/// optimizer, and an optional binary prune mask.
struct Parameter {
    std::string id;
    Tensor value;
    Tensor grad;
    std::optional<Tensor> mask; // 1 = keep, 0 = pruned
    bool trainable = true;
    ParamRole role = ParamRole::LinearWeight;

    Parameter() = default;
    Parameter(std::string id_, Tensor value_, ParamRole role_, bool trainable_ = true)
        : id(std::move(id_)), value(std::move(value_)), grad(value.shape(), 0.0),
          trainable(trainable_), role(role_) {}
};

class ParamSet {
public:
    Parameter& add(Parameter p);
    bool contains(const std::string& id) const { return params_.count(id) != 0; }
    Parameter& at(const std::string& id);
    const Parameter& at(const std::string& id) const;
    std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grads();
    std::size_t trainable_count() const;

private:
    std::map<std::string, Parameter> params_; // ordered for deterministic iteration
};

/// Gradients keyed by parameter id; input gradients under the reserved
/// id "input".
using GradMap = std::map<std::string, Tensor>;

inline constexpr const char* kInputGradId = "input";

enum class OpKind {
    Input, Add, Scale, Linear, LinearConv, SvdConv, TropicalVecmul, TropicalConv,
    SoftTropical, Relu, Sigmoid, Concat, Reshape, ReduceSum, CrossEntropy, Mse,
};

class Tape;

/// One recorded primitive. Values are batched: activations have shape
/// [B x features...]; parameters are unbatched and broadcast.
struct Node {
    int id = -1;
    std::vector<int> inputs;
    Tensor value;

    virtual OpKind kind() const = 0;
    /// Smallest (best - runner-up) gap among this node's tropical
    /// reductions; +inf for smooth ops.
    virtual double margin() const { return kPosInf; }
    virtual void backward(Tape& tape, const Tensor& grad_out) const = 0;
    virtual ~Node() = default;
};

/// Recorded computation graph for one forward pass. Node ids are
/// topologically ordered by creation; backward replays them in strictly
/// decreasing order exactly once (single use).
class Tape {
public:
    explicit Tape(const ParamSet* params) : params_(params) {}

    // Graph construction. Parameter ids may be empty where a term is
    // optional (bias) or a constant tensor is supplied instead.
    int add_input(Tensor X);
    int add_add(int a, int b);
    /// y_i = (base + coeff * p_i) * x_i with a parameter vector p, or
    /// y = factor * x when param is empty.
    int add_scale(int x, const std::string& param, double base, double coeff,
                  double factor = 1.0);
    int add_linear(int x, const std::string& A, const std::string& b);
    int add_linear_const(int x, Tensor A);
    int add_linear_conv(int x, const std::string& K, const std::string& b, int padding,
                        int stride, int groups);
    int add_svd_conv(int x, const std::string& sigma, const std::string& u_frames,
                     const std::string& v_frames, int padding);
    int add_tropical_vecmul(int x, const std::string& W, const std::string& bias,
                            TropicalMode mode, Tensor mask = Tensor());
    int add_tropical_vecmul_const(int x, Tensor W, TropicalMode mode);
    int add_tropical_conv(int x, const std::string& K, const std::string& bias,
                          TropicalMode mode, int padding, int stride,
                          Tensor mask = Tensor());
    int add_tropical_conv_const(int x, Tensor K, TropicalMode mode, int padding, int stride);
    int add_soft_tropical(int x, const std::string& W, const std::string& bias,
                          TropicalMode mode, double temperature);
    int add_relu(int x);
    int add_sigmoid(int x);
    int add_concat(const std::vector<int>& xs);
    int add_reshape(int x, std::vector<std::size_t> feature_shape);
    int add_reduce_sum(int x);
    int add_cross_entropy(int logits, std::vector<int> labels);
    int add_mse(int pred, Tensor target);

    const Tensor& value(int id) const { return nodes_.at(id)->value; }
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return *nodes_.at(id); }
    double min_margin() const;

    /// Exact reverse-mode subgradients from the given output node; seed
    /// shape must match that node's value. Gradients of masked parameter
    /// entries are forced to zero. Single use.
    GradMap backward(int output_id, const Tensor& seed);

    // Internals used by node implementations.
    const ParamSet& params() const { return *params_; }
    const Tensor* param_value(const std::string& id) const;
    Tensor& grad_buffer(int id);
    Tensor& param_grad(const std::string& id, const std::vector<std::size_t>& shape);

private:
    int push(std::unique_ptr<Node> node);

    const ParamSet* params_;
    std::vector<std::unique_ptr<Node>> nodes_;
    std::vector<Tensor> node_grads_;
    GradMap grads_;
    bool consumed_ = false;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string location; // "param_id[i]" or "input[i]"
};

/// Builds the forward pass for one [1 x d] sample and returns the output
/// node id. Used so gradient checking stays independent of the layer stack.
using ForwardBuilder = std::function<int(Tape&, const Tensor&)>;

/// Central finite differences (step h = eps) on every trainable parameter
/// coordinate and every input coordinate against backward(), on the scalar
/// sum of outputs. Points within tie range of a tropical reduction are
/// resampled up to max_retries, then DegeneratePointError is thrown.
GradCheckReport grad_check_fn(const ForwardBuilder& builder, ParamSet& params, Tensor x,
                              double eps, double tolerance, Rng& rng, int max_retries = 20);

} // namespace morphnn
