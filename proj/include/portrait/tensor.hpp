#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "portrait/rng.hpp"

namespace portrait {

// Dense row-major tensor of doubles. All model math runs at 64-bit precision
// so finite-difference gradient checks are meaningful.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<double> values) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = rng.normal(0.0, stddev);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // 2-D access (rows x cols).
    double& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    // 3-D access (a x b x c).
    double& at3(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at3(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const;
    double max_abs() const;
};

// Named parameter tensor with gradient and Adam state. Modules own their
// ParamTensors; a Graph only borrows them for the duration of one forward /
// backward pass.
struct ParamTensor {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m, adam_v;
    bool trainable = true;

    ParamTensor() = default;
    ParamTensor(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), trainable(train) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Node handle on a Graph tape.
struct V {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Reverse-mode autodiff tape. Nodes are created in topological order by the
// forward pass; backward() walks the tape in reverse. Gradients for leaves
// bound to ParamTensors are accumulated into ParamTensor::grad.
class Graph {
public:
    V input(Tensor value);                 // constant leaf, no gradient
    V param(ParamTensor& p);               // leaf bound to external parameter

    const Tensor& val(V v) const { return nodes_[v.i].value; }
    Tensor& grad_of(V v) { return nodes_[v.i].grad; }
    bool needs_grad(V v) const { return nodes_[v.i].needs_grad; }

    // ----- elementwise -----
    V add(V a, V b);                       // same shape
    V sub(V a, V b);
    V mul(V a, V b);
    V scale(V a, double c);
    V add_scalar(V a, double c);
    V gelu(V a);                           // exact erf form
    V silu(V a);
    V sigmoid_elem(V a);
    V sqrt_elem(V a);                      // elementwise sqrt, inputs must be > 0
    V div_elem(V a, V b);                  // elementwise a / b
    V exp_elem(V a);
    V mul_scalar_node(V a, V s);           // a * s, s is a 1-element node

    // ----- shape -----
    V reshape(V a, std::vector<int> shape);
    V transpose(V a);                      // 2-D
    V concat_rows(const std::vector<V>& parts);   // 2-D, along dim 0
    V slice_rows(V a, int r0, int r1);            // 2-D, rows [r0, r1)
    V concat_cols(const std::vector<V>& parts);   // 2-D, along dim 1
    V slice_cols(V a, int c0, int c1);            // 2-D, cols [c0, c1)

    // ----- linear algebra -----
    V matmul(V a, V b);                    // (m x k) . (k x n)
    V add_rowvec(V a, V b);                // a: R x C, b: {C} broadcast over rows
    V linear(V x, V w, V b);               // x.w + b

    // ----- reductions / norms -----
    V sum_all(V a);                        // -> {1}
    V mean_all(V a);                       // -> {1}
    V sumsq(V a);                          // -> {1}
    V dot(V a, V b);                       // -> {1}
    V softmax_rows(V a);                   // 2-D, softmax over each row
    V layer_norm(V x, V gamma, V beta, double eps = 1e-5);  // 2-D, over last dim
    V l2_normalize(V a, double eps = 1e-12);                // 1-D vector

    // ----- conv / spatial (tensors are C x H x W) -----
    V conv2d(V x, V w, V b, int stride, int pad);  // w: O x I x kh x kw
    V group_norm(V x, V gamma, V beta, int groups, double eps = 1e-5);
    V upsample2x(V x);
    V grid_pool(V x, int g);               // C x H x W -> C x g x g mean pool
    V chw_to_tokens(V x);                  // C x H x W -> (H*W) x C
    V tokens_to_chw(V a, int c, int h, int w);
    V add_chw_bias(V x, V b);              // per-channel bias {C}
    V concat_channels(V a, V b);           // along C

    void backward(V loss);                 // loss must be a {1} node

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        ParamTensor* bound = nullptr;
        std::function<void(Graph&)> back;  // captures node indices only
    };

    std::vector<Node> nodes_;

    int push(Tensor value, bool needs_grad, std::function<void(Graph&)> back);
    void ensure_grad(int i);
    friend struct GraphDetail;
};

// Finite-difference gradient checking support (used by tests and the
// acceptance suite). Recomputes `loss_fn` with coordinate perturbations of
// the given parameter and compares against the analytic gradient.
struct GradCheckResult {
    int checked = 0;
    int passed = 0;
    double worst_rel_err = 0.0;
};

GradCheckResult check_gradients(ParamTensor& p,
                                const std::function<double()>& loss_value,
                                const Tensor& analytic_grad,
                                int max_coords,
                                Rng& rng,
                                double h = 1e-5,
                                double rel_tol = 1e-4,
                                double abs_floor = 1e-8);

// Adam step over the trainable parameters in `params` using their accumulated
// gradients; `step` is 1-based for bias correction.
void adam_update(const std::vector<ParamTensor*>& params, double lr, int64_t step,
                 double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

void zero_gradients(const std::vector<ParamTensor*>& params);

// CRC32 (zlib polynomial) over the parameter values; used for frozen-weight
// integrity checks and checkpoint sections.
uint32_t params_checksum(const std::vector<ParamTensor*>& params);

}  // namespace portrait
