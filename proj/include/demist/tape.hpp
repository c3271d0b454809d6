#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

// Handle into a Tape. Only meaningful for the tape that created it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape. A fresh tape is built per training step; ops
// append nodes and record closures that push gradients to their parents.
// All ops are deterministic: each output element is produced by exactly one
// thread, so results are bitwise reproducible regardless of thread count.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false);

    const Tensor& val(Var v) const { return node(v).value; }
    const Tensor& grad(Var v);  // zeros if no gradient reached v
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and propagates to all leaves. root must be scalar.
    void backward(Var root);

    // ---- elementwise ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double c);
    Var exp_(Var a);
    Var silu(Var a);
    Var leaky_relu(Var a, double slope = 0.2);

    // ---- shape / structure ----
    Var reshape(Var a, Shape s);
    Var concat_ch(Var a, Var b);              // (Ca,X,Y,Z)+(Cb,X,Y,Z) -> (Ca+Cb,..)
    Var slice_ch(Var a, int64_t c0, int64_t c1);  // channels [c0,c1)
    Var transpose(Var a);                     // 2D

    // ---- neural ops ----
    // x (Ci,X,Y,Z), w (Co,Ci,K,K,K), b (Co) or invalid for no bias. pad with zeros.
    Var conv3d(Var x, Var w, Var b, int stride, int pad);
    Var add_channel_bias(Var x, Var b);       // b (C) broadcast over spatial
    Var add_row_bias(Var x, Var b);           // x (R,C), b (C)
    Var matmul(Var a, Var b);                 // (R,K)x(K,C)
    Var softmax_rows(Var a);                  // 2D, softmax per row
    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
    Var upsample_nearest2(Var x);             // (C,X,Y,Z) -> (C,2X,2Y,2Z)
    Var avg_pool3d(Var x, int factor);

    // ---- reductions / losses ----
    Var sum_all(Var a);
    Var mean_all(Var a);
    Var mse(Var a, Var b);        // mean (a-b)^2
    Var l1(Var a, Var b);         // mean |a-b|
    Var mean_sq(Var a);           // mean a^2

    // ---- edge operator ----
    // Per-channel 3D Sobel gradient magnitude, replicate padding. Spatial dims
    // must be >= 3. Magnitude uses a guarded denominator in backward so exact
    // zeros (constant regions) get zero subgradient.
    Var sobel_mag(Var x);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Tape&, int32_t)> backprop;
    };

    const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }
    Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }

    Var push(Tensor value, std::vector<int32_t> parents, std::function<void(Tape&, int32_t)> bp);
    Tensor& grad_buf(int32_t id);
    bool any_requires(const std::vector<int32_t>& parents) const;

    std::vector<Node> nodes_;

    friend struct TapeOps;
};

}  // namespace demist
