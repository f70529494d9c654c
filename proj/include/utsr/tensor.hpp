#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "utsr/common.hpp"

namespace utsr {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One recorded operation result. Nodes carry creation-order ids; backward
// visits reachable nodes in decreasing id order, which is a reverse
// topological order of the recorded graph.
struct Node {
    Shape shape;
    std::vector<real> value;
    std::vector<real> grad;  // lazily allocated at first contribution
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), real(0));
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<real> data, bool requires_grad = false);
    static Tensor scalar(real v) { return full({1}, v); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return int(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    int64_t dim(int i) const { return n_->shape[size_t(i)]; }

    std::vector<real>& data() { return n_->value; }
    const std::vector<real>& data() const { return n_->value; }
    std::vector<real>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.clear(); }
    bool requires_grad() const { return n_->requires_grad; }
    real item() const {
        UTSR_REQUIRE(numel() == 1, "item() requires a single-element tensor, got shape " + shape_str(shape()));
        return n_->value[0];
    }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// Graph construction helper: result requires grad iff any parent does;
// parentless results are constants.
Tensor make_node(Shape shape, std::vector<real> value, std::vector<Tensor> parents,
                 std::function<void(Node&)> backprop);

// Populates grads of every requires_grad tensor reachable from a scalar
// root. Repeated calls accumulate.
void backward(const Tensor& root);

// ---- elementwise / shape ops -------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, real s);
Tensor mul(const Tensor& a, real s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow(const Tensor& a, real p);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int64_t>& lens);
Tensor pad_zero(const Tensor& a, const std::vector<std::array<int64_t, 2>>& lo_hi);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor reduce_sum(const Tensor& a, int axis);
Tensor reduce_mean(const Tensor& a, int axis);

// ---- contraction and normalization -------------------------------------
// a: [..,m,k], b: [..,k,n] with equal batch dims, or b rank-2 shared
// across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& a, int axis);
// Normalizes over the last axis; gain/bias have that axis's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = real(1e-5));
// x: [Cin, D0, D1, D2], w: [Cout, Cin, k0, k1, k2], b: [Cout] (optional).
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// ---- structured data movement ------------------------------------------
// Gathers spatial positions into windows: x is [C, S] flattened over
// spatial dims, sp_idx has num_win*tokens entries (-1 reads zero), the
// result is [num_win, tokens, C].
Tensor to_windows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> sp_idx,
                  int64_t num_win, int64_t tokens);
// Scatter-adds windows back onto a [C, spatial...] grid (exact inverse of
// to_windows when sp_idx is a permutation).
Tensor from_windows(const Tensor& win, std::shared_ptr<const std::vector<int64_t>> sp_idx,
                    Shape spatial);
// Toroidal roll of the three spatial axes of [C, D0, D1, D2].
Tensor roll3d(const Tensor& x, int s0, int s1, int s2);
// [C*l^3, D0, D1, D2] -> [C, l*D0, l*D1, l*D2]; source channel for output
// channel c at offsets (o0,o1,o2) (slow..fast axis) is
// c*l^3 + (o2*l + o1)*l + o0.
Tensor pixel_shuffle(const Tensor& x, int l);
// Rowwise column scaling: x: [N, C], g: [C].
Tensor scale_cols(const Tensor& x, const Tensor& g);
// Broadcast add over the last axis: x: [..., C], b: [C].
Tensor add_bias(const Tensor& x, const Tensor& b);
// logits: [num_win*heads, Nq, Nk]; bias: [heads, Nq, Nk]; mask (optional,
// pass undefined Tensor) is [num_win, Nq, Nk] added across heads.
Tensor attn_bias_add(const Tensor& logits, const Tensor& bias, const Tensor& mask, int64_t num_win);
// Sliding cropped box sum of radius r along each spatial axis of
// [C, D0, D1, D2]; self-adjoint, so backward applies the same operator.
Tensor box_sum(const Tensor& x, int radius);
// Trilinear sampling of img [C, D0, D1, D2] at p + u(p); field is
// [3, D0, D1, D2] with channels (u2, u1, u0) = displacements along the
// fastest..slowest axis, i.e. channel 0 displaces axis D2. Out-of-range
// coordinates clamp to the border; derivative at integer coordinates uses
// the left cell.
Tensor warp3d(const Tensor& img, const Tensor& field);
// Fixed-weight 2x trilinear upsampling of [C, D0, D1, D2].
Tensor trilinear_up2(const Tensor& x);
// Per-channel spatial normalization of [C, D0, D1, D2].
Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = real(1e-5));
// Row-normalized Gaussian bin weights of a flat intensity tensor:
// result[i,b] = k(x_i - centers[b]) / sum_b' k(...). Differentiable in x.
Tensor parzen_weights(const Tensor& x, const std::vector<real>& centers, real sigma);
// Mutual information of a joint probability table (rows/cols marginalized
// internally); returns a scalar.
Tensor mi_from_joint(const Tensor& joint);

// ---- checking -----------------------------------------------------------
// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, real eps);

}  // namespace utsr
