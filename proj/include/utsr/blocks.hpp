#pragma once

#include "utsr/tensor.hpp"
#include "utsr/windowing.hpp"

namespace utsr {

// Separate Q/K/V projections so the same attention core serves both
// self-attention (FAB) and window cross-attention (OAB).
struct AttnParams {
    Tensor wq, bq;  // [C, C], [C]
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;
    int heads = 4;
};

// q_windows: [nW, Nq, C], kv_windows: [nW, Nk, C], bias: [heads, Nq, Nk],
// mask: optional [nW, Nq, Nk] (pass a default Tensor for none).
// Per head: softmax(QK^T/sqrt(d) + B [+ mask])V; heads concatenated, then
// output projection.
Tensor multi_head_attention(const Tensor& q_windows, const Tensor& kv_windows, const Tensor& bias,
                            const Tensor& mask, const AttnParams& p);

// Channel attention: global token-mean descriptor -> compress (floor(C/beta))
// -> ReLU -> recover -> sigmoid gate; output x * gate per column.
struct CaParams {
    Tensor w1, b1;  // [C, hidden], [hidden]
    Tensor w2, b2;  // [hidden, C], [C]
};
Tensor channel_attention(const Tensor& x, const CaParams& p);

struct MlpParams {
    Tensor w1, b1;  // [C, 4C], [4C]
    Tensor w2, b2;  // [4C, C], [C]
};
Tensor mlp_forward(const Tensor& x, const MlpParams& p);

// Fusion attention block on a [C, D0, D1, D2] token grid.
struct FabParams {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    AttnParams attn;
    RelPosBiasTable bias;  // wmsa table
    CaParams ca;
    MlpParams mlp;
    real alpha = real(0.01);
    bool use_ca = true;  // ablation: plain shifted-window block when false
    int window = 4;
};
Tensor fab_forward(const Tensor& x, const FabParams& p, bool shifted);

// Overlapping attention block; Q from p^3 windows, K/V from po^3 windows.
struct OabParams {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    AttnParams attn;
    RelPosBiasTable bias;  // oab table
    MlpParams mlp;
    WindowSpec spec;
};
Tensor oab_forward(const Tensor& x, const OabParams& p);

// Eq.-2 style patch embedding: stride-4 kernel-4 linear map over the
// 2-channel (moving, fixed) pair. w: [C, 2, 4, 4, 4], b: [C].
Tensor patch_embed(const Tensor& moving, const Tensor& fixed, const Tensor& w, const Tensor& b);

// 2x2x2 neighborhood concat (8d) followed by a linear map to 2d.
// w: [8d, 2d], b: [2d].
Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace utsr
