#include "utsr/blocks.hpp"

#include <cmath>

namespace utsr {

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_bias(matmul(x, w), b);
}

// [nW, N, C] -> [nW*heads, N, d]
Tensor split_heads(const Tensor& x, int heads) {
    const int64_t nw = x.dim(0), n = x.dim(1), c = x.dim(2);
    UTSR_REQUIRE(c % heads == 0, "head count " + std::to_string(heads) + " does not divide width " +
                                     std::to_string(c));
    const int64_t d = c / heads;
    Tensor r = reshape(x, {nw, n, heads, d});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {nw * heads, n, d});
}

// [nW*heads, N, d] -> [nW, N, C]
Tensor merge_heads(const Tensor& x, int heads) {
    const int64_t nwh = x.dim(0), n = x.dim(1), d = x.dim(2);
    const int64_t nw = nwh / heads;
    Tensor r = reshape(x, {nw, heads, n, d});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {nw, n, heads * d});
}

// [C, D0, D1, D2] <-> [S, C] token views
Tensor grid_to_tokens(const Tensor& x) {
    return permute(reshape(x, {x.dim(0), x.numel() / x.dim(0)}), {1, 0});
}
Tensor tokens_to_grid(const Tensor& t, const Shape& spatial, int64_t c) {
    Shape g{c};
    for (int64_t d : spatial) g.push_back(d);
    return reshape(permute(t, {1, 0}), g);
}

}  // namespace

Tensor multi_head_attention(const Tensor& q_windows, const Tensor& kv_windows, const Tensor& bias,
                            const Tensor& mask, const AttnParams& p) {
    UTSR_REQUIRE(q_windows.ndim() == 3 && kv_windows.ndim() == 3, "attention expects [nW, N, C] windows");
    const int64_t nw = q_windows.dim(0), c = q_windows.dim(2);
    UTSR_REQUIRE(kv_windows.dim(0) == nw, "query/key window counts differ");
    const int64_t d = c / p.heads;
    Tensor q = split_heads(linear(q_windows, p.wq, p.bq), p.heads);
    Tensor k = split_heads(linear(kv_windows, p.wk, p.bk), p.heads);
    Tensor v = split_heads(linear(kv_windows, p.wv, p.bv), p.heads);
    Tensor logits = mul(matmul(q, permute(k, {0, 2, 1})), real(1) / real(std::sqrt(double(d))));
    logits = attn_bias_add(logits, bias, mask, nw);
    Tensor attn = softmax(logits, 2);
    Tensor out = merge_heads(matmul(attn, v), p.heads);
    return linear(out, p.wo, p.bo);
}

Tensor channel_attention(const Tensor& x, const CaParams& p) {
    UTSR_REQUIRE(x.ndim() == 2, "channel_attention expects [N, C] tokens");
    Tensor desc = reshape(reduce_mean(x, 0), {1, x.dim(1)});
    Tensor h = relu(linear(desc, p.w1, p.b1));
    Tensor g = sigmoid(linear(h, p.w2, p.b2));
    return scale_cols(x, reshape(g, {x.dim(1)}));
}

Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor fab_forward(const Tensor& x, const FabParams& p, bool shifted) {
    UTSR_REQUIRE(x.ndim() == 4, "fab_forward expects [C, D0, D1, D2]");
    const int64_t c = x.dim(0);
    const Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
    const int s = p.window / 2;

    Tensor tokens = grid_to_tokens(x);
    Tensor y = layer_norm(tokens, p.ln1_g, p.ln1_b);

    // (S)W-MSA branch on the normalized grid
    Tensor grid = tokens_to_grid(y, spatial, c);
    if (shifted) grid = cyclic_shift(grid, s, s, s);
    Tensor qwin = window_partition(grid, p.window);
    Tensor mask = shifted ? shift_mask(spatial, p.window, s) : Tensor();
    Tensor att = multi_head_attention(qwin, qwin, build_bias(p.bias), mask, p.attn);
    Tensor back = window_reverse(att, p.window, spatial);
    if (shifted) back = cyclic_shift(back, -s, -s, -s);
    Tensor att_tokens = grid_to_tokens(back);

    Tensor zhat = add(att_tokens, tokens);
    if (p.use_ca) zhat = add(zhat, mul(channel_attention(y, p.ca), p.alpha));

    Tensor out = add(mlp_forward(layer_norm(zhat, p.ln2_g, p.ln2_b), p.mlp), zhat);
    return tokens_to_grid(out, spatial, c);
}

Tensor oab_forward(const Tensor& x, const OabParams& p) {
    UTSR_REQUIRE(x.ndim() == 4, "oab_forward expects [C, D0, D1, D2]");
    const int64_t c = x.dim(0);
    const Shape spatial{x.dim(1), x.dim(2), x.dim(3)};

    Tensor tokens = grid_to_tokens(x);
    Tensor y = layer_norm(tokens, p.ln1_g, p.ln1_b);
    Tensor grid = tokens_to_grid(y, spatial, c);
    Tensor qwin = window_partition(grid, p.spec.p);
    Tensor kvwin = overlapping_partition(grid, p.spec);
    Tensor att = multi_head_attention(qwin, kvwin, build_bias(p.bias), Tensor(), p.attn);
    Tensor back = window_reverse(att, p.spec.p, spatial);

    Tensor zhat = add(grid_to_tokens(back), tokens);
    Tensor out = add(mlp_forward(layer_norm(zhat, p.ln2_g, p.ln2_b), p.mlp), zhat);
    return tokens_to_grid(out, spatial, c);
}

Tensor patch_embed(const Tensor& moving, const Tensor& fixed, const Tensor& w, const Tensor& b) {
    UTSR_REQUIRE(moving.shape() == fixed.shape(), "patch_embed: moving/fixed shape mismatch");
    UTSR_REQUIRE(moving.ndim() == 4 && moving.dim(0) == 1, "patch_embed: expects [1, Z, Y, X] volumes");
    for (int i = 1; i < 4; ++i)
        UTSR_REQUIRE(moving.dim(i) % 4 == 0, "patch_embed: extents must be divisible by 4 "
                                             "(pad the inputs to a multiple of 32)");
    Tensor pair = concat({moving, fixed}, 0);
    return conv3d(pair, w, b, 4, 0);
}

Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b) {
    UTSR_REQUIRE(x.ndim() == 4, "patch_merge expects [d, D0, D1, D2]");
    const int64_t d = x.dim(0);
    for (int i = 1; i < 4; ++i)
        UTSR_REQUIRE(x.dim(i) % 2 == 0, "patch_merge: odd spatial extent " + std::to_string(x.dim(i)));
    const Shape out_spatial{x.dim(1) / 2, x.dim(2) / 2, x.dim(3) / 2};
    // 2x2x2 windows in raster order = coarse-grid raster order
    Tensor win = window_partition(x, 2);              // [S/8, 8, d]
    Tensor cat = reshape(win, {win.dim(0), 8 * d});   // neighbor-major concat
    Tensor merged = linear(cat, w, b);                // [S/8, 2d]
    return tokens_to_grid(merged, out_spatial, 2 * d);
}

}  // namespace utsr
