#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "utsr/blocks.hpp"
#include "utsr/volume_io.hpp"

namespace utsr {

struct ModelConfig {
    enum class Variant { small, base, large };
    enum class Upsample { sr, trilinear };

    int64_t embed_dim = 96;
    std::array<int, 4> depths{2, 2, 4, 2};
    std::array<int, 4> heads{4, 4, 8, 8};
    int oab_heads = 4;
    int window = 4;
    int patch = 4;
    real alpha = real(0.01);
    int beta = 3;          // channel-attention compression ratio
    double epsilon = 0.5;  // overlap ratio for OAB key windows
    bool use_conv_blocks = false;
    Upsample upsample = Upsample::sr;
    bool fab_on = true;  // false: plain shifted-window blocks (no CA branch)
    bool oab_on = true;  // false: drop the stage-end overlapping block

    static ModelConfig variant(Variant v);
    int64_t stage_dim(int i) const { return embed_dim << i; }  // i in [0,4)
};

// One upsampling step of the decoder. In sr mode `chan` is the 1x1x1
// channel-magnifying conv feeding pixel shuffle; in trilinear mode it is the
// 1x1x1 conv applied after interpolation. fuse1/fuse2 are the two 3x3x3
// convolutions that integrate the (optionally skip-concatenated) features,
// with an instance norm + ReLU between them so the activation scale stays
// depth-independent through the normalization-free decoder chain.
struct UpStep {
    Tensor chan_w, chan_b;
    Tensor fuse1_w, fuse1_b, fuse1_g, fuse1_nb;
    Tensor fuse2_w, fuse2_b;
    bool has_skip = false;
};

struct Stage {
    Tensor merge_w, merge_b;  // empty for stage 0
    std::vector<FabParams> fabs;
    OabParams oab;
};

struct Model {
    ModelConfig cfg;
    Tensor embed_w, embed_b;
    std::array<Stage, 4> stages;
    // optional conv features from the raw 2-channel pair
    Tensor convb_half_w, convb_half_b, convb_half_g, convb_half_bias;  // C/2 at /2
    Tensor convb_full_w, convb_full_b, convb_full_g, convb_full_bias;  // 16 at /1
    std::vector<UpStep> up;  // /32 -> /1, five steps
    Tensor head_w, head_b;   // zero-initialized 3x3x3 conv to 3 channels

    std::vector<std::pair<std::string, Tensor>> params;  // flat registry

    int64_t param_count() const;
    Checkpoint to_checkpoint() const;
    void load_checkpoint(const Checkpoint& ck);
};

// Deterministic initialization: truncated normal (std 0.02) for the
// transformer linears and bias tables, fan-in scaled truncated normal for
// the normalization-free convolutions, identity layer norms, zero biases,
// zero displacement head.
Model build_model(const ModelConfig& cfg, uint64_t seed);

struct FeaturePyramid {
    std::array<Tensor, 4> f;  // /4 .. /32, widths C..8C
    Tensor e_half, e_full;    // set only with use_conv_blocks
};

// moving/fixed: [1, Z, Y, X] with extents divisible by 32.
FeaturePyramid encode(const Tensor& moving, const Tensor& fixed, const Model& model);

// Full-resolution displacement field [3, Z, Y, X].
Tensor decode(const FeaturePyramid& pyr, const Model& model);

inline Tensor forward_field(const Tensor& moving, const Tensor& fixed, const Model& model) {
    return decode(encode(moving, fixed, model), model);
}

std::pair<DisplacementField, Volume> register_pair(const Volume& moving, const Volume& fixed,
                                                   const Model& model);

}  // namespace utsr
