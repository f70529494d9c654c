#pragma once

#include "utsr/tensor.hpp"

namespace utsr {

struct LossConfig {
    enum class Sim { lncc, mi };
    Sim sim_kind = Sim::lncc;
    real lambda = 1;   // smoothness weight
    real gamma = 1;    // segmentation weight
    bool use_seg = false;
    int lncc_cube = 9;  // odd window length
    int mi_bins = 32;
    real mi_sigma = 0;  // <= 0 means one bin width
};

// Negative mean squared local NCC over cube-windows (windows crop at the
// borders). f, w: [1, Z, Y, X].
Tensor lncc_loss(const Tensor& f, const Tensor& w, int cube = 9);

// Negative mutual information via Gaussian Parzen estimation on a
// bins x bins joint table. Inputs are expected in [0, 1].
Tensor mi_loss(const Tensor& f, const Tensor& w, int bins = 32, real sigma = 0);

// Mean squared forward-difference gradients of u; the mean is over the 9
// (channel, axis) components of per-component means over valid positions,
// so a unit ramp in one component scores exactly 1/9.
Tensor diffusion_loss(const Tensor& field);

// 1 - mean_k of soft Dice over one-hot channels [K, Z, Y, X].
Tensor dice_seg_loss(const Tensor& f_onehot, const Tensor& w_onehot);

struct LossTerms {
    Tensor total, sim, smooth, seg;  // seg undefined when use_seg is false
};

// Warps moving by field inside the graph and assembles
// sim + lambda*smooth (+ gamma*seg). Pass default Tensors for masks when
// use_seg is false. For MI the pair is min-max normalized with constants
// frozen at current values.
LossTerms total_loss(const Tensor& fixed, const Tensor& moving, const Tensor& field,
                     const Tensor& fixed_onehot, const Tensor& moving_onehot, const LossConfig& cfg);

}  // namespace utsr
