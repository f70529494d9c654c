#pragma once

#include "utsr/volume_io.hpp"

namespace utsr {

// Differentiable trilinear warp: img [C, Z, Y, X] sampled at p + u(p);
// field [3, Z, Y, X] channels (u_x, u_y, u_z) in voxel units. Thin alias
// over the tensor op so the graph sees it directly.
Tensor warp_trilinear(const Tensor& img, const Tensor& field);

Volume warp_volume(const Volume& moving, const DisplacementField& field);

// Nearest-neighbor label warp (evaluation path). The differentiable
// training path instead one-hot expands and uses warp_trilinear.
LabelMask warp_labels(const LabelMask& mask, const DisplacementField& field);

}  // namespace utsr
