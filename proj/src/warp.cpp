#include "utsr/warp.hpp"

#include <cmath>

namespace utsr {

Tensor warp_trilinear(const Tensor& img, const Tensor& field) { return warp3d(img, field); }

Volume warp_volume(const Volume& moving, const DisplacementField& field) {
    UTSR_REQUIRE(moving.dims == field.dims, "warp_volume: volume/field dims differ");
    Tensor out = warp3d(volume_to_tensor(moving), field_to_tensor(field));
    return tensor_to_volume(out, moving.spacing);
}

LabelMask warp_labels(const LabelMask& mask, const DisplacementField& field) {
    UTSR_REQUIRE(mask.dims == field.dims, "warp_labels: mask/field dims differ");
    const int64_t nx = mask.dims[0], ny = mask.dims[1], nz = mask.dims[2];
    const int64_t s = mask.voxels();
    LabelMask out;
    out.dims = mask.dims;
    out.spacing = mask.spacing;
    out.labels.resize(size_t(s));
    auto clamp_round = [](double c, int64_t n) {
        int64_t i = int64_t(std::llround(c));
        return std::min(std::max<int64_t>(i, 0), n - 1);
    };
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                const int64_t p = (z * ny + y) * nx + x;
                int64_t sx = clamp_round(double(x) + double(field.values[size_t(0 * s + p)]), nx);
                int64_t sy = clamp_round(double(y) + double(field.values[size_t(1 * s + p)]), ny);
                int64_t sz = clamp_round(double(z) + double(field.values[size_t(2 * s + p)]), nz);
                out.labels[size_t(p)] = mask.labels[size_t((sz * ny + sy) * nx + sx)];
            }
    return out;
}

}  // namespace utsr
