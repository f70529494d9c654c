#include "utsr/losses.hpp"

#include <algorithm>
#include <cmath>

namespace utsr {

Tensor lncc_loss(const Tensor& f, const Tensor& w, int cube) {
    UTSR_REQUIRE(f.shape() == w.shape(),
                 "lncc_loss: shape mismatch " + shape_str(f.shape()) + " vs " + shape_str(w.shape()));
    UTSR_REQUIRE(f.ndim() == 4 && f.dim(0) == 1, "lncc_loss: expects [1, Z, Y, X]");
    UTSR_REQUIRE(cube >= 3 && cube % 2 == 1, "lncc_loss: cube must be odd >= 3");
    const int r = cube / 2;
    // per-voxel cropped-window sample count (constant)
    Tensor n = box_sum(Tensor::full(f.shape(), 1), r);
    Tensor sf = box_sum(f, r);
    Tensor sw = box_sum(w, r);
    Tensor sff = box_sum(mul(f, f), r);
    Tensor sww = box_sum(mul(w, w), r);
    Tensor sfw = box_sum(mul(f, w), r);
    Tensor cross = sub(sfw, div(mul(sf, sw), n));
    Tensor var_f = sub(sff, div(mul(sf, sf), n));
    Tensor var_w = sub(sww, div(mul(sw, sw), n));
    Tensor lncc = div(mul(cross, cross), add(mul(var_f, var_w), real(1e-5)));
    return neg(reduce_mean(lncc));
}

Tensor mi_loss(const Tensor& f, const Tensor& w, int bins, real sigma) {
    UTSR_REQUIRE(f.shape() == w.shape(), "mi_loss: shape mismatch");
    UTSR_REQUIRE(bins >= 8, "mi_loss: need at least 8 bins");
    if (sigma <= 0) sigma = real(1) / real(bins);
    std::vector<real> centers(size_t(bins), 0);
    for (int i = 0; i < bins; ++i) centers[size_t(i)] = (real(i) + real(0.5)) / real(bins);
    const int64_t n = f.numel();
    Tensor wf = parzen_weights(reshape(f, {n}), centers, sigma);  // [N, bins]
    Tensor ww = parzen_weights(reshape(w, {n}), centers, sigma);
    Tensor joint = mul(matmul(permute(wf, {1, 0}), ww), real(1) / real(n));
    return neg(mi_from_joint(joint));
}

Tensor diffusion_loss(const Tensor& field) {
    UTSR_REQUIRE(field.ndim() == 4 && field.dim(0) == 3, "diffusion_loss: expects [3, Z, Y, X]");
    Tensor acc;
    for (int axis = 1; axis <= 3; ++axis) {
        const int64_t n = field.dim(axis);
        UTSR_REQUIRE(n >= 2, "diffusion_loss: extents must be >= 2");
        Tensor d = sub(slice(field, axis, 1, n - 1), slice(field, axis, 0, n - 1));
        Tensor m = reduce_mean(mul(d, d));  // mean over 3 channels x valid positions
        acc = acc.defined() ? add(acc, m) : m;
    }
    return mul(acc, real(1.0 / 3.0));  // (1/9) * sum of 9 per-(channel,axis) means
}

Tensor dice_seg_loss(const Tensor& f_onehot, const Tensor& w_onehot) {
    UTSR_REQUIRE(f_onehot.shape() == w_onehot.shape(), "dice_seg_loss: shape mismatch");
    UTSR_REQUIRE(f_onehot.ndim() == 4 && f_onehot.dim(0) >= 1, "dice_seg_loss: expects [K, Z, Y, X]");
    const int64_t k = f_onehot.dim(0), s = f_onehot.numel() / k;
    Tensor f2 = reshape(f_onehot, {k, s});
    Tensor w2 = reshape(w_onehot, {k, s});
    Tensor num = mul(reduce_sum(mul(f2, w2), 1), real(2));
    Tensor den = add(add(reduce_sum(mul(f2, f2), 1), reduce_sum(mul(w2, w2), 1)), real(1e-5));
    return sub(Tensor::scalar(1), reduce_mean(div(num, den)));
}

namespace {
// min-max normalization with the range frozen as constants
Tensor norm01(const Tensor& x) {
    real lo = x.data()[0], hi = x.data()[0];
    for (real v : x.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    real span = hi - lo;
    if (span <= 0) span = 1;
    return mul(add(x, -lo), real(1) / span);
}
}  // namespace

LossTerms total_loss(const Tensor& fixed, const Tensor& moving, const Tensor& field,
                     const Tensor& fixed_onehot, const Tensor& moving_onehot, const LossConfig& cfg) {
    UTSR_REQUIRE(fixed.shape() == moving.shape(), "total_loss: fixed/moving shape mismatch");
    LossTerms t;
    Tensor warped = warp3d(moving, field);
    if (cfg.sim_kind == LossConfig::Sim::lncc) {
        t.sim = lncc_loss(fixed, warped, cfg.lncc_cube);
    } else {
        t.sim = mi_loss(norm01(fixed), norm01(warped), cfg.mi_bins, cfg.mi_sigma);
    }
    t.smooth = diffusion_loss(field);
    t.total = add(t.sim, mul(t.smooth, cfg.lambda));
    if (cfg.use_seg) {
        UTSR_REQUIRE(fixed_onehot.defined() && moving_onehot.defined(),
                     "total_loss: use_seg requires one-hot masks");
        t.seg = dice_seg_loss(fixed_onehot, warp3d(moving_onehot, field));
        t.total = add(t.total, mul(t.seg, cfg.gamma));
    }
    return t;
}

}  // namespace utsr
