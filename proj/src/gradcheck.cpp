#include "utsr/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "utsr/blocks.hpp"
#include "utsr/losses.hpp"
#include "utsr/tensor.hpp"
#include "utsr/windowing.hpp"

namespace utsr {

namespace {

struct Battery {
    std::vector<GradCheckCase> out;
    Rng rng;
    double tol;
    real eps = sizeof(real) == 8 ? real(1e-5) : real(3e-2);

    Tensor rand(Shape s, double lo, double hi, bool away_from_zero = false) {
        std::vector<real> d(size_t(shape_numel(s)) + 0, 0);
        for (auto& v : d) {
            double x;
            do {
                x = rng.uniform(lo, hi);
            } while (away_from_zero && std::abs(x) < 0.1);
            v = real(x);
        }
        return Tensor::from_data(std::move(s), std::move(d));
    }

    // scalarize through a fixed positive weighting so every output
    // coordinate contributes a distinct gradient
    void run(const std::string& name, const std::function<Tensor(const Tensor&)>& op, const Tensor& x) {
        Tensor w = rand(op(x).shape(), 0.5, 1.0);
        auto f = [&op, w](const Tensor& t) { return reduce_sum(mul(op(t), w)); };
        double err = grad_check(f, x, eps);
        out.push_back({name, err, err < tol});
    }
    // for ops that already return a scalar
    void run_scalar(const std::string& name, const std::function<Tensor(const Tensor&)>& op,
                    const Tensor& x, real eps_mul = 1) {
        double err = grad_check(op, x, eps * eps_mul);
        out.push_back({name, err, err < tol});
    }

    // Directional-derivative check: <grad, v> against a central difference
    // along one random direction. Used for composite blocks/losses in the
    // 32-bit build, where the per-coordinate max is dominated by rounding
    // noise on coordinates whose true gradient is tiny; the 64-bit build
    // still checks those cases per coordinate.
    void run_dir(const std::string& name, const std::function<Tensor(const Tensor&)>& op,
                 const Tensor& x) {
        Tensor v = rand(x.shape(), 0.5, 1.0);
        for (auto& c : v.data())
            if (rng.uniform() < 0.5) c = -c;
        Tensor probe = Tensor::from_data(x.shape(), x.data(), true);
        backward(op(probe));
        double analytic = 0;
        for (size_t i = 0; i < v.data().size(); ++i)
            analytic += double(probe.grad()[i]) * double(v.data()[i]);
        const real de = real(1e-3);
        auto shifted = [&](real sign) {
            std::vector<real> d = x.data();
            for (size_t i = 0; i < d.size(); ++i) d[i] += sign * de * v.data()[i];
            return double(op(Tensor::from_data(x.shape(), std::move(d))).item());
        };
        double central = (shifted(1) - shifted(-1)) / (2.0 * double(de));
        double err = std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-8);
        out.push_back({name, err, err < tol});
    }
    // per-coordinate in the 64-bit build, directional in the 32-bit build
    void run_mixed(const std::string& name, const std::function<Tensor(const Tensor&)>& op,
                   const Tensor& x, real eps_mul = 1) {
        if (sizeof(real) == 8)
            run_scalar(name, op, x, eps_mul);
        else
            run_dir(name, op, x);
    }
    void run_mixed_t(const std::string& name, const std::function<Tensor(const Tensor&)>& op,
                     const Tensor& x) {
        Tensor w = rand(op(x).shape(), 0.5, 1.0);
        run_mixed(name, [&op, w](const Tensor& t) { return reduce_sum(mul(op(t), w)); }, x);
    }
};

}  // namespace

std::vector<GradCheckCase> gradcheck_battery(uint64_t seed, double tol) {
    Battery b{{}, Rng(seed), tol};

    // ---- elementwise --------------------------------------------------
    Tensor x6 = b.rand({6}, -1, 1, true);
    Tensor c6 = b.rand({6}, -1, 1, true);
    Tensor pos = b.rand({6}, 0.4, 1.5);
    b.run("add.lhs", [&](const Tensor& t) { return add(t, c6); }, x6);
    b.run("add.rhs", [&](const Tensor& t) { return add(c6, t); }, x6);
    b.run("sub.lhs", [&](const Tensor& t) { return sub(t, c6); }, x6);
    b.run("sub.rhs", [&](const Tensor& t) { return sub(c6, t); }, x6);
    b.run("mul.lhs", [&](const Tensor& t) { return mul(t, c6); }, x6);
    b.run("mul.rhs", [&](const Tensor& t) { return mul(c6, t); }, x6);
    b.run("div.num", [&](const Tensor& t) { return div(t, pos); }, x6);
    b.run("div.den", [&](const Tensor& t) { return div(c6, t); }, pos);
    b.run("add.scalar", [&](const Tensor& t) { return add(t, real(0.7)); }, x6);
    b.run("mul.scalar", [&](const Tensor& t) { return mul(t, real(-1.3)); }, x6);
    b.run("neg", [](const Tensor& t) { return neg(t); }, x6);
    b.run("exp", [](const Tensor& t) { return exp(t); }, x6);
    b.run("log", [](const Tensor& t) { return log(t); }, pos);
    b.run("sqrt", [](const Tensor& t) { return sqrt(t); }, pos);
    b.run("pow", [](const Tensor& t) { return pow(t, real(1.7)); }, pos);
    b.run("sigmoid", [](const Tensor& t) { return sigmoid(t); }, x6);
    b.run("gelu", [](const Tensor& t) { return gelu(t); }, x6);
    b.run("relu", [](const Tensor& t) { return relu(t); }, x6);

    // ---- shape ops -----------------------------------------------------
    Tensor x234 = b.rand({2, 3, 4}, -1, 1);
    Tensor c234 = b.rand({2, 3, 4}, -1, 1);
    b.run("concat", [&](const Tensor& t) { return concat({t, c234}, 1); }, x234);
    b.run("slice", [](const Tensor& t) { return slice(t, 2, 1, 2); }, x234);
    b.run("split",
          [](const Tensor& t) {
              auto parts = split(t, 1, {1, 2});
              return concat({parts[1], parts[0]}, 1);
          },
          x234);
    b.run("pad_zero", [](const Tensor& t) { return pad_zero(t, {{0, 0}, {1, 2}, {0, 1}}); }, x234);
    b.run("permute", [](const Tensor& t) { return permute(t, {2, 0, 1}); }, x234);
    b.run("reshape", [](const Tensor& t) { return reshape(t, {4, 6}); }, x234);
    b.run("reduce_sum.axis", [](const Tensor& t) { return reduce_sum(t, 1); }, x234);
    b.run("reduce_mean.axis", [](const Tensor& t) { return reduce_mean(t, 2); }, x234);
    b.run_scalar("reduce_sum", [](const Tensor& t) { return reduce_sum(t); }, x234);
    b.run_scalar("reduce_mean", [](const Tensor& t) { return reduce_mean(t); }, x234);

    // ---- contraction / normalization ------------------------------------
    Tensor a34 = b.rand({3, 4}, -1, 1);
    Tensor b45 = b.rand({4, 5}, -1, 1);
    Tensor batch = b.rand({2, 3, 4}, -1, 1);
    Tensor batch_b = b.rand({2, 4, 2}, -1, 1);
    b.run("matmul.lhs", [&](const Tensor& t) { return matmul(t, b45); }, a34);
    b.run("matmul.rhs", [&](const Tensor& t) { return matmul(a34, t); }, b45);
    b.run("matmul.batched", [&](const Tensor& t) { return matmul(t, batch_b); }, batch);
    b.run("matmul.shared_rhs", [&](const Tensor& t) { return matmul(batch, t); }, b45);
    b.run("softmax", [](const Tensor& t) { return softmax(t, 2); }, x234);
    Tensor gain = b.rand({4}, 0.5, 1.5), bias = b.rand({4}, -0.5, 0.5);
    b.run("layer_norm.x", [&](const Tensor& t) { return layer_norm(t, gain, bias); }, x234);
    b.run("layer_norm.gain", [&](const Tensor& t) { return layer_norm(x234, t, bias); }, gain);
    b.run("layer_norm.bias", [&](const Tensor& t) { return layer_norm(x234, gain, t); }, bias);
    Tensor grid = b.rand({2, 4, 4, 4}, -1, 1);
    Tensor ig = b.rand({2}, 0.5, 1.5), ib = b.rand({2}, -0.5, 0.5);
    b.run("instance_norm.x", [&](const Tensor& t) { return instance_norm(t, ig, ib); }, grid);
    b.run("instance_norm.gain", [&](const Tensor& t) { return instance_norm(grid, t, ib); }, ig);

    Tensor cw = b.rand({3, 2, 3, 3, 3}, -0.5, 0.5);
    Tensor cb = b.rand({3}, -0.5, 0.5);
    b.run("conv3d.x", [&](const Tensor& t) { return conv3d(t, cw, cb, 1, 1); }, grid);
    b.run("conv3d.w", [&](const Tensor& t) { return conv3d(grid, t, cb, 1, 1); }, cw);
    b.run("conv3d.b", [&](const Tensor& t) { return conv3d(grid, cw, t, 1, 1); }, cb);
    b.run("conv3d.strided.x", [&](const Tensor& t) { return conv3d(t, cw, cb, 2, 1); }, grid);

    // ---- structured movement ---------------------------------------------
    b.run("window_partition", [](const Tensor& t) { return window_partition(t, 2); }, grid);
    b.run("window_reverse",
          [](const Tensor& t) { return window_reverse(t, 2, {4, 4, 4}); },
          b.rand({8, 8, 2}, -1, 1));
    WindowSpec spec{2, 0.5};
    b.run("overlapping_partition", [&](const Tensor& t) { return overlapping_partition(t, spec); },
          grid);
    b.run("roll3d", [](const Tensor& t) { return roll3d(t, 1, 2, 3); }, grid);
    b.run("pixel_shuffle", [](const Tensor& t) { return pixel_shuffle(t, 2); },
          b.rand({16, 2, 2, 2}, -1, 1));
    Tensor cols = b.rand({5, 3}, -1, 1), g3 = b.rand({3}, 0.5, 1.5);
    b.run("scale_cols.x", [&](const Tensor& t) { return scale_cols(t, g3); }, cols);
    b.run("scale_cols.g", [&](const Tensor& t) { return scale_cols(cols, t); }, g3);
    b.run("add_bias.x", [&](const Tensor& t) { return add_bias(t, g3); }, cols);
    b.run("add_bias.b", [&](const Tensor& t) { return add_bias(cols, t); }, g3);

    Tensor logits = b.rand({4, 3, 5}, -1, 1);  // 2 windows x 2 heads
    Tensor abias = b.rand({2, 3, 5}, -1, 1);
    Tensor amask = b.rand({2, 3, 5}, -1, 1);
    b.run("attn_bias_add.logits",
          [&](const Tensor& t) { return attn_bias_add(t, abias, amask, 2); }, logits);
    b.run("attn_bias_add.bias", [&](const Tensor& t) { return attn_bias_add(logits, t, amask, 2); },
          abias);
    b.run("box_sum", [](const Tensor& t) { return box_sum(t, 2); }, b.rand({1, 5, 5, 5}, -1, 1));

    Tensor img = b.rand({2, 5, 5, 5}, -1, 1);
    Tensor field = b.rand({3, 5, 5, 5}, -0.4, 0.4, true);
    b.run("warp3d.img", [&](const Tensor& t) { return warp3d(t, field); }, img);
    b.run("warp3d.field", [&](const Tensor& t) { return warp3d(img, t); }, field);
    b.run("trilinear_up2", [](const Tensor& t) { return trilinear_up2(t); }, grid);

    std::vector<real> centers;
    for (int i = 0; i < 4; ++i) centers.push_back(real((i + 0.5) / 4.0));
    b.run("parzen_weights",
          [&](const Tensor& t) { return parzen_weights(t, centers, real(0.5)); },
          b.rand({20}, 0.1, 0.9));
    Tensor joint = b.rand({4, 4}, 0.01, 0.1);
    b.run_mixed("mi_from_joint", [](const Tensor& t) { return mi_from_joint(t); }, joint);

    // ---- composite blocks -------------------------------------------------
    {
        const int64_t C = 8;
        FabParams p;
        p.ln1_g = b.rand({C}, 0.8, 1.2);
        p.ln1_b = b.rand({C}, -0.2, 0.2);
        p.ln2_g = b.rand({C}, 0.8, 1.2);
        p.ln2_b = b.rand({C}, -0.2, 0.2);
        p.attn = {b.rand({C, C}, -0.3, 0.3), b.rand({C}, -0.1, 0.1), b.rand({C, C}, -0.3, 0.3),
                  b.rand({C}, -0.1, 0.1), b.rand({C, C}, -0.3, 0.3), b.rand({C}, -0.1, 0.1),
                  b.rand({C, C}, -0.3, 0.3), b.rand({C}, -0.1, 0.1), 2};
        p.bias = make_bias_wmsa(4, 2);
        p.bias.table = b.rand(p.bias.table.shape(), -0.2, 0.2);
        p.ca = {b.rand({C, 2}, -0.3, 0.3), b.rand({2}, -0.1, 0.1), b.rand({2, C}, -0.3, 0.3),
                b.rand({C}, -0.1, 0.1)};
        p.mlp = {b.rand({C, 4 * C}, -0.3, 0.3), b.rand({4 * C}, -0.1, 0.1),
                 b.rand({4 * C, C}, -0.3, 0.3), b.rand({C}, -0.1, 0.1)};
        Tensor fx = b.rand({C, 4, 4, 4}, -1, 1);
        b.run_mixed_t("fab.input", [&](const Tensor& t) { return fab_forward(t, p, false); }, fx);
        b.run_mixed_t("fab.shifted.input", [&](const Tensor& t) { return fab_forward(t, p, true); }, fx);
        b.run_mixed_t("fab.bias_table",
              [&](const Tensor& t) {
                  FabParams q = p;
                  q.bias.table = t;
                  return fab_forward(fx, q, false);
              },
              p.bias.table);
        b.run_mixed_t("fab.wq",
              [&](const Tensor& t) {
                  FabParams q = p;
                  q.attn.wq = t;
                  return fab_forward(fx, q, false);
              },
              p.attn.wq);

        OabParams o;
        o.ln1_g = p.ln1_g;
        o.ln1_b = p.ln1_b;
        o.ln2_g = p.ln2_g;
        o.ln2_b = p.ln2_b;
        o.attn = p.attn;
        o.spec = WindowSpec{4, 0.5};
        o.bias = make_bias_oab(o.spec, 2);
        o.bias.table = b.rand(o.bias.table.shape(), -0.2, 0.2);
        o.mlp = p.mlp;
        b.run_mixed_t("oab.input", [&](const Tensor& t) { return oab_forward(t, o); }, fx);
        b.run_mixed_t("channel_attention", [&](const Tensor& t) { return channel_attention(t, p.ca); },
              b.rand({10, C}, -1, 1));
    }

    // ---- losses -------------------------------------------------------------
    Tensor lf = b.rand({1, 7, 7, 7}, 0.1, 0.9);
    Tensor lw = add(mul(lf, real(0.8)), mul(b.rand({1, 7, 7, 7}, -0.1, 0.1), real(1)));
    b.run_mixed("lncc_loss.w", [&](const Tensor& t) { return lncc_loss(lf, t, 5); }, lw);
    b.run_mixed("lncc_loss.f", [&](const Tensor& t) { return lncc_loss(t, lw, 5); }, lf);
    b.run_mixed("mi_loss.w", [&](const Tensor& t) { return mi_loss(lf, t, 8); }, lw);
    b.run_mixed("diffusion_loss", [](const Tensor& t) { return diffusion_loss(t); },
                 b.rand({3, 5, 5, 5}, -1, 1));
    Tensor soft_f = b.rand({2, 5, 5, 5}, 0.05, 0.95);
    Tensor soft_w = b.rand({2, 5, 5, 5}, 0.05, 0.95);
    b.run_mixed("dice_seg_loss.w", [&](const Tensor& t) { return dice_seg_loss(soft_f, t); }, soft_w);

    // ---- total loss on an 11^3 pair, gradient w.r.t. the field --------------
    {
        const int64_t n = 11;
        Tensor fvol = b.rand({1, n, n, n}, 0.1, 0.9);
        Tensor mvol = b.rand({1, n, n, n}, 0.1, 0.9);
        Tensor tf = b.rand({3, n, n, n}, -0.4, 0.4, true);
        Tensor oh_f = b.rand({2, n, n, n}, 0.05, 0.95);
        Tensor oh_m = b.rand({2, n, n, n}, 0.05, 0.95);
        LossConfig cfg;
        cfg.lncc_cube = 5;
        cfg.lambda = real(0.5);
        cfg.gamma = real(0.5);
        cfg.use_seg = true;
        b.run_mixed("total_loss.field",
                     [&](const Tensor& t) { return total_loss(fvol, mvol, t, oh_f, oh_m, cfg).total; },
                     tf, 10);
    }

    return b.out;
}

}  // namespace utsr
