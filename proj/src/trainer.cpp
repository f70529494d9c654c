#include "utsr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace utsr {

namespace {

// clamped trilinear sample of a [gz, gy, gx] grid at fractional (x, y, z)
double grid_sample(const std::vector<double>& g, int64_t gx, int64_t gy, int64_t gz, double x,
                   double y, double z) {
    auto prep = [](double c, int64_t n, int64_t& i0, double& f) {
        c = std::clamp(c, 0.0, double(n - 1));
        i0 = std::min(n - 2, std::max<int64_t>(0, int64_t(std::floor(c))));
        f = c - double(i0);
    };
    int64_t ix, iy, iz;
    double fx, fy, fz;
    prep(x, gx, ix, fx);
    prep(y, gy, iy, fy);
    prep(z, gz, iz, fz);
    double v = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                v += w * g[size_t(((iz + dz) * gy + iy + dy) * gx + ix + dx)];
            }
    return v;
}

struct Ellipsoid {
    double c[3], r[3];
};

bool is_finite(double v) { return std::isfinite(v); }

}  // namespace

std::vector<Subject> gen_synthetic(const SynthSpec& spec, uint64_t seed) {
    for (int64_t d : spec.dims)
        UTSR_REQUIRE(d % 32 == 0, "synthetic dims must be divisible by 32");
    UTSR_REQUIRE(spec.n_subjects >= 1 && spec.n_labels >= 1, "need at least one subject and label");
    const int64_t X = spec.dims[0], Y = spec.dims[1], Z = spec.dims[2];
    const int64_t S = X * Y * Z;
    Rng rng(seed);

    // shared template: smooth background on an 8-voxel control grid
    const int64_t bs = 8;
    const int64_t bgx = X / bs + 2, bgy = Y / bs + 2, bgz = Z / bs + 2;
    std::vector<double> bg(size_t(bgx * bgy * bgz) + 0, 0);
    for (auto& v : bg) v = rng.uniform(0.05, 0.45);

    const double margin = spec.radius_max + spec.deform_amplitude + spec.translation + 2;
    std::vector<Ellipsoid> blobs;
    std::vector<double> blob_intensity;
    for (int k = 0; k < spec.n_labels; ++k) {
        Ellipsoid e;
        const double dims_d[3] = {double(X), double(Y), double(Z)};
        for (int a = 0; a < 3; ++a) e.c[a] = rng.uniform(margin, dims_d[a] - margin);
        for (int a = 0; a < 3; ++a) e.r[a] = rng.uniform(spec.radius_min, spec.radius_max);
        blobs.push_back(e);
        blob_intensity.push_back(0.55 + 0.4 * double(k) / double(std::max(1, spec.n_labels - 1)));
    }

    auto intensity_at = [&](double x, double y, double z, int& label) {
        label = 0;
        double v = grid_sample(bg, bgx, bgy, bgz, x / double(bs) + 1, y / double(bs) + 1,
                               z / double(bs) + 1);
        for (size_t k = blobs.size(); k-- > 0;) {
            const Ellipsoid& e = blobs[k];
            double q = std::pow((x - e.c[0]) / e.r[0], 2) + std::pow((y - e.c[1]) / e.r[1], 2) +
                       std::pow((z - e.c[2]) / e.r[2], 2);
            if (q <= 1.0) {
                label = int(k) + 1;
                return blob_intensity[k] + 0.15 * v;
            }
        }
        return v;
    };

    std::vector<Subject> out;
    const int64_t cs = spec.control_spacing;
    const int64_t fgx = X / cs + 2, fgy = Y / cs + 2, fgz = Z / cs + 2;
    for (int s = 0; s < spec.n_subjects; ++s) {
        // per-subject smooth field: control-grid noise scaled to peak amplitude
        std::vector<std::vector<double>> ctrl(3, std::vector<double>(size_t(fgx * fgy * fgz) + 0, 0));
        for (auto& ch : ctrl)
            for (auto& v : ch) v = rng.uniform(-1, 1);
        double shift[3];
        for (auto& v : shift) v = rng.uniform(-spec.translation, spec.translation);

        Subject sub;
        sub.vol.dims = sub.mask.dims = sub.deform.dims = spec.dims;
        sub.vol.values.resize(size_t(S) + 0);
        sub.mask.labels.resize(size_t(S) + 0);
        sub.deform.values.resize(size_t(3 * S) + 0);
        // peak normalization keeps max |grad u| ~ amplitude / control_spacing < 1
        const double amp = spec.deform_amplitude;
        for (int64_t z = 0; z < Z; ++z)
            for (int64_t y = 0; y < Y; ++y)
                for (int64_t x = 0; x < X; ++x) {
                    const int64_t i = (z * Y + y) * X + x;
                    double u[3];
                    for (int c = 0; c < 3; ++c) {
                        u[c] = amp * grid_sample(ctrl[size_t(c)], fgx, fgy, fgz,
                                                 double(x) / double(cs) + 1, double(y) / double(cs) + 1,
                                                 double(z) / double(cs) + 1) +
                               shift[c];
                        sub.deform.values[size_t(c * S + i)] = float(u[c]);
                    }
                    int label = 0;
                    sub.vol.values[size_t(i)] =
                        float(intensity_at(double(x) + u[0], double(y) + u[1], double(z) + u[2], label));
                    sub.mask.labels[size_t(i)] = uint8_t(label);
                }
        UTSR_REQUIRE(2.0 * amp / double(cs) < 1.0,
                     "deform_amplitude too large for the control spacing (risk of folding)");
        out.push_back(std::move(sub));
    }
    return out;
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, real lr,
               real beta1, real beta2, real eps) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].second.data().size(), real(0));
            state.v[i].assign(params[i].second.data().size(), real(0));
        }
    }
    UTSR_REQUIRE(state.m.size() == params.size(), "optimizer state does not match parameter list");
    ++state.step;
    const real bc1 = real(1) - real(std::pow(double(beta1), double(state.step)));
    const real bc2 = real(1) - real(std::pow(double(beta2), double(state.step)));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        auto& val = p.data();
        UTSR_REQUIRE(state.m[i].size() == val.size(),
                     "optimizer state shape mismatch for '" + params[i].first + "'");
        if (!p.has_grad()) continue;  // zero gradient: moments decay, value unchanged below
        const auto& g = p.grad();
        UTSR_REQUIRE(g.size() == val.size(), "gradient shape mismatch for '" + params[i].first + "'");
        auto& m = state.m[i];
        auto& v = state.v[i];
        const real c1 = real(1) - beta1, c2 = real(1) - beta2;
        const real lr_h = lr / bc1, inv_bc2 = real(1) / bc2;
        real* mp = m.data();
        real* vp = v.data();
        real* xp = val.data();
        const real* gp = g.data();
        for (size_t j = 0; j < val.size(); ++j) {
            mp[j] = beta1 * mp[j] + c1 * gp[j];
            vp[j] = beta2 * vp[j] + c2 * gp[j] * gp[j];
            xp[j] -= lr_h * mp[j] / (std::sqrt(vp[j] * inv_bc2) + eps);
        }
    }
}

TrainResult train(const TrainConfig& cfg, const std::vector<Subject>& data, const std::string& out_dir,
                  const Checkpoint* init) {
    UTSR_REQUIRE(data.size() >= 2, "training needs at least two subjects");
    UTSR_REQUIRE(cfg.max_iterations >= 1, "max_iterations must be positive");
    UTSR_REQUIRE(cfg.learning_rate >= 0, "negative learning rate");
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainResult res;
    res.model = build_model(cfg.model, cfg.seed);
    if (init) res.model.load_checkpoint(*init);

    int k = 0;
    if (cfg.loss.use_seg)
        for (const auto& s : data)
            for (uint8_t l : s.mask.labels) k = std::max(k, int(l));
    std::vector<Tensor> vols, onehots;
    for (const auto& s : data) {
        vols.push_back(volume_to_tensor(s.vol));
        if (cfg.loss.use_seg) onehots.push_back(mask_to_onehot(s.mask, k));
    }

    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < int(data.size()); ++i)
        for (int j = 0; j < int(data.size()); ++j)
            if (i != j) pairs.emplace_back(i, j);
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    size_t cursor = pairs.size();

    AdamState st;
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        if (cursor >= pairs.size()) {
            for (size_t i = pairs.size(); i > 1; --i)
                std::swap(pairs[i - 1], pairs[size_t(rng.uniform_int(0, int(i) - 1))]);
            cursor = 0;
        }
        auto [mv, fx] = pairs[cursor++];

        Tensor field = forward_field(vols[size_t(mv)], vols[size_t(fx)], res.model);
        LossTerms t = total_loss(vols[size_t(fx)], vols[size_t(mv)], field,
                                 cfg.loss.use_seg ? onehots[size_t(fx)] : Tensor(),
                                 cfg.loss.use_seg ? onehots[size_t(mv)] : Tensor(), cfg.loss);
        const double total = double(t.total.item());
        if (!is_finite(total)) {
            res.aborted = true;
            res.abort_iteration = it;
            break;
        }
        res.trace.push_back({total, double(t.sim.item()), double(t.smooth.item()),
                             cfg.loss.use_seg ? double(t.seg.item()) : 0.0});

        for (auto& [name, p] : res.model.params) p.zero_grad();
        backward(t.total);
        adam_step(res.model.params, st, cfg.learning_rate);

        if (!out_dir.empty() && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0)
            write_checkpoint(res.model.to_checkpoint(), out_dir + "/ckpt_" + std::to_string(it));
    }

    if (!out_dir.empty()) {
        write_checkpoint(res.model.to_checkpoint(), out_dir + "/ckpt_final");
        write_loss_csv(res.trace, out_dir + "/loss.csv");
    }
    return res;
}

void write_loss_csv(const std::vector<std::array<double, 4>>& trace, const std::string& path) {
    std::ofstream out(path);
    UTSR_REQUIRE(out.good(), "cannot open '" + path + "' for writing");
    out << "iteration,total,sim,smooth,seg\n";
    char buf[160];
    for (size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", i + 1, trace[i][0], trace[i][1],
                      trace[i][2], trace[i][3]);
        out << buf;
    }
    UTSR_REQUIRE(out.good(), "failed writing '" + path + "'");
}

}  // namespace utsr
