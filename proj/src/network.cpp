#include "utsr/network.hpp"

#include <algorithm>
#include <cmath>

namespace utsr {

ModelConfig ModelConfig::variant(Variant v) {
    ModelConfig c;
    switch (v) {
        case Variant::small:
            c.embed_dim = 48;
            c.depths = {2, 2, 2, 2};
            c.heads = {4, 4, 4, 4};
            break;
        case Variant::base:
            c.embed_dim = 96;
            c.depths = {2, 2, 4, 2};
            c.heads = {4, 4, 8, 8};
            break;
        case Variant::large:
            c.embed_dim = 128;
            c.depths = {2, 2, 18, 2};
            c.heads = {4, 4, 8, 16};
            break;
    }
    return c;
}

namespace {

struct Builder {
    Model& m;
    Rng rng;

    Tensor reg(const std::string& name, Tensor t) {
        m.params.emplace_back(name, t);
        return t;
    }
    // truncated normal, std 0.02, resampled beyond 2 sigma
    Tensor tn(const std::string& name, Shape s) {
        std::vector<real> d(size_t(shape_numel(s)) + 0, 0);
        for (auto& v : d) {
            double x;
            do {
                x = rng.normal(0.0, 0.02);
            } while (std::abs(x) > 0.04);
            v = real(x);
        }
        return reg(name, Tensor::from_data(std::move(s), std::move(d), true));
    }
    // fan-in scaled truncated normal (gain 2 before ReLU, 1 otherwise).
    // The transformer linears sit between layer norms and keep the flat
    // 0.02 init; the decoder convolutions have no normalization, so a flat
    // std shrinks activations geometrically across the chain and must be
    // scaled by fan-in to preserve magnitude.
    Tensor fi(const std::string& name, Shape s, double gain) {
        double fan_in = 1;
        for (size_t i = 1; i < s.size(); ++i) fan_in *= double(s[size_t(i)]);
        const double sd = std::sqrt(gain / fan_in);
        std::vector<real> d(size_t(shape_numel(s)), 0);
        double ss = 0;
        for (auto& v : d) {
            double x;
            do {
                x = rng.normal(0.0, sd);
            } while (std::abs(x) > 2 * sd);
            v = real(x);
            ss += x * x;
        }
        // truncation shrinks the sample std below sd; renormalize so each
        // layer preserves activation magnitude exactly at init
        const real k = real(sd / std::sqrt(ss / double(d.size())));
        for (auto& v : d) v *= k;
        return reg(name, Tensor::from_data(std::move(s), std::move(d), true));
    }
    Tensor zp(const std::string& name, Shape s) { return reg(name, Tensor::zeros(std::move(s), true)); }
    Tensor op(const std::string& name, Shape s) {
        std::vector<real> d(size_t(shape_numel(s)) + 0, real(1));
        return reg(name, Tensor::from_data(std::move(s), std::move(d), true));
    }

    AttnParams attn(const std::string& pfx, int64_t c, int heads) {
        AttnParams a;
        a.heads = heads;
        a.wq = tn(pfx + ".wq", {c, c});
        a.bq = zp(pfx + ".bq", {c});
        a.wk = tn(pfx + ".wk", {c, c});
        a.bk = zp(pfx + ".bk", {c});
        a.wv = tn(pfx + ".wv", {c, c});
        a.bv = zp(pfx + ".bv", {c});
        a.wo = tn(pfx + ".wo", {c, c});
        a.bo = zp(pfx + ".bo", {c});
        return a;
    }
    MlpParams mlp(const std::string& pfx, int64_t c) {
        MlpParams p;
        p.w1 = tn(pfx + ".w1", {c, 4 * c});
        p.b1 = zp(pfx + ".b1", {4 * c});
        p.w2 = tn(pfx + ".w2", {4 * c, c});
        p.b2 = zp(pfx + ".b2", {c});
        return p;
    }
    CaParams ca(const std::string& pfx, int64_t c, int beta) {
        const int64_t h = std::max<int64_t>(1, c / beta);
        CaParams p;
        p.w1 = tn(pfx + ".w1", {c, h});
        p.b1 = zp(pfx + ".b1", {h});
        p.w2 = tn(pfx + ".w2", {h, c});
        p.b2 = zp(pfx + ".b2", {c});
        return p;
    }
};

// Index map for windows smaller than the table's native extent: the table
// keeps the native coordinate frame (per-axis span, offset shift), so the
// same learnable entries serve clamped windows at coarse stages.
RelPosBiasTable sub_index(const Tensor& table, int span, int shift, int pe, int poe, int lo_e) {
    RelPosBiasTable t;
    t.table = table;
    t.table_size = table.dim(1);
    t.nq = int64_t(pe) * pe * pe;
    t.nk = int64_t(poe) * poe * poe;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(size_t(t.nq * t.nk));
    for (int q0 = 0; q0 < pe; ++q0)
        for (int q1 = 0; q1 < pe; ++q1)
            for (int q2 = 0; q2 < pe; ++q2)
                for (int k0 = 0; k0 < poe; ++k0)
                    for (int k1 = 0; k1 < poe; ++k1)
                        for (int k2 = 0; k2 < poe; ++k2) {
                            int i0 = q0 - (k0 - lo_e) + shift;
                            int i1 = q1 - (k1 - lo_e) + shift;
                            int i2 = q2 - (k2 - lo_e) + shift;
                            UTSR_REQUIRE(i0 >= 0 && i0 < span && i1 >= 0 && i1 < span && i2 >= 0 &&
                                             i2 < span,
                                         "clamped-window bias index out of range");
                            idx->push_back((int64_t(i0) * span + i1) * span + i2);
                        }
    t.index = idx;
    return t;
}

int effective_window(const Shape& spatial, int w) {
    int64_t mn = std::min({spatial[0], spatial[1], spatial[2]});
    int pe = int(std::min<int64_t>(w, mn));
    for (int64_t d : spatial)
        UTSR_REQUIRE(d % pe == 0, "spatial extent " + std::to_string(d) +
                                      " not divisible by window " + std::to_string(pe));
    return pe;
}

Tensor run_fab(const Tensor& x, const FabParams& p, bool shifted, const ModelConfig& cfg) {
    const Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
    int pe = effective_window(spatial, cfg.window);
    bool shift_ok = shifted;
    for (int64_t d : spatial)
        if (d <= pe) shift_ok = false;  // single window along an axis: shifting is a no-op
    if (pe == cfg.window) return fab_forward(x, p, shift_ok);
    FabParams q = p;
    q.window = pe;
    q.bias = sub_index(p.bias.table, 2 * cfg.window - 1, cfg.window - 1, pe, pe, 0);
    return fab_forward(x, q, shift_ok);
}

Tensor run_oab(const Tensor& x, const OabParams& p, const ModelConfig& cfg) {
    const Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
    int pe = effective_window(spatial, cfg.window);
    if (pe == p.spec.p) return oab_forward(x, p);
    OabParams q = p;
    q.spec = WindowSpec{pe, cfg.epsilon};
    WindowSpec full = p.spec;
    q.bias = sub_index(p.bias.table, full.p + full.po() - 1, full.p - 1 + full.pad_hi(), pe,
                       q.spec.po(), q.spec.pad_lo());
    return oab_forward(x, q);
}

}  // namespace

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

Checkpoint Model::to_checkpoint() const {
    Checkpoint ck;
    for (const auto& [name, t] : params) {
        CheckpointEntry e;
        e.name = name;
        e.shape = t.shape();
        e.data.assign(t.data().begin(), t.data().end());
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

void Model::load_checkpoint(const Checkpoint& ck) {
    UTSR_REQUIRE(ck.entries.size() == params.size(),
                 "checkpoint has " + std::to_string(ck.entries.size()) + " tensors, model has " +
                     std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        const auto& e = ck.entries[i];
        UTSR_REQUIRE(e.name == name, "checkpoint tensor '" + e.name + "' where '" + name + "' expected");
        UTSR_REQUIRE(e.shape == t.shape(), "shape mismatch for '" + name + "'");
        for (size_t j = 0; j < e.data.size(); ++j) t.data()[j] = real(e.data[j]);
    }
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    for (int i = 0; i < 4; ++i)
        UTSR_REQUIRE(cfg.stage_dim(i) % cfg.heads[size_t(i)] == 0 &&
                         cfg.stage_dim(i) % cfg.oab_heads == 0,
                     "head count must divide the stage width");
    Model m;
    m.cfg = cfg;
    Builder b{m, Rng(seed)};
    const int64_t C = cfg.embed_dim;

    m.embed_w = b.tn("embed.w", {C, 2, 4, 4, 4});
    m.embed_b = b.zp("embed.b", {C});

    for (int i = 0; i < 4; ++i) {
        Stage& st = m.stages[size_t(i)];
        const int64_t ci = cfg.stage_dim(i);
        const std::string sp = "stage" + std::to_string(i);
        if (i > 0) {
            st.merge_w = b.tn(sp + ".merge.w", {8 * (ci / 2), ci});
            st.merge_b = b.zp(sp + ".merge.b", {ci});
        }
        for (int j = 0; j < cfg.depths[size_t(i)]; ++j) {
            const std::string fp = sp + ".fab" + std::to_string(j);
            FabParams f;
            f.ln1_g = b.op(fp + ".ln1.g", {ci});
            f.ln1_b = b.zp(fp + ".ln1.b", {ci});
            f.ln2_g = b.op(fp + ".ln2.g", {ci});
            f.ln2_b = b.zp(fp + ".ln2.b", {ci});
            f.attn = b.attn(fp + ".attn", ci, cfg.heads[size_t(i)]);
            f.bias = make_bias_wmsa(cfg.window, cfg.heads[size_t(i)]);
            f.bias.table = b.tn(fp + ".bias", f.bias.table.shape());
            f.ca = b.ca(fp + ".ca", ci, cfg.beta);
            f.mlp = b.mlp(fp + ".mlp", ci);
            f.alpha = cfg.alpha;
            f.use_ca = cfg.fab_on;
            f.window = cfg.window;
            st.fabs.push_back(std::move(f));
        }
        const std::string op = sp + ".oab";
        st.oab.ln1_g = b.op(op + ".ln1.g", {ci});
        st.oab.ln1_b = b.zp(op + ".ln1.b", {ci});
        st.oab.ln2_g = b.op(op + ".ln2.g", {ci});
        st.oab.ln2_b = b.zp(op + ".ln2.b", {ci});
        st.oab.attn = b.attn(op + ".attn", ci, cfg.oab_heads);
        st.oab.spec = WindowSpec{cfg.window, cfg.epsilon};
        st.oab.bias = make_bias_oab(st.oab.spec, cfg.oab_heads);
        st.oab.bias.table = b.tn(op + ".bias", st.oab.bias.table.shape());
        st.oab.mlp = b.mlp(op + ".mlp", ci);
    }

    if (cfg.use_conv_blocks) {
        m.convb_half_w = b.fi("convb.half.w", {C / 2, 2, 3, 3, 3}, 2.0);
        m.convb_half_b = b.zp("convb.half.b", {C / 2});
        m.convb_half_g = b.op("convb.half.g", {C / 2});
        m.convb_half_bias = b.zp("convb.half.nb", {C / 2});
        m.convb_full_w = b.fi("convb.full.w", {16, 2, 3, 3, 3}, 2.0);
        m.convb_full_b = b.zp("convb.full.b", {16});
        m.convb_full_g = b.op("convb.full.g", {16});
        m.convb_full_bias = b.zp("convb.full.nb", {16});
    }

    // decoder chain /32 -> /1; widths 4C, 2C, C, C/2, 16
    const int64_t widths_in[5] = {8 * C, 4 * C, 2 * C, C, C / 2};
    const int64_t widths_out[5] = {4 * C, 2 * C, C, C / 2, 16};
    for (int j = 0; j < 5; ++j) {
        UpStep u;
        u.has_skip = j < 3 || cfg.use_conv_blocks;
        const std::string up = "up" + std::to_string(j);
        const int64_t ci = widths_in[j], co = widths_out[j];
        if (cfg.upsample == ModelConfig::Upsample::sr) {
            u.chan_w = b.fi(up + ".chan.w", {8 * co, ci, 1, 1, 1}, 1.0);
            u.chan_b = b.zp(up + ".chan.b", {8 * co});
        } else {
            u.chan_w = b.fi(up + ".chan.w", {co, ci, 1, 1, 1}, 1.0);
            u.chan_b = b.zp(up + ".chan.b", {co});
        }
        const int64_t fused_in = u.has_skip ? 2 * co : co;
        u.fuse1_w = b.fi(up + ".fuse1.w", {co, fused_in, 3, 3, 3}, 2.0);
        u.fuse1_b = b.zp(up + ".fuse1.b", {co});
        u.fuse1_g = b.op(up + ".fuse1.g", {co});
        u.fuse1_nb = b.zp(up + ".fuse1.nb", {co});
        u.fuse2_w = b.fi(up + ".fuse2.w", {co, co, 3, 3, 3}, 1.0);
        u.fuse2_b = b.zp(up + ".fuse2.b", {co});
        m.up.push_back(std::move(u));
    }

    m.head_w = b.zp("head.w", {3, 16, 3, 3, 3});
    m.head_b = b.zp("head.b", {3});
    return m;
}

FeaturePyramid encode(const Tensor& moving, const Tensor& fixed, const Model& model) {
    UTSR_REQUIRE(moving.ndim() == 4 && moving.dim(0) == 1 && moving.shape() == fixed.shape(),
                 "encode expects matching [1, Z, Y, X] volumes");
    for (int i = 1; i < 4; ++i)
        UTSR_REQUIRE(moving.dim(i) % 32 == 0, "input extent " + std::to_string(moving.dim(i)) +
                                                  " not divisible by 32");
    const ModelConfig& cfg = model.cfg;
    FeaturePyramid pyr;
    Tensor x = patch_embed(moving, fixed, model.embed_w, model.embed_b);
    for (int i = 0; i < 4; ++i) {
        const Stage& st = model.stages[size_t(i)];
        if (i > 0) x = patch_merge(x, st.merge_w, st.merge_b);
        for (size_t j = 0; j < st.fabs.size(); ++j) x = run_fab(x, st.fabs[j], j % 2 == 1, cfg);
        if (cfg.oab_on) x = run_oab(x, st.oab, cfg);
        pyr.f[size_t(i)] = x;
    }
    if (cfg.use_conv_blocks) {
        Tensor pair = concat({moving, fixed}, 0);
        pyr.e_half = relu(instance_norm(conv3d(pair, model.convb_half_w, model.convb_half_b, 2, 1),
                                        model.convb_half_g, model.convb_half_bias));
        pyr.e_full = relu(instance_norm(conv3d(pair, model.convb_full_w, model.convb_full_b, 1, 1),
                                        model.convb_full_g, model.convb_full_bias));
    }
    return pyr;
}

Tensor decode(const FeaturePyramid& pyr, const Model& model) {
    const ModelConfig& cfg = model.cfg;
    Tensor x = pyr.f[3];
    for (size_t j = 0; j < model.up.size(); ++j) {
        const UpStep& u = model.up[j];
        if (cfg.upsample == ModelConfig::Upsample::sr) {
            x = pixel_shuffle(conv3d(x, u.chan_w, u.chan_b, 1, 0), 2);
        } else {
            x = conv3d(trilinear_up2(x), u.chan_w, u.chan_b, 1, 0);
        }
        if (u.has_skip) {
            Tensor skip = j < 3 ? pyr.f[2 - j] : (j == 3 ? pyr.e_half : pyr.e_full);
            UTSR_REQUIRE(skip.dim(1) == x.dim(1) && skip.dim(2) == x.dim(2) && skip.dim(3) == x.dim(3),
                         "upsampled extents do not match the skip connection");
            x = concat({x, skip}, 0);
        }
        x = relu(instance_norm(conv3d(x, u.fuse1_w, u.fuse1_b, 1, 1), u.fuse1_g, u.fuse1_nb));
        x = conv3d(x, u.fuse2_w, u.fuse2_b, 1, 1);
    }
    return conv3d(x, model.head_w, model.head_b, 1, 1);
}

std::pair<DisplacementField, Volume> register_pair(const Volume& moving, const Volume& fixed,
                                                   const Model& model) {
    Tensor m = volume_to_tensor(moving);
    Tensor f = volume_to_tensor(fixed);
    Tensor field = forward_field(m, f, model);
    Tensor warped = warp3d(m, field);
    return {tensor_to_field(field, moving.spacing), tensor_to_volume(warped, moving.spacing)};
}

}  // namespace utsr
