#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "utsr/metrics.hpp"
#include "utsr/trainer.hpp"

using namespace utsr;

namespace {

SynthSpec tiny_spec() {
    SynthSpec s;
    s.dims = {32, 32, 32};
    s.n_subjects = 2;
    s.n_labels = 2;
    s.radius_min = 3;
    s.radius_max = 5;
    s.deform_amplitude = 2;
    s.translation = 1;
    return s;
}

TrainConfig tiny_cfg() {
    TrainConfig c;
    c.model = ModelConfig::variant(ModelConfig::Variant::small);
    c.max_iterations = 2;
    c.loss.lncc_cube = 5;
    c.seed = 11;
    return c;
}

}  // namespace

TEST_CASE("adam oracles") {
    // scalar optimization of (x - 5)^2
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("x", Tensor::zeros({1}, true));
    AdamState st;
    for (int i = 0; i < 500; ++i) {
        Tensor& x = params[0].second;
        x.zero_grad();
        Tensor d = add(x, real(-5));
        backward(mul(d, d));
        adam_step(params, st, real(0.1));
    }
    CHECK(std::abs(double(params[0].second.data()[0]) - 5.0) < 0.01);

    // first step magnitude ~ lr regardless of gradient scale
    std::vector<std::pair<std::string, Tensor>> p2;
    p2.emplace_back("y", Tensor::from_data({2}, {real(1), real(2)}, true));
    Tensor y = p2[0].second;
    backward(reduce_sum(mul(y, real(1000))));
    AdamState st2;
    adam_step(p2, st2, real(0.01));
    CHECK(double(y.data()[0]) == doctest::Approx(1.0 - 0.01).epsilon(1e-5));
    CHECK(double(y.data()[1]) == doctest::Approx(2.0 - 0.01).epsilon(1e-5));

    // zero gradient: unchanged
    std::vector<std::pair<std::string, Tensor>> p3;
    p3.emplace_back("z", Tensor::from_data({1}, {real(3)}, true));
    AdamState st3;
    adam_step(p3, st3, real(0.1));
    CHECK(double(p3[0].second.data()[0]) == 3.0);
}

TEST_CASE("synthetic generation") {
    SynthSpec spec = tiny_spec();
    auto a = gen_synthetic(spec, 5);
    auto b = gen_synthetic(spec, 5);
    REQUIRE(a.size() == 2);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].vol.values == b[i].vol.values);  // bit-identical per seed
        CHECK(a[i].mask.labels == b[i].mask.labels);
        CHECK(a[i].deform.values == b[i].deform.values);
    }
    auto c = gen_synthetic(spec, 6);
    CHECK(c[0].vol.values != a[0].vol.values);

    // all labels present, volumes finite and bounded
    for (const auto& s : a) {
        int maxl = 0;
        for (uint8_t l : s.mask.labels) maxl = std::max(maxl, int(l));
        CHECK(maxl == spec.n_labels);
        for (float v : s.vol.values) {
            CHECK(std::isfinite(v));
            CHECK(v >= -0.5);
            CHECK(v <= 1.5);
        }
        // generated deformations are fold-free
        JacobianStats js = jacobian_stats(s.deform);
        CHECK(js.fold_fraction == 0.0);
    }

    // amplitude 0: structure positions shared across subjects
    SynthSpec still = tiny_spec();
    still.deform_amplitude = 0;
    still.translation = 0;
    auto d = gen_synthetic(still, 5);
    CHECK(d[0].mask.labels == d[1].mask.labels);
}

TEST_CASE("training loop determinism and zero-lr") {
    SynthSpec spec = tiny_spec();
    auto data = gen_synthetic(spec, 3);

    TrainConfig cfg = tiny_cfg();
    cfg.learning_rate = 0;
    TrainResult r0 = train(cfg, data);
    CHECK(!r0.aborted);
    REQUIRE(r0.trace.size() == 2);
    Model fresh = build_model(cfg.model, cfg.seed);
    for (size_t i = 0; i < fresh.params.size(); ++i)
        CHECK(fresh.params[i].second.data() == r0.model.params[i].second.data());

    cfg.learning_rate = real(1e-4);
    TrainResult r1 = train(cfg, data);
    TrainResult r2 = train(cfg, data);
    CHECK(r1.trace == r2.trace);  // bitwise-reproducible trace
    for (size_t i = 0; i < r1.model.params.size(); ++i)
        CHECK(r1.model.params[i].second.data() == r2.model.params[i].second.data());
    CHECK(r1.model.params[0].second.data() != r0.model.params[0].second.data());

    CHECK_THROWS(train(cfg, {data[0]}));  // needs two subjects
}

TEST_CASE("checkpointing, csv, and nan abort") {
    SynthSpec spec = tiny_spec();
    auto data = gen_synthetic(spec, 3);
    TrainConfig cfg = tiny_cfg();
    cfg.checkpoint_every = 1;
    const std::string dir = "/tmp/utsr_trainer_test";
    std::filesystem::remove_all(dir);
    TrainResult r = train(cfg, data, dir);
    CHECK(std::filesystem::exists(dir + "/ckpt_2.json"));
    CHECK(std::filesystem::exists(dir + "/ckpt_final.raw"));

    // checkpoint round trip: identical forward pass
    Checkpoint ck = read_checkpoint(dir + "/ckpt_final");
    Model loaded = build_model(cfg.model, 999);
    loaded.load_checkpoint(ck);
    Tensor m = volume_to_tensor(data[0].vol), f = volume_to_tensor(data[1].vol);
    Tensor a = forward_field(m, f, r.model);
    Tensor b = forward_field(m, f, loaded);
    CHECK(a.data() == b.data());

    std::ifstream csv(dir + "/loss.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "iteration,total,sim,smooth,seg");
    int rows = 0;
    for (std::string line; std::getline(csv, line);)
        if (!line.empty()) ++rows;
    CHECK(rows == 2);

    // a non-finite weight poisons the loss -> abort with iteration index
    Checkpoint bad = ck;
    bad.entries[0].data[0] = std::numeric_limits<float>::quiet_NaN();
    TrainResult ab = train(cfg, data, "", &bad);
    CHECK(ab.aborted);
    CHECK(ab.abort_iteration == 1);
    CHECK(ab.trace.empty());
}

TEST_CASE("ablation matrix completes") {
    SynthSpec spec = tiny_spec();
    auto data = gen_synthetic(spec, 3);
    TrainConfig cfg = tiny_cfg();
    cfg.max_iterations = 1;

    for (int variant = 0; variant < 4; ++variant) {
        TrainConfig c = cfg;
        if (variant == 1) c.model.upsample = ModelConfig::Upsample::trilinear;
        if (variant == 2) c.model.fab_on = false;
        if (variant == 3) c.model.oab_on = false;
        TrainResult r = train(c, data);
        CHECK(!r.aborted);
        CHECK(std::isfinite(r.trace[0][0]));
    }

    // seg-loss path end to end
    TrainConfig cs = cfg;
    cs.loss.use_seg = true;
    cs.loss.gamma = real(0.5);
    TrainResult rs = train(cs, data);
    CHECK(!rs.aborted);
    CHECK(rs.trace[0][3] != 0.0);
}
