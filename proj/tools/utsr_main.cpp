// Command-line front end: synthetic data generation, training, inference,
// evaluation, gradient checking, and slice plotting.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "utsr/gradcheck.hpp"
#include "utsr/metrics.hpp"
#include "utsr/network.hpp"
#include "utsr/trainer.hpp"
#include "utsr/volume_io.hpp"

using json = nlohmann::json;
using namespace utsr;

namespace {

ModelConfig parse_model_config(const json& j) {
    std::string v = j.value("variant", "base");
    ModelConfig cfg;
    if (v == "small")
        cfg = ModelConfig::variant(ModelConfig::Variant::small);
    else if (v == "base")
        cfg = ModelConfig::variant(ModelConfig::Variant::base);
    else if (v == "large")
        cfg = ModelConfig::variant(ModelConfig::Variant::large);
    else
        throw std::runtime_error("unknown model variant '" + v + "' (small|base|large)");
    std::string up = j.value("upsample", "sr");
    if (up == "sr")
        cfg.upsample = ModelConfig::Upsample::sr;
    else if (up == "trilinear")
        cfg.upsample = ModelConfig::Upsample::trilinear;
    else
        throw std::runtime_error("unknown upsample mode '" + up + "' (sr|trilinear)");
    cfg.use_conv_blocks = j.value("use_conv_blocks", cfg.use_conv_blocks);
    cfg.fab_on = j.value("fab_on", cfg.fab_on);
    cfg.oab_on = j.value("oab_on", cfg.oab_on);
    cfg.alpha = real(j.value("alpha", double(cfg.alpha)));
    cfg.epsilon = j.value("epsilon", cfg.epsilon);
    return cfg;
}

LossConfig parse_loss_config(const json& j) {
    LossConfig cfg;
    std::string sim = j.value("sim", "lncc");
    if (sim == "lncc")
        cfg.sim_kind = LossConfig::Sim::lncc;
    else if (sim == "mi")
        cfg.sim_kind = LossConfig::Sim::mi;
    else
        throw std::runtime_error("unknown similarity '" + sim + "' (lncc|mi)");
    cfg.lambda = real(j.value("lambda", double(cfg.lambda)));
    cfg.gamma = real(j.value("gamma", double(cfg.gamma)));
    cfg.use_seg = j.value("use_seg", cfg.use_seg);
    cfg.lncc_cube = j.value("lncc_cube", cfg.lncc_cube);
    cfg.mi_bins = j.value("mi_bins", cfg.mi_bins);
    return cfg;
}

TrainConfig parse_train_config(const json& root) {
    TrainConfig cfg;
    cfg.model = parse_model_config(root.value("model", json::object()));
    cfg.loss = parse_loss_config(root.value("loss", json::object()));
    json j = root.value("train", json::object());
    cfg.learning_rate = real(j.value("learning_rate", double(cfg.learning_rate)));
    cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    return cfg;
}

SynthSpec parse_synth_spec(const json& j) {
    SynthSpec s;
    if (j.contains("dims")) {
        auto d = j.at("dims");
        s.dims = {d.at(0).get<int64_t>(), d.at(1).get<int64_t>(), d.at(2).get<int64_t>()};
    }
    s.n_subjects = j.value("n_subjects", s.n_subjects);
    s.n_labels = j.value("n_labels", s.n_labels);
    s.radius_min = j.value("radius_min", s.radius_min);
    s.radius_max = j.value("radius_max", s.radius_max);
    s.deform_amplitude = j.value("deform_amplitude", s.deform_amplitude);
    s.translation = j.value("translation", s.translation);
    s.control_spacing = j.value("control_spacing", s.control_spacing);
    return s;
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return json::parse(in);
}

std::string subject_base(const std::string& dir, int i, const char* what) {
    return dir + "/subject_" + std::to_string(i) + "_" + what;
}

std::vector<Subject> load_subjects(const std::string& dir) {
    std::vector<Subject> out;
    for (int i = 0;; ++i) {
        if (!std::filesystem::exists(subject_base(dir, i, "vol") + ".json")) break;
        Subject s;
        s.vol = read_volume(subject_base(dir, i, "vol"));
        s.mask = read_mask(subject_base(dir, i, "mask"));
        if (std::filesystem::exists(subject_base(dir, i, "field") + ".json"))
            s.deform = read_field(subject_base(dir, i, "field"));
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::runtime_error("no subjects found in " + dir);
    return out;
}

int cmd_gen_synth(const std::string& spec_path, const std::string& out_dir, uint64_t seed) {
    SynthSpec spec = spec_path.empty() ? SynthSpec{} : parse_synth_spec(load_json(spec_path));
    std::filesystem::create_directories(out_dir);
    auto subjects = gen_synthetic(spec, seed);
    for (size_t i = 0; i < subjects.size(); ++i) {
        write_volume(subjects[i].vol, subject_base(out_dir, int(i), "vol"));
        write_mask(subjects[i].mask, subject_base(out_dir, int(i), "mask"));
        write_field(subjects[i].deform, subject_base(out_dir, int(i), "field"));
    }
    std::cerr << "wrote " << subjects.size() << " subjects to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& init_ckpt) {
    TrainConfig cfg = parse_train_config(config_path.empty() ? json::object() : load_json(config_path));
    auto data = load_subjects(data_dir);
    std::filesystem::create_directories(out_dir);
    Checkpoint init;
    const Checkpoint* initp = nullptr;
    if (!init_ckpt.empty()) {
        init = read_checkpoint(init_ckpt);
        initp = &init;
    }
    TrainResult r = train(cfg, data, out_dir, initp);
    if (r.aborted) {
        std::cerr << "training aborted: non-finite loss at iteration " << r.abort_iteration << "\n";
        return 1;
    }
    std::cerr << "trained " << r.trace.size() << " iterations; final loss "
              << (r.trace.empty() ? 0.0 : r.trace.back()[0]) << "\n";
    return 0;
}

int cmd_register(const std::string& ckpt, const std::string& moving_path,
                 const std::string& fixed_path, const std::string& out_field,
                 const std::string& out_warped, const std::string& config_path) {
    json root = config_path.empty() ? json::object() : load_json(config_path);
    ModelConfig cfg = parse_model_config(root.value("model", json::object()));
    Model model = build_model(cfg, 0);
    model.load_checkpoint(read_checkpoint(ckpt));
    Volume moving = read_volume(moving_path);
    Volume fixed = read_volume(fixed_path);
    auto [field, warped] = register_pair(moving, fixed, model);
    write_field(field, out_field);
    write_volume(warped, out_warped);
    return 0;
}

int cmd_eval(const std::string& fixed_path, const std::string& warped_path,
             const std::string& field_path, const std::string& fixed_mask_path,
             const std::string& warped_mask_path, const std::string& lm_fixed_path,
             const std::string& lm_moving_path, const std::string& out_path) {
    Volume fixed = read_volume(fixed_path);
    (void)read_volume(warped_path);  // validated even when only masks are scored
    DisplacementField field = read_field(field_path);
    JacobianStats jac = jacobian_stats(field);

    DiceResult dr;
    std::map<int, double> hd;
    bool have_masks = !fixed_mask_path.empty() && !warped_mask_path.empty();
    if (have_masks) {
        LabelMask fm = read_mask(fixed_mask_path);
        LabelMask wm = read_mask(warped_mask_path);
        std::set<int> labels;
        for (uint8_t l : fm.labels)
            if (l) labels.insert(l);
        for (uint8_t l : wm.labels)
            if (l) labels.insert(l);
        dr = dice(fm, wm, std::vector<int>(labels.begin(), labels.end()));
        for (int l : labels) hd[l] = hd95(fm, wm, l, fixed.spacing);
    }

    TreResult tr;
    bool have_lm = !lm_fixed_path.empty() && !lm_moving_path.empty();
    if (have_lm) {
        LandmarkSet lmf = read_landmarks(lm_fixed_path);
        LandmarkSet lmm = read_landmarks(lm_moving_path);
        tr = tre(lmf, warp_landmarks(lmm, field));
    }

    std::string report = eval_report_json(have_masks ? &dr : nullptr, have_masks ? &hd : nullptr,
                                          &jac, have_lm ? &tr : nullptr);
    if (out_path.empty()) {
        std::cout << report << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) throw std::runtime_error("cannot open " + out_path);
        out << report << "\n";
    }
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    const double tol = sizeof(real) == 8 ? 1e-5 : 1e-2;
    auto cases = gradcheck_battery(seed, tol);
    bool ok = true;
    for (const auto& c : cases) {
        std::cerr << (c.pass ? "pass" : "FAIL") << "  " << c.name << "  max rel err "
                  << c.max_rel_err << "\n";
        ok = ok && c.pass;
    }
    std::cerr << (ok ? "all " : "FAILED: some ") << "gradient checks"
              << (ok ? " passed" : " exceeded tolerance") << " (" << cases.size() << " cases)\n";
    return ok ? 0 : 1;
}

int cmd_plot(const std::string& field_path, const std::string& axis, int slice,
             const std::string& out_base) {
    DisplacementField f = read_field(field_path);
    const int64_t X = f.dims[0], Y = f.dims[1], Z = f.dims[2];
    const int64_t S = f.voxels();
    int ax = axis == "x" ? 0 : axis == "y" ? 1 : axis == "z" ? 2 : -1;
    if (ax < 0) throw std::runtime_error("--axis must be x, y, or z");
    if (slice < 0 || slice >= f.dims[size_t(ax)])
        throw std::runtime_error("--slice out of range for axis " + axis);

    // image rows/cols = the two remaining axes, slower axis first
    int64_t rows = ax == 2 ? Y : Z;
    int64_t cols = ax == 0 ? Y : X;
    auto voxel = [&](int64_t r, int64_t c) -> std::array<int64_t, 3> {
        if (ax == 0) return {slice, c, r};  // x fixed: rows z, cols y
        if (ax == 1) return {c, slice, r};  // y fixed: rows z, cols x
        return {c, r, slice};               // z fixed: rows y, cols x
    };
    auto lin = [&](const std::array<int64_t, 3>& p) { return (p[2] * Y + p[1]) * X + p[0]; };

    double a = 0;
    for (float v : f.values) a = std::max(a, std::abs(double(v)));

    // RGB: (u_x, u_y, u_z) linearly mapped from [-a, a] to [0, 255]
    std::ofstream ppm(out_base + ".ppm", std::ios::binary);
    if (!ppm) throw std::runtime_error("cannot open " + out_base + ".ppm");
    ppm << "P6\n" << cols << " " << rows << "\n255\n";
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            int64_t i = lin(voxel(r, c));
            for (int ch = 0; ch < 3; ++ch) {
                double u = double(f.values[size_t(ch * S + i)]);
                double t = a > 0 ? (u + a) / (2 * a) : 0.5;
                ppm.put(char(int(std::lround(t * 255.0))));
            }
        }

    // Jacobian determinant: det <= 0 black, det = 1 mid-gray, clamp at 2
    std::vector<double> dets = jacobian_determinants(f);
    std::ofstream pgm(out_base + ".pgm", std::ios::binary);
    if (!pgm) throw std::runtime_error("cannot open " + out_base + ".pgm");
    pgm << "P5\n" << cols << " " << rows << "\n255\n";
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            double det = dets[size_t(lin(voxel(r, c)))];
            int v = det <= 0 ? 0 : int(std::lround(std::min(det, 2.0) * 127.5));
            pgm.put(char(std::min(v, 255)));
        }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"utsr: deformable 3D registration (train / register / eval)"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, config_path, data_dir, init_ckpt;
    std::string ckpt, moving_path, fixed_path, out_field, out_warped;
    std::string warped_path, field_path, fixed_mask, warped_mask, lm_fixed, lm_moving, out_path;
    std::string axis = "z";
    uint64_t seed = 0;
    int slice = 0;

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic subject set");
    gen->add_option("--spec", spec_path, "synthesis spec JSON (defaults used when omitted)");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "random seed");

    auto* tr = app.add_subcommand("train", "train a model on a subject directory");
    tr->add_option("--config", config_path, "model/loss/train config JSON");
    tr->add_option("--data", data_dir, "subject directory (gen-synth layout)")->required();
    tr->add_option("--out", out_dir, "checkpoint/CSV output directory")->required();
    tr->add_option("--init", init_ckpt, "initial checkpoint (resume)");

    auto* reg = app.add_subcommand("register", "register a moving volume to a fixed volume");
    reg->add_option("--ckpt", ckpt, "checkpoint base path")->required();
    reg->add_option("--moving", moving_path, "moving volume base path")->required();
    reg->add_option("--fixed", fixed_path, "fixed volume base path")->required();
    reg->add_option("--out-field", out_field, "output displacement field base path")->required();
    reg->add_option("--out-warped", out_warped, "output warped volume base path")->required();
    reg->add_option("--config", config_path, "config JSON selecting the model variant");

    auto* ev = app.add_subcommand("eval", "score a registration result");
    ev->add_option("--fixed", fixed_path, "fixed volume base path")->required();
    ev->add_option("--warped", warped_path, "warped volume base path")->required();
    ev->add_option("--field", field_path, "displacement field base path")->required();
    ev->add_option("--fixed-mask", fixed_mask, "fixed label mask base path");
    ev->add_option("--warped-mask", warped_mask, "warped label mask base path");
    ev->add_option("--landmarks-fixed", lm_fixed, "fixed landmark CSV");
    ev->add_option("--landmarks-moving", lm_moving, "moving landmark CSV");
    ev->add_option("--out", out_path, "report path (stdout when omitted)");

    auto* gc = app.add_subcommand("gradcheck", "run the gradient-check battery");
    gc->add_option("--seed", seed, "random seed");

    auto* pl = app.add_subcommand("plot", "emit PPM/PGM slices of a displacement field");
    pl->add_option("--field", field_path, "displacement field base path")->required();
    pl->add_option("--axis", axis, "slice axis: x, y, or z");
    pl->add_option("--slice", slice, "slice index")->required();
    pl->add_option("--out", out_path, "output image base path (.ppm/.pgm appended)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_synth(spec_path, out_dir, seed);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out_dir, init_ckpt);
        if (reg->parsed())
            return cmd_register(ckpt, moving_path, fixed_path, out_field, out_warped, config_path);
        if (ev->parsed())
            return cmd_eval(fixed_path, warped_path, field_path, fixed_mask, warped_mask, lm_fixed,
                            lm_moving, out_path);
        if (gc->parsed()) return cmd_gradcheck(seed);
        if (pl->parsed()) return cmd_plot(field_path, axis, slice, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
