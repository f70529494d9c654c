// Python bindings: numpy-facing wrappers over the volume types, the
// registration model, synthetic data generation, and the metric suite.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "utsr/losses.hpp"
#include "utsr/metrics.hpp"
#include "utsr/network.hpp"
#include "utsr/trainer.hpp"
#include "utsr/volume_io.hpp"

namespace py = pybind11;
using namespace utsr;

namespace {

// numpy [Z, Y, X] float32 <-> Volume (x fastest in both layouts)
Volume to_volume(const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
                 std::array<double, 3> spacing) {
    if (a.ndim() != 3) throw std::invalid_argument("volume array must be 3-D [Z, Y, X]");
    Volume v;
    v.dims = {a.shape(2), a.shape(1), a.shape(0)};
    v.spacing = spacing;
    v.values.assign(a.data(), a.data() + a.size());
    return v;
}

py::array_t<float> from_volume(const Volume& v) {
    py::array_t<float> a({v.dims[2], v.dims[1], v.dims[0]});
    std::copy(v.values.begin(), v.values.end(), a.mutable_data());
    return a;
}

// numpy [3, Z, Y, X] float32 <-> DisplacementField
DisplacementField to_field(const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
                           std::array<double, 3> spacing) {
    if (a.ndim() != 4 || a.shape(0) != 3)
        throw std::invalid_argument("field array must be [3, Z, Y, X]");
    DisplacementField f;
    f.dims = {a.shape(3), a.shape(2), a.shape(1)};
    f.spacing = spacing;
    f.values.assign(a.data(), a.data() + a.size());
    return f;
}

py::array_t<float> from_field(const DisplacementField& f) {
    py::array_t<float> a({int64_t(3), f.dims[2], f.dims[1], f.dims[0]});
    std::copy(f.values.begin(), f.values.end(), a.mutable_data());
    return a;
}

LabelMask to_mask(const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a,
                  std::array<double, 3> spacing) {
    if (a.ndim() != 3) throw std::invalid_argument("mask array must be 3-D [Z, Y, X]");
    LabelMask m;
    m.dims = {a.shape(2), a.shape(1), a.shape(0)};
    m.spacing = spacing;
    m.labels.assign(a.data(), a.data() + a.size());
    return m;
}

py::array_t<uint8_t> from_mask(const LabelMask& m) {
    py::array_t<uint8_t> a({m.dims[2], m.dims[1], m.dims[0]});
    std::copy(m.labels.begin(), m.labels.end(), a.mutable_data());
    return a;
}

ModelConfig config_from_string(const std::string& variant, const std::string& upsample) {
    ModelConfig cfg;
    if (variant == "small")
        cfg = ModelConfig::variant(ModelConfig::Variant::small);
    else if (variant == "base")
        cfg = ModelConfig::variant(ModelConfig::Variant::base);
    else if (variant == "large")
        cfg = ModelConfig::variant(ModelConfig::Variant::large);
    else
        throw std::invalid_argument("variant must be small|base|large");
    if (upsample == "sr")
        cfg.upsample = ModelConfig::Upsample::sr;
    else if (upsample == "trilinear")
        cfg.upsample = ModelConfig::Upsample::trilinear;
    else
        throw std::invalid_argument("upsample must be sr|trilinear");
    return cfg;
}

struct PyModel {
    Model model;

    py::tuple run(const py::array_t<float, py::array::c_style | py::array::forcecast>& moving,
                  const py::array_t<float, py::array::c_style | py::array::forcecast>& fixed) {
        Volume m = to_volume(moving, {1, 1, 1});
        Volume f = to_volume(fixed, {1, 1, 1});
        auto [field, warped] = register_pair(m, f, model);
        return py::make_tuple(from_field(field), from_volume(warped));
    }
};

}  // namespace

PYBIND11_MODULE(_core, mod) {
    mod.doc() = "3D deformable registration core (encoder-decoder transformer, CPU)";

    py::class_<PyModel>(mod, "Model")
        .def(py::init([](const std::string& variant, const std::string& upsample, uint64_t seed) {
                 return PyModel{build_model(config_from_string(variant, upsample), seed)};
             }),
             py::arg("variant") = "base", py::arg("upsample") = "sr", py::arg("seed") = 0)
        .def_property_readonly("param_count", [](const PyModel& m) { return m.model.param_count(); })
        .def("register_pair", &PyModel::run, py::arg("moving"), py::arg("fixed"),
             "Register moving to fixed; returns (field [3,Z,Y,X], warped [Z,Y,X]).")
        .def("save_checkpoint",
             [](const PyModel& m, const std::string& base) {
                 write_checkpoint(m.model.to_checkpoint(), base);
             })
        .def("load_checkpoint", [](PyModel& m, const std::string& base) {
            m.model.load_checkpoint(read_checkpoint(base));
        });

    mod.def(
        "gen_synthetic",
        [](int64_t dim, int n_subjects, int n_labels, uint64_t seed) {
            SynthSpec spec;
            spec.dims = {dim, dim, dim};
            spec.n_subjects = n_subjects;
            spec.n_labels = n_labels;
            py::list out;
            for (const Subject& s : gen_synthetic(spec, seed))
                out.append(py::make_tuple(from_volume(s.vol), from_mask(s.mask), from_field(s.deform)));
            return out;
        },
        py::arg("dim") = 64, py::arg("n_subjects") = 4, py::arg("n_labels") = 3, py::arg("seed") = 0,
        "Synthetic subjects as (volume, mask, field) numpy triples.");

    mod.def(
        "dice",
        [](const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& b,
           const std::vector<int>& labels) {
            DiceResult r = dice(to_mask(a, {1, 1, 1}), to_mask(b, {1, 1, 1}), labels);
            return py::make_tuple(r.per_label, r.mean);
        },
        py::arg("a"), py::arg("b"), py::arg("labels"),
        "Per-label Dice and the mean over labels.");

    mod.def(
        "hd95",
        [](const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& b, int label,
           std::array<double, 3> spacing) {
            return hd95(to_mask(a, spacing), to_mask(b, spacing), label, spacing);
        },
        py::arg("a"), py::arg("b"), py::arg("label"),
        py::arg("spacing") = std::array<double, 3>{1, 1, 1});

    mod.def(
        "jacobian_stats",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& field) {
            JacobianStats s = jacobian_stats(to_field(field, {1, 1, 1}));
            return py::make_tuple(s.fold_fraction, s.sdlogj);
        },
        py::arg("field"), "Returns (fold_fraction, sd_log_jacobian).");

    mod.def(
        "warp",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& vol,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& field) {
            Tensor v = volume_to_tensor(to_volume(vol, {1, 1, 1}));
            Tensor f = field_to_tensor(to_field(field, {1, 1, 1}));
            Volume out = tensor_to_volume(warp3d(v, f), {1, 1, 1});
            return from_volume(out);
        },
        py::arg("volume"), py::arg("field"), "Trilinear warp of a volume by a displacement field.");
}
