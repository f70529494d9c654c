#include "utsr/volume_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace utsr {

namespace {

using nlohmann::json;

struct Header {
    std::array<int64_t, 3> dims;
    std::array<double, 3> spacing;
    int64_t channels;
    std::string dtype;
};

Header read_header(const std::string& base) {
    std::ifstream in(base + ".json");
    UTSR_REQUIRE(in.good(), "cannot open header " + base + ".json");
    json j = json::parse(in);
    Header h;
    auto d = j.at("dims");
    auto s = j.at("spacing");
    UTSR_REQUIRE(d.size() == 3 && s.size() == 3, "header dims/spacing must have 3 entries: " + base);
    for (int i = 0; i < 3; ++i) {
        h.dims[size_t(i)] = d[size_t(i)].get<int64_t>();
        h.spacing[size_t(i)] = s[size_t(i)].get<double>();
        UTSR_REQUIRE(h.dims[size_t(i)] >= 1, "non-positive extent in " + base);
        UTSR_REQUIRE(h.spacing[size_t(i)] > 0, "non-positive spacing in " + base);
    }
    h.channels = j.at("channels").get<int64_t>();
    h.dtype = j.at("dtype").get<std::string>();
    UTSR_REQUIRE(h.dtype == "f32" || h.dtype == "u8", "unknown dtype '" + h.dtype + "' in " + base);
    return h;
}

void write_header(const Header& h, const std::string& base) {
    json j;
    j["dims"] = h.dims;
    j["spacing"] = h.spacing;
    j["channels"] = h.channels;
    j["dtype"] = h.dtype;
    std::ofstream out(base + ".json");
    UTSR_REQUIRE(out.good(), "cannot write header " + base + ".json");
    out << j.dump(2) << "\n";
}

std::vector<char> read_raw(const std::string& base, int64_t expected_bytes) {
    std::ifstream in(base + ".raw", std::ios::binary);
    UTSR_REQUIRE(in.good(), "cannot open raw data " + base + ".raw");
    in.seekg(0, std::ios::end);
    int64_t actual = int64_t(in.tellg());
    UTSR_REQUIRE(actual == expected_bytes,
                 base + ".raw: expected " + std::to_string(expected_bytes) + " bytes, found " +
                     std::to_string(actual));
    in.seekg(0);
    std::vector<char> buf(size_t(actual), '\0');
    in.read(buf.data(), actual);
    UTSR_REQUIRE(in.good(), "short read on " + base + ".raw");
    return buf;
}

void write_raw(const std::string& base, const void* data, int64_t bytes) {
    std::ofstream out(base + ".raw", std::ios::binary);
    UTSR_REQUIRE(out.good(), "cannot write raw data " + base + ".raw");
    out.write(static_cast<const char*>(data), bytes);
    UTSR_REQUIRE(out.good(), "short write on " + base + ".raw");
}

}  // namespace

Volume read_volume(const std::string& base) {
    Header h = read_header(base);
    UTSR_REQUIRE(h.channels == 1 && h.dtype == "f32", "volume must be 1-channel f32: " + base);
    Volume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    auto buf = read_raw(base, v.voxels() * 4);
    v.values.resize(size_t(v.voxels()));
    std::memcpy(v.values.data(), buf.data(), buf.size());
    for (float x : v.values) UTSR_REQUIRE(std::isfinite(x), "non-finite value in " + base);
    return v;
}

void write_volume(const Volume& v, const std::string& base) {
    UTSR_REQUIRE(int64_t(v.values.size()) == v.voxels(), "volume value count does not match dims");
    write_header({v.dims, v.spacing, 1, "f32"}, base);
    write_raw(base, v.values.data(), int64_t(v.values.size()) * 4);
}

DisplacementField read_field(const std::string& base) {
    Header h = read_header(base);
    UTSR_REQUIRE(h.channels == 3 && h.dtype == "f32", "field must be 3-channel f32: " + base);
    DisplacementField f;
    f.dims = h.dims;
    f.spacing = h.spacing;
    auto buf = read_raw(base, f.voxels() * 3 * 4);
    f.values.resize(size_t(f.voxels() * 3));
    std::memcpy(f.values.data(), buf.data(), buf.size());
    for (float x : f.values) UTSR_REQUIRE(std::isfinite(x), "non-finite value in " + base);
    return f;
}

void write_field(const DisplacementField& f, const std::string& base) {
    UTSR_REQUIRE(int64_t(f.values.size()) == f.voxels() * 3, "field value count does not match dims");
    write_header({f.dims, f.spacing, 3, "f32"}, base);
    write_raw(base, f.values.data(), int64_t(f.values.size()) * 4);
}

LabelMask read_mask(const std::string& base) {
    Header h = read_header(base);
    UTSR_REQUIRE(h.channels == 1 && h.dtype == "u8", "mask must be 1-channel u8: " + base);
    LabelMask m;
    m.dims = h.dims;
    m.spacing = h.spacing;
    auto buf = read_raw(base, m.voxels());
    m.labels.assign(buf.begin(), buf.end());
    return m;
}

void write_mask(const LabelMask& m, const std::string& base) {
    UTSR_REQUIRE(int64_t(m.labels.size()) == m.voxels(), "mask label count does not match dims");
    write_header({m.dims, m.spacing, 1, "u8"}, base);
    write_raw(base, m.labels.data(), int64_t(m.labels.size()));
}

LandmarkSet read_landmarks(const std::string& path) {
    std::ifstream in(path);
    UTSR_REQUIRE(in.good(), "cannot open landmarks " + path);
    std::string line;
    UTSR_REQUIRE(bool(std::getline(in, line)), "empty landmark file " + path);
    // tolerate trailing CR
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    UTSR_REQUIRE(line == "name,x_mm,y_mm,z_mm", "landmark header must be 'name,x_mm,y_mm,z_mm': " + path);
    LandmarkSet lm;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string name, xs, ys, zs;
        UTSR_REQUIRE(std::getline(ss, name, ',') && std::getline(ss, xs, ',') &&
                         std::getline(ss, ys, ',') && std::getline(ss, zs, ','),
                     "malformed landmark row '" + line + "' in " + path);
        UTSR_REQUIRE(seen.insert(name).second, "duplicate landmark name '" + name + "' in " + path);
        std::array<double, 3> p{std::stod(xs), std::stod(ys), std::stod(zs)};
        for (double c : p) UTSR_REQUIRE(std::isfinite(c), "non-finite landmark in " + path);
        lm.names.push_back(name);
        lm.positions_mm.push_back(p);
    }
    return lm;
}

void write_landmarks(const LandmarkSet& lm, const std::string& path) {
    std::ofstream out(path);
    UTSR_REQUIRE(out.good(), "cannot write landmarks " + path);
    out << "name,x_mm,y_mm,z_mm\n";
    out.precision(17);
    for (size_t i = 0; i < lm.names.size(); ++i)
        out << lm.names[i] << "," << lm.positions_mm[i][0] << "," << lm.positions_mm[i][1] << ","
            << lm.positions_mm[i][2] << "\n";
}

std::array<double, 3> voxel_to_mm(const std::array<double, 3>& p, const std::array<double, 3>& spacing) {
    return {p[0] * spacing[0], p[1] * spacing[1], p[2] * spacing[2]};
}
std::array<double, 3> mm_to_voxel(const std::array<double, 3>& p, const std::array<double, 3>& spacing) {
    return {p[0] / spacing[0], p[1] / spacing[1], p[2] / spacing[2]};
}

Checkpoint read_checkpoint(const std::string& base) {
    std::ifstream in(base + ".json");
    UTSR_REQUIRE(in.good(), "cannot open checkpoint manifest " + base + ".json");
    nlohmann::json j = nlohmann::json::parse(in);
    int64_t total = 0;
    for (auto& e : j.at("params")) {
        int64_t n = 1;
        for (auto& d : e.at("shape")) n *= d.get<int64_t>();
        total += n * 4;
    }
    auto buf = read_raw(base, total);
    Checkpoint ck;
    for (auto& e : j.at("params")) {
        CheckpointEntry ent;
        ent.name = e.at("name").get<std::string>();
        for (auto& d : e.at("shape")) ent.shape.push_back(d.get<int64_t>());
        int64_t off = e.at("offset").get<int64_t>();
        int64_t n = shape_numel(ent.shape);
        UTSR_REQUIRE(off >= 0 && off + n * 4 <= total, "checkpoint offset out of range for " + ent.name);
        ent.data.resize(size_t(n));
        std::memcpy(ent.data.data(), buf.data() + off, size_t(n) * 4);
        ck.entries.push_back(std::move(ent));
    }
    return ck;
}

void write_checkpoint(const Checkpoint& ck, const std::string& base) {
    nlohmann::json j;
    j["params"] = nlohmann::json::array();
    std::vector<float> blob;
    for (const auto& e : ck.entries) {
        UTSR_REQUIRE(int64_t(e.data.size()) == shape_numel(e.shape),
                     "checkpoint entry " + e.name + " data/shape mismatch");
        nlohmann::json ent;
        ent["name"] = e.name;
        ent["shape"] = e.shape;
        ent["offset"] = int64_t(blob.size()) * 4;
        j["params"].push_back(ent);
        blob.insert(blob.end(), e.data.begin(), e.data.end());
    }
    std::ofstream out(base + ".json");
    UTSR_REQUIRE(out.good(), "cannot write checkpoint manifest " + base + ".json");
    out << j.dump(2) << "\n";
    write_raw(base, blob.data(), int64_t(blob.size()) * 4);
}

Tensor volume_to_tensor(const Volume& v) {
    std::vector<real> d(v.values.begin(), v.values.end());
    return Tensor::from_data({1, v.dims[2], v.dims[1], v.dims[0]}, std::move(d));
}

Tensor field_to_tensor(const DisplacementField& f) {
    std::vector<real> d(f.values.begin(), f.values.end());
    return Tensor::from_data({3, f.dims[2], f.dims[1], f.dims[0]}, std::move(d));
}

Volume tensor_to_volume(const Tensor& t, const std::array<double, 3>& spacing) {
    UTSR_REQUIRE(t.ndim() == 4 && t.dim(0) == 1, "tensor_to_volume: expects [1, Z, Y, X]");
    Volume v;
    v.dims = {t.dim(3), t.dim(2), t.dim(1)};
    v.spacing = spacing;
    v.values.assign(t.data().begin(), t.data().end());
    return v;
}

DisplacementField tensor_to_field(const Tensor& t, const std::array<double, 3>& spacing) {
    UTSR_REQUIRE(t.ndim() == 4 && t.dim(0) == 3, "tensor_to_field: expects [3, Z, Y, X]");
    DisplacementField f;
    f.dims = {t.dim(3), t.dim(2), t.dim(1)};
    f.spacing = spacing;
    f.values.assign(t.data().begin(), t.data().end());
    return f;
}

Tensor mask_to_onehot(const LabelMask& m, int num_labels) {
    UTSR_REQUIRE(num_labels >= 1, "mask_to_onehot: need at least one foreground label");
    const int64_t s = m.voxels();
    std::vector<real> d(size_t(num_labels * s), real(0));
    for (int64_t i = 0; i < s; ++i) {
        int lab = int(m.labels[size_t(i)]);
        UTSR_REQUIRE(lab <= num_labels, "label " + std::to_string(lab) + " outside declared set");
        if (lab > 0) d[size_t((lab - 1) * s + i)] = real(1);
    }
    return Tensor::from_data({num_labels, m.dims[2], m.dims[1], m.dims[0]}, std::move(d));
}

}  // namespace utsr
