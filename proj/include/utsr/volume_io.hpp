#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "utsr/tensor.hpp"

namespace utsr {

// Spatial grids. On-disk layout (and in-memory layout of `values`) is
// linear = ((c*Z + z)*Y + y)*X + x, i.e. x fastest. That matches tensor
// shape [C, Z, Y, X].

struct Volume {
    std::array<int64_t, 3> dims{};     // (X, Y, Z)
    std::array<double, 3> spacing{1, 1, 1};  // mm per voxel
    std::vector<float> values;         // one channel

    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

struct DisplacementField {
    std::array<int64_t, 3> dims{};
    std::array<double, 3> spacing{1, 1, 1};
    std::vector<float> values;  // 3 channels, voxel units, (u_x, u_y, u_z)

    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

struct LabelMask {
    std::array<int64_t, 3> dims{};
    std::array<double, 3> spacing{1, 1, 1};
    std::vector<uint8_t> labels;  // 0 = background

    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

struct LandmarkSet {
    std::vector<std::string> names;                  // unique
    std::vector<std::array<double, 3>> positions_mm; // same order as names
};

// Readers/writers take a base path; they touch <base>.json + <base>.raw
// (CSV for landmarks takes the full path).
Volume read_volume(const std::string& base);
void write_volume(const Volume& v, const std::string& base);
DisplacementField read_field(const std::string& base);
void write_field(const DisplacementField& f, const std::string& base);
LabelMask read_mask(const std::string& base);
void write_mask(const LabelMask& m, const std::string& base);
LandmarkSet read_landmarks(const std::string& path);
void write_landmarks(const LandmarkSet& lm, const std::string& path);

std::array<double, 3> voxel_to_mm(const std::array<double, 3>& p, const std::array<double, 3>& spacing);
std::array<double, 3> mm_to_voxel(const std::array<double, 3>& p, const std::array<double, 3>& spacing);

// ---- checkpoints ----------------------------------------------------------
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};
struct Checkpoint {
    std::vector<CheckpointEntry> entries;
};
// <base>.json manifest (name, shape, byte offset) + <base>.raw f32 blob.
Checkpoint read_checkpoint(const std::string& base);
void write_checkpoint(const Checkpoint& ck, const std::string& base);

// ---- tensor bridges -------------------------------------------------------
Tensor volume_to_tensor(const Volume& v);             // [1, Z, Y, X]
Tensor field_to_tensor(const DisplacementField& f);   // [3, Z, Y, X]
Volume tensor_to_volume(const Tensor& t, const std::array<double, 3>& spacing);
DisplacementField tensor_to_field(const Tensor& t, const std::array<double, 3>& spacing);
// One-hot over labels 1..K -> [K, Z, Y, X].
Tensor mask_to_onehot(const LabelMask& m, int num_labels);

}  // namespace utsr
