#pragma once

#include <array>
#include <string>
#include <vector>

#include "utsr/losses.hpp"
#include "utsr/network.hpp"

namespace utsr {

struct TrainConfig {
    real learning_rate = real(1e-4);
    int max_iterations = 300;
    uint64_t seed = 0;
    int checkpoint_every = 100;
    LossConfig loss;
    ModelConfig model;
};

struct SynthSpec {
    std::array<int64_t, 3> dims{64, 64, 64};  // divisible by 32
    int n_subjects = 4;
    int n_labels = 3;              // one ellipsoid per label
    double radius_min = 6;         // ellipsoid semi-axes, voxels
    double radius_max = 11;
    double deform_amplitude = 3;   // peak |u| of the smooth per-subject warp, voxels
    double translation = 1.5;      // extra constant offset range per axis, voxels
    int control_spacing = 16;      // control-grid spacing of the smooth warp
};

struct Subject {
    Volume vol;
    LabelMask mask;
    DisplacementField deform;  // the smooth field this subject was generated with
};

// Deterministic per seed. A shared template (background + n_labels
// ellipsoids) evaluated through a per-subject smooth invertible deformation;
// amplitude 0 makes all subjects share structure positions exactly.
std::vector<Subject> gen_synthetic(const SynthSpec& spec, uint64_t seed);

struct AdamState {
    std::vector<std::vector<real>> m, v;
    int64_t step = 0;
};

// Standard bias-corrected Adam, applied in place; parameters without an
// accumulated gradient are treated as zero-gradient.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, real lr,
               real beta1 = real(0.9), real beta2 = real(0.999), real eps = real(1e-8));

struct TrainResult {
    Model model;
    std::vector<std::array<double, 4>> trace;  // total, sim, smooth, seg per iteration
    bool aborted = false;
    int abort_iteration = -1;  // 1-based iteration that produced a non-finite loss
};

// Ordered-pair sampling without replacement per cycle; batch size 1. When
// out_dir is non-empty, writes ckpt_<iter>/ckpt_final checkpoints and
// loss.csv there. init (optional) overrides the seed-built initial weights.
TrainResult train(const TrainConfig& cfg, const std::vector<Subject>& data,
                  const std::string& out_dir = "", const Checkpoint* init = nullptr);

void write_loss_csv(const std::vector<std::array<double, 4>>& trace, const std::string& path);

}  // namespace utsr
