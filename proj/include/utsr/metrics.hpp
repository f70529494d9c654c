#pragma once

#include <map>
#include <string>
#include <vector>

#include "utsr/volume_io.hpp"

namespace utsr {

struct DiceResult {
    std::map<int, double> per_label;
    double mean = 0;
};
// Per-label 2|A n B| / (|A| + |B|); a label empty in both masks scores 1.
DiceResult dice(const LabelMask& a, const LabelMask& b, const std::vector<int>& labels);

// 95th percentile of the pooled directed boundary-voxel distances (both
// directions), in mm. Boundary = foreground voxel with a 6-neighbor (or
// grid edge) outside the label.
double hd95(const LabelMask& a, const LabelMask& b, int label, const std::array<double, 3>& spacing);

struct JacobianStats {
    double fold_fraction = 0;  // voxels with det(I + grad u) <= 0
    double sdlogj = 0;         // std of log det over det > 0 voxels
};
// Central differences in the interior, one-sided at borders.
JacobianStats jacobian_stats(const DisplacementField& field);
// Per-voxel det(I + grad u), same linear layout as one field channel.
std::vector<double> jacobian_determinants(const DisplacementField& field);

// Moving landmarks pushed through the field: displacement sampled
// trilinearly at the landmark's voxel position, converted to mm.
LandmarkSet warp_landmarks(const LandmarkSet& moving, const DisplacementField& field);

struct TreResult {
    std::vector<std::pair<std::string, double>> per_landmark;  // mm
    double mean = 0, sd = 0;
};
TreResult tre(const LandmarkSet& fixed_lm, const LandmarkSet& warped_lm);

struct RankSumResult {
    double statistic = 0;  // standardized (continuity-corrected) z, 0 on the exact path's center
    double p_value = 1;
};
// Two-sided; exact enumeration when n + m <= 10, otherwise normal
// approximation with midrank ties and tie-corrected variance.
RankSumResult wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y);

// {dsc: {label: value}, dsc_mean, hd95: {label: value}, fold_pct, sdlogj,
// tre_mean, tre_sd}; negative placeholders for sections without inputs.
std::string eval_report_json(const DiceResult* dsc, const std::map<int, double>* hd,
                             const JacobianStats* jac, const TreResult* t);

}  // namespace utsr
