#pragma once

#include <map>

#include "diffreg/types.hpp"

namespace diffreg {

struct DiceResult {
    std::map<int, double> per_label;  // labels with at least one voxel in A or B
    double mean = 0.0;
};

/// Per-label Dice overlap 2|A∩B| / (|A|+|B|); labels empty in both volumes
/// are excluded from the mean.
DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels);

/// Percentage of voxels (over the full grid) where det Jac[map] <= 0.
double neg_jac_ratio(const VectorField& map);

struct EndpointError {
    double mean = 0.0;
    double max = 0.0;
};

/// Statistics of the Euclidean gap between two maps over interior voxels
/// (one-voxel margin).
EndpointError endpoint_error(const VectorField& map, const VectorField& truth);

/// Right-sided Wilcoxon signed-rank test of x > y: zero differences dropped,
/// midranks for ties, exact enumeration for n <= 12 nonzero differences and a
/// tie- and continuity-corrected normal approximation beyond. Degenerate
/// all-zero input returns p = 1.
double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

/// Same test with the mode forced (for calibration studies).
double wilcoxon_signed_rank_mode(const std::vector<double>& x, const std::vector<double>& y,
                                 bool exact);

}  // namespace diffreg
