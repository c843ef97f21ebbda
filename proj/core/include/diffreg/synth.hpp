#pragma once

#include <cstdint>
#include <utility>

#include "diffreg/objective.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Generator parameters for the synthetic multimodal benchmark.
struct SynthSpec {
    Shape shape = {64, 64};
    std::uint64_t seed = 0;
    double warp_amplitude = 3.0;   // max displacement magnitude, voxels
    double warp_smoothness = 8.0;  // Gaussian spectrum scale, voxels
    double pinch_strength = 0.5;   // weight of a localized compression component
    double lesion_strength = 0.5;  // unmatched fixed-only structure (0 disables)
    int n_blobs = 14;
    int label_count = 4;
    double texture_amplitude = 0.25;  // fine-scale intensity texture on top of blobs
    double texture_scale = 1.5;       // texture correlation length, voxels
    int bezier_degree = 3;            // remap curve degree
    double invert_probability = 0.5;  // modality inversion probability
    bool remap = true;                // disable for monomodal cases
    int cases = 1;                    // number of cases emitted by the CLI

    void validate() const {
        require(!shape.empty() && shape.size() <= kMaxDims, "SynthSpec: bad shape");
        require(warp_amplitude >= 0.0, "SynthSpec: warp_amplitude must be non-negative");
        require(warp_smoothness > 0.0, "SynthSpec: warp_smoothness must be positive");
        require(n_blobs >= 0, "SynthSpec: n_blobs must be non-negative");
        require(label_count >= 1, "SynthSpec: label_count must be positive");
    }
};

/// Smooth random blob phantom in [0,1] with thresholded blob-ownership labels
/// (label 0 is background).
std::pair<ScalarVolume, LabelVolume> make_phantom(const SynthSpec& spec);

/// White noise low-passed by a Gaussian spectrum of scale `smoothness`
/// (voxels), apodized smoothly to zero at the boundary and rescaled so the
/// largest velocity magnitude equals `amplitude`.
VectorField random_smooth_velocity(const Shape& shape, double amplitude, double smoothness,
                                   std::uint64_t seed);

struct GroundTruthWarp {
    VectorField velocity;  // band-limited stationary field, amplitude-scaled
    VectorField map;       // Exp(v)
    VectorField inverse;   // Exp(-v)
};

/// Band-limited noise velocity scaled to the requested amplitude and
/// exponentiated; resampled (up to 10 tries) until the forward map is
/// fold-free at every interior voxel.
GroundTruthWarp make_ground_truth_warp(const SynthSpec& spec);

/// One benchmark case: moving is the phantom, fixed is the phantom pulled
/// back through the inverse ground-truth map and remapped through a random
/// Bezier curve (with optional inversion). `map_gt` is the map registration
/// should recover, i.e. fixed(x) before remapping equals moving(map_gt(x)).
struct RegistrationCase {
    ScalarVolume fixed;
    ScalarVolume moving;
    LabelVolume labels_fixed;
    LabelVolume labels_moving;
    VectorField map_gt;
    VectorField map_gt_inverse;
    std::uint64_t seed = 0;
};

RegistrationCase make_pair(const SynthSpec& spec);

}  // namespace diffreg
