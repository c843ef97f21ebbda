#pragma once

#include <array>

#include "diffreg/types.hpp"

namespace diffreg {

/// Spatial search scheme for self-similarity tokens: two scaled axis-aligned
/// unit-offset rings, {±dilation*e_i} ∪ {±2*dilation*e_i}, so |R| = 4d
/// (12 offsets in 3D, 8 in 2D). Patch comparisons use a (2*radius+1)^d cube.
struct SearchScheme {
    int radius = 1;
    int dilation = 2;
    std::vector<std::array<int, kMaxDims>> offsets;

    static SearchScheme make(int dims, int radius = 1, int dilation = 2);
    int channel_count() const { return static_cast<int>(offsets.size()); }
};

/// Sum of squared differences between the patches centered at x1 and x2
/// ((2r+1)^d terms, out-of-bounds reads clamped to the border).
double patch_ssd(const ScalarVolume& image, const int* x1, const int* x2, int radius);

/// The clamp floor used by local_variance: 1e-6 * (intensity range)^2, with
/// a denormal-safe fallback for constant images.
double variance_floor(const ScalarVolume& image);

/// Per-voxel mean of patch_ssd against the 2d axis-aligned unit offsets,
/// clamped below by variance_floor.
ScalarVolume local_variance(const ScalarVolume& image, int radius = 1);

/// Self-similarity descriptor: channel j at x is exp(-patch_ssd(x, x+R_j)/Var(x)),
/// then max-normalized per voxel so the largest channel equals 1.
DescriptorField mind(const ScalarVolume& image, const SearchScheme& scheme);

/// Accumulates d(mind)/d(image)^T * grad_descriptor into grad_image.
/// The variance clamp floor is treated as a constant.
void mind_vjp(const ScalarVolume& image, const SearchScheme& scheme,
              const DescriptorField& grad_descriptor, ScalarVolume& grad_image);

/// Stacked contrastive token on a single-channel feature map: for each
/// dilation an un-normalized |R|-channel exp(-ssd/Var) block, stacked and then
/// L2-normalized per voxel. A zero-norm token becomes the uniform unit token.
DescriptorField token_from_features(const ScalarVolume& features, const std::vector<int>& dilations,
                                    int radius = 1);

/// Accumulates d(token_from_features)/d(features)^T * grad_token into grad_features.
void token_from_features_vjp(const ScalarVolume& features, const std::vector<int>& dilations,
                             const DescriptorField& grad_token, ScalarVolume& grad_features,
                             int radius = 1);

}  // namespace diffreg
