#pragma once

#include <memory>

#include "diffreg/descriptor.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Parzen-window local mutual information parameters. `bandwidth` is the
/// Gaussian std in bin-width units.
struct LmiSpec {
    int bins = 16;
    int patch_side = 21;
    double bandwidth = 1.0;

    void validate() const {
        require(bins >= 2, "LmiSpec: bins must be >= 2");
        require(patch_side >= 2, "LmiSpec: patch_side must be >= 2");
        require(bandwidth > 0.0, "LmiSpec: bandwidth must be positive");
    }
};

/// Mean over voxels and channels of the squared MIND descriptor difference.
/// When `grad_warped` is non-null it receives dS/d(warped), chained through
/// the exponential, the local variance and the max-normalization.
double mind_mse(const ScalarVolume& warped, const ScalarVolume& fixed, const SearchScheme& scheme,
                ScalarVolume* grad_warped = nullptr);

/// Same loss against a precomputed fixed-image descriptor (the descriptor of
/// the fixed image does not change across epochs).
double mind_mse_against(const ScalarVolume& warped, const DescriptorField& fixed_descriptor,
                        const SearchScheme& scheme, ScalarVolume* grad_warped = nullptr);

/// 1 - mean voxel dot product of two unit-norm token fields; range [0, 2].
double descriptor_cosine_dissim(const DescriptorField& d0, const DescriptorField& d1);

/// Local mutual information in nats: the image is tiled into non-overlapping
/// cubes of side `patch_side` (boundary remainders form smaller patches),
/// each patch contributes the MI of its Parzen joint histogram, and patches
/// are averaged. When `grad_i0` is non-null it receives dMI/d(i0) through the
/// Gaussian window weights (bin centers fixed).
double local_mi(const ScalarVolume& i0, const ScalarVolume& i1, const LmiSpec& spec,
                ScalarVolume* grad_i0 = nullptr);

/// A dissimilarity S(warped, fixed) with a gradient with respect to the
/// warped image. Implementations capture the fixed side at construction so
/// per-epoch work touches only the moving side.
class SimilarityMetric {
public:
    virtual ~SimilarityMetric() = default;
    virtual const char* name() const = 0;
    /// Returns S; when grad is non-null it is resized and filled with dS/d(warped).
    virtual double evaluate(const ScalarVolume& warped, ScalarVolume* grad) const = 0;
};

class MindMetric : public SimilarityMetric {
public:
    MindMetric(const ScalarVolume& fixed, SearchScheme scheme);
    const char* name() const override { return "mind"; }
    double evaluate(const ScalarVolume& warped, ScalarVolume* grad) const override;

private:
    SearchScheme scheme_;
    DescriptorField fixed_descriptor_;
};

class LmiMetric : public SimilarityMetric {
public:
    LmiMetric(const ScalarVolume& fixed, LmiSpec spec);
    const char* name() const override { return "lmi"; }
    /// S = -MI(warped, fixed).
    double evaluate(const ScalarVolume& warped, ScalarVolume* grad) const override;

private:
    LmiSpec spec_;
    ScalarVolume fixed_;
};

}  // namespace diffreg
