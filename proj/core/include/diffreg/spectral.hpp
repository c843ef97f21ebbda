#pragma once

#include "diffreg/types.hpp"

namespace diffreg {

/// The regularization operator (gamma - alpha*Laplacian)^s as a frequency
/// multiplier under the periodic DFT convention.
struct KernelSpec {
    double gamma = 1.0;
    double alpha = 5e-4;
    int exponent = 1;  // s; never stated upstream, kept configurable
    Shape shape;
    std::vector<double> spacing;  // defaults to 1 per axis when empty

    void validate() const {
        require(gamma > 0.0, "KernelSpec: gamma must be positive");
        require(alpha >= 0.0, "KernelSpec: alpha must be non-negative");
        require(exponent >= 1, "KernelSpec: exponent must be a positive integer");
        require(!shape.empty(), "KernelSpec: shape not set");
    }
};

/// Positive per-frequency values of the operator symbol; value at the zero
/// bin equals gamma^s and every value is >= gamma^s.
struct SpectralMultiplier {
    Shape shape;
    std::vector<double> values;  // row-major over frequency indices
};

/// Symbol of the standard 2d+1-point discrete Laplacian:
/// sum_i (2 - 2cos(2 pi k_i / N_i)) / spacing_i^2 per frequency bin.
std::vector<double> laplacian_symbol(const Shape& shape, const std::vector<double>& spacing);

SpectralMultiplier build_multiplier(const KernelSpec& spec);

/// Per-channel inverse DFT of spectrum * mult. `mult` is a real, per-bin
/// factor of the same shape; the result of a real input stays real.
ScalarVolume apply_spectral(const ScalarVolume& f, const SpectralMultiplier& mult);
VectorField apply_spectral(const VectorField& v, const SpectralMultiplier& mult);

/// Unique periodic solution u of (K*K) u = v, i.e. spectrum divided by K^2.
VectorField smooth_inverse_ktk(const VectorField& v, const SpectralMultiplier& mult);

/// Applies (K*K), i.e. multiplies the spectrum by K^2.
VectorField apply_ktk(const VectorField& v, const SpectralMultiplier& mult);

/// ||K v||^2 in the mean-over-voxels L2 convention: equal to the voxel mean
/// of the squared stencil-applied field, summed over channels. Computed as
/// sum_k K^2 |v_hat|^2 / N^2 per channel (Parseval with unnormalized DFT).
double v_norm_sq(const VectorField& v, const SpectralMultiplier& mult);

/// Gradient of v_norm_sq with respect to v: (2/N) (K*K) v.
VectorField v_norm_sq_gradient(const VectorField& v, const SpectralMultiplier& mult);

/// Zeroes every voxel whose multi-index touches the grid boundary, on a
/// frame `width` voxels thick.
void zero_boundary_frame(VectorField& v, int width = 1);

}  // namespace diffreg
