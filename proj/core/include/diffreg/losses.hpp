#pragma once

#include <string>

#include "diffreg/spectral.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Weights and schedule of the registration objective.
struct LossConfig {
    double lambda_J = 2.5;
    double lambda_grad = 5e-2;
    double lambda_mag = 5e-5;
    double epsilon = 0.1;  // penalty-barrier threshold on det Jac
    std::string metric = "mind";
    int epochs = 300;
    double lr = 5e-3;

    // metric sub-parameters (desk-tunable)
    int mind_radius = 1;
    int mind_dilation = 2;
    int lmi_bins = 16;
    int lmi_patch_side = 21;
    double lmi_bandwidth = 1.0;

    void validate() const {
        require(epsilon > 0.0 && epsilon < 1.0, "LossConfig: epsilon must lie in (0,1)");
        require(lambda_J >= 0.0 && lambda_grad >= 0.0 && lambda_mag >= 0.0,
                "LossConfig: loss weights must be non-negative");
        require(epochs >= 0, "LossConfig: epochs must be non-negative");
        require(metric == "mind" || metric == "contrastive" || metric == "lmi",
                "LossConfig: metric must be one of mind|contrastive|lmi");
    }
};

/// Per-voxel max(0, epsilon - det Jac[map]); exposed for tests and reports.
ScalarVolume jacobian_penalty_map(const VectorField& map, double epsilon);

/// Mean over voxels of max(0, epsilon - det Jac[map]). Zero iff the
/// determinant is >= epsilon everywhere; subgradient 0 at the kink. When
/// grad_map is given, weight * d/d(map) is accumulated into it.
double loss_jacobian_penalty(const VectorField& map, double epsilon, VectorField* grad_map = nullptr,
                             double weight = 1.0);

/// Mean squared Frobenius norm of the displacement gradient: the map minus
/// identity is differentiated with the central/one-sided stencil in voxel
/// units, so the identity map costs exactly zero.
double loss_gradient_smoothness(const VectorField& map, VectorField* grad_map = nullptr,
                                double weight = 1.0);

/// The V-norm magnitude term: for a stationary field the time integral
/// collapses to v_norm_sq(v). Gradient is weight * (2/N) (K*K) v.
double loss_magnitude(const VectorField& velocity, const SpectralMultiplier& mult,
                      VectorField* grad_velocity = nullptr, double weight = 1.0);

/// The four loss terms; total applies the configured weights.
struct LossTerms {
    double similarity = 0.0;
    double jacobian = 0.0;
    double smoothness = 0.0;
    double magnitude = 0.0;

    double total(const LossConfig& cfg) const {
        return similarity + cfg.lambda_J * jacobian + cfg.lambda_grad * smoothness +
               cfg.lambda_mag * magnitude;
    }
};

}  // namespace diffreg
