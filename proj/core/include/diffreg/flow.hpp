#pragma once

#include "diffreg/losses.hpp"
#include "diffreg/neural.hpp"
#include "diffreg/similarity.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Stationary-velocity Euler integration between t0 = 0 and t1 = 1.
struct FlowConfig {
    double step = 0.005;  // h; (t1 - t0)/h must be an integer step count
    double t0 = 0.0;
    double t1 = 1.0;
    /// 0: retain every Euler state for the reverse sweep; m > 0: store every
    /// m-th state and recompute segments on the backward pass.
    int checkpoint_interval = 0;

    int step_count() const {
        require(step > 0.0, "FlowConfig: step must be positive");
        const double span = t1 - t0;
        require(span > 0.0, "FlowConfig: t1 must exceed t0");
        const double raw = span / step;
        const int n = static_cast<int>(std::lround(raw));
        require(n >= 1 && std::abs(n * step - span) <= 1e-9 * span,
                "FlowConfig: (t1 - t0)/h is not an integer number of steps");
        return n;
    }
};

/// Forward Euler states retained for the adjoint sweep. With a checkpoint
/// interval m, states holds the maps at steps 0, m, 2m, ...; otherwise the
/// maps at every step 0 .. K-1 (the final map is returned separately).
struct Trajectory {
    std::vector<VectorField> states;
    int steps = 0;
    int interval = 0;  // 0 = dense
};

/// Flow of the stationary transport problem: repeated Euler steps
/// map <- map + h * v(map), starting at the identity. Map values may leave
/// the domain; clamping happens only when sampling.
VectorField integrate_flow(const VectorField& velocity, const FlowConfig& cfg,
                           Trajectory* trajectory = nullptr);

/// Exp(-v): the inverse map of integrate_flow.
VectorField integrate_inverse(const VectorField& velocity, const FlowConfig& cfg);

/// Pullback of the image through the map: warped(x) = image(map(x)).
ScalarVolume warp(const ScalarVolume& image, const VectorField& map);

/// Accumulates d(loss)/d(map) for a warped-image objective: per voxel the
/// upstream image gradient times the interpolation derivative of the moving
/// image at the mapped coordinate (zero where the clamp saturates).
void warp_coordinate_gradient(const ScalarVolume& image, const VectorField& map,
                              const ScalarVolume& grad_warped, VectorField& grad_map);

/// Reverse sweep of the unrolled Euler recursion: given d(loss)/d(final map),
/// accumulates the exact discrete d(loss)/d(velocity) into grad_velocity.
void flow_backward(const VectorField& velocity, const Trajectory& trajectory, const FlowConfig& cfg,
                   const VectorField& grad_map, VectorField& grad_velocity);

/// Loss terms only, no gradients (used by finite-difference checks).
LossTerms evaluate_total_loss(const VelocityNet& net, const ScalarVolume& moving,
                              const SimilarityMetric& metric, const LossConfig& lcfg,
                              const FlowConfig& fcfg);

/// Full forward + reverse pass: evaluates the registration loss at the
/// network's current parameters and accumulates the exact gradient of the
/// discretized objective into net.params().grad.
LossTerms loss_gradient_wrt_params(VelocityNet& net, const ScalarVolume& moving,
                                   const SimilarityMetric& metric, const LossConfig& lcfg,
                                   const FlowConfig& fcfg);

}  // namespace diffreg
