#include "diffreg/flow.hpp"

#include <cmath>

#include "diffreg/grid.hpp"

namespace diffreg {

namespace {

// One Euler step: map <- map + h * v(map), sampling v multilinearly.
void euler_step(VectorField& map, const VectorField& velocity, double h) {
    const int d = map.dims();
    const std::size_t n = map.voxels();
    double c[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < d; ++a) c[a] = map.at(a, i);
        const InterpStencil st = interp_stencil(velocity.shape, c);
        for (int a = 0; a < d; ++a) {
            const double* src = velocity.channel(a);
            double v = 0.0;
            for (int k = 0; k < st.corner_count; ++k) v += st.weights[k] * src[st.corners[k]];
            map.at(a, i) += h * v;
        }
    }
}

// Reverse of one Euler step: scatters h * w * lambda into grad_velocity and
// pulls lambda back through I + h * d(v o map)/d(map).
void adjoint_step(const VectorField& state, const VectorField& velocity, double h,
                  VectorField& lambda, VectorField& grad_velocity) {
    const int d = state.dims();
    const std::size_t n = state.voxels();
    double c[kMaxDims], lam[kMaxDims], upd[kMaxDims];
    double jv[kMaxDims][kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < d; ++a) {
            c[a] = state.at(a, i);
            lam[a] = lambda.at(a, i);
        }
        const InterpStencil st = interp_stencil(velocity.shape, c);
        for (int a = 0; a < d; ++a) {
            if (lam[a] == 0.0) continue;
            double* dst = grad_velocity.channel(a);
            const double gl = h * lam[a];
            for (int k = 0; k < st.corner_count; ++k) dst[st.corners[k]] += st.weights[k] * gl;
        }
        for (int a = 0; a < d; ++a) {
            const double* src = velocity.channel(a);
            for (int b = 0; b < d; ++b) {
                double acc = 0.0;
                for (int k = 0; k < st.corner_count; ++k)
                    acc += st.dweights[k][b] * src[st.corners[k]];
                jv[a][b] = acc;
            }
        }
        for (int b = 0; b < d; ++b) {
            double acc = 0.0;
            for (int a = 0; a < d; ++a) acc += jv[a][b] * lam[a];
            upd[b] = lam[b] + h * acc;
        }
        for (int b = 0; b < d; ++b) lambda.at(b, i) = upd[b];
    }
}

}  // namespace

VectorField integrate_flow(const VectorField& velocity, const FlowConfig& cfg,
                           Trajectory* trajectory) {
    require(all_finite(velocity.data), "integrate_flow: velocity must be finite");
    const int steps = cfg.step_count();
    const double h = (cfg.t1 - cfg.t0) / steps;

    VectorField map = identity_map(velocity.shape);
    if (trajectory) {
        trajectory->states.clear();
        trajectory->steps = steps;
        trajectory->interval = cfg.checkpoint_interval;
    }
    for (int k = 0; k < steps; ++k) {
        if (trajectory) {
            const int m = cfg.checkpoint_interval;
            if (m <= 0 || k % m == 0) trajectory->states.push_back(map);
        }
        euler_step(map, velocity, h);
    }
    return map;
}

VectorField integrate_inverse(const VectorField& velocity, const FlowConfig& cfg) {
    VectorField negated = velocity;
    for (double& v : negated.data) v = -v;
    return integrate_flow(negated, cfg);
}

ScalarVolume warp(const ScalarVolume& image, const VectorField& map) {
    require(map.channels == image.dims(), "warp: map channels must match image dims");
    return sample_linear(image, map);
}

void warp_coordinate_gradient(const ScalarVolume& image, const VectorField& map,
                              const ScalarVolume& grad_warped, VectorField& grad_map) {
    require(same_shape(map.shape, grad_warped.shape), "warp_coordinate_gradient: shape mismatch");
    const int d = image.dims();
    const std::size_t n = map.voxels();
    double c[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad_warped.data[i];
        if (g == 0.0) continue;
        for (int a = 0; a < d; ++a) c[a] = map.at(a, i);
        const InterpStencil st = interp_stencil(image.shape, c);
        for (int b = 0; b < d; ++b) {
            double deriv = 0.0;
            for (int k = 0; k < st.corner_count; ++k)
                deriv += st.dweights[k][b] * image.data[st.corners[k]];
            grad_map.at(b, i) += g * deriv;
        }
    }
}

void flow_backward(const VectorField& velocity, const Trajectory& trajectory, const FlowConfig& cfg,
                   const VectorField& grad_map, VectorField& grad_velocity) {
    const int steps = trajectory.steps;
    require(steps >= 1, "flow_backward: empty trajectory");
    const double h = (cfg.t1 - cfg.t0) / steps;
    VectorField lambda = grad_map;

    if (trajectory.interval <= 0) {
        require(static_cast<int>(trajectory.states.size()) == steps,
                "flow_backward: dense trajectory is incomplete");
        for (int k = steps - 1; k >= 0; --k)
            adjoint_step(trajectory.states[k], velocity, h, lambda, grad_velocity);
        return;
    }

    // checkpointed sweep: recompute each segment forward, then walk it backward
    const int m = trajectory.interval;
    const int segments = (steps + m - 1) / m;
    require(static_cast<int>(trajectory.states.size()) == segments,
            "flow_backward: checkpoint trajectory is incomplete");
    std::vector<VectorField> scratch;
    for (int seg = segments - 1; seg >= 0; --seg) {
        const int first = seg * m;
        const int last = std::min(first + m, steps);  // exclusive
        scratch.clear();
        VectorField state = trajectory.states[seg];
        for (int k = first; k < last; ++k) {
            scratch.push_back(state);
            if (k + 1 < last) euler_step(state, velocity, h);
        }
        for (int k = last - 1; k >= first; --k)
            adjoint_step(scratch[k - first], velocity, h, lambda, grad_velocity);
    }
}

LossTerms evaluate_total_loss(const VelocityNet& net, const ScalarVolume& moving,
                              const SimilarityMetric& metric, const LossConfig& lcfg,
                              const FlowConfig& fcfg) {
    const VectorField v = net.forward();
    const VectorField map = integrate_flow(v, fcfg);
    const ScalarVolume warped = warp(moving, map);
    LossTerms terms;
    terms.similarity = metric.evaluate(warped, nullptr);
    terms.jacobian = loss_jacobian_penalty(map, lcfg.epsilon);
    terms.smoothness = loss_gradient_smoothness(map);
    terms.magnitude = loss_magnitude(v, net.smoothing_multiplier());
    return terms;
}

LossTerms loss_gradient_wrt_params(VelocityNet& net, const ScalarVolume& moving,
                                   const SimilarityMetric& metric, const LossConfig& lcfg,
                                   const FlowConfig& fcfg) {
    VelocityNet::Tape tape;
    const VectorField v = net.forward(&tape);

    Trajectory trajectory;
    const VectorField map = integrate_flow(v, fcfg, &trajectory);
    const ScalarVolume warped = warp(moving, map);

    LossTerms terms;
    ScalarVolume grad_warped;
    terms.similarity = metric.evaluate(warped, &grad_warped);

    VectorField grad_map(map.shape, map.channels);
    warp_coordinate_gradient(moving, map, grad_warped, grad_map);
    terms.jacobian = loss_jacobian_penalty(map, lcfg.epsilon, &grad_map, lcfg.lambda_J);
    terms.smoothness = loss_gradient_smoothness(map, &grad_map, lcfg.lambda_grad);

    VectorField grad_velocity(v.shape, v.channels);
    flow_backward(v, trajectory, fcfg, grad_map, grad_velocity);
    terms.magnitude = loss_magnitude(v, net.smoothing_multiplier(), &grad_velocity, lcfg.lambda_mag);

    net.backward(tape, grad_velocity);
    return terms;
}

}  // namespace diffreg
