#include "diffreg/losses.hpp"

#include <cmath>

#include "diffreg/grid.hpp"

namespace diffreg {

namespace {

// Adjoint of the central/one-sided difference used by jacobian_det and the
// smoothness term: scatters an upstream derivative at voxel i along axis a.
struct StencilScatter {
    const Shape& shape;
    std::vector<std::size_t> strides;

    explicit StencilScatter(const Shape& s) : shape(s), strides(row_major_strides(s)) {}

    void add(double* grad_channel, std::size_t i, const int* x, int axis, double upstream) const {
        const int n = shape[axis];
        const std::size_t s = strides[axis];
        if (x[axis] == 0) {
            grad_channel[i + s] += upstream;
            grad_channel[i] -= upstream;
        } else if (x[axis] == n - 1) {
            grad_channel[i] += upstream;
            grad_channel[i - s] -= upstream;
        } else {
            grad_channel[i + s] += 0.5 * upstream;
            grad_channel[i - s] -= 0.5 * upstream;
        }
    }
};

inline double diff_along(const double* comp, std::size_t i, const int* x, int axis, const Shape& shape,
                         const std::vector<std::size_t>& strides) {
    const int n = shape[axis];
    const std::size_t s = strides[axis];
    if (x[axis] == 0) return comp[i + s] - comp[i];
    if (x[axis] == n - 1) return comp[i] - comp[i - s];
    return 0.5 * (comp[i + s] - comp[i - s]);
}

// Cofactor matrix (d det / d J) for d = 1, 2, 3.
inline void cofactor(const double j[kMaxDims][kMaxDims], int d, double c[kMaxDims][kMaxDims]) {
    switch (d) {
        case 1:
            c[0][0] = 1.0;
            return;
        case 2:
            c[0][0] = j[1][1];
            c[0][1] = -j[1][0];
            c[1][0] = -j[0][1];
            c[1][1] = j[0][0];
            return;
        default:
            c[0][0] = j[1][1] * j[2][2] - j[1][2] * j[2][1];
            c[0][1] = -(j[1][0] * j[2][2] - j[1][2] * j[2][0]);
            c[0][2] = j[1][0] * j[2][1] - j[1][1] * j[2][0];
            c[1][0] = -(j[0][1] * j[2][2] - j[0][2] * j[2][1]);
            c[1][1] = j[0][0] * j[2][2] - j[0][2] * j[2][0];
            c[1][2] = -(j[0][0] * j[2][1] - j[0][1] * j[2][0]);
            c[2][0] = j[0][1] * j[1][2] - j[0][2] * j[1][1];
            c[2][1] = -(j[0][0] * j[1][2] - j[0][2] * j[1][0]);
            c[2][2] = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            return;
    }
}

inline double det_of(const double j[kMaxDims][kMaxDims], int d) {
    switch (d) {
        case 1:
            return j[0][0];
        case 2:
            return j[0][0] * j[1][1] - j[0][1] * j[1][0];
        default:
            return j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                   j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                   j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    }
}

}  // namespace

ScalarVolume jacobian_penalty_map(const VectorField& map, double epsilon) {
    ScalarVolume det = jacobian_det(map);
    for (double& v : det.data) v = std::max(0.0, epsilon - v);
    return det;
}

double loss_jacobian_penalty(const VectorField& map, double epsilon, VectorField* grad_map,
                             double weight) {
    require(epsilon > 0.0 && epsilon < 1.0, "loss_jacobian_penalty: epsilon must lie in (0,1)");
    const int d = map.dims();
    require(map.channels == d, "loss_jacobian_penalty: channel mismatch");
    const auto strides = row_major_strides(map.shape);
    const std::size_t n = map.voxels();
    const double scale = 1.0 / static_cast<double>(n);
    const StencilScatter scatter(map.shape);

    double acc = 0.0;
    int x[kMaxDims];
    double jac[kMaxDims][kMaxDims], cof[kMaxDims][kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(map.shape, i, x);
        for (int c = 0; c < d; ++c)
            for (int a = 0; a < d; ++a)
                jac[c][a] = diff_along(map.channel(c), i, x, a, map.shape, strides);
        const double det = det_of(jac, d);
        const double hinge = epsilon - det;
        if (hinge > 0.0) {
            acc += hinge * scale;
            if (grad_map) {
                cofactor(jac, d, cof);
                // d hinge / d J_{ca} = -cof[c][a]
                for (int c = 0; c < d; ++c)
                    for (int a = 0; a < d; ++a)
                        scatter.add(grad_map->channel(c), i, x, a, -weight * scale * cof[c][a]);
            }
        }
    }
    return acc;
}

double loss_gradient_smoothness(const VectorField& map, VectorField* grad_map, double weight) {
    const int d = map.dims();
    require(map.channels == d, "loss_gradient_smoothness: channel mismatch");
    const auto strides = row_major_strides(map.shape);
    const std::size_t n = map.voxels();
    const double scale = 1.0 / static_cast<double>(n);
    const StencilScatter scatter(map.shape);

    // displacement u = map - id; identity drops out of the differences except
    // through the diagonal: d/dx_a (x_a) = 1 on the one-sided and central
    // stencils alike, so subtract 1 from the diagonal entries.
    double acc = 0.0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(map.shape, i, x);
        for (int c = 0; c < d; ++c)
            for (int a = 0; a < d; ++a) {
                double g = diff_along(map.channel(c), i, x, a, map.shape, strides);
                if (c == a) g -= 1.0;
                acc += g * g * scale;
                if (grad_map)
                    scatter.add(grad_map->channel(c), i, x, a, weight * 2.0 * g * scale);
            }
    }
    return acc;
}

double loss_magnitude(const VectorField& velocity, const SpectralMultiplier& mult,
                      VectorField* grad_velocity, double weight) {
    const double value = v_norm_sq(velocity, mult);
    if (grad_velocity) {
        VectorField g = v_norm_sq_gradient(velocity, mult);
        for (std::size_t i = 0; i < g.data.size(); ++i) grad_velocity->data[i] += weight * g.data[i];
    }
    return value;
}

}  // namespace diffreg
