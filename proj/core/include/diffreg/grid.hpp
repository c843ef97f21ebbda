#pragma once

#include "diffreg/types.hpp"

namespace diffreg {

/// Multilinear interpolation stencil at one continuous coordinate.
/// Out-of-range coordinates are clamped to the border (clamp policy), and the
/// per-axis `inside` flags carry the clamp derivative for coordinate
/// gradients: zero once a coordinate leaves the open interval (0, N-1).
struct InterpStencil {
    int dims = 0;
    int corner_count = 0;                 // 2^dims
    std::size_t corners[8] = {};          // linear voxel indices
    double weights[8] = {};
    double dweights[8][kMaxDims] = {};    // d(weight)/d(coordinate axis), clamp included
};

InterpStencil interp_stencil(const Shape& shape, const double* coord);

/// Multilinear sampling of a scalar field at the coordinates carried by
/// `coords` (d channels over the output grid). Border policy: clamp.
ScalarVolume sample_linear(const ScalarVolume& field, const VectorField& coords);

/// Channel-wise multilinear sampling of a vector field.
VectorField sample_linear(const VectorField& field, const VectorField& coords);

/// Nearest-neighbor label sampling (preserves the label alphabet).
LabelVolume sample_nearest(const LabelVolume& labels, const VectorField& coords);

/// Central differences in the interior, one-sided at the boundary, scaled by
/// 1/spacing. Every axis must have size >= 2.
VectorField gradient_central(const ScalarVolume& field);

/// Per-voxel determinant of the d x d matrix of central differences of the
/// map (one-sided at the boundary). The map is in voxel units, so the
/// identity map yields exactly 1 regardless of spacing.
ScalarVolume jacobian_det(const VectorField& map);

/// The identity map: channel c at voxel x equals x_c.
VectorField identity_map(const Shape& shape);

/// Decodes linear index `i` into the multi-index `x` (row-major).
inline void unravel(const Shape& shape, std::size_t i, int* x) {
    for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
        x[a] = static_cast<int>(i % static_cast<std::size_t>(shape[a]));
        i /= static_cast<std::size_t>(shape[a]);
    }
}

}  // namespace diffreg
