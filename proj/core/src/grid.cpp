#include "diffreg/grid.hpp"

#include <cmath>

namespace diffreg {

InterpStencil interp_stencil(const Shape& shape, const double* coord) {
    InterpStencil st;
    st.dims = static_cast<int>(shape.size());
    st.corner_count = 1 << st.dims;

    int base[kMaxDims];
    double frac[kMaxDims];
    bool inside[kMaxDims];
    const auto strides = row_major_strides(shape);

    for (int a = 0; a < st.dims; ++a) {
        const int n = shape[a];
        const double raw = coord[a];
        if (n == 1) {
            base[a] = 0;
            frac[a] = 0.0;
            inside[a] = false;
            continue;
        }
        double c = raw;
        if (c < 0.0) c = 0.0;
        if (c > n - 1.0) c = n - 1.0;
        int i0 = static_cast<int>(std::floor(c));
        if (i0 > n - 2) i0 = n - 2;
        base[a] = i0;
        frac[a] = c - i0;
        inside[a] = raw > 0.0 && raw < n - 1.0;
    }

    for (int corner = 0; corner < st.corner_count; ++corner) {
        std::size_t idx = 0;
        double w = 1.0;
        for (int a = 0; a < st.dims; ++a) {
            const int hi = (corner >> a) & 1;
            const int ia = (shape[a] == 1) ? 0 : base[a] + hi;
            idx += static_cast<std::size_t>(ia) * strides[a];
            w *= hi ? frac[a] : 1.0 - frac[a];
        }
        st.corners[corner] = idx;
        st.weights[corner] = w;
        for (int b = 0; b < st.dims; ++b) {
            if (!inside[b]) {
                st.dweights[corner][b] = 0.0;
                continue;
            }
            double dw = 1.0;
            for (int a = 0; a < st.dims; ++a) {
                const int hi = (corner >> a) & 1;
                if (a == b)
                    dw *= hi ? 1.0 : -1.0;
                else
                    dw *= hi ? frac[a] : 1.0 - frac[a];
            }
            st.dweights[corner][b] = dw;
        }
    }
    return st;
}

namespace {

void check_coords(int field_dims, const VectorField& coords) {
    require(coords.channels == field_dims,
            "sample_linear: coords carry " + std::to_string(coords.channels) +
                " channels but the field has " + std::to_string(field_dims) + " dims");
}

}  // namespace

ScalarVolume sample_linear(const ScalarVolume& field, const VectorField& coords) {
    check_coords(field.dims(), coords);
    ScalarVolume out(coords.shape);
    out.spacing = field.spacing;
    const std::size_t n = out.size();
    double c[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < coords.channels; ++a) c[a] = coords.at(a, i);
        const InterpStencil st = interp_stencil(field.shape, c);
        double v = 0.0;
        for (int k = 0; k < st.corner_count; ++k) v += st.weights[k] * field.data[st.corners[k]];
        out.data[i] = v;
    }
    return out;
}

VectorField sample_linear(const VectorField& field, const VectorField& coords) {
    check_coords(field.dims(), coords);
    VectorField out(coords.shape, field.channels);
    const std::size_t n = out.voxels();
    double c[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        for (int a = 0; a < coords.channels; ++a) c[a] = coords.at(a, i);
        const InterpStencil st = interp_stencil(field.shape, c);
        for (int ch = 0; ch < field.channels; ++ch) {
            const double* src = field.channel(ch);
            double v = 0.0;
            for (int k = 0; k < st.corner_count; ++k) v += st.weights[k] * src[st.corners[k]];
            out.at(ch, i) = v;
        }
    }
    return out;
}

LabelVolume sample_nearest(const LabelVolume& labels, const VectorField& coords) {
    check_coords(labels.dims(), coords);
    LabelVolume out(coords.shape);
    const auto strides = row_major_strides(labels.shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t idx = 0;
        for (int a = 0; a < coords.channels; ++a) {
            const int nn = labels.shape[a];
            long r = std::lround(coords.at(a, i));
            if (r < 0) r = 0;
            if (r > nn - 1) r = nn - 1;
            idx += static_cast<std::size_t>(r) * strides[a];
        }
        out.data[i] = labels.data[idx];
    }
    out.rebuild_labelset();
    return out;
}

VectorField gradient_central(const ScalarVolume& field) {
    const int d = field.dims();
    for (int a = 0; a < d; ++a)
        require(field.shape[a] >= 2, "gradient_central: degenerate axis of size 1");

    VectorField out(field.shape, d);
    const auto strides = row_major_strides(field.shape);
    const std::size_t n = field.size();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(field.shape, i, x);
        for (int a = 0; a < d; ++a) {
            const int na = field.shape[a];
            const double sp = field.spacing[a];
            double g;
            if (x[a] == 0)
                g = (field.data[i + strides[a]] - field.data[i]) / sp;
            else if (x[a] == na - 1)
                g = (field.data[i] - field.data[i - strides[a]]) / sp;
            else
                g = (field.data[i + strides[a]] - field.data[i - strides[a]]) / (2.0 * sp);
            out.at(a, i) = g;
        }
    }
    return out;
}

namespace {

inline double det_small(const double m[kMaxDims][kMaxDims], int d) {
    switch (d) {
        case 1:
            return m[0][0];
        case 2:
            return m[0][0] * m[1][1] - m[0][1] * m[1][0];
        default:
            return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                   m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                   m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }
}

}  // namespace

ScalarVolume jacobian_det(const VectorField& map) {
    const int d = map.dims();
    require(map.channels == d, "jacobian_det: map must have one channel per spatial dim");
    for (int a = 0; a < d; ++a)
        require(map.shape[a] >= 2, "jacobian_det: all dims must be >= 2");

    ScalarVolume out(map.shape);
    const auto strides = row_major_strides(map.shape);
    const std::size_t n = out.size();
    int x[kMaxDims];
    double jac[kMaxDims][kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(map.shape, i, x);
        for (int c = 0; c < d; ++c) {
            const double* comp = map.channel(c);
            for (int a = 0; a < d; ++a) {
                const int na = map.shape[a];
                if (x[a] == 0)
                    jac[c][a] = comp[i + strides[a]] - comp[i];
                else if (x[a] == na - 1)
                    jac[c][a] = comp[i] - comp[i - strides[a]];
                else
                    jac[c][a] = 0.5 * (comp[i + strides[a]] - comp[i - strides[a]]);
            }
        }
        out.data[i] = det_small(jac, d);
    }
    return out;
}

VectorField identity_map(const Shape& shape) {
    VectorField out(shape, static_cast<int>(shape.size()));
    const std::size_t n = out.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(shape, i, x);
        for (int a = 0; a < out.channels; ++a) out.at(a, i) = x[a];
    }
    return out;
}

}  // namespace diffreg
