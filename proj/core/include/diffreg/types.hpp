#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffreg {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an optimization produces a non-finite quantity; the CLI maps
// this to exit code 2 (everything else that fails maps to exit code 1).
struct NumericalError : Error {
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Grid dimensions, row-major: the last axis varies fastest in memory.
using Shape = std::vector<int>;

inline std::size_t voxel_count(const Shape& shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_to_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

/// Row-major strides: stride[d-1] == 1.
inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * static_cast<std::size_t>(shape[i + 1]);
    return strides;
}

/// Up to 3 spatial axes; coordinates are in voxel units throughout.
constexpr int kMaxDims = 3;

/// Dense scalar field on a regular grid. `spacing` is in mm and only
/// rescales derivative operators; sampling works in voxel units.
struct ScalarVolume {
    Shape shape;
    std::vector<double> spacing;
    std::vector<double> data;

    ScalarVolume() = default;
    ScalarVolume(Shape s, double fill = 0.0)
        : shape(std::move(s)),
          spacing(shape.size(), 1.0),
          data(voxel_count(shape), fill) {}

    int dims() const { return static_cast<int>(shape.size()); }
    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

/// Dense d-channel vector field on a regular grid, channel-major storage:
/// channel c of voxel i lives at data[c * nvox + i]. Values are voxel
/// units unless stated otherwise. Holds velocities, displacements and maps.
struct VectorField {
    Shape shape;
    int channels = 0;
    std::vector<double> data;

    VectorField() = default;
    VectorField(Shape s, int c)
        : shape(std::move(s)), channels(c), data(voxel_count(shape) * c, 0.0) {}

    static VectorField like(const VectorField& other) {
        return VectorField(other.shape, other.channels);
    }

    int dims() const { return static_cast<int>(shape.size()); }
    std::size_t voxels() const { return voxel_count(shape); }
    double& at(int c, std::size_t i) { return data[static_cast<std::size_t>(c) * voxels() + i]; }
    double at(int c, std::size_t i) const { return data[static_cast<std::size_t>(c) * voxels() + i]; }
    double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
    const double* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }
};

/// Integer label map. `labelset` lists the distinct labels present, sorted.
struct LabelVolume {
    Shape shape;
    std::vector<int> data;
    std::vector<int> labelset;

    LabelVolume() = default;
    explicit LabelVolume(Shape s) : shape(std::move(s)), data(voxel_count(shape), 0) {}

    int dims() const { return static_cast<int>(shape.size()); }
    std::size_t size() const { return data.size(); }

    void rebuild_labelset() {
        labelset = data;
        std::sort(labelset.begin(), labelset.end());
        labelset.erase(std::unique(labelset.begin(), labelset.end()), labelset.end());
    }
};

/// C-channel field of self-similarity tokens, channel-major like VectorField.
struct DescriptorField {
    Shape shape;
    int channels = 0;
    std::vector<double> data;

    DescriptorField() = default;
    DescriptorField(Shape s, int c)
        : shape(std::move(s)), channels(c), data(voxel_count(shape) * c, 0.0) {}

    std::size_t voxels() const { return voxel_count(shape); }
    double& at(int c, std::size_t i) { return data[static_cast<std::size_t>(c) * voxels() + i]; }
    double at(int c, std::size_t i) const { return data[static_cast<std::size_t>(c) * voxels() + i]; }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace diffreg
