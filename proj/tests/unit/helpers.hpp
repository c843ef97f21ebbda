#pragma once

#include <cmath>

#include "diffreg/rng.hpp"
#include "diffreg/types.hpp"

namespace diffreg::testing {

inline ScalarVolume random_volume(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    ScalarVolume out(shape);
    for (double& v : out.data) v = rng.uniform(lo, hi);
    return out;
}

inline VectorField random_field(const Shape& shape, int channels, Rng& rng, double amplitude = 1.0) {
    VectorField out(shape, channels);
    for (double& v : out.data) v = rng.uniform(-amplitude, amplitude);
    return out;
}

inline double rel_err(double got, double want, double floor = 1e-12) {
    const double denom = std::max({std::abs(got), std::abs(want), floor});
    return std::abs(got - want) / denom;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace diffreg::testing
