#include "diffreg/synth.hpp"

#include <cmath>
#include <cstdlib>

#include "diffreg/grid.hpp"
#include "diffreg/spectral.hpp"

namespace diffreg {

namespace {

// Integration schedule for ground-truth exponentials; finer than the desk
// registration step so truth maps carry little solver error of their own.
FlowConfig truth_flow() {
    FlowConfig cfg;
    cfg.step = 0.01;
    return cfg;
}

}  // namespace

std::pair<ScalarVolume, LabelVolume> make_phantom(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int d = static_cast<int>(spec.shape.size());
    int min_n = spec.shape[0];
    for (int n : spec.shape) min_n = std::min(min_n, n);

    struct Blob {
        double center[kMaxDims];
        double sigma;
        double amplitude;
    };
    std::vector<Blob> blobs(static_cast<std::size_t>(spec.n_blobs));
    for (auto& b : blobs) {
        for (int a = 0; a < d; ++a) b.center[a] = rng.uniform(0.15, 0.85) * (spec.shape[a] - 1);
        b.sigma = rng.uniform(0.035, 0.09) * min_n;
        b.amplitude = rng.uniform(0.6, 1.0);
    }

    ScalarVolume image(spec.shape);
    ScalarVolume blob_sum(spec.shape);
    LabelVolume labels(spec.shape);
    std::vector<double> contrib(blobs.size());
    const std::size_t n = image.size();
    int x[kMaxDims];
    double max_value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        unravel(spec.shape, i, x);
        double total = 0.0;
        for (std::size_t b = 0; b < blobs.size(); ++b) {
            double r2 = 0.0;
            for (int a = 0; a < d; ++a) {
                const double dx = x[a] - blobs[b].center[a];
                r2 += dx * dx;
            }
            contrib[b] = blobs[b].amplitude * std::exp(-r2 / (2.0 * blobs[b].sigma * blobs[b].sigma));
            total += contrib[b];
        }
        blob_sum.data[i] = total;
        max_value = std::max(max_value, total);
    }
    if (max_value > 0.0)
        for (std::size_t i = 0; i < n; ++i) blob_sum.data[i] /= max_value;
    image.data = blob_sum.data;

    // fine-scale texture rides on the blobs so every region carries some
    // correspondence signal, like tissue texture in real scans
    if (spec.texture_amplitude > 0.0 && spec.n_blobs > 0) {
        const auto lap = laplacian_symbol(spec.shape, {});
        SpectralMultiplier lowpass;
        lowpass.shape = spec.shape;
        lowpass.values.resize(lap.size());
        const double ts2 = spec.texture_scale * spec.texture_scale;
        for (std::size_t i = 0; i < lap.size(); ++i)
            lowpass.values[i] = std::exp(-0.5 * ts2 * lap[i]);
        ScalarVolume noise(spec.shape);
        for (double& v : noise.data) v = rng.normal();
        noise = apply_spectral(noise, lowpass);
        double mx = 0.0;
        for (double v : noise.data) mx = std::max(mx, std::abs(v));
        if (mx > 0.0) {
            double hi = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                image.data[i] = std::max(0.0, image.data[i] +
                                                  spec.texture_amplitude * noise.data[i] / mx);
                hi = std::max(hi, image.data[i]);
            }
            if (hi > 0.0)
                for (double& v : image.data) v /= hi;
        }
    }

    // labels: strongest blob wins where the blob intensity clears the
    // threshold; the blob index is folded into the label alphabet
    const double threshold = 0.3;
    for (std::size_t i = 0; i < n; ++i) {
        if (blobs.empty() || blob_sum.data[i] <= threshold) {
            labels.data[i] = 0;
            continue;
        }
        unravel(spec.shape, i, x);
        std::size_t best = 0;
        double best_value = -1.0;
        for (std::size_t b = 0; b < blobs.size(); ++b) {
            double r2 = 0.0;
            for (int a = 0; a < d; ++a) {
                const double dx = x[a] - blobs[b].center[a];
                r2 += dx * dx;
            }
            const double value =
                blobs[b].amplitude * std::exp(-r2 / (2.0 * blobs[b].sigma * blobs[b].sigma));
            if (value > best_value) {
                best_value = value;
                best = b;
            }
        }
        labels.data[i] = static_cast<int>(best % static_cast<std::size_t>(spec.label_count)) + 1;
    }
    labels.rebuild_labelset();
    return {std::move(image), std::move(labels)};
}

VectorField random_smooth_velocity(const Shape& shape, double amplitude, double smoothness,
                                   std::uint64_t seed) {
    const int d = static_cast<int>(shape.size());
    const auto lap = laplacian_symbol(shape, {});
    SpectralMultiplier lowpass;
    lowpass.shape = shape;
    lowpass.values.resize(lap.size());
    const double s2 = smoothness * smoothness;
    for (std::size_t i = 0; i < lap.size(); ++i) lowpass.values[i] = std::exp(-0.5 * s2 * lap[i]);

    Rng rng(seed);
    VectorField v(shape, d);
    for (double& x : v.data) x = rng.normal();
    v = apply_spectral(v, lowpass);

    // smoothstep taper to zero at the frame keeps the field Lipschitz-small
    // near the boundary (a hard frame would spike the inverse-flow error)
    int min_n = shape[0];
    for (int n : shape) min_n = std::min(min_n, n);
    const int taper = std::min(5, (min_n - 1) / 2);
    const std::size_t n = v.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(shape, i, x);
        double w = 1.0;
        for (int a = 0; a < d; ++a) {
            const int dist = std::min(x[a], shape[a] - 1 - x[a]);
            const double t = taper > 0 ? std::min(1.0, static_cast<double>(dist) / taper) : 1.0;
            w *= t * t * (3.0 - 2.0 * t);
        }
        for (int c = 0; c < d; ++c) v.at(c, i) *= w;
    }

    double max_mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int a = 0; a < d; ++a) sq += v.at(a, i) * v.at(a, i);
        max_mag = std::max(max_mag, std::sqrt(sq));
    }
    if (max_mag > 0.0) {
        const double scale = amplitude / max_mag;
        for (double& xv : v.data) xv *= scale;
    } else {
        std::fill(v.data.begin(), v.data.end(), 0.0);
    }
    return v;
}

namespace {

// localized radial contraction/expansion; the strong-compression analogue of
// atrophy-driven deformation, pushing truth determinants well below one
VectorField pinch_velocity(const Shape& shape, std::uint64_t seed) {
    const int d = static_cast<int>(shape.size());
    Rng rng(seed ^ 0xabcdef12345678ull);
    double center[kMaxDims];
    for (int a = 0; a < d; ++a) center[a] = rng.uniform(0.32, 0.68) * (shape[a] - 1);
    double width = rng.uniform(3.5, 5.0);
    if (const char* e = std::getenv("PINCH_W")) width = std::atof(e);
    const double sign = rng.uniform() < 0.7 ? 1.0 : -1.0;  // the recovered map Exp(-v) mostly contracts

    VectorField v(shape, d);
    int x[kMaxDims];
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        unravel(shape, i, x);
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
            const double dx = x[a] - center[a];
            r2 += dx * dx;
        }
        const double radial = sign * std::exp(-r2 / (2.0 * width * width)) / width;
        for (int a = 0; a < d; ++a) v.at(a, i) = radial * (x[a] - center[a]);
    }
    double mx = 0.0;
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        double sq = 0.0;
        for (int a = 0; a < d; ++a) sq += v.at(a, i) * v.at(a, i);
        mx = std::max(mx, std::sqrt(sq));
    }
    if (mx > 0.0)
        for (double& y : v.data) y /= mx;
    return v;
}

}  // namespace

GroundTruthWarp make_ground_truth_warp(const SynthSpec& spec) {
    spec.validate();
    for (int attempt = 0; attempt < 10; ++attempt) {
        const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(attempt) * 1000003ull;
        GroundTruthWarp warp;
        warp.velocity =
            random_smooth_velocity(spec.shape, spec.warp_amplitude, spec.warp_smoothness, seed);
        if (spec.pinch_strength > 0.0 && spec.warp_amplitude > 0.0) {
            const VectorField pinch = pinch_velocity(spec.shape, seed);
            VectorField& v = warp.velocity;
            const double base_w = 1.0 - spec.pinch_strength;
            for (std::size_t i = 0; i < v.data.size(); ++i)
                v.data[i] = base_w * v.data[i] +
                            spec.pinch_strength * spec.warp_amplitude * pinch.data[i];
            double mx = 0.0;
            for (std::size_t i = 0; i < v.voxels(); ++i) {
                double sq = 0.0;
                for (int a = 0; a < v.channels; ++a) sq += v.at(a, i) * v.at(a, i);
                mx = std::max(mx, std::sqrt(sq));
            }
            if (mx > 0.0)
                for (double& y : v.data) y *= spec.warp_amplitude / mx;
        }
        const VectorField& v = warp.velocity;
        const std::size_t n = v.voxels();
        const int d = static_cast<int>(spec.shape.size());
        warp.map = integrate_flow(v, truth_flow());
        warp.inverse = integrate_inverse(v, truth_flow());

        // fold-free check at interior voxels
        const ScalarVolume det = jacobian_det(warp.map);
        bool ok = true;
        int x[kMaxDims];
        for (std::size_t i = 0; i < n && ok; ++i) {
            unravel(spec.shape, i, x);
            bool interior = true;
            for (int a = 0; a < d; ++a)
                if (x[a] == 0 || x[a] == spec.shape[a] - 1) interior = false;
            if (interior && det.data[i] <= 0.0) ok = false;
        }
        if (ok) return warp;
    }
    throw Error("make_ground_truth_warp: could not generate a fold-free map in 10 tries");
}

RegistrationCase make_pair(const SynthSpec& spec) {
    spec.validate();
    RegistrationCase out;
    out.seed = spec.seed;

    auto [phantom, labels] = make_phantom(spec);
    const GroundTruthWarp gt = make_ground_truth_warp(spec);

    out.moving = phantom;
    out.labels_moving = labels;
    // the recoverable truth: fixed lives on the grid of Exp(-v)
    out.map_gt = gt.inverse;
    out.map_gt_inverse = gt.map;

    ScalarVolume fixed_geometry = warp(phantom, out.map_gt);
    out.labels_fixed = sample_nearest(labels, out.map_gt);

    // unmatched structure in the fixed image only: the synthetic analogue of
    // inter-subject differences, which no diffeomorphism can explain away
    if (spec.lesion_strength > 0.0 && spec.n_blobs > 0) {
        Rng rng(spec.seed ^ 0x51e51015eedull);
        const int d = static_cast<int>(spec.shape.size());
        double center[kMaxDims];
        for (int a = 0; a < d; ++a) center[a] = rng.uniform(0.3, 0.7) * (spec.shape[a] - 1);
        const double width = rng.uniform(1.6, 2.6);
        const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
        int x[kMaxDims];
        for (std::size_t i = 0; i < fixed_geometry.size(); ++i) {
            unravel(spec.shape, i, x);
            double r2 = 0.0;
            for (int a = 0; a < d; ++a) {
                const double dx = x[a] - center[a];
                r2 += dx * dx;
            }
            const double bump = sign * spec.lesion_strength * std::exp(-r2 / (2.0 * width * width));
            fixed_geometry.data[i] = std::clamp(fixed_geometry.data[i] + bump, 0.0, 1.0);
        }
    }

    if (spec.remap) {
        ContrastiveConfig remap;
        remap.bezier_degree = spec.bezier_degree;
        remap.invert_probability = spec.invert_probability;
        out.fixed = augment_modality(fixed_geometry, remap, spec.seed ^ 0x9e3779b97f4a7c15ull);
    } else {
        out.fixed = std::move(fixed_geometry);
    }
    return out;
}

}  // namespace diffreg
