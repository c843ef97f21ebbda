#include "diffreg/similarity.hpp"

#include <cmath>

#include "diffreg/grid.hpp"

namespace diffreg {

double mind_mse_against(const ScalarVolume& warped, const DescriptorField& fixed_descriptor,
                        const SearchScheme& scheme, ScalarVolume* grad_warped) {
    require(same_shape(warped.shape, fixed_descriptor.shape), "mind_mse: shape mismatch");
    const DescriptorField dw = mind(warped, scheme);
    require(dw.channels == fixed_descriptor.channels, "mind_mse: descriptor channel mismatch");

    const std::size_t n = warped.size();
    const double scale = 1.0 / (static_cast<double>(n) * dw.channels);
    double loss = 0.0;
    DescriptorField grad_desc;
    if (grad_warped) grad_desc = DescriptorField(warped.shape, dw.channels);
    for (int c = 0; c < dw.channels; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = dw.at(c, i) - fixed_descriptor.at(c, i);
            loss += diff * diff * scale;
            if (grad_warped) grad_desc.at(c, i) = 2.0 * diff * scale;
        }
    if (grad_warped) {
        *grad_warped = ScalarVolume(warped.shape);
        mind_vjp(warped, scheme, grad_desc, *grad_warped);
    }
    return loss;
}

double mind_mse(const ScalarVolume& warped, const ScalarVolume& fixed, const SearchScheme& scheme,
                ScalarVolume* grad_warped) {
    require(same_shape(warped.shape, fixed.shape), "mind_mse: shape mismatch");
    return mind_mse_against(warped, mind(fixed, scheme), scheme, grad_warped);
}

double descriptor_cosine_dissim(const DescriptorField& d0, const DescriptorField& d1) {
    require(same_shape(d0.shape, d1.shape) && d0.channels == d1.channels,
            "descriptor_cosine_dissim: shape mismatch");
    const std::size_t n = voxel_count(d0.shape);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int c = 0; c < d0.channels; ++c) dot += d0.at(c, i) * d1.at(c, i);
        acc += dot;
    }
    return 1.0 - acc / static_cast<double>(n);
}

namespace {

struct PatchRange {
    int lo[kMaxDims];
    int hi[kMaxDims];  // exclusive
};

// Non-overlapping tiling with boundary remainders as smaller patches.
std::vector<PatchRange> tile_patches(const Shape& shape, int side) {
    std::vector<int> counts(shape.size());
    for (std::size_t a = 0; a < shape.size(); ++a)
        counts[a] = (shape[a] + side - 1) / side;
    std::vector<PatchRange> out;
    std::vector<int> idx(shape.size(), 0);
    while (true) {
        PatchRange r{};
        for (std::size_t a = 0; a < shape.size(); ++a) {
            r.lo[a] = idx[a] * side;
            r.hi[a] = std::min(shape[a], r.lo[a] + side);
        }
        out.push_back(r);
        int a = static_cast<int>(shape.size()) - 1;
        while (a >= 0 && ++idx[a] == counts[a]) idx[a--] = 0;
        if (a < 0) break;
    }
    return out;
}

// Collect the linear indices of one patch.
void patch_indices(const Shape& shape, const PatchRange& r, std::vector<std::size_t>& out) {
    out.clear();
    const auto strides = row_major_strides(shape);
    const int d = static_cast<int>(shape.size());
    int x[kMaxDims];
    for (int a = 0; a < d; ++a) x[a] = r.lo[a];
    while (true) {
        std::size_t idx = 0;
        for (int a = 0; a < d; ++a) idx += static_cast<std::size_t>(x[a]) * strides[a];
        out.push_back(idx);
        int a = d - 1;
        while (a >= 0 && ++x[a] == r.hi[a]) x[a--] = r.lo[a];
        if (a < 0) break;
    }
}

}  // namespace

double local_mi(const ScalarVolume& i0, const ScalarVolume& i1, const LmiSpec& spec,
                ScalarVolume* grad_i0) {
    require(same_shape(i0.shape, i1.shape), "local_mi: shape mismatch");
    spec.validate();

    const int bins = spec.bins;
    const double bin_width = 1.0 / bins;
    const double sigma = spec.bandwidth * bin_width;
    const double inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> centers(bins);
    for (int b = 0; b < bins; ++b) centers[b] = (b + 0.5) * bin_width;

    if (grad_i0) *grad_i0 = ScalarVolume(i0.shape);

    const auto patches = tile_patches(i0.shape, spec.patch_side);
    const double patch_scale = 1.0 / static_cast<double>(patches.size());

    std::vector<std::size_t> idx;
    std::vector<double> w0, w1;             // per-voxel Gaussian bin weights
    std::vector<double> joint(bins * bins);  // W_ab accumulator
    double total_mi = 0.0;

    for (const auto& patch : patches) {
        patch_indices(i0.shape, patch, idx);
        const std::size_t m = idx.size();
        w0.assign(m * bins, 0.0);
        w1.assign(m * bins, 0.0);
        std::fill(joint.begin(), joint.end(), 0.0);

        for (std::size_t k = 0; k < m; ++k) {
            const double t0 = i0.data[idx[k]];
            const double t1 = i1.data[idx[k]];
            for (int b = 0; b < bins; ++b) {
                const double d0 = t0 - centers[b];
                const double d1 = t1 - centers[b];
                w0[k * bins + b] = std::exp(-d0 * d0 * inv_two_sigma_sq);
                w1[k * bins + b] = std::exp(-d1 * d1 * inv_two_sigma_sq);
            }
            for (int a = 0; a < bins; ++a) {
                const double wa = w0[k * bins + a];
                for (int b = 0; b < bins; ++b) joint[a * bins + b] += wa * w1[k * bins + b];
            }
        }

        double total = 0.0;
        for (double v : joint) total += v;
        std::vector<double> p(joint);
        for (double& v : p) v /= total;
        std::vector<double> pm(bins, 0.0), qm(bins, 0.0);
        for (int a = 0; a < bins; ++a)
            for (int b = 0; b < bins; ++b) {
                pm[a] += p[a * bins + b];
                qm[b] += p[a * bins + b];
            }
        double mi = 0.0;
        for (int a = 0; a < bins; ++a)
            for (int b = 0; b < bins; ++b) {
                const double pab = p[a * bins + b];
                if (pab > 1e-300) mi += pab * std::log(pab / (pm[a] * qm[b]));
            }
        total_mi += mi * patch_scale;

        if (grad_i0) {
            // dMI/dW_ab = (log(p_ab/(p_a q_b)) - MI) / total
            std::vector<double> gw(bins * bins, 0.0);
            for (int a = 0; a < bins; ++a)
                for (int b = 0; b < bins; ++b) {
                    const double pab = p[a * bins + b];
                    if (pab > 1e-300)
                        gw[a * bins + b] = (std::log(pab / (pm[a] * qm[b])) - mi) / total;
                }
            for (std::size_t k = 0; k < m; ++k) {
                const double t0 = i0.data[idx[k]];
                double acc = 0.0;
                for (int a = 0; a < bins; ++a) {
                    // d w0 / d t0 = w0 * (c_a - t0) / sigma^2
                    const double dwa = w0[k * bins + a] * (centers[a] - t0) * 2.0 * inv_two_sigma_sq;
                    if (dwa == 0.0) continue;
                    double inner = 0.0;
                    for (int b = 0; b < bins; ++b)
                        inner += gw[a * bins + b] * w1[k * bins + b];
                    acc += dwa * inner;
                }
                grad_i0->data[idx[k]] += acc * patch_scale;
            }
        }
    }
    return total_mi;
}

MindMetric::MindMetric(const ScalarVolume& fixed, SearchScheme scheme)
    : scheme_(std::move(scheme)), fixed_descriptor_(mind(fixed, scheme_)) {}

double MindMetric::evaluate(const ScalarVolume& warped, ScalarVolume* grad) const {
    return mind_mse_against(warped, fixed_descriptor_, scheme_, grad);
}

LmiMetric::LmiMetric(const ScalarVolume& fixed, LmiSpec spec) : spec_(spec), fixed_(fixed) {}

double LmiMetric::evaluate(const ScalarVolume& warped, ScalarVolume* grad) const {
    const double mi = local_mi(warped, fixed_, spec_, grad);
    if (grad)
        for (double& g : grad->data) g = -g;
    return -mi;
}

}  // namespace diffreg
