#include "diffreg/descriptor.hpp"

#include <cmath>
#include <limits>

#include "diffreg/grid.hpp"

namespace diffreg {

namespace {

// Keeps exp() output inside (0,1] even when the exponent underflows.
constexpr double kValueFloor = 1e-300;
// Below this scale a token is numerically degenerate: the loss surface is
// flat in double precision, so the consistent subgradient is zero.
constexpr double kDegenerateScale = 1e-100;

struct ClampedReader {
    const Shape& shape;
    std::vector<std::size_t> strides;

    explicit ClampedReader(const Shape& s) : shape(s), strides(row_major_strides(s)) {}

    std::size_t index(const int* x) const {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < shape.size(); ++a) {
            int xa = x[a];
            if (xa < 0) xa = 0;
            if (xa > shape[a] - 1) xa = shape[a] - 1;
            idx += static_cast<std::size_t>(xa) * strides[a];
        }
        return idx;
    }
};

// Odometer over the (2r+1)^d patch cube.
struct PatchCube {
    int d;
    int radius;
    int count;

    PatchCube(int dims, int r) : d(dims), radius(r) {
        count = 1;
        for (int a = 0; a < d; ++a) count *= 2 * r + 1;
    }

    void offset(int term, int* q) const {
        const int w = 2 * radius + 1;
        for (int a = d - 1; a >= 0; --a) {
            q[a] = term % w - radius;
            term /= w;
        }
    }
};

double ssd_at(const ScalarVolume& image, const ClampedReader& reader, const PatchCube& cube,
              const int* x1, const int* x2) {
    int q[kMaxDims], p1[kMaxDims], p2[kMaxDims];
    double acc = 0.0;
    for (int t = 0; t < cube.count; ++t) {
        cube.offset(t, q);
        for (int a = 0; a < cube.d; ++a) {
            p1[a] = x1[a] + q[a];
            p2[a] = x2[a] + q[a];
        }
        const double diff = image.data[reader.index(p1)] - image.data[reader.index(p2)];
        acc += diff * diff;
    }
    return acc;
}

void ssd_at_vjp(const ScalarVolume& image, const ClampedReader& reader, const PatchCube& cube,
                const int* x1, const int* x2, double upstream, ScalarVolume& grad) {
    int q[kMaxDims], p1[kMaxDims], p2[kMaxDims];
    for (int t = 0; t < cube.count; ++t) {
        cube.offset(t, q);
        for (int a = 0; a < cube.d; ++a) {
            p1[a] = x1[a] + q[a];
            p2[a] = x2[a] + q[a];
        }
        const std::size_t i1 = reader.index(p1);
        const std::size_t i2 = reader.index(p2);
        const double diff = image.data[i1] - image.data[i2];
        grad.data[i1] += 2.0 * upstream * diff;
        grad.data[i2] -= 2.0 * upstream * diff;
    }
}

std::vector<std::array<int, kMaxDims>> unit_offsets(int d) {
    std::vector<std::array<int, kMaxDims>> out;
    for (int a = 0; a < d; ++a)
        for (int s : {+1, -1}) {
            std::array<int, kMaxDims> o{};
            o[a] = s;
            out.push_back(o);
        }
    return out;
}

// Shared precomputation for the descriptor family: raw and clamped local
// variance plus the unit-offset ssd fields feeding the variance.
struct VarianceContext {
    ScalarVolume raw;
    ScalarVolume clamped;
    double floor = 0.0;
};

VarianceContext make_variance(const ScalarVolume& image, int radius) {
    VarianceContext ctx;
    ctx.floor = variance_floor(image);
    ctx.raw = ScalarVolume(image.shape);
    const ClampedReader reader(image.shape);
    const PatchCube cube(image.dims(), radius);
    const auto units = unit_offsets(image.dims());
    const double inv = 1.0 / static_cast<double>(units.size());
    const std::size_t n = image.size();
    int x[kMaxDims], x2[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(image.shape, i, x);
        double acc = 0.0;
        for (const auto& o : units) {
            for (int a = 0; a < image.dims(); ++a) x2[a] = x[a] + o[a];
            acc += ssd_at(image, reader, cube, x, x2);
        }
        ctx.raw.data[i] = acc * inv;
    }
    ctx.clamped = ctx.raw;
    for (double& v : ctx.clamped.data)
        if (v < ctx.floor) v = ctx.floor;
    return ctx;
}

// Propagates the variance gradient back into the image (clamp floor constant).
void variance_vjp(const ScalarVolume& image, int radius, const VarianceContext& ctx,
                  const ScalarVolume& grad_var, ScalarVolume& grad_image) {
    const ClampedReader reader(image.shape);
    const PatchCube cube(image.dims(), radius);
    const auto units = unit_offsets(image.dims());
    const double inv = 1.0 / static_cast<double>(units.size());
    const std::size_t n = image.size();
    int x[kMaxDims], x2[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        if (ctx.raw.data[i] < ctx.floor) continue;  // clamped: zero derivative
        const double g = grad_var.data[i] * inv;
        if (g == 0.0) continue;
        unravel(image.shape, i, x);
        for (const auto& o : units) {
            for (int a = 0; a < image.dims(); ++a) x2[a] = x[a] + o[a];
            ssd_at_vjp(image, reader, cube, x, x2, g, grad_image);
        }
    }
}

// exp(-ssd/Var) channels for one scheme, without any normalization.
DescriptorField exp_block(const ScalarVolume& image, const SearchScheme& scheme,
                          const ScalarVolume& var) {
    DescriptorField out(image.shape, scheme.channel_count());
    const ClampedReader reader(image.shape);
    const PatchCube cube(image.dims(), scheme.radius);
    const std::size_t n = image.size();
    int x[kMaxDims], x2[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(image.shape, i, x);
        for (int j = 0; j < scheme.channel_count(); ++j) {
            for (int a = 0; a < image.dims(); ++a) x2[a] = x[a] + scheme.offsets[j][a];
            const double ssd = ssd_at(image, reader, cube, x, x2);
            double e = std::exp(-ssd / var.data[i]);
            if (e < kValueFloor) e = kValueFloor;
            out.at(j, i) = e;
        }
    }
    return out;
}

// Backward of exp_block given gradient on the block values. Accumulates the
// image gradient from the ssd terms directly and the variance gradient into
// grad_var for a shared later pass.
void exp_block_vjp(const ScalarVolume& image, const SearchScheme& scheme, const ScalarVolume& var,
                   const DescriptorField& block, const DescriptorField& grad_block,
                   ScalarVolume& grad_image, ScalarVolume& grad_var) {
    const ClampedReader reader(image.shape);
    const PatchCube cube(image.dims(), scheme.radius);
    const std::size_t n = image.size();
    int x[kMaxDims], x2[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(image.shape, i, x);
        const double v = var.data[i];
        for (int j = 0; j < scheme.channel_count(); ++j) {
            const double g = grad_block.at(j, i);
            if (g == 0.0) continue;
            const double e = block.at(j, i);
            if (e <= kValueFloor) continue;  // flushed exponent, derivative ~0
            for (int a = 0; a < image.dims(); ++a) x2[a] = x[a] + scheme.offsets[j][a];
            const double ssd = ssd_at(image, reader, cube, x, x2);
            const double g_ssd = -g * e / v;
            ssd_at_vjp(image, reader, cube, x, x2, g_ssd, grad_image);
            grad_var.data[i] += g * e * ssd / (v * v);
        }
    }
}

}  // namespace

SearchScheme SearchScheme::make(int dims, int radius, int dilation) {
    require(dims >= 1 && dims <= kMaxDims, "SearchScheme: dims must be 1..3");
    require(radius >= 0, "SearchScheme: radius must be non-negative");
    require(dilation >= 1, "SearchScheme: dilation must be positive");
    SearchScheme s;
    s.radius = radius;
    s.dilation = dilation;
    for (int ring : {1, 2})
        for (int a = 0; a < dims; ++a)
            for (int sign : {+1, -1}) {
                std::array<int, kMaxDims> o{};
                o[a] = sign * ring * dilation;
                s.offsets.push_back(o);
            }
    return s;
}

double patch_ssd(const ScalarVolume& image, const int* x1, const int* x2, int radius) {
    require(radius >= 0, "patch_ssd: radius must be non-negative");
    const ClampedReader reader(image.shape);
    const PatchCube cube(image.dims(), radius);
    return ssd_at(image, reader, cube, x1, x2);
}

double variance_floor(const ScalarVolume& image) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    const double floor = 1e-6 * range * range;
    return std::max(floor, std::numeric_limits<double>::min());
}

ScalarVolume local_variance(const ScalarVolume& image, int radius) {
    return make_variance(image, radius).clamped;
}

DescriptorField mind(const ScalarVolume& image, const SearchScheme& scheme) {
    const VarianceContext var = make_variance(image, scheme.radius);
    DescriptorField out = exp_block(image, scheme, var.clamped);
    const std::size_t n = image.size();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = 0.0;
        for (int j = 0; j < out.channels; ++j) mx = std::max(mx, out.at(j, i));
        for (int j = 0; j < out.channels; ++j) out.at(j, i) /= mx;
    }
    return out;
}

void mind_vjp(const ScalarVolume& image, const SearchScheme& scheme,
              const DescriptorField& grad_descriptor, ScalarVolume& grad_image) {
    require(same_shape(image.shape, grad_descriptor.shape), "mind_vjp: shape mismatch");
    const VarianceContext var = make_variance(image, scheme.radius);
    const DescriptorField block = exp_block(image, scheme, var.clamped);

    // Max-normalization chain: D_j = M_j / M_max. The winning channel is
    // constant 1, so its incoming gradient does not propagate.
    DescriptorField grad_block(image.shape, block.channels);
    const std::size_t n = image.size();
    for (std::size_t i = 0; i < n; ++i) {
        int jmax = 0;
        double mx = block.at(0, i);
        for (int j = 1; j < block.channels; ++j)
            if (block.at(j, i) > mx) {
                mx = block.at(j, i);
                jmax = j;
            }
        if (mx < kDegenerateScale) continue;  // fully underflowed token
        double gmax = 0.0;
        for (int j = 0; j < block.channels; ++j) {
            if (j == jmax) continue;
            const double g = grad_descriptor.at(j, i);
            grad_block.at(j, i) = g / mx;
            gmax -= g * block.at(j, i) / (mx * mx);
        }
        grad_block.at(jmax, i) = gmax;
    }

    ScalarVolume grad_var(image.shape);
    exp_block_vjp(image, scheme, var.clamped, block, grad_block, grad_image, grad_var);
    variance_vjp(image, scheme.radius, var, grad_var, grad_image);
}

DescriptorField token_from_features(const ScalarVolume& features, const std::vector<int>& dilations,
                                    int radius) {
    require(!dilations.empty(), "token_from_features: need at least one dilation");
    const int d = features.dims();
    const VarianceContext var = make_variance(features, radius);

    std::vector<DescriptorField> blocks;
    for (int dil : dilations)
        blocks.push_back(exp_block(features, SearchScheme::make(d, radius, dil), var.clamped));

    const int per = blocks.front().channels;
    const int channels = per * static_cast<int>(blocks.size());
    DescriptorField out(features.shape, channels);
    const std::size_t n = features.size();
    for (std::size_t i = 0; i < n; ++i) {
        double norm_sq = 0.0;
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (int j = 0; j < per; ++j) {
                const double t = blocks[b].at(j, i);
                out.at(static_cast<int>(b) * per + j, i) = t;
                norm_sq += t * t;
            }
        if (norm_sq == 0.0) {
            const double u = 1.0 / std::sqrt(static_cast<double>(channels));
            for (int c = 0; c < channels; ++c) out.at(c, i) = u;
        } else {
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (int c = 0; c < channels; ++c) out.at(c, i) *= inv;
        }
    }
    return out;
}

void token_from_features_vjp(const ScalarVolume& features, const std::vector<int>& dilations,
                             const DescriptorField& grad_token, ScalarVolume& grad_features,
                             int radius) {
    const int d = features.dims();
    const VarianceContext var = make_variance(features, radius);

    std::vector<SearchScheme> schemes;
    std::vector<DescriptorField> blocks;
    for (int dil : dilations) {
        schemes.push_back(SearchScheme::make(d, radius, dil));
        blocks.push_back(exp_block(features, schemes.back(), var.clamped));
    }
    const int per = blocks.front().channels;
    const int channels = per * static_cast<int>(blocks.size());
    require(grad_token.channels == channels, "token_from_features_vjp: channel mismatch");

    // L2 normalization chain: u = t/|t|, gt = (g - u (u . g)) / |t|.
    std::vector<DescriptorField> grad_blocks;
    for (std::size_t b = 0; b < blocks.size(); ++b)
        grad_blocks.emplace_back(features.shape, per);

    const std::size_t n = features.size();
    for (std::size_t i = 0; i < n; ++i) {
        double norm_sq = 0.0;
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (int j = 0; j < per; ++j) norm_sq += blocks[b].at(j, i) * blocks[b].at(j, i);
        if (norm_sq < kDegenerateScale * kDegenerateScale) continue;  // degenerate token
        const double norm = std::sqrt(norm_sq);
        double dot = 0.0;
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (int j = 0; j < per; ++j) {
                const int c = static_cast<int>(b) * per + j;
                dot += (blocks[b].at(j, i) / norm) * grad_token.at(c, i);
            }
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (int j = 0; j < per; ++j) {
                const int c = static_cast<int>(b) * per + j;
                const double u = blocks[b].at(j, i) / norm;
                grad_blocks[b].at(j, i) = (grad_token.at(c, i) - u * dot) / norm;
            }
    }

    ScalarVolume grad_var(features.shape);
    for (std::size_t b = 0; b < blocks.size(); ++b)
        exp_block_vjp(features, schemes[b], var.clamped, blocks[b], grad_blocks[b], grad_features,
                      grad_var);
    variance_vjp(features, radius, var, grad_var, grad_features);
}

}  // namespace diffreg
