#include "diffreg/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <mutex>

#include "diffreg/grid.hpp"

namespace diffreg {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Plans are cached per (shape, sign); created with FFTW_UNALIGNED so they can
// execute on any caller buffer. fftw planning is not thread-safe, execution
// on distinct buffers is.
class PlanCache {
public:
    static PlanCache& instance() {
        static PlanCache cache;
        return cache;
    }

    void execute(const Shape& shape, int sign, std::complex<double>* in, std::complex<double>* out) {
        fftw_plan plan = nullptr;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            const Key key{shape, sign};
            auto it = plans_.find(key);
            if (it == plans_.end()) {
                std::vector<int> dims(shape.begin(), shape.end());
                std::vector<std::complex<double>> scratch(voxel_count(shape));
                plan = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(),
                                     reinterpret_cast<fftw_complex*>(scratch.data()),
                                     reinterpret_cast<fftw_complex*>(scratch.data()), sign,
                                     FFTW_ESTIMATE | FFTW_UNALIGNED);
                require(plan != nullptr, "fftw_plan_dft failed for shape " + shape_to_string(shape));
                plans_.emplace(key, plan);
            } else {
                plan = it->second;
            }
        }
        fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(in), reinterpret_cast<fftw_complex*>(out));
    }

private:
    using Key = std::pair<Shape, int>;
    std::map<Key, fftw_plan> plans_;
    std::mutex mutex_;
};

std::vector<std::complex<double>> forward_fft(const Shape& shape, const double* data) {
    const std::size_t n = voxel_count(shape);
    std::vector<std::complex<double>> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = data[i];
    PlanCache::instance().execute(shape, FFTW_FORWARD, buf.data(), buf.data());
    return buf;
}

void inverse_fft_real(const Shape& shape, std::vector<std::complex<double>>& buf, double* out) {
    const std::size_t n = voxel_count(shape);
    PlanCache::instance().execute(shape, FFTW_BACKWARD, buf.data(), buf.data());
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = buf[i].real() * scale;
}

void apply_multiplier_channel(const Shape& shape, const double* in, const std::vector<double>& mult,
                              double* out) {
    auto spectrum = forward_fft(shape, in);
    for (std::size_t i = 0; i < spectrum.size(); ++i) spectrum[i] *= mult[i];
    inverse_fft_real(shape, spectrum, out);
}

void check_mult(const Shape& field_shape, const SpectralMultiplier& mult) {
    require(same_shape(field_shape, mult.shape),
            "spectral: field shape " + shape_to_string(field_shape) + " does not match multiplier shape " +
                shape_to_string(mult.shape));
}

}  // namespace

std::vector<double> laplacian_symbol(const Shape& shape, const std::vector<double>& spacing) {
    const int d = static_cast<int>(shape.size());
    std::vector<double> sp(d, 1.0);
    for (int a = 0; a < d && a < static_cast<int>(spacing.size()); ++a) sp[a] = spacing[a];

    std::vector<double> out(voxel_count(shape));
    int k[kMaxDims];
    for (std::size_t i = 0; i < out.size(); ++i) {
        unravel(shape, i, k);
        double acc = 0.0;
        for (int a = 0; a < d; ++a)
            acc += (2.0 - 2.0 * std::cos(kTwoPi * k[a] / shape[a])) / (sp[a] * sp[a]);
        out[i] = acc;
    }
    return out;
}

SpectralMultiplier build_multiplier(const KernelSpec& spec) {
    spec.validate();
    SpectralMultiplier mult;
    mult.shape = spec.shape;
    mult.values = laplacian_symbol(spec.shape, spec.spacing);
    for (double& v : mult.values) {
        double base = spec.gamma + spec.alpha * v;
        double acc = base;
        for (int e = 1; e < spec.exponent; ++e) acc *= base;
        v = acc;
    }
    return mult;
}

ScalarVolume apply_spectral(const ScalarVolume& f, const SpectralMultiplier& mult) {
    check_mult(f.shape, mult);
    ScalarVolume out(f.shape);
    out.spacing = f.spacing;
    apply_multiplier_channel(f.shape, f.data.data(), mult.values, out.data.data());
    return out;
}

VectorField apply_spectral(const VectorField& v, const SpectralMultiplier& mult) {
    check_mult(v.shape, mult);
    VectorField out(v.shape, v.channels);
    for (int c = 0; c < v.channels; ++c)
        apply_multiplier_channel(v.shape, v.channel(c), mult.values, out.channel(c));
    return out;
}

VectorField smooth_inverse_ktk(const VectorField& v, const SpectralMultiplier& mult) {
    check_mult(v.shape, mult);
    SpectralMultiplier inv;
    inv.shape = mult.shape;
    inv.values.resize(mult.values.size());
    for (std::size_t i = 0; i < mult.values.size(); ++i)
        inv.values[i] = 1.0 / (mult.values[i] * mult.values[i]);
    return apply_spectral(v, inv);
}

VectorField apply_ktk(const VectorField& v, const SpectralMultiplier& mult) {
    check_mult(v.shape, mult);
    SpectralMultiplier sq;
    sq.shape = mult.shape;
    sq.values.resize(mult.values.size());
    for (std::size_t i = 0; i < mult.values.size(); ++i) sq.values[i] = mult.values[i] * mult.values[i];
    return apply_spectral(v, sq);
}

double v_norm_sq(const VectorField& v, const SpectralMultiplier& mult) {
    check_mult(v.shape, mult);
    const double n = static_cast<double>(v.voxels());
    double acc = 0.0;
    for (int c = 0; c < v.channels; ++c) {
        auto spectrum = forward_fft(v.shape, v.channel(c));
        for (std::size_t i = 0; i < spectrum.size(); ++i)
            acc += mult.values[i] * mult.values[i] * std::norm(spectrum[i]);
    }
    return acc / (n * n);
}

VectorField v_norm_sq_gradient(const VectorField& v, const SpectralMultiplier& mult) {
    VectorField grad = apply_ktk(v, mult);
    const double scale = 2.0 / static_cast<double>(v.voxels());
    for (double& g : grad.data) g *= scale;
    return grad;
}

void zero_boundary_frame(VectorField& v, int width) {
    const int d = v.dims();
    const std::size_t n = v.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(v.shape, i, x);
        bool on_frame = false;
        for (int a = 0; a < d; ++a)
            if (x[a] < width || x[a] >= v.shape[a] - width) on_frame = true;
        if (on_frame)
            for (int c = 0; c < v.channels; ++c) v.at(c, i) = 0.0;
    }
}

}  // namespace diffreg
