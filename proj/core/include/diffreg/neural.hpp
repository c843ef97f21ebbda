#pragma once

#include <deque>
#include <string>

#include "diffreg/rng.hpp"
#include "diffreg/spectral.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Multi-channel activation tensor, channel-major like VectorField.
struct Tensor {
    Shape shape;
    int channels = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, int c) : shape(std::move(s)), channels(c), data(voxel_count(shape) * c, 0.0) {}

    int dims() const { return static_cast<int>(shape.size()); }
    std::size_t voxels() const { return voxel_count(shape); }
    double& at(int c, std::size_t i) { return data[static_cast<std::size_t>(c) * voxels() + i]; }
    double at(int c, std::size_t i) const { return data[static_cast<std::size_t>(c) * voxels() + i]; }
    double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
    const double* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }
};

/// One named parameter array with its gradient and Adam moments.
struct ParamBlock {
    std::string name;
    std::vector<int> dims;  // e.g. {out, in, k, k} for a 2D conv kernel
    std::vector<double> values;
    std::vector<double> grad;
    std::vector<double> moment1;
    std::vector<double> moment2;

    std::size_t size() const { return values.size(); }
};

/// Flat parameter store for either network, with per-block optimizer state.
struct NetParams {
    std::deque<ParamBlock> blocks;  // deque: references from add() stay valid
    long step = 0;

    ParamBlock& add(const std::string& name, std::vector<int> dims);
    ParamBlock& find(const std::string& name);
    const ParamBlock& find(const std::string& name) const;
    void zero_grads();
    std::size_t total_parameters() const;
};

/// Bias-corrected adaptive-moment update applied in place from block.grad.
void adam_step(NetParams& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

/// Checkpoint: text manifest (block name + dims) followed by raw
/// little-endian float64 payload, bit-exact on round trip.
void save_params(const NetParams& params, const std::string& path);
NetParams load_params(const std::string& path);

// ---- layer primitives (exposed for direct testing) ----

/// Cross-correlation with kernel size k in {1,3} per axis, zero padding
/// (k-1)/2 and stride in {1,2}; stride 2 maps axis size N to ceil(N/2).
Tensor conv_forward(const Tensor& input, const ParamBlock& weights, const ParamBlock& bias,
                    int stride);

/// Exact adjoints of conv_forward. Null outputs are skipped; weight/bias
/// gradients accumulate into the blocks' grad arrays.
void conv_backward(const Tensor& input, const ParamBlock& weights, int stride,
                   const Tensor& grad_output, Tensor* grad_input, ParamBlock* weights_accum,
                   ParamBlock* bias_accum);

Tensor leaky_relu(const Tensor& input, double slope);
/// Backward from the layer *output* (valid because the slope is positive).
Tensor leaky_relu_backward(const Tensor& output, const Tensor& grad_output, double slope);

/// Multilinear resize to `target` (align-corners convention).
Tensor upsample_linear(const Tensor& input, const Shape& target);
Tensor upsample_linear_adjoint(const Tensor& grad_output, const Shape& source);

Tensor concat_channels(const Tensor& a, const Tensor& b);

/// The small velocity network: a normalized coordinate grid is pushed through
/// one stride-2 conv, two stride-1 convs and two pointwise layers at half
/// resolution, upsampled back, smoothed by (K*K)^{-1} and zeroed on a
/// 1-voxel boundary frame. Zero parameters yield an exactly zero field.
class VelocityNet {
public:
    struct Tape {
        Tensor input, h1, h2, h3, h4;
    };

    VelocityNet(const KernelSpec& kernel, int width = 32);

    VectorField forward(Tape* tape = nullptr) const;
    /// Accumulates d(loss)/d(params) into params().grad from d(loss)/d(v).
    void backward(const Tape& tape, const VectorField& grad_velocity);

    void init_random(Rng& rng);  // final layer zeroed so training starts at identity
    NetParams& params() { return params_; }
    const NetParams& params() const { return params_; }
    const Shape& grid_shape() const { return shape_; }
    const SpectralMultiplier& smoothing_multiplier() const { return mult_; }

private:
    Shape shape_, half_;
    int dims_;
    int width_;
    SpectralMultiplier mult_;
    NetParams params_;
};

/// UNet-style encoder-decoder with skip connections: two initial blocks,
/// three stride-2 encoder levels (16/32/64 channels), three decoder levels
/// with multilinear upsampling and concatenation, two final blocks down to a
/// single-channel feature map of the input shape. Inputs whose dimensions
/// are not divisible by 8 are edge-padded internally and cropped after.
class DescriptorNet {
public:
    struct Tape {
        Shape original;
        Tensor x, a, c0, e1, e2, e3, m3, d3, m2, d2, m1, d1, f1;
    };

    explicit DescriptorNet(int dims);

    ScalarVolume forward(const ScalarVolume& image, Tape* tape = nullptr) const;
    /// Backward from d(loss)/d(feature map). When `accumulate_params` is
    /// false only the input gradient is produced (frozen-network use).
    ScalarVolume backward(const Tape& tape, const ScalarVolume& grad_features,
                          bool accumulate_params);

    void init_random(Rng& rng);
    NetParams& params() { return params_; }
    const NetParams& params() const { return params_; }
    int dims() const { return dims_; }

private:
    int dims_;
    NetParams params_;
};

constexpr double kLeakySlope = 0.2;

}  // namespace diffreg
