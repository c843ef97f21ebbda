#include "diffreg/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "diffreg/grid.hpp"

namespace diffreg {

ParamBlock& NetParams::add(const std::string& name, std::vector<int> dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    ParamBlock block;
    block.name = name;
    block.dims = std::move(dims);
    block.values.assign(n, 0.0);
    block.grad.assign(n, 0.0);
    block.moment1.assign(n, 0.0);
    block.moment2.assign(n, 0.0);
    blocks.push_back(std::move(block));
    return blocks.back();
}

ParamBlock& NetParams::find(const std::string& name) {
    for (auto& b : blocks)
        if (b.name == name) return b;
    throw Error("NetParams: no block named '" + name + "'");
}

const ParamBlock& NetParams::find(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return b;
    throw Error("NetParams: no block named '" + name + "'");
}

void NetParams::zero_grads() {
    for (auto& b : blocks) std::fill(b.grad.begin(), b.grad.end(), 0.0);
}

std::size_t NetParams::total_parameters() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
}

void adam_step(NetParams& params, double lr, double beta1, double beta2, double eps) {
    params.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(params.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(params.step));
    for (auto& block : params.blocks) {
        require(block.grad.size() == block.values.size(), "adam_step: gradient shape mismatch");
        for (std::size_t i = 0; i < block.values.size(); ++i) {
            const double g = block.grad[i];
            block.moment1[i] = beta1 * block.moment1[i] + (1.0 - beta1) * g;
            block.moment2[i] = beta2 * block.moment2[i] + (1.0 - beta2) * g * g;
            const double mhat = block.moment1[i] / bc1;
            const double vhat = block.moment2[i] / bc2;
            block.values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

namespace {

void write_doubles_le(std::ostream& out, const double* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 8));
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            auto bits = std::bit_cast<std::uint64_t>(data[i]);
            char buf[8];
            for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
            out.write(buf, 8);
        }
    }
}

void read_doubles_le(std::istream& in, double* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 8));
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            char buf[8];
            in.read(buf, 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
            data[i] = std::bit_cast<double>(bits);
        }
    }
}

}  // namespace

void save_params(const NetParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "save_params: cannot open '" + path + "'");
    out << "DIFFREG-NET-1\n";
    out << "blocks " << params.blocks.size() << "\n";
    for (const auto& b : params.blocks) {
        out << "block " << b.name;
        for (int d : b.dims) out << " " << d;
        out << "\n";
    }
    out << "DATA\n";
    for (const auto& b : params.blocks) write_doubles_le(out, b.values.data(), b.size());
    require(out.good(), "save_params: write failed for '" + path + "'");
}

NetParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw FormatError("load_params: cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line != "DIFFREG-NET-1") throw FormatError("load_params: bad magic in '" + path + "'");
    std::getline(in, line);
    std::istringstream head(line);
    std::string word;
    std::size_t count = 0;
    head >> word >> count;
    if (word != "blocks") throw FormatError("load_params: malformed manifest in '" + path + "'");

    NetParams params;
    for (std::size_t i = 0; i < count; ++i) {
        std::getline(in, line);
        std::istringstream ls(line);
        std::string tag, name;
        ls >> tag >> name;
        if (tag != "block") throw FormatError("load_params: malformed block line in '" + path + "'");
        std::vector<int> dims;
        int d;
        while (ls >> d) dims.push_back(d);
        params.add(name, dims);
    }
    std::getline(in, line);
    if (line != "DATA") throw FormatError("load_params: missing DATA section in '" + path + "'");
    for (auto& b : params.blocks) {
        read_doubles_le(in, b.values.data(), b.size());
        if (!in.good()) throw FormatError("load_params: truncated payload in '" + path + "'");
    }
    return params;
}

// ---------------------------------------------------------------------------
// conv

namespace {

struct ConvGeometry {
    int d = 0;
    int kernel = 1;
    int pad = 0;
    int taps = 1;  // kernel^d
    Shape in_shape, out_shape;
    std::vector<std::size_t> in_strides, out_strides;
};

ConvGeometry conv_geometry(const Tensor& input, const ParamBlock& w, int stride) {
    ConvGeometry g;
    g.d = input.dims();
    require(static_cast<int>(w.dims.size()) == g.d + 2,
            "conv: weight block '" + w.name + "' rank does not match input dims");
    g.kernel = w.dims[2];
    for (int a = 0; a < g.d; ++a)
        require(w.dims[2 + a] == g.kernel, "conv: anisotropic kernels unsupported");
    require(g.kernel == 1 || g.kernel == 3, "conv: kernel size must be 1 or 3");
    require(stride == 1 || stride == 2, "conv: stride must be 1 or 2");
    require(w.dims[1] == input.channels,
            "conv: weight block '" + w.name + "' expects " + std::to_string(w.dims[1]) +
                " input channels, got " + std::to_string(input.channels));
    g.pad = (g.kernel - 1) / 2;
    g.taps = 1;
    for (int a = 0; a < g.d; ++a) g.taps *= g.kernel;
    g.in_shape = input.shape;
    g.out_shape = input.shape;
    for (int a = 0; a < g.d; ++a) g.out_shape[a] = (input.shape[a] + stride - 1) / stride;
    g.in_strides = row_major_strides(g.in_shape);
    g.out_strides = row_major_strides(g.out_shape);
    return g;
}

// weights transposed to [tap][in][out] for contiguous inner loops
std::vector<double> transpose_weights(const ParamBlock& w, const ConvGeometry& g) {
    const int cout = w.dims[0], cin = w.dims[1];
    std::vector<double> wt(static_cast<std::size_t>(g.taps) * cin * cout);
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int q = 0; q < g.taps; ++q)
                wt[(static_cast<std::size_t>(q) * cin + ci) * cout + co] =
                    w.values[(static_cast<std::size_t>(co) * cin + ci) * g.taps + q];
    return wt;
}

void tap_offset(const ConvGeometry& g, int q, int* off) {
    for (int a = g.d - 1; a >= 0; --a) {
        off[a] = q % g.kernel - g.pad;
        q /= g.kernel;
    }
}

}  // namespace

Tensor conv_forward(const Tensor& input, const ParamBlock& weights, const ParamBlock& bias,
                    int stride) {
    const ConvGeometry g = conv_geometry(input, weights, stride);
    const int cout = weights.dims[0], cin = weights.dims[1];
    require(static_cast<int>(bias.size()) == cout, "conv: bias size mismatch");
    const auto wt = transpose_weights(weights, g);

    Tensor out(g.out_shape, cout);
    const std::size_t nout = out.voxels();
    const std::size_t nin = input.voxels();
    std::vector<double> acc(cout);
    std::vector<int> taps_off(static_cast<std::size_t>(g.taps) * g.d);
    for (int q = 0; q < g.taps; ++q) tap_offset(g, q, taps_off.data() + q * g.d);

    int o[kMaxDims];
    for (std::size_t pos = 0; pos < nout; ++pos) {
        unravel(g.out_shape, pos, o);
        for (int co = 0; co < cout; ++co) acc[co] = bias.values[co];
        for (int q = 0; q < g.taps; ++q) {
            const int* off = taps_off.data() + q * g.d;
            std::size_t in_idx = 0;
            bool valid = true;
            for (int a = 0; a < g.d; ++a) {
                const int xa = o[a] * stride + off[a];
                if (xa < 0 || xa >= g.in_shape[a]) {
                    valid = false;
                    break;
                }
                in_idx += static_cast<std::size_t>(xa) * g.in_strides[a];
            }
            if (!valid) continue;
            const double* wq = wt.data() + static_cast<std::size_t>(q) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
                const double x = input.data[static_cast<std::size_t>(ci) * nin + in_idx];
                const double* wrow = wq + static_cast<std::size_t>(ci) * cout;
                for (int co = 0; co < cout; ++co) acc[co] += wrow[co] * x;
            }
        }
        for (int co = 0; co < cout; ++co) out.data[static_cast<std::size_t>(co) * nout + pos] = acc[co];
    }
    return out;
}

void conv_backward(const Tensor& input, const ParamBlock& weights, int stride,
                   const Tensor& grad_output, Tensor* grad_input, ParamBlock* weights_accum,
                   ParamBlock* bias_accum) {
    const ConvGeometry g = conv_geometry(input, weights, stride);
    const int cout = weights.dims[0], cin = weights.dims[1];
    require(grad_output.channels == cout, "conv_backward: grad channel mismatch");
    require(same_shape(grad_output.shape, g.out_shape), "conv_backward: grad shape mismatch");
    const auto wt = transpose_weights(weights, g);

    if (grad_input) *grad_input = Tensor(g.in_shape, cin);
    std::vector<double> gwt;
    if (weights_accum) gwt.assign(wt.size(), 0.0);

    const std::size_t nout = grad_output.voxels();
    const std::size_t nin = input.voxels();
    std::vector<double> gacc(cout);
    std::vector<int> taps_off(static_cast<std::size_t>(g.taps) * g.d);
    for (int q = 0; q < g.taps; ++q) tap_offset(g, q, taps_off.data() + q * g.d);

    int o[kMaxDims];
    for (std::size_t pos = 0; pos < nout; ++pos) {
        unravel(g.out_shape, pos, o);
        for (int co = 0; co < cout; ++co)
            gacc[co] = grad_output.data[static_cast<std::size_t>(co) * nout + pos];
        if (bias_accum)
            for (int co = 0; co < cout; ++co) bias_accum->grad[co] += gacc[co];
        for (int q = 0; q < g.taps; ++q) {
            const int* off = taps_off.data() + q * g.d;
            std::size_t in_idx = 0;
            bool valid = true;
            for (int a = 0; a < g.d; ++a) {
                const int xa = o[a] * stride + off[a];
                if (xa < 0 || xa >= g.in_shape[a]) {
                    valid = false;
                    break;
                }
                in_idx += static_cast<std::size_t>(xa) * g.in_strides[a];
            }
            if (!valid) continue;
            const double* wq = wt.data() + static_cast<std::size_t>(q) * cin * cout;
            double* gwq = weights_accum ? gwt.data() + static_cast<std::size_t>(q) * cin * cout : nullptr;
            for (int ci = 0; ci < cin; ++ci) {
                if (grad_input) {
                    const double* wrow = wq + static_cast<std::size_t>(ci) * cout;
                    double s = 0.0;
                    for (int co = 0; co < cout; ++co) s += wrow[co] * gacc[co];
                    grad_input->data[static_cast<std::size_t>(ci) * nin + in_idx] += s;
                }
                if (weights_accum) {
                    const double x = input.data[static_cast<std::size_t>(ci) * nin + in_idx];
                    double* grow = gwq + static_cast<std::size_t>(ci) * cout;
                    for (int co = 0; co < cout; ++co) grow[co] += x * gacc[co];
                }
            }
        }
    }

    if (weights_accum) {
        require(weights_accum->size() == weights.size(), "conv_backward: weight accum mismatch");
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int q = 0; q < g.taps; ++q)
                    weights_accum->grad[(static_cast<std::size_t>(co) * cin + ci) * g.taps + q] +=
                        gwt[(static_cast<std::size_t>(q) * cin + ci) * cout + co];
    }
}

Tensor leaky_relu(const Tensor& input, double slope) {
    Tensor out = input;
    for (double& x : out.data)
        if (x < 0.0) x *= slope;
    return out;
}

Tensor leaky_relu_backward(const Tensor& output, const Tensor& grad_output, double slope) {
    Tensor out = grad_output;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (output.data[i] < 0.0) out.data[i] *= slope;
    return out;
}

Tensor upsample_linear(const Tensor& input, const Shape& target) {
    const int d = input.dims();
    require(static_cast<int>(target.size()) == d, "upsample: rank mismatch");
    Tensor out(target, input.channels);
    const std::size_t nout = out.voxels();
    const std::size_t nin = input.voxels();
    int o[kMaxDims];
    double c[kMaxDims];
    for (std::size_t pos = 0; pos < nout; ++pos) {
        unravel(target, pos, o);
        for (int a = 0; a < d; ++a)
            c[a] = target[a] > 1
                       ? static_cast<double>(o[a]) * (input.shape[a] - 1) / (target[a] - 1)
                       : 0.0;
        const InterpStencil st = interp_stencil(input.shape, c);
        for (int ch = 0; ch < input.channels; ++ch) {
            const double* src = input.data.data() + static_cast<std::size_t>(ch) * nin;
            double v = 0.0;
            for (int k = 0; k < st.corner_count; ++k) v += st.weights[k] * src[st.corners[k]];
            out.data[static_cast<std::size_t>(ch) * nout + pos] = v;
        }
    }
    return out;
}

Tensor upsample_linear_adjoint(const Tensor& grad_output, const Shape& source) {
    const int d = grad_output.dims();
    require(static_cast<int>(source.size()) == d, "upsample_adjoint: rank mismatch");
    Tensor out(source, grad_output.channels);
    const std::size_t nout = grad_output.voxels();
    const std::size_t nin = out.voxels();
    int o[kMaxDims];
    double c[kMaxDims];
    for (std::size_t pos = 0; pos < nout; ++pos) {
        unravel(grad_output.shape, pos, o);
        for (int a = 0; a < d; ++a)
            c[a] = grad_output.shape[a] > 1
                       ? static_cast<double>(o[a]) * (source[a] - 1) / (grad_output.shape[a] - 1)
                       : 0.0;
        const InterpStencil st = interp_stencil(source, c);
        for (int ch = 0; ch < grad_output.channels; ++ch) {
            const double g = grad_output.data[static_cast<std::size_t>(ch) * nout + pos];
            double* dst = out.data.data() + static_cast<std::size_t>(ch) * nin;
            for (int k = 0; k < st.corner_count; ++k) dst[st.corners[k]] += st.weights[k] * g;
        }
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(same_shape(a.shape, b.shape), "concat: shape mismatch");
    Tensor out(a.shape, a.channels + b.channels);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
}

namespace {

Tensor slice_channels(const Tensor& t, int first, int count) {
    Tensor out(t.shape, count);
    const std::size_t n = t.voxels();
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(first * n),
              t.data.begin() + static_cast<std::ptrdiff_t>((first + count) * n), out.data.begin());
    return out;
}

void init_block_uniform(ParamBlock& block, double bound, Rng& rng) {
    for (double& v : block.values) v = rng.uniform(-bound, bound);
}

int conv_fan_in(const ParamBlock& w) {
    int fan = w.dims[1];
    for (std::size_t a = 2; a < w.dims.size(); ++a) fan *= w.dims[a];
    return fan;
}

}  // namespace

// ---------------------------------------------------------------------------
// VelocityNet

VelocityNet::VelocityNet(const KernelSpec& kernel, int width)
    : shape_(kernel.shape), dims_(static_cast<int>(kernel.shape.size())), width_(width) {
    kernel.validate();
    mult_ = build_multiplier(kernel);
    half_ = shape_;
    for (int a = 0; a < dims_; ++a) half_[a] = (shape_[a] + 1) / 2;

    std::vector<int> k3(static_cast<std::size_t>(dims_), 3);
    std::vector<int> k1(static_cast<std::size_t>(dims_), 1);
    auto conv_dims = [&](int out, int in, const std::vector<int>& k) {
        std::vector<int> dims = {out, in};
        dims.insert(dims.end(), k.begin(), k.end());
        return dims;
    };
    params_.add("down.w", conv_dims(width_, dims_, k3));
    params_.add("down.b", {width_});
    params_.add("conv1.w", conv_dims(width_, width_, k3));
    params_.add("conv1.b", {width_});
    params_.add("conv2.w", conv_dims(width_, width_, k3));
    params_.add("conv2.b", {width_});
    params_.add("lin1.w", conv_dims(width_, width_, k1));
    params_.add("lin1.b", {width_});
    params_.add("lin2.w", conv_dims(dims_, width_, k1));
    params_.add("lin2.b", {dims_});
}

void VelocityNet::init_random(Rng& rng) {
    for (auto& block : params_.blocks) {
        if (block.name == "lin2.w" || block.name == "lin2.b") {
            std::fill(block.values.begin(), block.values.end(), 0.0);
            continue;
        }
        if (block.dims.size() == 1) {
            std::fill(block.values.begin(), block.values.end(), 0.0);
            continue;
        }
        init_block_uniform(block, 1.0 / std::sqrt(static_cast<double>(conv_fan_in(block))), rng);
    }
}

VectorField VelocityNet::forward(Tape* tape) const {
    // normalized coordinate grid in [-1, 1]
    Tensor grid(shape_, dims_);
    const std::size_t n = grid.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(shape_, i, x);
        for (int a = 0; a < dims_; ++a)
            grid.at(a, i) = shape_[a] > 1 ? 2.0 * x[a] / (shape_[a] - 1.0) - 1.0 : 0.0;
    }

    Tensor h1 = leaky_relu(conv_forward(grid, params_.find("down.w"), params_.find("down.b"), 2),
                           kLeakySlope);
    Tensor h2 = leaky_relu(conv_forward(h1, params_.find("conv1.w"), params_.find("conv1.b"), 1),
                           kLeakySlope);
    Tensor h3 = leaky_relu(conv_forward(h2, params_.find("conv2.w"), params_.find("conv2.b"), 1),
                           kLeakySlope);
    Tensor h4 = leaky_relu(conv_forward(h3, params_.find("lin1.w"), params_.find("lin1.b"), 1),
                           kLeakySlope);
    Tensor h5 = conv_forward(h4, params_.find("lin2.w"), params_.find("lin2.b"), 1);
    Tensor up = upsample_linear(h5, shape_);

    VectorField v(shape_, dims_);
    v.data = up.data;
    v = smooth_inverse_ktk(v, mult_);
    zero_boundary_frame(v, 1);

    if (tape) {
        tape->input = std::move(grid);
        tape->h1 = std::move(h1);
        tape->h2 = std::move(h2);
        tape->h3 = std::move(h3);
        tape->h4 = std::move(h4);
    }
    return v;
}

void VelocityNet::backward(const Tape& tape, const VectorField& grad_velocity) {
    require(same_shape(grad_velocity.shape, shape_), "VelocityNet::backward: shape mismatch");
    // adjoint of the boundary mask, then of the self-adjoint smoothing
    VectorField g = grad_velocity;
    zero_boundary_frame(g, 1);
    g = smooth_inverse_ktk(g, mult_);

    Tensor gt(shape_, dims_);
    gt.data = g.data;
    Tensor g5 = upsample_linear_adjoint(gt, half_);

    Tensor g4;
    conv_backward(tape.h4, params_.find("lin2.w"), 1, g5, &g4, &params_.find("lin2.w"),
                  &params_.find("lin2.b"));
    g4 = leaky_relu_backward(tape.h4, g4, kLeakySlope);

    Tensor g3;
    conv_backward(tape.h3, params_.find("lin1.w"), 1, g4, &g3, &params_.find("lin1.w"),
                  &params_.find("lin1.b"));
    g3 = leaky_relu_backward(tape.h3, g3, kLeakySlope);

    Tensor g2;
    conv_backward(tape.h2, params_.find("conv2.w"), 1, g3, &g2, &params_.find("conv2.w"),
                  &params_.find("conv2.b"));
    g2 = leaky_relu_backward(tape.h2, g2, kLeakySlope);

    Tensor g1;
    conv_backward(tape.h1, params_.find("conv1.w"), 1, g2, &g1, &params_.find("conv1.w"),
                  &params_.find("conv1.b"));
    g1 = leaky_relu_backward(tape.h1, g1, kLeakySlope);

    conv_backward(tape.input, params_.find("down.w"), 2, g1, nullptr, &params_.find("down.w"),
                  &params_.find("down.b"));
}

// ---------------------------------------------------------------------------
// DescriptorNet

namespace {

Shape padded_shape(const Shape& shape, int multiple) {
    Shape out = shape;
    for (auto& n : out) n = (n + multiple - 1) / multiple * multiple;
    return out;
}

Tensor pad_replicate(const ScalarVolume& image, const Shape& target) {
    Tensor out(target, 1);
    const auto strides = row_major_strides(image.shape);
    const std::size_t n = out.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(target, i, x);
        std::size_t src = 0;
        for (int a = 0; a < static_cast<int>(target.size()); ++a)
            src += static_cast<std::size_t>(std::min(x[a], image.shape[a] - 1)) * strides[a];
        out.data[i] = image.data[src];
    }
    return out;
}

ScalarVolume crop_to(const Tensor& t, const Shape& shape) {
    ScalarVolume out(shape);
    const auto strides = row_major_strides(t.shape);
    const std::size_t n = out.size();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(shape, i, x);
        std::size_t src = 0;
        for (int a = 0; a < static_cast<int>(shape.size()); ++a)
            src += static_cast<std::size_t>(x[a]) * strides[a];
        out.data[i] = t.data[src];
    }
    return out;
}

Tensor crop_adjoint(const ScalarVolume& grad, const Shape& padded) {
    Tensor out(padded, 1);
    const auto strides = row_major_strides(padded);
    const std::size_t n = grad.size();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(grad.shape, i, x);
        std::size_t dst = 0;
        for (int a = 0; a < static_cast<int>(padded.size()); ++a)
            dst += static_cast<std::size_t>(x[a]) * strides[a];
        out.data[dst] = grad.data[i];
    }
    return out;
}

ScalarVolume pad_adjoint(const Tensor& grad, const Shape& original) {
    ScalarVolume out(original);
    const auto strides = row_major_strides(original);
    const std::size_t n = grad.voxels();
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(grad.shape, i, x);
        std::size_t dst = 0;
        for (int a = 0; a < static_cast<int>(original.size()); ++a)
            dst += static_cast<std::size_t>(std::min(x[a], original[a] - 1)) * strides[a];
        out.data[dst] += grad.data[i];
    }
    return out;
}

void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

DescriptorNet::DescriptorNet(int dims) : dims_(dims) {
    require(dims >= 1 && dims <= kMaxDims, "DescriptorNet: dims must be 1..3");
    std::vector<int> k3(static_cast<std::size_t>(dims_), 3);
    auto conv_dims = [&](int out, int in) {
        std::vector<int> d = {out, in};
        d.insert(d.end(), k3.begin(), k3.end());
        return d;
    };
    const auto add_conv = [&](const std::string& name, int out, int in) {
        params_.add(name + ".w", conv_dims(out, in));
        params_.add(name + ".b", {out});
    };
    add_conv("c0a", 16, 1);
    add_conv("c0b", 16, 16);
    add_conv("e1", 16, 16);
    add_conv("e2", 32, 16);
    add_conv("e3", 64, 32);
    add_conv("d3", 32, 96);
    add_conv("d2", 16, 48);
    add_conv("d1", 16, 32);
    add_conv("f1", 16, 16);
    add_conv("f2", 1, 16);
}

void DescriptorNet::init_random(Rng& rng) {
    for (auto& block : params_.blocks) {
        if (block.dims.size() == 1) {
            std::fill(block.values.begin(), block.values.end(), 0.0);
            continue;
        }
        init_block_uniform(block, 1.0 / std::sqrt(static_cast<double>(conv_fan_in(block))), rng);
    }
}

ScalarVolume DescriptorNet::forward(const ScalarVolume& image, Tape* tape) const {
    require(image.dims() == dims_, "DescriptorNet: input rank mismatch");
    const Shape padded = padded_shape(image.shape, 8);
    Tensor x = pad_replicate(image, padded);

    auto conv = [&](const Tensor& in, const char* name, int stride) {
        return leaky_relu(
            conv_forward(in, params_.find(std::string(name) + ".w"), params_.find(std::string(name) + ".b"), stride),
            kLeakySlope);
    };

    Tensor a = conv(x, "c0a", 1);
    Tensor c0 = conv(a, "c0b", 1);
    Tensor e1 = conv(c0, "e1", 2);
    Tensor e2 = conv(e1, "e2", 2);
    Tensor e3 = conv(e2, "e3", 2);
    Tensor m3 = concat_channels(upsample_linear(e3, e2.shape), e2);
    Tensor d3 = conv(m3, "d3", 1);
    Tensor m2 = concat_channels(upsample_linear(d3, e1.shape), e1);
    Tensor d2 = conv(m2, "d2", 1);
    Tensor m1 = concat_channels(upsample_linear(d2, c0.shape), c0);
    Tensor d1 = conv(m1, "d1", 1);
    Tensor f1 = conv(d1, "f1", 1);
    Tensor y = conv_forward(f1, params_.find("f2.w"), params_.find("f2.b"), 1);

    ScalarVolume out = crop_to(y, image.shape);
    out.spacing = image.spacing;
    if (tape) {
        tape->original = image.shape;
        tape->x = std::move(x);
        tape->a = std::move(a);
        tape->c0 = std::move(c0);
        tape->e1 = std::move(e1);
        tape->e2 = std::move(e2);
        tape->e3 = std::move(e3);
        tape->m3 = std::move(m3);
        tape->d3 = std::move(d3);
        tape->m2 = std::move(m2);
        tape->d2 = std::move(d2);
        tape->m1 = std::move(m1);
        tape->d1 = std::move(d1);
        tape->f1 = std::move(f1);
    }
    return out;
}

ScalarVolume DescriptorNet::backward(const Tape& tape, const ScalarVolume& grad_features,
                                     bool accumulate_params) {
    require(same_shape(grad_features.shape, tape.original), "DescriptorNet::backward: shape mismatch");
    Tensor gy = crop_adjoint(grad_features, tape.x.shape);

    auto wblk = [&](const char* name) -> ParamBlock* {
        return accumulate_params ? &params_.find(std::string(name) + ".w") : nullptr;
    };
    auto bblk = [&](const char* name) -> ParamBlock* {
        return accumulate_params ? &params_.find(std::string(name) + ".b") : nullptr;
    };
    auto back = [&](const Tensor& in, const char* name, int stride, const Tensor& gout) {
        Tensor gin;
        conv_backward(in, params_.find(std::string(name) + ".w"), stride, gout, &gin, wblk(name),
                      bblk(name));
        return gin;
    };

    Tensor gf1 = back(tape.f1, "f2", 1, gy);
    gf1 = leaky_relu_backward(tape.f1, gf1, kLeakySlope);
    Tensor gd1 = back(tape.d1, "f1", 1, gf1);
    gd1 = leaky_relu_backward(tape.d1, gd1, kLeakySlope);
    Tensor gm1 = back(tape.m1, "d1", 1, gd1);

    Tensor gu1 = slice_channels(gm1, 0, 16);
    Tensor gc0 = slice_channels(gm1, 16, 16);
    Tensor gd2 = upsample_linear_adjoint(gu1, tape.d2.shape);
    gd2 = leaky_relu_backward(tape.d2, gd2, kLeakySlope);
    Tensor gm2 = back(tape.m2, "d2", 1, gd2);

    Tensor gu2 = slice_channels(gm2, 0, 32);
    Tensor ge1 = slice_channels(gm2, 32, 16);
    Tensor gd3 = upsample_linear_adjoint(gu2, tape.d3.shape);
    gd3 = leaky_relu_backward(tape.d3, gd3, kLeakySlope);
    Tensor gm3 = back(tape.m3, "d3", 1, gd3);

    Tensor gu3 = slice_channels(gm3, 0, 64);
    Tensor ge2 = slice_channels(gm3, 64, 32);
    Tensor ge3 = upsample_linear_adjoint(gu3, tape.e3.shape);
    ge3 = leaky_relu_backward(tape.e3, ge3, kLeakySlope);
    add_into(ge2, back(tape.e2, "e3", 2, ge3));
    ge2 = leaky_relu_backward(tape.e2, ge2, kLeakySlope);
    add_into(ge1, back(tape.e1, "e2", 2, ge2));
    ge1 = leaky_relu_backward(tape.e1, ge1, kLeakySlope);
    add_into(gc0, back(tape.c0, "e1", 2, ge1));
    gc0 = leaky_relu_backward(tape.c0, gc0, kLeakySlope);
    Tensor ga = back(tape.a, "c0b", 1, gc0);
    ga = leaky_relu_backward(tape.a, ga, kLeakySlope);
    Tensor gx = back(tape.x, "c0a", 1, ga);

    return pad_adjoint(gx, tape.original);
}

}  // namespace diffreg
