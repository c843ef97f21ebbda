#include <cmath>
#include <cstdio>

#include <unistd.h>

#include "diffreg/grid.hpp"
#include "diffreg/neural.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace diffreg;
using namespace diffreg::testing;

namespace {

Tensor random_tensor(const Shape& shape, int channels, Rng& rng) {
    Tensor t(shape, channels);
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

KernelSpec desk_kernel(Shape shape) {
    KernelSpec spec;
    spec.shape = std::move(shape);
    return spec;
}

double half_sq_norm(const VectorField& v) {
    double acc = 0.0;
    for (double x : v.data) acc += x * x;
    return 0.5 * acc;
}

double half_sq_norm(const ScalarVolume& v) {
    double acc = 0.0;
    for (double x : v.data) acc += x * x;
    return 0.5 * acc;
}

}  // namespace

TEST_CASE("conv with a centered identity kernel reproduces the input") {
    Rng rng(5);
    const Tensor in = random_tensor({6, 7}, 1, rng);
    NetParams p;
    ParamBlock& w = p.add("w", {1, 1, 3, 3});
    w.values[4] = 1.0;  // kernel center
    ParamBlock& b = p.add("b", {1});
    const Tensor out = conv_forward(in, w, b, 1);
    CHECK(out.data == in.data);
}

TEST_CASE("stride-2 conv halves each axis with ceiling") {
    Rng rng(6);
    const Tensor in = random_tensor({8, 9}, 2, rng);
    NetParams p;
    ParamBlock& w = p.add("w", {3, 2, 3, 3});
    for (double& v : w.values) v = rng.uniform(-1.0, 1.0);
    ParamBlock& b = p.add("b", {3});
    const Tensor out = conv_forward(in, w, b, 2);
    CHECK(out.shape == Shape{4, 5});
    CHECK(out.channels == 3);
}

TEST_CASE("conv backward is the exact adjoint of conv forward") {
    Rng rng(7);
    for (int stride : {1, 2}) {
        const Tensor x = random_tensor({7, 6}, 3, rng);
        NetParams p;
        ParamBlock& w = p.add("w", {2, 3, 3, 3});
        for (double& v : w.values) v = rng.uniform(-1.0, 1.0);
        ParamBlock& b = p.add("b", {2});  // zero bias keeps the map linear
        const Tensor y = conv_forward(x, w, b, stride);
        const Tensor u = random_tensor(y.shape, y.channels, rng);
        Tensor xt;
        conv_backward(x, w, stride, u, &xt, nullptr, nullptr);
        CHECK(rel_err(dot(y.data, u.data), dot(x.data, xt.data)) < 1e-12);
    }
}

TEST_CASE("conv gradients match finite differences on weights and input") {
    Rng rng(8);
    Tensor x = random_tensor({6, 5}, 2, rng);
    NetParams p;
    ParamBlock& w = p.add("w", {2, 2, 3, 3});
    for (double& v : w.values) v = rng.uniform(-1.0, 1.0);
    ParamBlock& b = p.add("b", {2});
    for (double& v : b.values) v = rng.uniform(-1.0, 1.0);

    auto loss = [&]() {
        const Tensor y = conv_forward(x, w, b, 1);
        double acc = 0.0;
        for (double v : y.data) acc += v * v;
        return 0.5 * acc;
    };
    const Tensor y0 = conv_forward(x, w, b, 1);
    Tensor gin;
    conv_backward(x, w, 1, y0, &gin, &w, &b);

    const double h = 1e-6;
    for (int probe = 0; probe < 10; ++probe) {
        const std::size_t wi = static_cast<std::size_t>(rng.below(w.values.size()));
        const double keep = w.values[wi];
        w.values[wi] = keep + h;
        const double up = loss();
        w.values[wi] = keep - h;
        const double dn = loss();
        w.values[wi] = keep;
        CHECK(rel_err(w.grad[wi], (up - dn) / (2 * h), 1e-9) < 1e-5);

        const std::size_t xi = static_cast<std::size_t>(rng.below(x.data.size()));
        const double keepx = x.data[xi];
        x.data[xi] = keepx + h;
        const double upx = loss();
        x.data[xi] = keepx - h;
        const double dnx = loss();
        x.data[xi] = keepx;
        CHECK(rel_err(gin.data[xi], (upx - dnx) / (2 * h), 1e-9) < 1e-5);
    }
}

TEST_CASE("upsample adjoint satisfies the inner-product identity") {
    Rng rng(9);
    const Tensor x = random_tensor({5, 4}, 2, rng);
    const Shape target{9, 7};
    const Tensor y = upsample_linear(x, target);
    const Tensor u = random_tensor(target, 2, rng);
    const Tensor xt = upsample_linear_adjoint(u, x.shape);
    CHECK(rel_err(dot(y.data, u.data), dot(x.data, xt.data)) < 1e-12);
}

TEST_CASE("adam leaves parameters unchanged on zero gradients") {
    NetParams p;
    ParamBlock& w = p.add("w", {4});
    w.values = {1.0, -2.0, 0.5, 3.0};
    const auto keep = w.values;
    adam_step(p, 1e-2);
    CHECK(p.find("w").values == keep);
}

TEST_CASE("the first adam step moves by -lr * sign(gradient)") {
    NetParams p;
    ParamBlock& w = p.add("w", {3});
    w.values = {0.0, 1.0, -1.0};
    w.grad = {0.3, -2.0, 1e-3};
    const double lr = 5e-3;
    adam_step(p, lr);
    // bias-corrected first step: m_hat = g, v_hat = g^2, update = -lr*sign(g)
    CHECK(p.find("w").values[0] == doctest::Approx(0.0 - lr).epsilon(1e-6));
    CHECK(p.find("w").values[1] == doctest::Approx(1.0 + lr).epsilon(1e-6));
    CHECK(p.find("w").values[2] == doctest::Approx(-1.0 - lr).epsilon(1e-4));
}

TEST_CASE("two optimizers fed identical gradient streams stay bit-identical") {
    Rng rng(10);
    NetParams a, b;
    a.add("w", {8});
    b.add("w", {8});
    for (int it = 0; it < 25; ++it) {
        for (std::size_t i = 0; i < 8; ++i) {
            const double g = rng.uniform(-1.0, 1.0);
            a.find("w").grad[i] = g;
            b.find("w").grad[i] = g;
        }
        adam_step(a, 3e-3);
        adam_step(b, 3e-3);
    }
    CHECK(a.find("w").values == b.find("w").values);
}

TEST_CASE("velocity net with zero parameters emits an exactly zero field") {
    VelocityNet net(desk_kernel({12, 10}));
    const VectorField v = net.forward();
    CHECK(v.shape == Shape{12, 10});
    CHECK(v.channels == 2);
    for (double x : v.data) CHECK(x == 0.0);
}

TEST_CASE("velocity net output is zero on the boundary frame") {
    Rng rng(11);
    VelocityNet net(desk_kernel({10, 10}));
    net.init_random(rng);
    // randomize the final layer too so the field is non-trivial
    for (double& v : net.params().find("lin2.w").values) v = rng.uniform(-0.5, 0.5);
    const VectorField v = net.forward();
    int x[kMaxDims];
    bool any_nonzero = false;
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        unravel(v.shape, i, x);
        const bool frame = x[0] == 0 || x[0] == 9 || x[1] == 0 || x[1] == 9;
        for (int c = 0; c < 2; ++c) {
            if (frame) CHECK(v.at(c, i) == 0.0);
            else if (v.at(c, i) != 0.0) any_nonzero = true;
        }
    }
    CHECK(any_nonzero);
}

TEST_CASE("velocity net parameter gradient matches finite differences") {
    Rng rng(12);
    VelocityNet net(desk_kernel({10, 10}));
    net.init_random(rng);
    for (double& v : net.params().find("lin2.w").values) v = rng.uniform(-0.5, 0.5);
    for (double& v : net.params().find("lin2.b").values) v = rng.uniform(-0.1, 0.1);

    VelocityNet::Tape tape;
    const VectorField v = net.forward(&tape);
    net.params().zero_grads();
    net.backward(tape, v);  // d(0.5 ||v||^2)/dv = v

    const double h = 1e-6;
    int checked = 0;
    for (auto& block : net.params().blocks) {
        for (int probe = 0; probe < 2; ++probe) {
            const std::size_t i = static_cast<std::size_t>(rng.below(block.values.size()));
            const double keep = block.values[i];
            block.values[i] = keep + h;
            const double up = half_sq_norm(net.forward());
            block.values[i] = keep - h;
            const double dn = half_sq_norm(net.forward());
            block.values[i] = keep;
            CHECK(rel_err(block.grad[i], (up - dn) / (2 * h), 1e-9) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked >= 10);
}

TEST_CASE("descriptor net keeps the input shape with one channel") {
    Rng rng(13);
    DescriptorNet net(2);
    net.init_random(rng);
    const ScalarVolume image = random_volume({16, 16}, rng);
    const ScalarVolume out = net.forward(image);
    CHECK(out.shape == image.shape);

    // non-divisible-by-8 input goes through pad-and-crop
    const ScalarVolume odd = random_volume({13, 11}, rng);
    const ScalarVolume out_odd = net.forward(odd);
    CHECK(out_odd.shape == odd.shape);
}

TEST_CASE("descriptor net forward is deterministic") {
    Rng rng(14);
    DescriptorNet net(2);
    net.init_random(rng);
    const ScalarVolume image = random_volume({16, 16}, rng);
    const ScalarVolume a = net.forward(image);
    const ScalarVolume b = net.forward(image);
    CHECK(a.data == b.data);
}

TEST_CASE("descriptor net parameter and input gradients match finite differences") {
    Rng rng(15);
    DescriptorNet net(2);
    net.init_random(rng);
    ScalarVolume image = random_volume({16, 16}, rng);

    DescriptorNet::Tape tape;
    const ScalarVolume f = net.forward(image, &tape);
    net.params().zero_grads();
    const ScalarVolume grad_in = net.backward(tape, f, /*accumulate_params=*/true);

    const double h = 1e-6;
    for (int probe = 0; probe < 10; ++probe) {
        auto& block = net.params().blocks[static_cast<std::size_t>(rng.below(net.params().blocks.size()))];
        const std::size_t i = static_cast<std::size_t>(rng.below(block.values.size()));
        const double keep = block.values[i];
        block.values[i] = keep + h;
        const double up = half_sq_norm(net.forward(image));
        block.values[i] = keep - h;
        const double dn = half_sq_norm(net.forward(image));
        block.values[i] = keep;
        CHECK(rel_err(block.grad[i], (up - dn) / (2 * h), 1e-9) < 1e-4);
    }
    for (int probe = 0; probe < 5; ++probe) {
        const std::size_t i = static_cast<std::size_t>(rng.below(image.size()));
        const double keep = image.data[i];
        image.data[i] = keep + h;
        const double up = half_sq_norm(net.forward(image));
        image.data[i] = keep - h;
        const double dn = half_sq_norm(net.forward(image));
        image.data[i] = keep;
        CHECK(rel_err(grad_in.data[i], (up - dn) / (2 * h), 1e-9) < 1e-4);
    }
}

TEST_CASE("parameter checkpoints round-trip bit-exactly") {
    Rng rng(16);
    DescriptorNet net(2);
    net.init_random(rng);
    const std::string path = "ckpt_roundtrip.tmp";
    save_params(net.params(), path);
    const NetParams loaded = load_params(path);
    REQUIRE(loaded.blocks.size() == net.params().blocks.size());
    for (std::size_t b = 0; b < loaded.blocks.size(); ++b) {
        CHECK(loaded.blocks[b].name == net.params().blocks[b].name);
        CHECK(loaded.blocks[b].dims == net.params().blocks[b].dims);
        CHECK(loaded.blocks[b].values == net.params().blocks[b].values);
    }
    std::remove(path.c_str());
}

TEST_CASE("loading a truncated checkpoint fails cleanly") {
    Rng rng(17);
    VelocityNet net(desk_kernel({8, 8}));
    net.init_random(rng);
    const std::string path = "ckpt_truncated.tmp";
    save_params(net.params(), path);
    // chop the payload
    FILE* f = std::fopen(path.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fclose(f);
    CHECK(truncate(path.c_str(), size - 64) == 0);
    CHECK_THROWS_AS((void)load_params(path), FormatError);
    std::remove(path.c_str());
}
