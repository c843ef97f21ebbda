#include <cmath>

#include "diffreg/flow.hpp"
#include "diffreg/grid.hpp"
#include "diffreg/objective.hpp"
#include "diffreg/synth.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace diffreg;
using namespace diffreg::testing;

namespace {

FlowConfig flow_cfg(double step, int checkpoint = 0) {
    FlowConfig cfg;
    cfg.step = step;
    cfg.checkpoint_interval = checkpoint;
    return cfg;
}

// rotation generator about the grid center
VectorField rotation_field(const Shape& shape, double omega) {
    VectorField v(shape, 2);
    const double c0 = (shape[0] - 1) / 2.0, c1 = (shape[1] - 1) / 2.0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        unravel(shape, i, x);
        v.at(0, i) = -omega * (x[1] - c1);
        v.at(1, i) = omega * (x[0] - c0);
    }
    return v;
}

double rotation_error(const Shape& shape, double omega, double step, double radius_limit) {
    const VectorField v = rotation_field(shape, omega);
    const VectorField map = integrate_flow(v, flow_cfg(step));
    const double c0 = (shape[0] - 1) / 2.0, c1 = (shape[1] - 1) / 2.0;
    const double cw = std::cos(omega), sw = std::sin(omega);
    double worst = 0.0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < map.voxels(); ++i) {
        unravel(shape, i, x);
        const double r0 = x[0] - c0, r1 = x[1] - c1;
        if (std::sqrt(r0 * r0 + r1 * r1) > radius_limit) continue;
        const double want0 = c0 + cw * r0 - sw * r1;
        const double want1 = c1 + sw * r0 + cw * r1;
        worst = std::max(worst, std::hypot(map.at(0, i) - want0, map.at(1, i) - want1));
    }
    return worst;
}

VectorField smooth_field(const Shape& shape, double amplitude, std::uint64_t seed,
                         double smoothness = 6.0) {
    return random_smooth_velocity(shape, amplitude, smoothness, seed);
}

double composition_gap(const VectorField& fwd, const VectorField& bwd) {
    const VectorField comp = sample_linear(fwd, bwd);  // fwd(bwd(x))
    double worst = 0.0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < comp.voxels(); ++i) {
        unravel(comp.shape, i, x);
        bool interior = true;
        for (int a = 0; a < comp.dims(); ++a)
            if (x[a] == 0 || x[a] == comp.shape[a] - 1) interior = false;
        if (!interior) continue;
        double sq = 0.0;
        for (int c = 0; c < comp.channels; ++c) {
            const double diff = comp.at(c, i) - x[c];
            sq += diff * diff;
        }
        worst = std::max(worst, std::sqrt(sq));
    }
    return worst;
}

struct ScaledMetric : SimilarityMetric {
    const SimilarityMetric& inner;
    double factor;
    ScaledMetric(const SimilarityMetric& m, double f) : inner(m), factor(f) {}
    const char* name() const override { return "scaled"; }
    double evaluate(const ScalarVolume& warped, ScalarVolume* grad) const override {
        const double s = inner.evaluate(warped, grad);
        if (grad)
            for (double& g : grad->data) g *= factor;
        return factor * s;
    }
};

LossConfig desk_loss(const std::string& metric) {
    LossConfig cfg;
    cfg.metric = metric;
    cfg.lmi_patch_side = 6;
    cfg.lmi_bins = 8;
    return cfg;
}

}  // namespace

TEST_CASE("integrate_flow of a zero field is exactly the identity") {
    const VectorField v({9, 8}, 2);
    const VectorField map = integrate_flow(v, flow_cfg(0.05));
    const VectorField id = identity_map(v.shape);
    CHECK(map.data == id.data);
}

TEST_CASE("integrate_flow of a constant field translates exactly") {
    VectorField v({9, 8}, 2);
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        v.at(0, i) = 0.7;
        v.at(1, i) = -1.2;
    }
    const VectorField map = integrate_flow(v, flow_cfg(0.05));
    const VectorField id = identity_map(v.shape);
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        CHECK(map.at(0, i) == doctest::Approx(id.at(0, i) + 0.7).epsilon(1e-13));
        CHECK(map.at(1, i) == doctest::Approx(id.at(1, i) - 1.2).epsilon(1e-13));
    }
}

TEST_CASE("integrate_flow rejects a non-integer step count") {
    const VectorField v({6, 6}, 2);
    CHECK_THROWS_AS((void)integrate_flow(v, flow_cfg(0.3)), Error);
}

TEST_CASE("rotation flow matches the analytic rotation within 2*h*omega") {
    const Shape shape{32, 32};
    const double omega = 0.2;
    const double err = rotation_error(shape, omega, 0.05, 12.0);
    CHECK(err < 2.0 * 0.05 * omega);
    CHECK(err > 0.0);
}

TEST_CASE("rotation flow error decays at first order in the step size") {
    const Shape shape{32, 32};
    const double omega = 0.2;
    const double e1 = rotation_error(shape, omega, 0.05, 12.0);
    const double e2 = rotation_error(shape, omega, 0.025, 12.0);
    const double e3 = rotation_error(shape, omega, 0.0125, 12.0);
    CHECK(e2 / e1 > 0.35);
    CHECK(e2 / e1 < 0.65);
    CHECK(e3 / e2 > 0.35);
    CHECK(e3 / e2 < 0.65);
}

TEST_CASE("integrate_inverse trivial cases") {
    VectorField v({8, 8}, 2);
    const VectorField id = identity_map(v.shape);
    CHECK(integrate_inverse(v, flow_cfg(0.05)).data == id.data);
    for (std::size_t i = 0; i < v.voxels(); ++i) v.at(0, i) = 1.5;
    const VectorField inv = integrate_inverse(v, flow_cfg(0.05));
    for (std::size_t i = 0; i < v.voxels(); ++i)
        CHECK(inv.at(0, i) == doctest::Approx(id.at(0, i) - 1.5).epsilon(1e-13));
}

TEST_CASE("forward and inverse flows compose to the identity within 0.1 voxels") {
    const FlowConfig cfg = flow_cfg(0.05);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const VectorField v = smooth_field({32, 32}, 2.0, seed);
        const VectorField fwd = integrate_flow(v, cfg);
        const VectorField bwd = integrate_inverse(v, cfg);
        CHECK(composition_gap(fwd, bwd) < 0.1);
    }
}

TEST_CASE("composition error decreases when the step is halved") {
    const VectorField v = smooth_field({32, 32}, 2.0, 9);
    const double coarse =
        composition_gap(integrate_flow(v, flow_cfg(0.05)), integrate_inverse(v, flow_cfg(0.05)));
    const double fine =
        composition_gap(integrate_flow(v, flow_cfg(0.025)), integrate_inverse(v, flow_cfg(0.025)));
    CHECK(fine < coarse);
}

TEST_CASE("warp by the identity map leaves the image unchanged") {
    Rng rng(2);
    const ScalarVolume image = random_volume({7, 9}, rng);
    const ScalarVolume out = warp(image, identity_map(image.shape));
    CHECK(out.data == image.data);
}

TEST_CASE("warp by an integer translation shifts with a clamped border") {
    ScalarVolume image({5, 1});
    image.data = {10, 20, 30, 40, 50};
    VectorField map = identity_map(image.shape);
    for (std::size_t i = 0; i < map.voxels(); ++i) map.at(0, i) += 2.0;
    const ScalarVolume out = warp(image, map);
    CHECK(out.data == std::vector<double>{30, 40, 50, 50, 50});
}

TEST_CASE("warp round trip through forward and inverse maps") {
    const Shape shape{32, 32};
    ScalarVolume image(shape);
    int x[kMaxDims];
    for (std::size_t i = 0; i < image.size(); ++i) {
        unravel(shape, i, x);
        image.data[i] = 0.5 + 0.4 * std::sin(2.0 * M_PI * x[0] / 16.0) *
                                  std::cos(2.0 * M_PI * x[1] / 16.0);
    }
    const VectorField v = smooth_field(shape, 2.0, 21);
    const FlowConfig cfg = flow_cfg(0.05);
    const ScalarVolume warped = warp(image, integrate_flow(v, cfg));
    const ScalarVolume back = warp(warped, integrate_inverse(v, cfg));
    double worst = 0.0;
    for (std::size_t i = 0; i < image.size(); ++i) {
        unravel(shape, i, x);
        if (x[0] < 2 || x[0] > 29 || x[1] < 2 || x[1] > 29) continue;
        worst = std::max(worst, std::abs(back.data[i] - image.data[i]));
    }
    CHECK(worst < 0.05);
}

TEST_CASE("small smooth fields keep the jacobian determinant positive") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const VectorField v = smooth_field({24, 24}, 0.5, seed * 37);
        const ScalarVolume det = jacobian_det(integrate_flow(v, flow_cfg(0.05)));
        for (double d : det.data) CHECK(d > 0.0);
    }
}

TEST_CASE("zero network and identical images yield an exactly zero gradient") {
    Rng rng(33);
    const ScalarVolume image = random_volume({12, 12}, rng);
    KernelSpec kspec;
    kspec.shape = image.shape;
    VelocityNet net(kspec);  // all parameters zero
    const MindMetric metric(image, SearchScheme::make(2));
    const LossConfig lcfg = desk_loss("mind");
    net.params().zero_grads();
    const LossTerms terms = loss_gradient_wrt_params(net, image, metric, lcfg, flow_cfg(0.2));
    CHECK(terms.similarity == 0.0);
    CHECK(terms.jacobian == 0.0);
    CHECK(terms.smoothness == 0.0);
    CHECK(terms.magnitude == 0.0);
    for (const auto& block : net.params().blocks)
        for (double g : block.grad) CHECK(g == 0.0);
}

TEST_CASE("loss gradient matches finite differences for every metric") {
    const Shape shape{12, 12};
    Rng data_rng(71);
    const ScalarVolume fixed = random_volume(shape, data_rng);
    const ScalarVolume moving = random_volume(shape, data_rng);
    const FlowConfig fcfg = flow_cfg(0.2);  // 5 Euler steps

    DescriptorNet descriptor(2);
    Rng descriptor_rng(5);
    descriptor.init_random(descriptor_rng);

    for (const std::string metric_name : {"mind", "contrastive", "lmi"}) {
        CAPTURE(metric_name);
        const LossConfig lcfg = desk_loss(metric_name);
        const auto metric = make_metric(fixed, lcfg, &descriptor);

        KernelSpec kspec;
        kspec.shape = shape;
        VelocityNet net(kspec);
        Rng init_rng(101);
        net.init_random(init_rng);
        for (double& v : net.params().find("lin2.w").values) v = init_rng.uniform(-0.3, 0.3);
        for (double& v : net.params().find("lin2.b").values) v = init_rng.uniform(-0.1, 0.1);

        net.params().zero_grads();
        loss_gradient_wrt_params(net, moving, *metric, lcfg, fcfg);

        Rng probe_rng(202);
        const double h = 1e-6;
        int checked = 0;
        for (int probe = 0; probe < 12; ++probe) {
            auto& block = net.params().blocks[static_cast<std::size_t>(
                probe_rng.below(net.params().blocks.size()))];
            const std::size_t i = static_cast<std::size_t>(probe_rng.below(block.values.size()));
            const double keep = block.values[i];
            block.values[i] = keep + h;
            const double up = evaluate_total_loss(net, moving, *metric, lcfg, fcfg).total(lcfg);
            block.values[i] = keep - h;
            const double dn = evaluate_total_loss(net, moving, *metric, lcfg, fcfg).total(lcfg);
            block.values[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            CHECK(rel_err(block.grad[i], fd, 1e-8) < 1e-4);
            ++checked;
        }
        CHECK(checked >= 10);
    }
}

TEST_CASE("doubling the similarity term exactly doubles its gradient") {
    const Shape shape{12, 12};
    Rng rng(81);
    const ScalarVolume fixed = random_volume(shape, rng);
    const ScalarVolume moving = random_volume(shape, rng);
    const MindMetric metric(fixed, SearchScheme::make(2));
    const ScaledMetric doubled(metric, 2.0);

    LossConfig bare = desk_loss("mind");
    bare.lambda_J = bare.lambda_grad = bare.lambda_mag = 0.0;

    KernelSpec kspec;
    kspec.shape = shape;
    VelocityNet net(kspec);
    Rng init_rng(7);
    net.init_random(init_rng);
    for (double& v : net.params().find("lin2.w").values) v = init_rng.uniform(-0.3, 0.3);

    net.params().zero_grads();
    loss_gradient_wrt_params(net, moving, metric, bare, flow_cfg(0.2));
    std::vector<double> single;
    for (const auto& block : net.params().blocks)
        single.insert(single.end(), block.grad.begin(), block.grad.end());

    net.params().zero_grads();
    loss_gradient_wrt_params(net, moving, doubled, bare, flow_cfg(0.2));
    std::size_t k = 0;
    for (const auto& block : net.params().blocks)
        for (double g : block.grad) CHECK(g == 2.0 * single[k++]);
}

TEST_CASE("checkpointed reverse sweep reproduces the dense gradient bit-exactly") {
    const Shape shape{12, 12};
    Rng rng(91);
    const ScalarVolume fixed = random_volume(shape, rng);
    const ScalarVolume moving = random_volume(shape, rng);
    const MindMetric metric(fixed, SearchScheme::make(2));
    const LossConfig lcfg = desk_loss("mind");

    KernelSpec kspec;
    kspec.shape = shape;
    std::vector<std::vector<double>> grads;
    for (int checkpoint : {0, 3}) {
        VelocityNet net(kspec);
        Rng init_rng(55);
        net.init_random(init_rng);
        for (double& v : net.params().find("lin2.w").values) v = init_rng.uniform(-0.3, 0.3);
        net.params().zero_grads();
        loss_gradient_wrt_params(net, moving, metric, lcfg, flow_cfg(0.1, checkpoint));
        std::vector<double> flat;
        for (const auto& block : net.params().blocks)
            flat.insert(flat.end(), block.grad.begin(), block.grad.end());
        grads.push_back(std::move(flat));
    }
    CHECK(grads[0] == grads[1]);
}
