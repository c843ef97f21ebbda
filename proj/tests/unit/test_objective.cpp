#include <algorithm>
#include <cmath>

#include "diffreg/eval.hpp"
#include "diffreg/grid.hpp"
#include "diffreg/objective.hpp"
#include "diffreg/synth.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace diffreg;
using namespace diffreg::testing;

namespace {

double de_casteljau(std::vector<double> points, double t) {
    for (std::size_t level = points.size() - 1; level > 0; --level)
        for (std::size_t i = 0; i < level; ++i)
            points[i] = (1.0 - t) * points[i] + t * points[i + 1];
    return points[0];
}

FlowConfig flow_cfg(double step) {
    FlowConfig cfg;
    cfg.step = step;
    return cfg;
}

}  // namespace

TEST_CASE("jacobian penalty is zero for the identity map") {
    const VectorField id = identity_map({8, 8});
    CHECK(loss_jacobian_penalty(id, 0.1) == 0.0);
}

TEST_CASE("a single folded voxel contributes epsilon + |det| to the penalty sum") {
    // shifting one map value by -3 along axis 0 makes det = -0.5 at exactly
    // one voxel (the central difference at its left neighbor)
    VectorField map = identity_map({10, 10, 10});
    const auto strides = row_major_strides(map.shape);
    const std::size_t center = 5 * strides[0] + 5 * strides[1] + 5 * strides[2];
    map.at(0, center) -= 3.0;

    const ScalarVolume penalty = jacobian_penalty_map(map, 0.1);
    const std::size_t folded = center - strides[0];
    CHECK(penalty.data[folded] == doctest::Approx(0.6).epsilon(1e-12));

    double total = 0.0;
    std::size_t active = 0;
    for (double v : penalty.data)
        if (v > 0.0) {
            total += v;
            ++active;
        }
    CHECK(active == 1);
    CHECK(total == doctest::Approx(0.6).epsilon(1e-12));

    // and the percentage of non-positive determinants is 1/1000
    CHECK(neg_jac_ratio(map) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("jacobian penalty is non-decreasing in epsilon") {
    const VectorField v = random_smooth_velocity({16, 16}, 2.0, 3.0, 5);
    const VectorField map = integrate_flow(v, flow_cfg(0.05));
    double prev = -1.0;
    for (double eps : {0.05, 0.1, 0.3, 0.5, 0.9}) {
        const double val = loss_jacobian_penalty(map, eps);
        CHECK(val >= prev);
        prev = val;
    }
}

TEST_CASE("jacobian penalty gradient matches finite differences") {
    Rng rng(17);
    VectorField map = identity_map({7, 7});
    for (double& x : map.data) x += rng.uniform(-0.45, 0.45);
    const double eps = 0.65;  // keep several voxels inside the hinge
    VectorField grad(map.shape, map.channels);
    loss_jacobian_penalty(map, eps, &grad, 1.0);
    const double h = 1e-7;
    for (int probe = 0; probe < 15; ++probe) {
        const std::size_t i = static_cast<std::size_t>(rng.below(map.data.size()));
        const double keep = map.data[i];
        map.data[i] = keep + h;
        const double up = loss_jacobian_penalty(map, eps);
        map.data[i] = keep - h;
        const double dn = loss_jacobian_penalty(map, eps);
        map.data[i] = keep;
        CHECK(rel_err(grad.data[i], (up - dn) / (2 * h), 1e-8) < 1e-5);
    }
}

TEST_CASE("gradient smoothness vanishes at the identity and is quadratic") {
    const VectorField id = identity_map({9, 9});
    CHECK(loss_gradient_smoothness(id) == 0.0);

    const double A[2][2] = {{0.2, -0.1}, {0.05, 0.15}};
    VectorField map = identity_map({12, 10});
    int x[kMaxDims];
    for (std::size_t i = 0; i < map.voxels(); ++i) {
        unravel(map.shape, i, x);
        for (int c = 0; c < 2; ++c) map.at(c, i) += A[c][0] * x[0] + A[c][1] * x[1];
    }
    const double frob = 0.2 * 0.2 + 0.1 * 0.1 + 0.05 * 0.05 + 0.15 * 0.15;
    CHECK(loss_gradient_smoothness(map) == doctest::Approx(frob).epsilon(1e-12));

    VectorField doubled = identity_map(map.shape);
    for (std::size_t i = 0; i < map.data.size(); ++i)
        doubled.data[i] += 2.0 * (map.data[i] - doubled.data[i]);
    CHECK(loss_gradient_smoothness(doubled) == doctest::Approx(4.0 * frob).epsilon(1e-12));
}

TEST_CASE("gradient smoothness gradient matches finite differences") {
    Rng rng(19);
    VectorField map = identity_map({8, 8});
    for (double& x : map.data) x += rng.uniform(-0.5, 0.5);
    VectorField grad(map.shape, map.channels);
    loss_gradient_smoothness(map, &grad, 1.0);
    const double h = 1e-6;
    for (int probe = 0; probe < 15; ++probe) {
        const std::size_t i = static_cast<std::size_t>(rng.below(map.data.size()));
        const double keep = map.data[i];
        map.data[i] = keep + h;
        const double up = loss_gradient_smoothness(map);
        map.data[i] = keep - h;
        const double dn = loss_gradient_smoothness(map);
        map.data[i] = keep;
        CHECK(rel_err(grad.data[i], (up - dn) / (2 * h), 1e-9) < 1e-5);
    }
}

TEST_CASE("magnitude term delegates to the spectral norm") {
    Rng rng(23);
    const Shape shape{10, 8};
    KernelSpec kspec;
    kspec.shape = shape;
    const SpectralMultiplier mult = build_multiplier(kspec);
    const VectorField v = random_field(shape, 2, rng);
    CHECK(loss_magnitude(v, mult) == v_norm_sq(v, mult));

    const VectorField zero(shape, 2);
    CHECK(loss_magnitude(zero, mult) == 0.0);

    KernelSpec plain;
    plain.shape = shape;
    plain.alpha = 0.0;
    double mean_sq = 0.0;
    for (double x : v.data) mean_sq += x * x;
    mean_sq /= static_cast<double>(v.voxels());
    CHECK(rel_err(loss_magnitude(v, build_multiplier(plain)), mean_sq) < 1e-12);
}

TEST_CASE("total loss decomposes into its independently computed terms") {
    const Shape shape{16, 16};
    SynthSpec spec;
    spec.shape = shape;
    spec.seed = 4;
    auto [image, labels] = make_phantom(spec);
    (void)labels;

    KernelSpec kspec;
    kspec.shape = shape;
    VelocityNet net(kspec);
    Rng rng(2);
    net.init_random(rng);
    for (double& v : net.params().find("lin2.w").values) v = rng.uniform(-0.3, 0.3);

    LossConfig lcfg;
    lcfg.metric = "mind";
    const MindMetric metric(image, SearchScheme::make(2));
    const FlowConfig fcfg = flow_cfg(0.1);

    const LossTerms terms = evaluate_total_loss(net, image, metric, lcfg, fcfg);

    const VectorField v = net.forward();
    const VectorField map = integrate_flow(v, fcfg);
    const ScalarVolume warped = warp(image, map);
    const double s = metric.evaluate(warped, nullptr);
    const double lj = loss_jacobian_penalty(map, lcfg.epsilon);
    const double lg = loss_gradient_smoothness(map);
    const double lm = loss_magnitude(v, net.smoothing_multiplier());

    CHECK(std::abs(terms.total(lcfg) -
                   (s + lcfg.lambda_J * lj + lcfg.lambda_grad * lg + lcfg.lambda_mag * lm)) < 1e-12);

    LossConfig bare = lcfg;
    bare.lambda_J = bare.lambda_grad = bare.lambda_mag = 0.0;
    CHECK(terms.total(bare) == terms.similarity);
}

TEST_CASE("bezier endpoints and linear precision") {
    BezierCurve curve;
    curve.points = {0.2, 0.25, 0.7, 0.9};
    CHECK(bezier_eval(curve, 0.0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(bezier_eval(curve, 1.0) == doctest::Approx(0.9).epsilon(1e-15));

    BezierCurve linear;
    linear.points = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    for (double t : {0.0, 0.13, 0.5, 0.77, 1.0})
        CHECK(bezier_eval(linear, t) == doctest::Approx(t).epsilon(1e-14));
}

TEST_CASE("bezier matches de Casteljau and is monotone") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        BezierCurve curve;
        curve.points.resize(4);
        for (double& p : curve.points) p = rng.uniform();
        std::sort(curve.points.begin(), curve.points.end());
        double prev = -1.0;
        for (int k = 0; k <= 100; ++k) {
            const double t = k / 100.0;
            const double got = bezier_eval(curve, t);
            CHECK(std::abs(got - de_casteljau(curve.points, t)) < 1e-12);
            CHECK(got - prev >= -1e-12);
            prev = got;
        }
    }
}

TEST_CASE("bezier rejects unsorted control points") {
    BezierCurve bad;
    bad.points = {0.5, 0.3, 0.8};
    CHECK_THROWS_AS((void)bezier_eval(bad, 0.5), Error);
}

TEST_CASE("identity curve with no inversion reproduces the image") {
    Rng rng(37);
    const ScalarVolume image = random_volume({9, 9}, rng);
    BezierCurve identity;
    identity.points = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    const ScalarVolume out = apply_intensity_map(image, identity, false);
    for (std::size_t i = 0; i < image.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(image.data[i]).epsilon(1e-14));
}

TEST_CASE("augment_modality output stays inside the control point range") {
    Rng rng(41);
    const ScalarVolume image = random_volume({12, 12}, rng);
    ContrastiveConfig cfg;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const ScalarVolume out = augment_modality(image, cfg, seed);
        for (double v : out.data) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK(augment_modality(image, cfg, 3).data == augment_modality(image, cfg, 3).data);
}

TEST_CASE("inverted bezier map is monotone in 1 - I") {
    Rng rng(43);
    BezierCurve curve;
    curve.points.resize(4);
    for (double& p : curve.points) p = rng.uniform();
    std::sort(curve.points.begin(), curve.points.end());

    ScalarVolume ramp({256});
    for (int i = 0; i < 256; ++i) ramp.data[static_cast<std::size_t>(i)] = i / 255.0;
    const ScalarVolume mapped = apply_intensity_map(ramp, curve, true);
    for (int i = 1; i < 256; ++i)
        CHECK(mapped.data[static_cast<std::size_t>(i)] - mapped.data[static_cast<std::size_t>(i - 1)] <=
              1e-12);  // non-increasing in I, monotone in 1-I
}

TEST_CASE("infonce closed form for orthogonal matched tokens") {
    const int n = 6;
    TokenMatrix tokens(n, n);
    for (int i = 0; i < n; ++i) tokens.at(i, i) = 1.0;  // mutually orthogonal unit tokens
    const double tau = 0.05;
    const double loss = infonce_loss(tokens, tokens, tau);
    const double expected = -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + (n - 1)));
    CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
    CHECK(loss >= 0.0);
}

TEST_CASE("infonce loss is non-negative on random unit tokens") {
    Rng rng(47);
    const int n = 16, c = 8;
    TokenMatrix a(n, c), b(n, c);
    for (auto* m : {&a, &b})
        for (int i = 0; i < n; ++i) {
            double norm = 0.0;
            for (int k = 0; k < c; ++k) {
                m->at(i, k) = rng.normal();
                norm += m->at(i, k) * m->at(i, k);
            }
            norm = std::sqrt(norm);
            for (int k = 0; k < c; ++k) m->at(i, k) /= norm;
        }
    CHECK(infonce_loss(a, b, 0.05) >= 0.0);
}

TEST_CASE("infonce gradient matches finite differences") {
    Rng rng(53);
    const int n = 8, c = 5;
    TokenMatrix a(n, c), b(n, c);
    for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : b.data) v = rng.uniform(-1.0, 1.0);
    TokenMatrix ga, gb;
    infonce_loss(a, b, 0.1, &ga, &gb);
    const double h = 1e-6;
    for (int probe = 0; probe < 5; ++probe) {
        std::size_t i = static_cast<std::size_t>(rng.below(a.data.size()));
        double keep = a.data[i];
        a.data[i] = keep + h;
        const double up = infonce_loss(a, b, 0.1);
        a.data[i] = keep - h;
        const double dn = infonce_loss(a, b, 0.1);
        a.data[i] = keep;
        CHECK(rel_err(ga.data[i], (up - dn) / (2 * h), 1e-9) < 1e-5);

        i = static_cast<std::size_t>(rng.below(b.data.size()));
        keep = b.data[i];
        b.data[i] = keep + h;
        const double upb = infonce_loss(a, b, 0.1);
        b.data[i] = keep - h;
        const double dnb = infonce_loss(a, b, 0.1);
        b.data[i] = keep;
        CHECK(rel_err(gb.data[i], (upb - dnb) / (2 * h), 1e-9) < 1e-5);
    }
}

TEST_CASE("infonce is invariant under a common permutation of positions") {
    Rng rng(59);
    const int n = 10, c = 6;
    TokenMatrix a(n, c), b(n, c);
    for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : b.data) v = rng.uniform(-1.0, 1.0);
    const double base = infonce_loss(a, b, 0.07);

    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = (i * 7 + 3) % n;
    TokenMatrix pa(n, c), pb(n, c);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < c; ++k) {
            pa.at(i, k) = a.at(perm[static_cast<std::size_t>(i)], k);
            pb.at(i, k) = b.at(perm[static_cast<std::size_t>(i)], k);
        }
    CHECK(std::abs(infonce_loss(pa, pb, 0.07) - base) < 1e-12);
}

TEST_CASE("train_descriptor with zero iterations returns the seeded initialization") {
    SynthSpec pspec;
    pspec.shape = {16, 16};
    pspec.seed = 1;
    const auto [image, labels] = make_phantom(pspec);
    (void)labels;
    ContrastiveConfig cfg;
    cfg.iterations = 0;
    cfg.sample_count = 64;
    const DescriptorNet trained = train_descriptor({image}, cfg, 77);

    Rng rng(77);
    DescriptorNet reference(2);
    reference.init_random(rng);
    for (std::size_t b = 0; b < trained.params().blocks.size(); ++b)
        CHECK(trained.params().blocks[b].values == reference.params().blocks[b].values);
}

TEST_CASE("train_descriptor is deterministic per seed") {
    std::vector<ScalarVolume> corpus;
    for (std::uint64_t s = 0; s < 3; ++s) {
        SynthSpec pspec;
        pspec.shape = {16, 16};
        pspec.seed = s;
        corpus.push_back(make_phantom(pspec).first);
    }
    ContrastiveConfig cfg;
    cfg.iterations = 4;
    cfg.sample_count = 64;
    const DescriptorNet a = train_descriptor(corpus, cfg, 5);
    const DescriptorNet b = train_descriptor(corpus, cfg, 5);
    for (std::size_t blk = 0; blk < a.params().blocks.size(); ++blk)
        CHECK(a.params().blocks[blk].values == b.params().blocks[blk].values);
}

TEST_CASE("trained descriptors separate positive from negative pairs" * doctest::timeout(600)) {
    std::vector<ScalarVolume> corpus;
    for (std::uint64_t s = 0; s < 20; ++s) {
        SynthSpec pspec;
        pspec.shape = {24, 24};
        pspec.seed = 1000 + s;
        pspec.n_blobs = 6;
        corpus.push_back(make_phantom(pspec).first);
    }
    ContrastiveConfig cfg;
    cfg.iterations = 2000;
    cfg.sample_count = 256;
    DescriptorNet net = train_descriptor(corpus, cfg, 11);

    // held-out separation statistic
    SynthSpec held;
    held.shape = {24, 24};
    held.seed = 999;
    held.n_blobs = 6;
    const ScalarVolume image = make_phantom(held).first;
    const ScalarVolume other = augment_modality(image, cfg, 123456);
    const DescriptorField t0 = token_from_features(net.forward(image), {1, 2});
    const DescriptorField t1 = token_from_features(net.forward(other), {1, 2});

    const std::size_t n = t0.voxels();
    double pos = 0.0, neg = 0.0;
    Rng rng(5);
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int c = 0; c < t0.channels; ++c) dot += t0.at(c, i) * t1.at(c, i);
        pos += dot;
        const std::size_t j = static_cast<std::size_t>(rng.below(n));
        double dneg = 0.0;
        for (int c = 0; c < t0.channels; ++c) dneg += t0.at(c, i) * t1.at(c, j);
        neg += dneg;
    }
    pos /= static_cast<double>(n);
    neg /= static_cast<double>(n);
    MESSAGE("positive mean dot ", pos, ", negative mean dot ", neg);
    CHECK(pos - neg >= 0.2);
}

TEST_CASE("register on an identical pair stays at the identity") {
    SynthSpec pspec;
    pspec.shape = {32, 32};
    pspec.seed = 7;
    const ScalarVolume image = make_phantom(pspec).first;

    LossConfig lcfg;
    lcfg.metric = "mind";
    lcfg.epochs = 30;
    lcfg.validate();
    FlowConfig fcfg = flow_cfg(0.05);
    KernelSpec kspec;

    const RegistrationResult result = register_pair(image, image, lcfg, fcfg, kspec, 3);
    CHECK(result.mean_displacement < 0.1);
    CHECK(std::abs(result.trace.back().total - result.trace.front().total) < 1e-3);
    for (std::size_t e = 6; e < result.trace.size(); ++e)
        CHECK(result.trace[e].total <= result.trace[e - 1].total + 1e-9);
}

TEST_CASE("register aborts with a numerical diagnostic when the loss explodes") {
    SynthSpec pspec;
    pspec.shape = {16, 16};
    pspec.seed = 8;
    const ScalarVolume image = make_phantom(pspec).first;
    SynthSpec pspec2 = pspec;
    pspec2.seed = 9;
    const ScalarVolume other = make_phantom(pspec2).first;

    LossConfig lcfg;
    lcfg.metric = "mind";
    lcfg.epochs = 5;
    lcfg.lr = 1e200;  // drives activations to overflow within a few steps
    FlowConfig fcfg = flow_cfg(0.2);
    KernelSpec kspec;
    CHECK_THROWS_AS((void)register_pair(image, other, lcfg, fcfg, kspec, 3), NumericalError);
}

TEST_CASE("register recovers a synthetic multimodal warp with MIND" * doctest::timeout(600)) {
    SynthSpec spec;
    spec.shape = {64, 64};
    spec.seed = 2024;
    spec.warp_amplitude = 3.0;
    const RegistrationCase c = make_pair(spec);

    LossConfig lcfg;
    lcfg.metric = "mind";
    lcfg.epochs = 150;
    FlowConfig fcfg = flow_cfg(0.05);
    KernelSpec kspec;

    const RegistrationResult result = register_pair(c.fixed, c.moving, lcfg, fcfg, kspec, 1);

    const VectorField id = identity_map(c.fixed.shape);
    const double initial = endpoint_error(id, c.map_gt).mean;
    const double final_err = endpoint_error(result.map, c.map_gt).mean;
    MESSAGE("endpoint error ", initial, " -> ", final_err);
    CHECK(final_err <= 0.4 * initial);

    // harder barrier: no folded voxels at all
    LossConfig hard = lcfg;
    hard.epsilon = 0.5;
    const RegistrationResult strict = register_pair(c.fixed, c.moving, hard, fcfg, kspec, 1);
    CHECK(neg_jac_ratio(strict.map) == 0.0);
}
