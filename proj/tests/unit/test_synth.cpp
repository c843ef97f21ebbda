#include <cmath>

#include "diffreg/descriptor.hpp"
#include "diffreg/eval.hpp"
#include "diffreg/grid.hpp"
#include "diffreg/synth.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace diffreg;
using namespace diffreg::testing;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("phantom with zero blobs is empty") {
    SynthSpec spec;
    spec.shape = {16, 16};
    spec.n_blobs = 0;
    const auto [image, labels] = make_phantom(spec);
    for (double v : image.data) CHECK(v == 0.0);
    for (int v : labels.data) CHECK(v == 0);
}

TEST_CASE("phantom intensities stay in [0,1] for any seed") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        SynthSpec spec;
        spec.shape = {24, 20};
        spec.seed = seed;
        const auto [image, labels] = make_phantom(spec);
        (void)labels;
        for (double v : image.data) CHECK((v >= 0.0 && v <= 1.0));
    }
}

TEST_CASE("identical seeds give bit-identical phantoms") {
    SynthSpec spec;
    spec.shape = {20, 20};
    spec.seed = 12;
    const auto a = make_phantom(spec);
    const auto b = make_phantom(spec);
    CHECK(a.first.data == b.first.data);
    CHECK(a.second.data == b.second.data);
}

TEST_CASE("phantom labels use the configured alphabet") {
    SynthSpec spec;
    spec.shape = {32, 32};
    spec.seed = 3;
    spec.label_count = 3;
    const auto [image, labels] = make_phantom(spec);
    (void)image;
    for (int v : labels.data) CHECK((v >= 0 && v <= 3));
    CHECK(labels.labelset.size() >= 2);  // background plus at least one blob
}

TEST_CASE("ground-truth warp with zero amplitude is the identity") {
    SynthSpec spec;
    spec.shape = {16, 16};
    spec.warp_amplitude = 0.0;
    const GroundTruthWarp gt = make_ground_truth_warp(spec);
    const VectorField id = identity_map(spec.shape);
    CHECK(gt.map.data == id.data);
    CHECK(gt.inverse.data == id.data);
}

TEST_CASE("ground-truth warps are fold-free at interior voxels") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SynthSpec spec;
        spec.shape = {32, 32};
        spec.seed = seed;
        const GroundTruthWarp gt = make_ground_truth_warp(spec);
        const ScalarVolume det = jacobian_det(gt.map);
        int x[kMaxDims];
        for (std::size_t i = 0; i < det.size(); ++i) {
            unravel(det.shape, i, x);
            if (x[0] == 0 || x[0] == 31 || x[1] == 0 || x[1] == 31) continue;
            CHECK(det.data[i] > 0.0);
        }
    }
}

TEST_CASE("ground-truth forward and inverse maps compose to the identity") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SynthSpec spec;
        spec.shape = {32, 32};
        spec.seed = 100 + seed;
        const GroundTruthWarp gt = make_ground_truth_warp(spec);
        const VectorField comp = sample_linear(gt.map, gt.inverse);
        const VectorField id = identity_map(spec.shape);
        double worst = 0.0;
        int x[kMaxDims];
        for (std::size_t i = 0; i < comp.voxels(); ++i) {
            unravel(comp.shape, i, x);
            if (x[0] == 0 || x[0] == 31 || x[1] == 0 || x[1] == 31) continue;
            worst = std::max(worst, std::hypot(comp.at(0, i) - id.at(0, i), comp.at(1, i) - id.at(1, i)));
        }
        CHECK(worst < 0.1);
    }
}

TEST_CASE("identity warp with the remap disabled reproduces the moving image") {
    SynthSpec spec;
    spec.shape = {24, 24};
    spec.seed = 9;
    spec.warp_amplitude = 0.0;
    spec.remap = false;
    const RegistrationCase c = make_pair(spec);
    CHECK(c.fixed.data == c.moving.data);
    CHECK(c.labels_fixed.data == c.labels_moving.data);
}

TEST_CASE("nonzero warps strictly reduce the initial label overlap") {
    SynthSpec spec;
    spec.shape = {48, 48};
    spec.seed = 17;
    spec.warp_amplitude = 3.0;
    const RegistrationCase c = make_pair(spec);
    std::vector<int> labels = c.labels_moving.labelset;
    const DiceResult overlap = dice(c.labels_fixed, c.labels_moving, labels);
    CHECK(overlap.mean < 1.0);
}

TEST_CASE("initial endpoint error of the identity equals the truth displacement") {
    SynthSpec spec;
    spec.shape = {32, 32};
    spec.seed = 23;
    const RegistrationCase c = make_pair(spec);
    const VectorField id = identity_map(spec.shape);
    const EndpointError epe = endpoint_error(id, c.map_gt);

    // definitional recomputation over the same interior voxels
    double acc = 0.0;
    std::size_t counted = 0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < c.map_gt.voxels(); ++i) {
        unravel(spec.shape, i, x);
        if (x[0] == 0 || x[0] == 31 || x[1] == 0 || x[1] == 31) continue;
        acc += std::hypot(c.map_gt.at(0, i) - x[0], c.map_gt.at(1, i) - x[1]);
        ++counted;
    }
    CHECK(epe.mean == doctest::Approx(acc / counted).epsilon(1e-12));
}

TEST_CASE("case generation is pure in the spec seed") {
    SynthSpec spec;
    spec.shape = {24, 24};
    spec.seed = 31;
    const RegistrationCase a = make_pair(spec);
    const RegistrationCase b = make_pair(spec);
    CHECK(a.fixed.data == b.fixed.data);
    CHECK(a.moving.data == b.moving.data);
    CHECK(a.map_gt.data == b.map_gt.data);
}

TEST_CASE("inversion remap decorrelates intensities while MIND stays close") {
    double mean_abs_rho = 0.0;
    double mean_descriptor_gap = 0.0;
    const int seeds = 10;
    for (int k = 0; k < seeds; ++k) {
        SynthSpec spec;
        spec.shape = {64, 64};
        spec.seed = 5000 + static_cast<std::uint64_t>(k);
        spec.warp_amplitude = 3.0;
        spec.invert_probability = 1.0;  // condition on the inversion branch
        const RegistrationCase c = make_pair(spec);
        mean_abs_rho += std::abs(pearson(c.fixed.data, c.moving.data));

        // same case without geometric motion isolates the modality shift
        SynthSpec still = spec;
        still.warp_amplitude = 0.0;
        const RegistrationCase s = make_pair(still);
        const SearchScheme scheme = SearchScheme::make(2);
        const DescriptorField da = mind(s.moving, scheme);
        const DescriptorField db = mind(s.fixed, scheme);
        double gap = 0.0;
        for (std::size_t i = 0; i < da.data.size(); ++i)
            gap += std::abs(da.data[i] - db.data[i]);
        mean_descriptor_gap += gap / static_cast<double>(da.data.size());
    }
    mean_abs_rho /= seeds;
    mean_descriptor_gap /= seeds;
    MESSAGE("mean |rho| = ", mean_abs_rho, ", mean MIND gap = ", mean_descriptor_gap);
    CHECK(mean_abs_rho < 0.5);
    CHECK(mean_descriptor_gap < 0.15);
}
