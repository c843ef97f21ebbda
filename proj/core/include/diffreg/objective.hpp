#pragma once

#include <cstdint>
#include <memory>

#include "diffreg/flow.hpp"
#include "diffreg/losses.hpp"
#include "diffreg/neural.hpp"
#include "diffreg/similarity.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

/// Monotone intensity transfer curve: non-decreasing control points in [0,1].
struct BezierCurve {
    std::vector<double> points;

    void validate() const {
        require(points.size() >= 2, "BezierCurve: need at least two control points");
        require(points.front() >= 0.0 && points.back() <= 1.0,
                "BezierCurve: control points must lie in [0,1]");
        for (std::size_t i = 1; i < points.size(); ++i)
            require(points[i] >= points[i - 1], "BezierCurve: control points must be non-decreasing");
    }
    int degree() const { return static_cast<int>(points.size()) - 1; }
};

/// Bernstein-weighted evaluation at t in [0,1].
double bezier_eval(const BezierCurve& curve, double t);

/// Descriptor pretraining parameters.
struct ContrastiveConfig {
    double tau = 0.05;
    int sample_count = 8196;  // N_k sampled voxel positions per iteration
    double invert_probability = 0.5;  // p
    int bezier_degree = 3;            // n
    double lr = 1e-4;
    int batch = 1;
    int iterations = 2000;  // training length (not fixed upstream; desk default)

    void validate() const {
        require(tau > 0.0, "ContrastiveConfig: tau must be positive");
        require(invert_probability >= 0.0 && invert_probability <= 1.0,
                "ContrastiveConfig: p must lie in [0,1]");
        require(sample_count >= 1, "ContrastiveConfig: N_k must be positive");
        require(bezier_degree >= 1, "ContrastiveConfig: n must be >= 1");
    }
};

/// Applies a Bezier intensity map, optionally to the inverted image 1 - I.
ScalarVolume apply_intensity_map(const ScalarVolume& image, const BezierCurve& curve, bool invert);

/// Stochastic modality augmentation: samples n+1 sorted uniform control
/// points, inverts with probability p, then applies the curve. Deterministic
/// per seed; intensities must be in [0,1].
ScalarVolume augment_modality(const ScalarVolume& image, const ContrastiveConfig& cfg,
                              std::uint64_t seed);
ScalarVolume augment_modality(const ScalarVolume& image, const ContrastiveConfig& cfg, Rng& rng);

/// Row-per-position token matrix for the sampled contrastive batch.
struct TokenMatrix {
    int count = 0;
    int channels = 0;
    std::vector<double> data;  // row-major [position][channel]

    TokenMatrix() = default;
    TokenMatrix(int n, int c) : count(n), channels(c), data(static_cast<std::size_t>(n) * c, 0.0) {}
    double& at(int i, int c) { return data[static_cast<std::size_t>(i) * channels + c]; }
    double at(int i, int c) const { return data[static_cast<std::size_t>(i) * channels + c]; }
};

/// Voxel-level InfoNCE: positives are same-position rows; every sampled row
/// of `others` serves as a candidate at temperature tau. Returns the positive
/// (non-negative) loss; gradients accumulate when non-null.
double infonce_loss(const TokenMatrix& anchors, const TokenMatrix& others, double tau,
                    TokenMatrix* grad_anchors = nullptr, TokenMatrix* grad_others = nullptr);

/// Descriptor dissimilarity on frozen learned features: tokens of the warped
/// image against precomputed tokens of the fixed image, 1 - mean cosine.
class ContrastiveMetric : public SimilarityMetric {
public:
    ContrastiveMetric(const ScalarVolume& fixed, DescriptorNet* net,
                      std::vector<int> dilations = {1, 2});
    const char* name() const override { return "contrastive"; }
    double evaluate(const ScalarVolume& warped, ScalarVolume* grad) const override;

private:
    DescriptorNet* net_;
    std::vector<int> dilations_;
    DescriptorField fixed_tokens_;
};

/// Trains the descriptor network on a corpus by Bezier-augmented InfoNCE.
DescriptorNet train_descriptor(const std::vector<ScalarVolume>& corpus, const ContrastiveConfig& cfg,
                               std::uint64_t seed,
                               std::vector<double>* loss_trace = nullptr);

struct LossTraceRow {
    int epoch = 0;
    LossTerms terms;
    double total = 0.0;
};

struct RegistrationResult {
    VectorField map;          // the estimated transform (fixed grid -> moving coords)
    VectorField inverse_map;  // Exp(-v)
    VectorField velocity;
    ScalarVolume warped;  // moving pulled back onto the fixed grid
    std::vector<LossTraceRow> trace;
    double mean_displacement = 0.0;
    double pct_neg_jac = 0.0;
};

/// Instance-specific registration: `epochs` rounds of forward flow, loss,
/// exact reverse-sweep gradient and one Adam step. Deterministic per seed.
/// The descriptor net is required for (and only for) the contrastive metric.
RegistrationResult register_pair(const ScalarVolume& fixed, const ScalarVolume& moving,
                                 const LossConfig& lcfg, const FlowConfig& fcfg,
                                 const KernelSpec& kernel, std::uint64_t seed,
                                 DescriptorNet* descriptor_net = nullptr);

/// Builds the configured similarity metric bound to the fixed image.
std::unique_ptr<SimilarityMetric> make_metric(const ScalarVolume& fixed, const LossConfig& lcfg,
                                              DescriptorNet* descriptor_net);

}  // namespace diffreg
