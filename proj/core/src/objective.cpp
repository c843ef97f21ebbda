#include "diffreg/objective.hpp"

#include <algorithm>
#include <cmath>

#include "diffreg/grid.hpp"

namespace diffreg {

double bezier_eval(const BezierCurve& curve, double t) {
    curve.validate();
    require(t >= 0.0 && t <= 1.0, "bezier_eval: t must lie in [0,1]");
    const int n = curve.degree();
    // Bernstein basis via the binomial recurrence
    double value = 0.0;
    double binom = 1.0;
    for (int i = 0; i <= n; ++i) {
        const double basis = binom * std::pow(t, i) * std::pow(1.0 - t, n - i);
        value += curve.points[static_cast<std::size_t>(i)] * basis;
        binom = binom * (n - i) / (i + 1.0);
    }
    return value;
}

ScalarVolume apply_intensity_map(const ScalarVolume& image, const BezierCurve& curve, bool invert) {
    curve.validate();
    ScalarVolume out = image;
    for (double& v : out.data) {
        double t = invert ? 1.0 - v : v;
        t = std::clamp(t, 0.0, 1.0);
        v = bezier_eval(curve, t);
    }
    return out;
}

ScalarVolume augment_modality(const ScalarVolume& image, const ContrastiveConfig& cfg, Rng& rng) {
    cfg.validate();
    BezierCurve curve;
    curve.points.resize(static_cast<std::size_t>(cfg.bezier_degree) + 1);
    for (double& p : curve.points) p = rng.uniform();
    std::sort(curve.points.begin(), curve.points.end());
    const bool invert = rng.uniform() < cfg.invert_probability;
    return apply_intensity_map(image, curve, invert);
}

ScalarVolume augment_modality(const ScalarVolume& image, const ContrastiveConfig& cfg,
                              std::uint64_t seed) {
    Rng rng(seed);
    return augment_modality(image, cfg, rng);
}

double infonce_loss(const TokenMatrix& anchors, const TokenMatrix& others, double tau,
                    TokenMatrix* grad_anchors, TokenMatrix* grad_others) {
    require(anchors.count == others.count && anchors.channels == others.channels,
            "infonce_loss: token matrices must have matching shapes");
    require(tau > 0.0, "infonce_loss: tau must be positive");
    const int n = anchors.count;
    const int c = anchors.channels;
    require(n >= 1, "infonce_loss: need at least one sampled position");

    if (grad_anchors) *grad_anchors = TokenMatrix(n, c);
    if (grad_others) *grad_others = TokenMatrix(n, c);

    std::vector<double> sims(static_cast<std::size_t>(n));
    std::vector<double> probs(static_cast<std::size_t>(n));
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < c; ++k) s += anchors.at(i, k) * others.at(j, k);
            sims[static_cast<std::size_t>(j)] = s / tau;
            mx = std::max(mx, sims[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            probs[static_cast<std::size_t>(j)] = std::exp(sims[static_cast<std::size_t>(j)] - mx);
            z += probs[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < n; ++j) probs[static_cast<std::size_t>(j)] /= z;
        // -l(x_i) = logsumexp - s_ii
        loss += (std::log(z) + mx - sims[static_cast<std::size_t>(i)]) / n;

        if (grad_anchors || grad_others) {
            for (int j = 0; j < n; ++j) {
                const double gs = (probs[static_cast<std::size_t>(j)] - (i == j ? 1.0 : 0.0)) /
                                  (tau * n);
                if (gs == 0.0) continue;
                for (int k = 0; k < c; ++k) {
                    if (grad_anchors) grad_anchors->at(i, k) += gs * others.at(j, k);
                    if (grad_others) grad_others->at(j, k) += gs * anchors.at(i, k);
                }
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// contrastive metric on frozen features

ContrastiveMetric::ContrastiveMetric(const ScalarVolume& fixed, DescriptorNet* net,
                                     std::vector<int> dilations)
    : net_(net), dilations_(std::move(dilations)) {
    require(net_ != nullptr, "ContrastiveMetric: descriptor network required");
    fixed_tokens_ = token_from_features(net_->forward(fixed), dilations_);
}

double ContrastiveMetric::evaluate(const ScalarVolume& warped, ScalarVolume* grad) const {
    DescriptorNet::Tape tape;
    const ScalarVolume features = net_->forward(warped, grad ? &tape : nullptr);
    const DescriptorField tokens = token_from_features(features, dilations_);
    const double loss = descriptor_cosine_dissim(tokens, fixed_tokens_);
    if (grad) {
        const std::size_t n = tokens.voxels();
        DescriptorField grad_tokens(tokens.shape, tokens.channels);
        const double scale = -1.0 / static_cast<double>(n);
        for (int ch = 0; ch < tokens.channels; ++ch)
            for (std::size_t i = 0; i < n; ++i)
                grad_tokens.at(ch, i) = scale * fixed_tokens_.at(ch, i);
        ScalarVolume grad_features(features.shape);
        token_from_features_vjp(features, dilations_, grad_tokens, grad_features);
        *grad = net_->backward(tape, grad_features, /*accumulate_params=*/false);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// descriptor pretraining

DescriptorNet train_descriptor(const std::vector<ScalarVolume>& corpus, const ContrastiveConfig& cfg,
                               std::uint64_t seed, std::vector<double>* loss_trace) {
    cfg.validate();
    require(!corpus.empty(), "train_descriptor: corpus is empty");
    const int dims = corpus.front().dims();
    for (const auto& vol : corpus)
        require(vol.dims() == dims, "train_descriptor: corpus ranks differ");

    Rng rng(seed);
    DescriptorNet net(dims);
    net.init_random(rng);
    const std::vector<int> dilations = {1, 2};

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const ScalarVolume& image = corpus[static_cast<std::size_t>(rng.below(corpus.size()))];
        const std::size_t nvox = image.size();
        require(static_cast<std::size_t>(cfg.sample_count) <= nvox,
                "train_descriptor: N_k exceeds the voxel count");
        const ScalarVolume augmented = augment_modality(image, cfg, rng);

        DescriptorNet::Tape tape0, tape1;
        const ScalarVolume f0 = net.forward(image, &tape0);
        const ScalarVolume f1 = net.forward(augmented, &tape1);
        const DescriptorField tok0 = token_from_features(f0, dilations);
        const DescriptorField tok1 = token_from_features(f1, dilations);

        const auto positions = rng.sample_without_replacement(nvox, static_cast<std::size_t>(cfg.sample_count));
        TokenMatrix anchors(cfg.sample_count, tok0.channels);
        TokenMatrix others(cfg.sample_count, tok1.channels);
        for (int i = 0; i < cfg.sample_count; ++i)
            for (int ch = 0; ch < tok0.channels; ++ch) {
                anchors.at(i, ch) = tok0.at(ch, positions[static_cast<std::size_t>(i)]);
                others.at(i, ch) = tok1.at(ch, positions[static_cast<std::size_t>(i)]);
            }

        TokenMatrix ga, go;
        const double loss = infonce_loss(anchors, others, cfg.tau, &ga, &go);
        if (!std::isfinite(loss))
            throw NumericalError("train_descriptor: non-finite loss at iteration " +
                                 std::to_string(iter));
        if (loss_trace) loss_trace->push_back(loss);

        DescriptorField grad_tok0(tok0.shape, tok0.channels);
        DescriptorField grad_tok1(tok1.shape, tok1.channels);
        for (int i = 0; i < cfg.sample_count; ++i)
            for (int ch = 0; ch < tok0.channels; ++ch) {
                grad_tok0.at(ch, positions[static_cast<std::size_t>(i)]) += ga.at(i, ch);
                grad_tok1.at(ch, positions[static_cast<std::size_t>(i)]) += go.at(i, ch);
            }

        net.params().zero_grads();
        ScalarVolume gf0(f0.shape), gf1(f1.shape);
        token_from_features_vjp(f0, dilations, grad_tok0, gf0);
        token_from_features_vjp(f1, dilations, grad_tok1, gf1);
        net.backward(tape0, gf0, /*accumulate_params=*/true);
        net.backward(tape1, gf1, /*accumulate_params=*/true);
        adam_step(net.params(), cfg.lr);
    }
    return net;
}

// ---------------------------------------------------------------------------
// registration

std::unique_ptr<SimilarityMetric> make_metric(const ScalarVolume& fixed, const LossConfig& lcfg,
                                              DescriptorNet* descriptor_net) {
    if (lcfg.metric == "mind") {
        return std::make_unique<MindMetric>(
            fixed, SearchScheme::make(fixed.dims(), lcfg.mind_radius, lcfg.mind_dilation));
    }
    if (lcfg.metric == "lmi") {
        LmiSpec spec;
        spec.bins = lcfg.lmi_bins;
        spec.patch_side = lcfg.lmi_patch_side;
        spec.bandwidth = lcfg.lmi_bandwidth;
        return std::make_unique<LmiMetric>(fixed, spec);
    }
    if (lcfg.metric == "contrastive") {
        require(descriptor_net != nullptr,
                "register: the contrastive metric needs a trained descriptor checkpoint");
        return std::make_unique<ContrastiveMetric>(fixed, descriptor_net);
    }
    throw Error("register: unknown metric '" + lcfg.metric + "'");
}

namespace {

void check_normalized(const ScalarVolume& image, const char* which) {
    double lo = 1e300, hi = -1e300;
    for (double v : image.data) {
        require(std::isfinite(v), std::string("register: non-finite intensity in ") + which);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    require(lo >= -1e-9 && hi <= 1.0 + 1e-9,
            std::string("register: ") + which + " intensities must be normalized to [0,1]");
}

const char* first_non_finite(const LossTerms& terms, const LossConfig& cfg) {
    if (!std::isfinite(terms.similarity)) return "similarity";
    if (!std::isfinite(terms.jacobian)) return "jacobian penalty";
    if (!std::isfinite(terms.smoothness)) return "gradient smoothness";
    if (!std::isfinite(terms.magnitude)) return "velocity magnitude";
    if (!std::isfinite(terms.total(cfg))) return "total";
    return nullptr;
}

}  // namespace

RegistrationResult register_pair(const ScalarVolume& fixed, const ScalarVolume& moving,
                                 const LossConfig& lcfg, const FlowConfig& fcfg,
                                 const KernelSpec& kernel, std::uint64_t seed,
                                 DescriptorNet* descriptor_net) {
    lcfg.validate();
    require(same_shape(fixed.shape, moving.shape), "register: fixed/moving shapes differ");
    check_normalized(fixed, "fixed");
    check_normalized(moving, "moving");

    KernelSpec kspec = kernel;
    kspec.shape = fixed.shape;
    if (kspec.spacing.empty()) kspec.spacing = fixed.spacing;

    auto metric = make_metric(fixed, lcfg, descriptor_net);

    Rng rng(seed);
    VelocityNet net(kspec);
    net.init_random(rng);

    RegistrationResult result;
    result.trace.reserve(static_cast<std::size_t>(lcfg.epochs));
    for (int epoch = 0; epoch < lcfg.epochs; ++epoch) {
        net.params().zero_grads();
        const LossTerms terms = loss_gradient_wrt_params(net, moving, *metric, lcfg, fcfg);
        if (const char* bad = first_non_finite(terms, lcfg))
            throw NumericalError("register: non-finite " + std::string(bad) + " at epoch " +
                                 std::to_string(epoch));
        result.trace.push_back({epoch, terms, terms.total(lcfg)});
        adam_step(net.params(), lcfg.lr);
    }

    result.velocity = net.forward();
    result.map = integrate_flow(result.velocity, fcfg);
    result.inverse_map = integrate_inverse(result.velocity, fcfg);
    result.warped = warp(moving, result.map);

    const std::size_t n = result.map.voxels();
    const int d = result.map.dims();
    const VectorField id = identity_map(result.map.shape);
    double disp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int a = 0; a < d; ++a) {
            const double u = result.map.at(a, i) - id.at(a, i);
            sq += u * u;
        }
        disp += std::sqrt(sq);
    }
    result.mean_displacement = disp / static_cast<double>(n);

    const ScalarVolume det = jacobian_det(result.map);
    std::size_t folded = 0;
    for (double v : det.data)
        if (v <= 0.0) ++folded;
    result.pct_neg_jac = 100.0 * static_cast<double>(folded) / static_cast<double>(n);
    return result;
}

}  // namespace diffreg
