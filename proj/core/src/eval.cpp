#include "diffreg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diffreg/grid.hpp"

namespace diffreg {

DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels) {
    require(same_shape(a.shape, b.shape), "dice: shape mismatch");
    DiceResult out;
    double sum = 0.0;
    int counted = 0;
    for (int label : labels) {
        std::size_t na = 0, nb = 0, inter = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            const bool in_a = a.data[i] == label;
            const bool in_b = b.data[i] == label;
            na += in_a;
            nb += in_b;
            inter += in_a && in_b;
        }
        if (na + nb == 0) continue;  // empty in both: excluded from the mean
        const double score = 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
        out.per_label[label] = score;
        sum += score;
        ++counted;
    }
    out.mean = counted ? sum / counted : 0.0;
    return out;
}

double neg_jac_ratio(const VectorField& map) {
    const ScalarVolume det = jacobian_det(map);
    std::size_t folded = 0;
    for (double v : det.data)
        if (v <= 0.0) ++folded;
    return 100.0 * static_cast<double>(folded) / static_cast<double>(det.size());
}

EndpointError endpoint_error(const VectorField& map, const VectorField& truth) {
    require(same_shape(map.shape, truth.shape) && map.channels == truth.channels,
            "endpoint_error: shape mismatch");
    const int d = map.dims();
    const std::size_t n = map.voxels();
    EndpointError out;
    std::size_t counted = 0;
    int x[kMaxDims];
    for (std::size_t i = 0; i < n; ++i) {
        unravel(map.shape, i, x);
        bool interior = true;
        for (int a = 0; a < d; ++a)
            if (x[a] == 0 || x[a] == map.shape[a] - 1) interior = false;
        if (!interior) continue;
        double sq = 0.0;
        for (int a = 0; a < d; ++a) {
            const double diff = map.at(a, i) - truth.at(a, i);
            sq += diff * diff;
        }
        const double e = std::sqrt(sq);
        out.mean += e;
        out.max = std::max(out.max, e);
        ++counted;
    }
    if (counted) out.mean /= static_cast<double>(counted);
    return out;
}

namespace {

struct RankedDiffs {
    std::vector<double> ranks;   // midranks of |d| for nonzero differences
    std::vector<bool> positive;  // sign of each difference
    double w_plus = 0.0;
    double tie_correction = 0.0;  // sum over tie groups of (t^3 - t)
};

RankedDiffs rank_differences(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size(), "wilcoxon: length mismatch");
    std::vector<double> mags;
    std::vector<bool> signs;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        if (d == 0.0) continue;  // classical convention: drop zeros
        mags.push_back(std::abs(d));
        signs.push_back(d > 0.0);
    }
    const std::size_t n = mags.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return mags[a] < mags[b]; });

    RankedDiffs out;
    out.ranks.assign(n, 0.0);
    out.positive.assign(n, false);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && mags[order[j + 1]] == mags[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);
        const double t = static_cast<double>(j - i + 1);
        out.tie_correction += t * t * t - t;
        for (std::size_t k = i; k <= j; ++k) out.ranks[order[k]] = midrank;
        i = j + 1;
    }
    for (std::size_t k = 0; k < n; ++k) {
        out.positive[k] = signs[k];
        if (signs[k]) out.w_plus += out.ranks[k];
    }
    return out;
}

double wilcoxon_exact(const RankedDiffs& r) {
    const std::size_t n = r.ranks.size();
    const std::uint64_t patterns = 1ull << n;
    std::uint64_t at_least = 0;
    for (std::uint64_t mask = 0; mask < patterns; ++mask) {
        double w = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            if (mask & (1ull << k)) w += r.ranks[k];
        if (w >= r.w_plus) ++at_least;
    }
    return static_cast<double>(at_least) / static_cast<double>(patterns);
}

double wilcoxon_normal(const RankedDiffs& r) {
    const double n = static_cast<double>(r.ranks.size());
    const double mu = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - r.tie_correction / 48.0;
    if (var <= 0.0) return 1.0;
    // upper tail with continuity correction
    const double z = (r.w_plus - 0.5 - mu) / std::sqrt(var);
    double p = 0.5 * std::erfc(z / std::sqrt(2.0));
    return std::min(1.0, std::max(p, 1e-300));
}

}  // namespace

double wilcoxon_signed_rank_mode(const std::vector<double>& x, const std::vector<double>& y,
                                 bool exact) {
    const RankedDiffs r = rank_differences(x, y);
    if (r.ranks.empty()) return 1.0;  // all differences zero: degenerate, documented
    return exact ? wilcoxon_exact(r) : wilcoxon_normal(r);
}

double wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() >= 5, "wilcoxon: need n >= 5 samples");
    const RankedDiffs r = rank_differences(x, y);
    if (r.ranks.empty()) return 1.0;
    return r.ranks.size() <= 12 ? wilcoxon_exact(r) : wilcoxon_normal(r);
}

}  // namespace diffreg
