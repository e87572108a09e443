#pragma once

// Training objectives, the hard-mask overlap metric and the dispersion
// statistics used to quantify how much the EM passes compact a feature set.

#include "emfuse/ops.hpp"
#include "emfuse/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace emfuse {

struct LossWeights {
    double bce = 1.0;
    double dice = 0.3;
    double reg = 0.05;

    void validate() const {
        if (bce < 0.0 || dice < 0.0 || reg < 0.0) throw std::invalid_argument("loss weights must be non-negative");
    }
};

namespace detail {

inline void check_binary_targets(const char* op, const Tensor& targets) {
    for (double v : targets.values()) {
        if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(op) + ": targets must be exactly 0 or 1");
    }
}

// (B, C, H, W) summed over batch and space -> (C,).
inline Tensor per_class_sum(const Tensor& x) {
    Tensor s = sum_axis(x, 0);
    s = sum_axis(s, 1);
    return sum_axis(s, 1);
}

}  // namespace detail

// Mean stable-logit binary cross-entropy over all pixels and classes.
inline Tensor bce_loss(const Tensor& logits, const Tensor& targets) {
    detail::check_binary_targets("bce_loss", targets);
    return mean(bce_with_logits(logits, targets));
}

// 1 - mean over classes of the smoothed soft overlap; sums run across the
// whole batch per class.
inline Tensor dice_loss(const Tensor& logits, const Tensor& targets, double eps = 1e-5) {
    detail::check_binary_targets("dice_loss", targets);
    if (logits.rank() != 4 || logits.shape() != targets.shape()) {
        throw std::invalid_argument("dice_loss: expected matching (B,C,H,W), got " + shape_str(logits.shape()) +
                                    " vs " + shape_str(targets.shape()));
    }
    Tensor probs = sigmoid(logits);
    Tensor inter = detail::per_class_sum(mul(probs, targets));
    Tensor denom = add(detail::per_class_sum(probs), detail::per_class_sum(targets));
    Tensor dsc = div(add_scalar(scale(inter, 2.0), eps), add_scalar(denom, eps));
    return sub(Tensor::scalar(1.0), mean(dsc));
}

inline Tensor seg_loss(const Tensor& logits, const Tensor& targets, const LossWeights& w) {
    w.validate();
    return add(scale(bce_loss(logits, targets), w.bce), scale(dice_loss(logits, targets), w.dice));
}

inline Tensor total_loss(const Tensor& seg, const Tensor& reg, const LossWeights& w) {
    w.validate();
    return add(seg, scale(reg, w.reg));
}

// Hard-mask overlap 2|P&G| / (|P|+|G|); both masks empty counts as a perfect
// score by convention.
inline double dsc_metric(const std::vector<double>& pred, const std::vector<double>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("dsc_metric: size mismatch");
    double inter = 0.0, p = 0.0, g = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] != 0.0 && pred[i] != 1.0) throw std::invalid_argument("dsc_metric: prediction mask not hard");
        if (gt[i] != 0.0 && gt[i] != 1.0) throw std::invalid_argument("dsc_metric: ground-truth mask not hard");
        inter += pred[i] * gt[i];
        p += pred[i];
        g += gt[i];
    }
    if (p + g == 0.0) return 1.0;
    return 2.0 * inter / (p + g);
}

// ---------------------------------------------------------------------------
// Dispersion
// ---------------------------------------------------------------------------

struct DispersionStats {
    double variance = 0.0;   // mean per-dimension population variance
    double tightness = 0.0;  // mean distance to assigned hard-k-means center
};

// Variance plus a 20-iteration seeded hard k-means tightness probe.
inline DispersionStats dispersion(const Tensor& features, int k, Rng& rng, int iterations = 20) {
    if (features.rank() != 2) throw std::invalid_argument("dispersion: expected N x d features");
    const int n = features.shape()[0], d = features.shape()[1];
    if (n < k || k < 1) throw std::invalid_argument("dispersion: need 1 <= K <= N");
    const double* x = features.data();

    DispersionStats stats;
    std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i) * d + j];
    }
    for (double& m : mu) m /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            const double dev = x[static_cast<std::size_t>(i) * d + j] - mu[static_cast<std::size_t>(j)];
            var += dev * dev;
        }
    }
    stats.variance = var / (static_cast<double>(n) * d);

    std::vector<double> centers(static_cast<std::size_t>(k) * d);
    const std::vector<int> seeds = rng.sample_distinct(n, k);
    for (int c = 0; c < k; ++c) {
        const double* src = x + static_cast<std::size_t>(seeds[static_cast<std::size_t>(c)]) * d;
        std::copy(src, src + d, centers.begin() + static_cast<std::size_t>(c) * d);
    }
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < iterations; ++it) {
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int c = 0; c < k; ++c) {
                double dist = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double dev = x[static_cast<std::size_t>(i) * d + j] -
                                       centers[static_cast<std::size_t>(c) * d + j];
                    dist += dev * dev;
                }
                if (dist < best) {
                    best = dist;
                    arg = c;
                }
            }
            assign[static_cast<std::size_t>(i)] = arg;
        }
        std::vector<double> acc(static_cast<std::size_t>(k) * d, 0.0);
        std::vector<int> count(static_cast<std::size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int c = assign[static_cast<std::size_t>(i)];
            ++count[static_cast<std::size_t>(c)];
            for (int j = 0; j < d; ++j) {
                acc[static_cast<std::size_t>(c) * d + j] += x[static_cast<std::size_t>(i) * d + j];
            }
        }
        for (int c = 0; c < k; ++c) {
            if (count[static_cast<std::size_t>(c)] == 0) continue;  // empty cluster keeps its center
            for (int j = 0; j < d; ++j) {
                centers[static_cast<std::size_t>(c) * d + j] =
                    acc[static_cast<std::size_t>(c) * d + j] / count[static_cast<std::size_t>(c)];
            }
        }
    }
    double tight = 0.0;
    for (int i = 0; i < n; ++i) {
        const int c = assign[static_cast<std::size_t>(i)];
        double dist = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dev = x[static_cast<std::size_t>(i) * d + j] - centers[static_cast<std::size_t>(c) * d + j];
            dist += dev * dev;
        }
        tight += std::sqrt(dist);
    }
    stats.tightness = tight / n;
    return stats;
}

struct DispersionPair {
    DispersionStats before;
    DispersionStats after;

    double variance_reduction_pct() const {
        return before.variance > 0.0 ? 100.0 * (before.variance - after.variance) / before.variance : 0.0;
    }
    double tightness_reduction_pct() const {
        return before.tightness > 0.0 ? 100.0 * (before.tightness - after.tightness) / before.tightness : 0.0;
    }
};

inline nlohmann::json to_json(const DispersionStats& s) {
    return {{"variance", s.variance}, {"tightness", s.tightness}};
}

inline nlohmann::json to_json(const DispersionPair& p) {
    return {{"before", to_json(p.before)},
            {"after", to_json(p.after)},
            {"variance_reduction_pct", p.variance_reduction_pct()},
            {"tightness_reduction_pct", p.tightness_reduction_pct()}};
}

}  // namespace emfuse
