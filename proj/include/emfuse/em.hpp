#pragma once

// Expectation-maximization feature aggregation. A few unrolled soft-clustering
// rounds pull features toward shared prototypes; the blended output trades the
// input against its reconstruction from those prototypes. Two presets: a text
// instance that fully replaces its inputs and a per-image visual instance that
// nudges patch features.

#include "emfuse/ops.hpp"
#include "emfuse/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace emfuse {

enum class EmInit { SeededSample, FirstK, MeanJitter };

struct EmConfig {
    int clusters = 8;
    int stages = 6;
    double temperature = 0.05;
    double alpha = 1.0;
    EmInit init = EmInit::FirstK;
};

inline EmConfig text_em_defaults() {
    EmConfig cfg;
    cfg.clusters = 8;
    cfg.stages = 6;
    cfg.temperature = 1.0;
    cfg.alpha = 1.0;
    cfg.init = EmInit::FirstK;
    return cfg;
}

inline EmConfig vision_em_defaults() {
    EmConfig cfg;
    cfg.clusters = 6;
    cfg.stages = 1;
    cfg.temperature = 0.05;
    cfg.alpha = 0.1;
    cfg.init = EmInit::MeanJitter;
    return cfg;
}

inline void validate_em_config(const EmConfig& cfg) {
    if (cfg.clusters < 1) throw std::invalid_argument("em: clusters must be >= 1");
    if (cfg.stages < 1) throw std::invalid_argument("em: stages must be >= 1");
    if (cfg.temperature <= 0.0) throw std::invalid_argument("em: temperature must be positive");
    if (cfg.alpha < 0.0 || cfg.alpha > 1.0) throw std::invalid_argument("em: alpha must lie in [0,1]");
}

// z_nk = softmax_k(x_n . mu_k / tau), rows sum to 1.
inline Tensor e_step(const Tensor& features, const Tensor& prototypes, double tau) {
    if (features.rank() != 2 || prototypes.rank() != 2 || features.shape()[1] != prototypes.shape()[1]) {
        throw std::invalid_argument("e_step: shape mismatch " + shape_str(features.shape()) + " vs " +
                                    shape_str(prototypes.shape()));
    }
    return softmax(matmul(features, transpose(prototypes)), 1, tau);
}

// mu_k = sum_n z_nk x_n / (sum_n z_nk + 1e-8); the guard keeps empty clusters
// finite at the cost of pulling them toward zero.
inline Tensor m_step(const Tensor& features, const Tensor& assignments) {
    if (features.rank() != 2 || assignments.rank() != 2 || features.shape()[0] != assignments.shape()[0]) {
        throw std::invalid_argument("m_step: shape mismatch " + shape_str(features.shape()) + " vs " +
                                    shape_str(assignments.shape()));
    }
    Tensor numerator = matmul(transpose(assignments), features);
    Tensor mass = sum_axis(assignments, 0);
    return scale_rows(numerator, reciprocal(add_scalar(mass, 1e-8)));
}

// x_hat = z . mu: each feature rebuilt as a convex combination of prototypes.
inline Tensor reconstruct(const Tensor& assignments, const Tensor& prototypes) {
    if (assignments.rank() != 2 || prototypes.rank() != 2 || assignments.shape()[1] != prototypes.shape()[0]) {
        throw std::invalid_argument("reconstruct: shape mismatch " + shape_str(assignments.shape()) + " vs " +
                                    shape_str(prototypes.shape()));
    }
    return matmul(assignments, prototypes);
}

namespace detail {

// K x d standard normals; the shared perturbation for mean-jitter inits.
inline Tensor draw_jitter(int clusters, int dim, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(clusters) * dim);
    for (double& x : v) x = rng.normal();
    return Tensor::from({clusters, dim}, std::move(v));
}

// Detached prototypes: element mean plus jitter scaled by the per-dim spread.
// Both statistics are permutation-invariant over rows, which is what makes
// the visual instance equivariant.
inline Tensor mean_jitter_prototypes(const Tensor& features, const Tensor& jitter) {
    const int n = features.shape()[0], d = features.shape()[1];
    const int k = jitter.shape()[0];
    std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
    std::vector<double> sd(static_cast<std::size_t>(d), 0.0);
    const double* x = features.data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i) * d + j];
    }
    for (double& m : mu) m /= n;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            const double dev = x[static_cast<std::size_t>(i) * d + j] - mu[static_cast<std::size_t>(j)];
            sd[static_cast<std::size_t>(j)] += dev * dev;
        }
    }
    for (double& s : sd) s = std::sqrt(s / n);
    std::vector<double> out(static_cast<std::size_t>(k) * d);
    const double* jv = jitter.data();
    for (int c = 0; c < k; ++c) {
        for (int j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(c) * d + j] =
                mu[static_cast<std::size_t>(j)] + 0.5 * sd[static_cast<std::size_t>(j)] * jv[static_cast<std::size_t>(c) * d + j];
        }
    }
    return Tensor::from({k, d}, std::move(out));
}

}  // namespace detail

// Detached starting prototypes. Sample-based strategies copy feature rows;
// mean-jitter perturbs the feature mean so the start does not depend on row
// order.
inline Tensor init_prototypes(const Tensor& features, const EmConfig& cfg, Rng& rng) {
    validate_em_config(cfg);
    if (features.rank() != 2) throw std::invalid_argument("init_prototypes: expected N x d features");
    const int n = features.shape()[0], d = features.shape()[1];
    if (n < cfg.clusters) {
        throw std::invalid_argument("init_prototypes: need at least K=" + std::to_string(cfg.clusters) +
                                    " features, got " + std::to_string(n));
    }
    std::vector<int> rows;
    switch (cfg.init) {
        case EmInit::FirstK:
            for (int i = 0; i < cfg.clusters; ++i) rows.push_back(i);
            break;
        case EmInit::SeededSample:
            rows = rng.sample_distinct(n, cfg.clusters);
            break;
        case EmInit::MeanJitter:
            return detail::mean_jitter_prototypes(features, detail::draw_jitter(cfg.clusters, d, rng));
    }
    std::vector<double> out(static_cast<std::size_t>(cfg.clusters) * d);
    for (int c = 0; c < cfg.clusters; ++c) {
        const double* src = features.data() + static_cast<std::size_t>(rows[static_cast<std::size_t>(c)]) * d;
        std::copy(src, src + d, out.begin() + static_cast<std::size_t>(c) * d);
    }
    return Tensor::from({cfg.clusters, d}, std::move(out));
}

struct EmResult {
    Tensor out;
    Tensor assignments;
    Tensor prototypes;
};

namespace detail {

inline EmResult em_unroll(const Tensor& features, Tensor prototypes, const EmConfig& cfg) {
    Tensor assignments;
    for (int s = 0; s < cfg.stages; ++s) {
        assignments = e_step(features, prototypes, cfg.temperature);
        prototypes = m_step(features, assignments);
    }
    Tensor rebuilt = reconstruct(assignments, prototypes);
    EmResult res;
    res.out = add(features, scale(sub(rebuilt, features), cfg.alpha));
    res.assignments = assignments;
    res.prototypes = prototypes;
    return res;
}

}  // namespace detail

// Full pipeline on one N x d feature set: init, cfg.stages rounds of
// e_step/m_step, one reconstruction, residual blend x + alpha (x_hat - x).
inline EmResult em_aggregate(const Tensor& features, const EmConfig& cfg, Rng& rng) {
    return detail::em_unroll(features, init_prototypes(features, cfg, rng), cfg);
}

// Same unroll but with caller-supplied starting prototypes. Gradient checks
// use this to pin the (deliberately non-differentiable) init while probing
// the rest of the pipeline.
inline EmResult em_with_init(const Tensor& features, const Tensor& mu0, const EmConfig& cfg) {
    validate_em_config(cfg);
    if (features.rank() != 2 || mu0.rank() != 2 || mu0.shape()[0] != cfg.clusters ||
        mu0.shape()[1] != features.shape()[1]) {
        throw std::invalid_argument("em_with_init: shape mismatch " + shape_str(features.shape()) + " vs " +
                                    shape_str(mu0.shape()));
    }
    return detail::em_unroll(features, mu0.detached(), cfg);
}

// Text instance. Falls back to K = C when there are fewer queries than the
// configured cluster count.
inline EmResult t_ema(const Tensor& queries, EmConfig cfg, Rng& rng) {
    if (queries.rank() != 2) throw std::invalid_argument("t_ema: expected C x d queries");
    if (queries.shape()[0] < cfg.clusters) cfg.clusters = queries.shape()[0];
    return em_aggregate(queries, cfg, rng);
}

struct VemaResult {
    Tensor out;
    std::vector<EmResult> per_item;
};

// Per-item starting prototypes, sharing one jitter or sample draw across the
// batch so identical elements start identically.
inline std::vector<Tensor> v_ema_inits(const Tensor& patches, EmConfig cfg, Rng& rng) {
    if (patches.rank() != 3) throw std::invalid_argument("v_ema: expected B x N x d patches");
    const int batch = patches.shape()[0], n = patches.shape()[1], d = patches.shape()[2];
    if (n < cfg.clusters) cfg.clusters = n;
    validate_em_config(cfg);
    Tensor jitter;
    std::vector<int> sample_rows;
    switch (cfg.init) {
        case EmInit::MeanJitter:
            jitter = detail::draw_jitter(cfg.clusters, d, rng);
            break;
        case EmInit::SeededSample:
            sample_rows = rng.sample_distinct(n, cfg.clusters);
            break;
        case EmInit::FirstK:
            break;
    }
    std::vector<Tensor> inits;
    for (int b = 0; b < batch; ++b) {
        const double* item = patches.data() + static_cast<std::size_t>(b) * n * d;
        if (cfg.init == EmInit::MeanJitter) {
            Tensor view = Tensor::from({n, d}, std::vector<double>(item, item + static_cast<std::size_t>(n) * d));
            inits.push_back(detail::mean_jitter_prototypes(view, jitter));
        } else {
            const std::vector<int>* rows = cfg.init == EmInit::SeededSample ? &sample_rows : nullptr;
            std::vector<double> out(static_cast<std::size_t>(cfg.clusters) * d);
            for (int c = 0; c < cfg.clusters; ++c) {
                const int r = rows ? (*rows)[static_cast<std::size_t>(c)] : c;
                std::copy(item + static_cast<std::size_t>(r) * d, item + static_cast<std::size_t>(r + 1) * d,
                          out.begin() + static_cast<std::size_t>(c) * d);
            }
            inits.push_back(Tensor::from({cfg.clusters, d}, std::move(out)));
        }
    }
    return inits;
}

// Unrolls each batch element from the supplied starting prototypes.
inline VemaResult v_ema_with_inits(const Tensor& patches, const std::vector<Tensor>& inits, EmConfig cfg) {
    if (patches.rank() != 3) throw std::invalid_argument("v_ema: expected B x N x d patches");
    const int batch = patches.shape()[0], n = patches.shape()[1], d = patches.shape()[2];
    if (n < cfg.clusters) cfg.clusters = n;
    validate_em_config(cfg);
    if (static_cast<int>(inits.size()) != batch) {
        throw std::invalid_argument("v_ema: expected " + std::to_string(batch) + " prototype inits, got " +
                                    std::to_string(inits.size()));
    }
    VemaResult res;
    std::vector<Tensor> slices;
    for (int b = 0; b < batch; ++b) {
        EmResult r = detail::em_unroll(select(patches, b), inits[static_cast<std::size_t>(b)].detached(), cfg);
        slices.push_back(reshape(r.out, {1, n, d}));
        res.per_item.push_back(std::move(r));
    }
    res.out = concat(slices, 0);
    return res;
}

// Visual instance over B x N x d patch features, run independently per batch
// element. The jitter is drawn once per call so identical elements refine
// identically, and the K = N fallback mirrors t_ema.
inline VemaResult v_ema(const Tensor& patches, EmConfig cfg, Rng& rng) {
    return v_ema_with_inits(patches, v_ema_inits(patches, cfg, rng), cfg);
}

}  // namespace emfuse
