#pragma once

// Synthetic cardiac-like phantom benchmark. Anatomy (an ellipse disc inside a
// ring with an adjacent crescent) is drawn from one random stream and the
// domain style (gamma, contrast, bias field, noise, inversion) from another,
// so the same seed renders the same mask under every domain.

#include "emfuse/tensor.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

inline const std::vector<std::string>& phantom_class_names() {
    static const std::vector<std::string> names = {"left ventricle", "myocardium", "right ventricle", "background"};
    return names;
}

constexpr int kPhantomClasses = 4;    // background last
constexpr int kPhantomForeground = 3;

struct DomainSpec {
    int id = 0;
    std::string name = "source";
    double gamma = 1.0;
    double contrast = 1.0;
    double noise_sigma = 0.0;
    double bias_amp = 0.0;
    bool invert = false;

    bool is_source() const { return id == 0; }
};

inline DomainSpec source_domain() { return DomainSpec{}; }

inline std::vector<DomainSpec> default_target_domains() {
    std::vector<DomainSpec> specs;
    specs.push_back({1, "gamma", 2.0, 1.0, 0.0, 0.0, false});
    specs.push_back({2, "noise", 1.0, 1.0, 0.25, 0.0, false});
    specs.push_back({3, "bias", 1.0, 1.0, 0.0, 0.3, false});
    specs.push_back({4, "invert", 1.0, 1.0, 0.0, 0.0, true});
    return specs;
}

struct DomainSample {
    Tensor image;  // (1, H, W) in [0, 1]
    Tensor mask;   // (kPhantomClasses, H, W), one-hot per pixel
    int domain = 0;
};

namespace detail {

struct PhantomGeometry {
    double cx, cy;       // shared ellipse center
    double a, b;         // inner semi-axes
    double wall;         // ring thickness
    double theta;        // ellipse rotation
    double rv_cx, rv_cy; // crescent disc center
    double rv_r;         // crescent disc radius
    std::array<double, 3> intensity;  // LV, Myo, RV base levels
    double bg_intensity;
};

inline PhantomGeometry draw_geometry(Rng& rng, int h, int w) {
    PhantomGeometry g;
    g.cx = rng.uniform(0.34 * w, 0.62 * w);
    g.cy = rng.uniform(0.34 * h, 0.62 * h);
    g.a = rng.uniform(0.085 * w, 0.13 * w);
    g.b = rng.uniform(0.085 * h, 0.13 * h);
    g.wall = rng.uniform(0.055 * w, 0.085 * w);
    g.theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    g.rv_r = rng.uniform(0.10 * w, 0.15 * w);
    const double reach = std::max(g.a, g.b) + g.wall + 0.5 * g.rv_r;
    g.rv_cx = g.cx + reach * std::cos(phi);
    g.rv_cy = g.cy + reach * std::sin(phi);
    g.intensity = {0.85 + rng.uniform(-0.03, 0.03), 0.45 + rng.uniform(-0.03, 0.03),
                   0.65 + rng.uniform(-0.03, 0.03)};
    g.bg_intensity = 0.15 + rng.uniform(-0.03, 0.03);
    return g;
}

// Class index per pixel: 0 LV, 1 Myo, 2 RV, 3 background. LV/Myo take
// priority; the crescent is the part of the side disc outside the ring.
inline int classify_pixel(const PhantomGeometry& g, double x, double y) {
    const double dx = x - g.cx, dy = y - g.cy;
    const double u = dx * std::cos(g.theta) + dy * std::sin(g.theta);
    const double v = -dx * std::sin(g.theta) + dy * std::cos(g.theta);
    const double inner = (u / g.a) * (u / g.a) + (v / g.b) * (v / g.b);
    if (inner <= 1.0) return 0;
    const double ao = g.a + g.wall, bo = g.b + g.wall;
    const double outer = (u / ao) * (u / ao) + (v / bo) * (v / bo);
    if (outer <= 1.0) return 1;
    const double rx = x - g.rv_cx, ry = y - g.rv_cy;
    if (rx * rx + ry * ry <= g.rv_r * g.rv_r) return 2;
    return 3;
}

}  // namespace detail

// Deterministic per (seed, spec). Retries degenerate poses (any foreground
// class under 20 pixels) up to 10 times before rejecting.
inline DomainSample gen_sample(std::uint64_t seed, const DomainSpec& spec, int h = 64, int w = 64) {
    Rng anatomy_rng(Rng::derive(seed, 1));
    Rng style_rng(Rng::derive(seed, 2));

    std::vector<int> labels(static_cast<std::size_t>(h) * w);
    detail::PhantomGeometry geom{};
    bool ok = false;
    for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
        geom = detail::draw_geometry(anatomy_rng, h, w);
        std::array<int, kPhantomClasses> counts{};
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int c = detail::classify_pixel(geom, x + 0.5, y + 0.5);
                labels[static_cast<std::size_t>(y) * w + x] = c;
                ++counts[static_cast<std::size_t>(c)];
            }
        }
        ok = counts[0] >= 20 && counts[1] >= 20 && counts[2] >= 20;
    }
    if (!ok) throw std::runtime_error("gen_sample: degenerate phantom geometry after 10 attempts");

    std::vector<double> mask(static_cast<std::size_t>(kPhantomClasses) * h * w, 0.0);
    std::vector<double> image(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int c = labels[i];
        mask[static_cast<std::size_t>(c) * h * w + i] = 1.0;
        image[i] = c < kPhantomForeground ? geom.intensity[static_cast<std::size_t>(c)] : geom.bg_intensity;
    }

    if (spec.gamma != 1.0) {
        for (double& v : image) v = std::pow(std::max(v, 0.0), spec.gamma);
    }
    if (spec.contrast != 1.0) {
        for (double& v : image) v = 0.5 + spec.contrast * (v - 0.5);
    }
    if (spec.bias_amp != 0.0) {
        const double fx = style_rng.uniform(0.5, 1.0), fy = style_rng.uniform(0.5, 1.0);
        const double phase = style_rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double field =
                    std::sin(2.0 * 3.14159265358979323846 * (fx * x / w + fy * y / h) + phase);
                image[static_cast<std::size_t>(y) * w + x] *= 1.0 + spec.bias_amp * field;
            }
        }
    }
    if (spec.invert) {
        for (double& v : image) v = 1.0 - v;
    }
    if (spec.noise_sigma > 0.0) {
        for (double& v : image) v += style_rng.normal(0.0, spec.noise_sigma);
    }
    for (double& v : image) v = std::min(std::max(v, 0.0), 1.0);

    DomainSample sample;
    sample.image = Tensor::from({1, h, w}, std::move(image));
    sample.mask = Tensor::from({kPhantomClasses, h, w}, std::move(mask));
    sample.domain = spec.id;
    return sample;
}

// Stacks per-sample seeds derive(run_seed, index) into batch tensors.
struct Batch {
    Tensor images;  // (B, 1, H, W)
    Tensor masks;   // (B, C, H, W)
};

inline Batch make_batch(std::uint64_t run_seed, std::uint64_t first_index, int batch_size, const DomainSpec& spec,
                        int h = 64, int w = 64) {
    std::vector<double> images(static_cast<std::size_t>(batch_size) * h * w);
    std::vector<double> masks(static_cast<std::size_t>(batch_size) * kPhantomClasses * h * w);
    for (int b = 0; b < batch_size; ++b) {
        DomainSample s = gen_sample(Rng::derive(run_seed, first_index + static_cast<std::uint64_t>(b)), spec, h, w);
        std::copy(s.image.data(), s.image.data() + static_cast<std::size_t>(h) * w,
                  images.begin() + static_cast<std::size_t>(b) * h * w);
        std::copy(s.mask.data(), s.mask.data() + static_cast<std::size_t>(kPhantomClasses) * h * w,
                  masks.begin() + static_cast<std::size_t>(b) * kPhantomClasses * h * w);
    }
    Batch batch;
    batch.images = Tensor::from({batch_size, 1, h, w}, std::move(images));
    batch.masks = Tensor::from({batch_size, kPhantomClasses, h, w}, std::move(masks));
    return batch;
}

}  // namespace emfuse
