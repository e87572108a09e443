#include <catch2/catch_amalgamated.hpp>

#include "emfuse/phantom.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

using namespace emfuse;
using Catch::Matchers::WithinAbs;

TEST_CASE("domain roster is a neutral source plus four styled targets") {
    DomainSpec src = source_domain();
    REQUIRE(src.id == 0);
    REQUIRE(src.is_source());
    REQUIRE(src.gamma == 1.0);
    REQUIRE(src.contrast == 1.0);
    REQUIRE(src.noise_sigma == 0.0);
    REQUIRE(src.bias_amp == 0.0);
    REQUIRE_FALSE(src.invert);

    std::vector<DomainSpec> targets = default_target_domains();
    REQUIRE(targets.size() == 4);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        REQUIRE(targets[i].id == static_cast<int>(i) + 1);
        REQUIRE_FALSE(targets[i].is_source());
    }
    REQUIRE(targets[0].gamma == 2.0);
    REQUIRE(targets[1].noise_sigma == 0.25);
    REQUIRE(targets[2].bias_amp == 0.3);
    REQUIRE(targets[3].invert);

    REQUIRE(phantom_class_names().size() == kPhantomClasses);
    REQUIRE(phantom_class_names().back() == "background");
    REQUIRE(kPhantomForeground == 3);
}

TEST_CASE("samples are deterministic per seed and spec") {
    DomainSample a = gen_sample(77, source_domain());
    DomainSample b = gen_sample(77, source_domain());
    REQUIRE(a.image.values() == b.image.values());
    REQUIRE(a.mask.values() == b.mask.values());
    REQUIRE(a.domain == 0);

    DomainSample c = gen_sample(78, source_domain());
    REQUIRE(a.image.values() != c.image.values());

    REQUIRE(a.image.shape() == Shape{1, 64, 64});
    REQUIRE(a.mask.shape() == Shape{kPhantomClasses, 64, 64});
}

TEST_CASE("style shifts move pixels but never the anatomy") {
    DomainSample src = gen_sample(123, source_domain());
    for (const DomainSpec& spec : default_target_domains()) {
        DomainSample shifted = gen_sample(123, spec);
        REQUIRE(shifted.domain == spec.id);
        REQUIRE(shifted.mask.values() == src.mask.values());
        REQUIRE(shifted.image.values() != src.image.values());
    }
}

TEST_CASE("masks are one-hot with enough support per class") {
    for (std::uint64_t seed : {5ull, 6ull, 7ull, 8ull}) {
        DomainSample s = gen_sample(seed, source_domain());
        std::vector<int> counts(kPhantomClasses, 0);
        for (int p = 0; p < 64 * 64; ++p) {
            double total = 0.0;
            for (int c = 0; c < kPhantomClasses; ++c) {
                const double v = s.mask.values()[static_cast<std::size_t>(c) * 64 * 64 + p];
                REQUIRE((v == 0.0 || v == 1.0));
                total += v;
                if (v == 1.0) ++counts[static_cast<std::size_t>(c)];
            }
            REQUIRE(total == 1.0);
        }
        for (int c = 0; c < kPhantomForeground; ++c) REQUIRE(counts[static_cast<std::size_t>(c)] >= 20);
    }
}

TEST_CASE("images stay inside the unit intensity range") {
    std::vector<DomainSpec> specs = default_target_domains();
    specs.push_back(source_domain());
    for (const DomainSpec& spec : specs) {
        DomainSample s = gen_sample(31, spec);
        for (double v : s.image.values()) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("gamma shift squares the region intensities") {
    DomainSample src = gen_sample(55, source_domain());
    DomainSample gam = gen_sample(55, default_target_domains()[0]);
    REQUIRE(default_target_domains()[0].gamma == 2.0);

    for (int c = 0; c < kPhantomForeground; ++c) {
        double src_mean = 0.0, gam_mean = 0.0;
        int n = 0;
        for (int p = 0; p < 64 * 64; ++p) {
            if (src.mask.values()[static_cast<std::size_t>(c) * 64 * 64 + p] == 1.0) {
                src_mean += src.image.values()[static_cast<std::size_t>(p)];
                gam_mean += gam.image.values()[static_cast<std::size_t>(p)];
                ++n;
            }
        }
        src_mean /= n;
        gam_mean /= n;
        REQUIRE_THAT(gam_mean, WithinAbs(src_mean * src_mean, 1e-12));
    }
}

TEST_CASE("inversion mirrors intensities around one") {
    DomainSample src = gen_sample(56, source_domain());
    DomainSample inv = gen_sample(56, default_target_domains()[3]);
    for (std::size_t i = 0; i < src.image.values().size(); ++i) {
        REQUIRE_THAT(inv.image.values()[i], WithinAbs(1.0 - src.image.values()[i], 1e-12));
    }
}

TEST_CASE("noise perturbs pixels around the clean rendering") {
    DomainSample src = gen_sample(57, source_domain());
    DomainSample noisy = gen_sample(57, default_target_domains()[1]);
    double mean_abs_dev = 0.0;
    for (std::size_t i = 0; i < src.image.values().size(); ++i) {
        mean_abs_dev += std::abs(noisy.image.values()[i] - src.image.values()[i]);
    }
    mean_abs_dev /= static_cast<double>(src.image.values().size());
    // sigma 0.25 implies mean |N(0, 0.25)| = 0.25 sqrt(2/pi) ~ 0.20, minus clamping
    REQUIRE(mean_abs_dev > 0.08);
    REQUIRE(mean_abs_dev < 0.3);
}

TEST_CASE("batches stack per-sample derived seeds") {
    Batch batch = make_batch(900, 5, 3, source_domain());
    REQUIRE(batch.images.shape() == Shape{3, 1, 64, 64});
    REQUIRE(batch.masks.shape() == Shape{3, kPhantomClasses, 64, 64});
    for (int b = 0; b < 3; ++b) {
        DomainSample s = gen_sample(Rng::derive(900, 5 + static_cast<std::uint64_t>(b)), source_domain());
        for (int p = 0; p < 64 * 64; ++p) {
            REQUIRE(batch.images.values()[static_cast<std::size_t>(b) * 64 * 64 + p] ==
                    s.image.values()[static_cast<std::size_t>(p)]);
        }
        for (int q = 0; q < kPhantomClasses * 64 * 64; ++q) {
            REQUIRE(batch.masks.values()[static_cast<std::size_t>(b) * kPhantomClasses * 64 * 64 + q] ==
                    s.mask.values()[static_cast<std::size_t>(q)]);
        }
    }
}

TEST_CASE("undersized canvases are rejected as degenerate") {
    REQUIRE_THROWS(gen_sample(1, source_domain(), 8, 8));
}
