#include <catch2/catch_amalgamated.hpp>

#include "emfuse/gradsuite.hpp"
#include "emfuse/ops.hpp"

#include <array>
#include <cmath>
#include <vector>

using namespace emfuse;
using Catch::Matchers::WithinAbs;

TEST_CASE("broadcast rules: same shape, scalar, suffix") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row = Tensor::from({3}, {10, 20, 30});
    Tensor s = Tensor::scalar(100.0);

    Tensor r1 = add(a, row);
    REQUIRE(r1.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    Tensor r2 = add(a, s);
    REQUIRE(r2.values() == std::vector<double>{101, 102, 103, 104, 105, 106});
    Tensor r3 = mul(a, a);
    REQUIRE(r3.values() == std::vector<double>{1, 4, 9, 16, 25, 36});

    REQUIRE_THROWS_AS(add(a, Tensor::from({2}, {1, 2})), std::invalid_argument);
    REQUIRE_THROWS_AS(add(row, a), std::invalid_argument);  // prefix, not suffix
}

TEST_CASE("suffix broadcast adjoint reduces over leading axes") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row = Tensor::from({3}, {1, 1, 1});
    row.set_requires_grad(true);
    backward(sum(mul(a, row)));
    REQUIRE(row.grad() == std::vector<double>{5, 7, 9});
}

TEST_CASE("matmul matches a hand computation and checks shapes") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 2});
    REQUIRE(c.values() == std::vector<double>{58, 64, 139, 154});

    Tensor batched = Tensor::from({2, 2, 3}, {1, 2, 3, 4, 5, 6, 1, 0, 0, 0, 1, 0});
    Tensor bc = matmul(batched, b);
    REQUIRE(bc.shape() == Shape{2, 2, 2});
    REQUIRE(bc.values()[4] == 7.0);
    REQUIRE(bc.values()[5] == 8.0);

    REQUIRE_THROWS_AS(matmul(a, a), std::invalid_argument);
    REQUIRE_THROWS_AS(matmul(a, Tensor::from({2}, {1, 2})), std::invalid_argument);
}

TEST_CASE("bmm multiplies per batch element") {
    Tensor a = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2, 1}, {5, 6, 7, 8});
    Tensor c = bmm(a, b);
    REQUIRE(c.shape() == Shape{2, 1, 1});
    REQUIRE_THAT(c.values()[0], WithinAbs(17.0, 1e-12));
    REQUIRE_THAT(c.values()[1], WithinAbs(53.0, 1e-12));
    REQUIRE_THROWS_AS(bmm(a, Tensor::from({1, 2, 1}, {1, 2})), std::invalid_argument);
}

TEST_CASE("permute and transpose rearrange strides") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a);
    REQUIRE(t.shape() == Shape{3, 2});
    REQUIRE(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});

    Tensor x = Tensor::from({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    Tensor p = permute(x, {2, 0, 1});
    REQUIRE(p.shape() == Shape{2, 2, 2});
    REQUIRE(p.at({0, 1, 0}) == x.at({1, 0, 0}));
    REQUIRE(p.at({1, 0, 1}) == x.at({0, 1, 1}));
    REQUIRE_THROWS_AS(permute(x, {0, 1}), std::invalid_argument);
    REQUIRE_THROWS_AS(permute(x, {0, 0, 1}), std::invalid_argument);

    Tensor tl = transpose_last2(x);
    REQUIRE(tl.at({0, 0, 1}) == x.at({0, 1, 0}));
}

TEST_CASE("reshape, concat, select preserve and validate layout") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = reshape(a, {3, 2});
    REQUIRE(r.values() == a.values());
    REQUIRE_THROWS_AS(reshape(a, {4, 2}), std::invalid_argument);

    Tensor b = Tensor::from({1, 3}, {7, 8, 9});
    Tensor cat = concat({a, b}, 0);
    REQUIRE(cat.shape() == Shape{3, 3});
    REQUIRE(cat.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});

    Tensor c2 = concat({a, Tensor::from({2, 1}, {0, 0})}, 1);
    REQUIRE(c2.shape() == Shape{2, 4});
    REQUIRE(c2.values() == std::vector<double>{1, 2, 3, 0, 4, 5, 6, 0});
    REQUIRE_THROWS_AS(concat({a, b}, 1), std::invalid_argument);

    Tensor s = select(cat, 2);
    REQUIRE(s.shape() == Shape{3});
    REQUIRE(s.values() == std::vector<double>{7, 8, 9});
    REQUIRE_THROWS_AS(select(cat, 3), std::invalid_argument);
}

TEST_CASE("concat adjoint scatters into each part") {
    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({1, 2}, {3, 4});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tensor w = Tensor::from({2, 2}, {10, 20, 30, 40});
    backward(sum(mul(concat({a, b}, 0), w)));
    REQUIRE(a.grad() == std::vector<double>{10, 20});
    REQUIRE(b.grad() == std::vector<double>{30, 40});
}

TEST_CASE("reductions match manual sums") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE_THAT(sum(a).item(), WithinAbs(21.0, 1e-12));
    REQUIRE_THAT(mean(a).item(), WithinAbs(3.5, 1e-12));

    Tensor s0 = sum_axis(a, 0);
    REQUIRE(s0.shape() == Shape{3});
    REQUIRE(s0.values() == std::vector<double>{5, 7, 9});
    Tensor s1 = sum_axis(a, 1);
    REQUIRE(s1.values() == std::vector<double>{6, 15});
    Tensor m1 = mean_axis(a, 1);
    REQUIRE(m1.values() == std::vector<double>{2, 5});
    REQUIRE_THROWS_AS(sum_axis(a, 2), std::invalid_argument);
}

TEST_CASE("scale_rows multiplies each row by its coefficient") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor v = Tensor::from({2}, {2, -1});
    Tensor r = scale_rows(a, v);
    REQUIRE(r.values() == std::vector<double>{2, 4, 6, -4, -5, -6});
    REQUIRE_THROWS_AS(scale_rows(a, Tensor::from({3}, {1, 2, 3})), std::invalid_argument);
}

TEST_CASE("softmax normalizes rows with temperature") {
    Tensor a = Tensor::from({1, 2}, {0.0, std::log(2.0)});
    Tensor p = softmax(a, 1);
    REQUIRE_THAT(p.values()[0], WithinAbs(1.0 / 3.0, 1e-12));
    REQUIRE_THAT(p.values()[1], WithinAbs(2.0 / 3.0, 1e-12));

    // temperature tau: softmax(x, tau) == softmax(x / tau)
    Tensor warm = softmax(Tensor::from({1, 2}, {0.0, 1.0}), 1, 0.5);
    Tensor manual = softmax(Tensor::from({1, 2}, {0.0, 2.0}), 1);
    REQUIRE_THAT(warm.values()[1], WithinAbs(manual.values()[1], 1e-12));

    // extreme logits stay finite thanks to the max-subtraction
    Tensor hot = softmax(Tensor::from({1, 2}, {1000.0, 0.0}), 1);
    REQUIRE_THAT(hot.values()[0], WithinAbs(1.0, 1e-12));

    Rng rng9(9);
    Tensor rows = softmax(random_normal({4, 7}, 3.0, rng9), 1, 0.05);
    for (int i = 0; i < 4; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += rows.at({i, j});
        REQUIRE_THAT(s, WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("layer_norm standardizes the last axis") {
    Tensor x = Tensor::from({2, 4}, {1, 2, 3, 4, -2, 0, 2, 8});
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    Tensor y = layer_norm(x, gamma, beta);
    for (int r = 0; r < 2; ++r) {
        double m = 0.0, v = 0.0;
        for (int c = 0; c < 4; ++c) m += y.at({r, c});
        m /= 4;
        for (int c = 0; c < 4; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m);
        REQUIRE_THAT(m, WithinAbs(0.0, 1e-9));
        REQUIRE_THAT(v / 4, WithinAbs(1.0, 1e-4));
    }
    // affine parameters shift and scale
    Tensor y2 = layer_norm(x, Tensor::full({4}, 2.0), Tensor::full({4}, 1.0));
    REQUIRE_THAT(y2.at({0, 0}), WithinAbs(2.0 * y.at({0, 0}) + 1.0, 1e-12));
}

TEST_CASE("logsumexp_last matches the direct formula and stays stable") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 1000, 1000, 1000});
    Tensor l = logsumexp_last(a);
    REQUIRE(l.shape() == Shape{2});
    REQUIRE_THAT(l.values()[0], WithinAbs(std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)), 1e-12));
    REQUIRE_THAT(l.values()[1], WithinAbs(1000.0 + std::log(3.0), 1e-9));
}

TEST_CASE("take_diag extracts the main diagonal") {
    Tensor a = Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    REQUIRE(take_diag(a).values() == std::vector<double>{1, 5, 9});
    REQUIRE_THROWS_AS(take_diag(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6})), std::invalid_argument);
}

TEST_CASE("bce_with_logits closed forms") {
    Tensor zero = Tensor::zeros({2, 2});
    Tensor ones = Tensor::full({2, 2}, 1.0);
    Tensor b = bce_with_logits(zero, ones);
    for (double v : b.values()) REQUIRE_THAT(v, WithinAbs(std::log(2.0), 1e-12));

    Tensor strong = bce_with_logits(Tensor::full({1, 1}, 20.0), Tensor::full({1, 1}, 1.0));
    REQUIRE_THAT(strong.values()[0], WithinAbs(std::log1p(std::exp(-20.0)), 1e-15));
    REQUIRE(strong.values()[0] < 3e-9);

    // symmetry: loss(x, 0) == loss(-x, 1)
    Tensor x = Tensor::from({1, 3}, {-3.0, 0.5, 7.0});
    Tensor l0 = bce_with_logits(x, Tensor::zeros({1, 3}));
    Tensor l1 = bce_with_logits(neg(x), Tensor::full({1, 3}, 1.0));
    for (int i = 0; i < 3; ++i) REQUIRE_THAT(l0.values()[i], WithinAbs(l1.values()[i], 1e-12));

    // huge magnitudes stay finite
    Tensor big = bce_with_logits(Tensor::from({1, 2}, {5000.0, -5000.0}), Tensor::from({1, 2}, {0.0, 1.0}));
    REQUIRE_THAT(big.values()[0], WithinAbs(5000.0, 1e-9));

    Tensor t = Tensor::zeros({1, 1});
    t.set_requires_grad(true);
    REQUIRE_THROWS_AS(bce_with_logits(zero, reshape(t, {1, 1})), std::invalid_argument);
}

TEST_CASE("unary activations hit their anchors") {
    REQUIRE_THAT(sigmoid(Tensor::scalar(0.0)).item(), WithinAbs(0.5, 1e-12));
    REQUIRE_THAT(relu(Tensor::scalar(-2.0)).item(), WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(relu(Tensor::scalar(2.5)).item(), WithinAbs(2.5, 1e-12));
    REQUIRE_THAT(gelu(Tensor::scalar(0.0)).item(), WithinAbs(0.0, 1e-12));
    // gelu is monotone-ish around large |x|: gelu(6) ~ 6, gelu(-6) ~ 0
    REQUIRE_THAT(gelu(Tensor::scalar(6.0)).item(), WithinAbs(6.0, 1e-6));
    REQUIRE_THAT(gelu(Tensor::scalar(-6.0)).item(), WithinAbs(0.0, 1e-6));
    REQUIRE_THAT(reciprocal(Tensor::scalar(4.0)).item(), WithinAbs(0.25, 1e-12));
}

namespace {

// independent half-pixel-center bilinear reference
std::vector<double> reference_bilinear(const std::vector<double>& in, int h, int w, int oh, int ow) {
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int i = 0; i < oh; ++i) {
        double fy = (i + 0.5) * h / oh - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (int j = 0; j < ow; ++j) {
            double fx = (j + 0.5) * w / ow - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            out[static_cast<std::size_t>(i) * ow + j] =
                (1 - ty) * ((1 - tx) * in[static_cast<std::size_t>(y0) * w + x0] +
                            tx * in[static_cast<std::size_t>(y0) * w + x1]) +
                ty * ((1 - tx) * in[static_cast<std::size_t>(y1) * w + x0] +
                      tx * in[static_cast<std::size_t>(y1) * w + x1]);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("bilinear upsampling matches the hand stencil") {
    // 2x2 -> 4x4: interior weights are 0.75/0.25 blends
    Tensor a = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 5.0});
    Tensor up = upsample_bilinear(a, 4, 4);
    REQUIRE_THAT(up.at({0, 0, 0, 0}), WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(up.at({0, 0, 3, 3}), WithinAbs(5.0, 1e-12));
    REQUIRE_THAT(up.at({0, 0, 1, 1}), WithinAbs(0.75 * (0.75 * 1 + 0.25 * 2) + 0.25 * (0.75 * 3 + 0.25 * 5), 1e-12));
    REQUIRE_THAT(up.at({0, 0, 2, 1}), WithinAbs(0.25 * (0.75 * 1 + 0.25 * 2) + 0.75 * (0.75 * 3 + 0.25 * 5), 1e-12));

    // against an independent reference on a random 3x5 -> 7x4 resample
    Rng rng(17);
    Tensor x = random_normal({1, 2, 3, 5}, 1.0, rng);
    Tensor y = upsample_bilinear(x, 7, 4);
    for (int c = 0; c < 2; ++c) {
        std::vector<double> plane(x.data() + static_cast<std::size_t>(c) * 15,
                                  x.data() + static_cast<std::size_t>(c + 1) * 15);
        auto ref = reference_bilinear(plane, 3, 5, 7, 4);
        for (int i = 0; i < 7; ++i) {
            for (int j = 0; j < 4; ++j) {
                REQUIRE_THAT(y.at({0, c, i, j}), WithinAbs(ref[static_cast<std::size_t>(i) * 4 + j], 1e-12));
            }
        }
    }

    // same-size resample is the identity; constants stay constant
    Tensor same = upsample_bilinear(x, 3, 5);
    for (std::size_t i = 0; i < same.values().size(); ++i) REQUIRE_THAT(same.values()[i], WithinAbs(x.values()[i], 1e-12));
    Tensor flat = upsample_bilinear(Tensor::full({1, 1, 2, 2}, 3.25), 5, 9);
    for (double v : flat.values()) REQUIRE_THAT(v, WithinAbs(3.25, 1e-12));
}

TEST_CASE("nearest upsampling replicates blocks exactly") {
    Tensor a = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor up = upsample_nearest(a, 4, 4);
    REQUIRE(up.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("op adjoints pass finite-difference checks over several seeds") {
    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
        for (const NamedCheck& c : op_gradchecks(seed)) {
            INFO(c.name << " @seed " << seed << " err " << c.result.max_error);
            REQUIRE(c.result.max_error <= 1e-4);
        }
    }
}

TEST_CASE("assembled model loss passes a strided finite-difference check") {
    for (const NamedCheck& c : model_gradchecks(21, 8)) {
        INFO(c.name << " err " << c.result.max_error);
        REQUIRE(c.result.max_error <= 1e-4);
    }
}
