#include <catch2/catch_amalgamated.hpp>

#include "emfuse/gradcheck.hpp"
#include "emfuse/ops.hpp"
#include "emfuse/tensor.hpp"

#include <cmath>
#include <set>
#include <vector>

using namespace emfuse;

TEST_CASE("tensor factories and element access") {
    Tensor z = Tensor::zeros({2, 3});
    REQUIRE(z.numel() == 6);
    REQUIRE(z.shape() == Shape{2, 3});
    REQUIRE(z.at({1, 2}) == 0.0);

    Tensor f = Tensor::full({2, 2}, 1.5);
    REQUIRE(f.at({0, 1}) == 1.5);

    Tensor s = Tensor::scalar(-4.0);
    REQUIRE(s.rank() == 0);
    REQUIRE(s.item() == -4.0);

    Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
    REQUIRE(t.at({1, 0}) == 3.0);
    t.at({1, 0}) = 7.0;
    REQUIRE(t.values()[2] == 7.0);

    REQUIRE_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor::zeros({2, 0}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor::zeros({-1}), std::invalid_argument);
    REQUIRE_THROWS_AS(t.item(), std::invalid_argument);
    REQUIRE_THROWS_AS(t.at({2, 0}), std::out_of_range);
    REQUIRE_THROWS_AS(t.at({0}), std::invalid_argument);
}

TEST_CASE("requires_grad is leaf-only and grad access is guarded") {
    Tensor x = Tensor::from({2}, {1, 2});
    REQUIRE_THROWS_AS(x.grad(), std::invalid_argument);
    x.set_requires_grad(true);
    REQUIRE(x.grad() == std::vector<double>{0, 0});

    Tensor y = add(x, x);
    REQUIRE(y.requires_grad());
    REQUIRE_THROWS_AS(y.set_requires_grad(true), std::invalid_argument);

    Tensor d = y.detached();
    REQUIRE_FALSE(d.requires_grad());
    REQUIRE(d.values() == y.values());
    d.values()[0] = 99.0;
    REQUIRE(y.values()[0] == 2.0);
}

TEST_CASE("constant folding keeps grad-free graphs off the tape") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor c = mul(a, b);
    REQUIRE_FALSE(c.requires_grad());
    REQUIRE(c.node()->parents.empty());
    backward(sum(c));  // no-op on a constant graph
}

TEST_CASE("non-finite op outputs are rejected at creation") {
    Tensor a = Tensor::from({2}, {1.0, 1.0});
    Tensor zero = Tensor::from({2}, {0.0, 1.0});
    REQUIRE_THROWS_WITH(div(a, zero), Catch::Matchers::ContainsSubstring("non-finite"));
    Tensor big = Tensor::from({1}, {1e308});
    REQUIRE_THROWS_WITH(mul(big, big), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("backward computes chain and diamond gradients") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(2.0, 1e-12));
    REQUIRE_THAT(x.grad()[2], Catch::Matchers::WithinAbs(6.0, 1e-12));

    // diamond: loss = sum((2x)*(3x)) = 6 sum(x^2), d/dx = 12x
    Tensor y = Tensor::from({2}, {1, -2});
    y.set_requires_grad(true);
    backward(sum(mul(scale(y, 2.0), scale(y, 3.0))));
    REQUIRE_THAT(y.grad()[0], Catch::Matchers::WithinAbs(12.0, 1e-12));
    REQUIRE_THAT(y.grad()[1], Catch::Matchers::WithinAbs(-24.0, 1e-12));
}

TEST_CASE("leaf gradients accumulate across backward calls") {
    Tensor x = Tensor::from({2}, {1, 1});
    x.set_requires_grad(true);
    Tensor loss = sum(scale(x, 5.0));
    backward(loss);
    backward(loss);
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(10.0, 1e-12));
    x.zero_grad();
    REQUIRE(x.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar roots and handles reused subgraphs") {
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    REQUIRE_THROWS_AS(backward(mul(x, x)), std::invalid_argument);

    // shared subexpression used twice: loss = sum(s + s) with s = x*x
    Tensor s = mul(x, x);
    backward(sum(add(s, s)));
    REQUIRE_THAT(x.grad()[1], Catch::Matchers::WithinAbs(8.0, 1e-12));
}

TEST_CASE("deep graphs backpropagate without recursion limits") {
    Tensor x = Tensor::scalar(1.0);
    x.set_requires_grad(true);
    Tensor y = x;
    for (int i = 0; i < 20000; ++i) y = add_scalar(y, 1.0);
    backward(y);
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("rng streams are deterministic and well-behaved") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    bool differs = false;
    for (int i = 0; i < 10 && !differs; ++i) differs = a.next_u64() != c.next_u64();
    REQUIRE(differs);

    Rng u(7);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double v = u.uniform();
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        REQUIRE(v >= 0.0);
        REQUIRE(v < 1.0);
    }
    REQUIRE(lo < 0.05);
    REQUIRE(hi > 0.95);
}

TEST_CASE("normal draws match moments") {
    Rng rng(123);
    const int n = 200000;
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        mean += v;
        sq += v * v;
    }
    mean /= n;
    const double var = sq / n - mean * mean;
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 0.02));
    REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 0.03));
}

TEST_CASE("uniform_int and sample_distinct respect their ranges") {
    Rng rng(5);
    std::vector<int> counts(6, 0);
    for (int i = 0; i < 6000; ++i) ++counts[static_cast<std::size_t>(rng.uniform_int(6))];
    for (int k = 0; k < 6; ++k) REQUIRE(counts[static_cast<std::size_t>(k)] > 800);
    REQUIRE_THROWS_AS(rng.uniform_int(0), std::invalid_argument);

    std::vector<int> pick = rng.sample_distinct(10, 4);
    REQUIRE(pick.size() == 4);
    std::set<int> uniq(pick.begin(), pick.end());
    REQUIRE(uniq.size() == 4);
    for (int v : pick) {
        REQUIRE(v >= 0);
        REQUIRE(v < 10);
    }
    REQUIRE_THROWS_AS(rng.sample_distinct(3, 4), std::invalid_argument);
}

TEST_CASE("derive gives independent reproducible streams") {
    REQUIRE(Rng::derive(1, 2) == Rng::derive(1, 2));
    REQUIRE(Rng::derive(1, 2) != Rng::derive(1, 3));
    REQUIRE(Rng::derive(1, 2) != Rng::derive(2, 2));
}

TEST_CASE("checksums are order-sensitive and stable") {
    std::vector<double> v = {1.0, 2.0, 3.0};
    std::vector<double> w = {3.0, 2.0, 1.0};
    REQUIRE(checksum_bits(v) == checksum_bits(v));
    REQUIRE(checksum_bits(v) != checksum_bits(w));
    REQUIRE(checksum_string("abc") != checksum_string("acb"));
    // -0.0 and 0.0 differ at the bit level, so the checksum must separate them
    REQUIRE(checksum_bits({0.0}) != checksum_bits({-0.0}));
}

TEST_CASE("gradcheck flags scale mismatches") {
    Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0});
    auto good = [](const Tensor& t) { return sum(mul(t, t)); };
    REQUIRE(gradcheck(good, x).max_error < 1e-9);

    // a wrong function of the probe (double-counts) must blow past tolerance
    auto bad = [](const Tensor& t) { return sum(mul(t, t.detached())); };
    REQUIRE(gradcheck(bad, x).max_error > 1e-2);
}

TEST_CASE("gradcheck rejects non-scalar outputs") {
    Tensor x = Tensor::from({2}, {1, 2});
    REQUIRE_THROWS_AS(gradcheck([](const Tensor& t) { return add(t, t); }, x), std::invalid_argument);
}
