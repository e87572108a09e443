#pragma once

// Patch-embedding transformer backbone. Blocks share one token resolution;
// the pyramid levels f1..f4 are depth taps, and the visual EM pass refines
// only the deepest tap.

#include "emfuse/em.hpp"
#include "emfuse/ops.hpp"
#include "emfuse/optim.hpp"
#include "emfuse/tensor.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

struct BackboneConfig {
    int image_h = 64;
    int image_w = 64;
    int patch = 8;
    int in_channels = 1;
    int d_model = 64;
    int n_blocks = 4;
    int heads = 4;
    std::array<int, 4> taps = {1, 2, 3, 4};

    int grid_h() const { return image_h / patch; }
    int grid_w() const { return image_w / patch; }
    int tokens() const { return grid_h() * grid_w(); }

    void validate() const {
        if (image_h % patch != 0 || image_w % patch != 0) {
            throw std::invalid_argument("backbone: image size must divide by patch size");
        }
        if (d_model % heads != 0) throw std::invalid_argument("backbone: d_model must divide by heads");
        for (std::size_t i = 0; i < taps.size(); ++i) {
            if (taps[i] < 1 || taps[i] > n_blocks) throw std::invalid_argument("backbone: tap out of range");
            if (i > 0 && taps[i] <= taps[i - 1]) throw std::invalid_argument("backbone: taps must strictly increase");
        }
    }
};

struct VisualPyramid {
    std::array<Tensor, 4> levels;  // f1..f4 at indices 0..3

    const Tensor& level(int f) const {
        if (f < 1 || f > 4) throw std::invalid_argument("pyramid: level must be f1..f4");
        return levels[static_cast<std::size_t>(f - 1)];
    }
};

namespace detail {

inline Tensor trainable_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t = random_normal(std::move(shape), stddev, rng);
    t.set_requires_grad(true);
    return t;
}

inline Tensor trainable_full(Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

struct VisualBlock {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

// Pre-norm block over (B, N, d) token stacks.
inline Tensor run_visual_block(const Tensor& x, const VisualBlock& blk, int heads) {
    const int batch = x.shape()[0], n = x.shape()[1], d = x.shape()[2];
    const int dh = d / heads;
    Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    auto split = [&](const Tensor& w, const Tensor& b) {
        return reshape(permute(reshape(add(matmul(h, w), b), {batch, n, heads, dh}), {0, 2, 1, 3}),
                       {batch * heads, n, dh});
    };
    Tensor q = split(blk.wq, blk.bq);
    Tensor k = split(blk.wk, blk.bk);
    Tensor v = split(blk.wv, blk.bv);
    Tensor attn = softmax(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
    Tensor ctx = reshape(permute(reshape(bmm(attn, v), {batch, heads, n, dh}), {0, 2, 1, 3}), {batch, n, d});
    Tensor with_attn = add(x, add(matmul(ctx, blk.wo), blk.bo));
    Tensor h2 = layer_norm(with_attn, blk.ln2_g, blk.ln2_b);
    Tensor mlp = add(matmul(gelu(add(matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(with_attn, mlp);
}

}  // namespace detail

class Backbone {
public:
    Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(Rng::derive(seed, 0x5b));
        const int d = cfg_.d_model;
        const int patch_dim = cfg_.in_channels * cfg_.patch * cfg_.patch;
        embed_w_ = detail::trainable_normal({patch_dim, d}, std::sqrt(1.0 / patch_dim), rng);
        embed_b_ = detail::trainable_full({d}, 0.0);
        positions_ = detail::trainable_normal({cfg_.tokens(), d}, 0.02, rng);
        const double w_std = std::sqrt(1.0 / d);
        for (int b = 0; b < cfg_.n_blocks; ++b) {
            detail::VisualBlock blk;
            blk.ln1_g = detail::trainable_full({d}, 1.0);
            blk.ln1_b = detail::trainable_full({d}, 0.0);
            blk.wq = detail::trainable_normal({d, d}, w_std, rng);
            blk.bq = detail::trainable_full({d}, 0.0);
            blk.wk = detail::trainable_normal({d, d}, w_std, rng);
            blk.bk = detail::trainable_full({d}, 0.0);
            blk.wv = detail::trainable_normal({d, d}, w_std, rng);
            blk.bv = detail::trainable_full({d}, 0.0);
            blk.wo = detail::trainable_normal({d, d}, w_std, rng);
            blk.bo = detail::trainable_full({d}, 0.0);
            blk.ln2_g = detail::trainable_full({d}, 1.0);
            blk.ln2_b = detail::trainable_full({d}, 0.0);
            blk.w1 = detail::trainable_normal({d, 4 * d}, w_std, rng);
            blk.b1 = detail::trainable_full({4 * d}, 0.0);
            blk.w2 = detail::trainable_normal({4 * d, d}, std::sqrt(1.0 / (4 * d)), rng);
            blk.b2 = detail::trainable_full({d}, 0.0);
            blocks_.push_back(std::move(blk));
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    // (B, C, H, W) -> (B, N, d): non-overlapping patches, linear projection,
    // learned positions.
    Tensor patch_embed(const Tensor& image) const {
        if (image.rank() != 4 || image.shape()[1] != cfg_.in_channels || image.shape()[2] != cfg_.image_h ||
            image.shape()[3] != cfg_.image_w) {
            throw std::invalid_argument("patch_embed: expected (B," + std::to_string(cfg_.in_channels) + "," +
                                        std::to_string(cfg_.image_h) + "," + std::to_string(cfg_.image_w) +
                                        "), got " + shape_str(image.shape()));
        }
        const int batch = image.shape()[0];
        const int gh = cfg_.grid_h(), gw = cfg_.grid_w(), p = cfg_.patch, c = cfg_.in_channels;
        Tensor patches = reshape(
            permute(reshape(image, {batch, c, gh, p, gw, p}), {0, 2, 4, 1, 3, 5}),
            {batch, cfg_.tokens(), c * p * p});
        return add(add(matmul(patches, embed_w_), embed_b_), positions_);
    }

    // Depth taps f1..f4; the deepest tap optionally refined by the visual EM
    // pass (jitter drawn from the caller's rng).
    VisualPyramid forward_pyramid(const Tensor& image, const EmConfig* vision_em, Rng* em_rng) const {
        Tensor x = patch_embed(image);
        VisualPyramid pyr;
        std::size_t next_tap = 0;
        for (int b = 0; b < cfg_.n_blocks; ++b) {
            x = detail::run_visual_block(x, blocks_[static_cast<std::size_t>(b)], cfg_.heads);
            while (next_tap < pyr.levels.size() && cfg_.taps[next_tap] == b + 1) {
                pyr.levels[next_tap] = x;
                ++next_tap;
            }
        }
        if (vision_em) {
            if (!em_rng) throw std::invalid_argument("forward_pyramid: vision EM requires an rng");
            pyr.levels[3] = v_ema(pyr.levels[3], *vision_em, *em_rng).out;
        }
        return pyr;
    }

    std::vector<Parameter> parameters(const std::string& prefix) {
        std::vector<Parameter> out;
        out.push_back({prefix + ".embed.w", embed_w_, true});
        out.push_back({prefix + ".embed.b", embed_b_, true});
        out.push_back({prefix + ".pos", positions_, true});
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            detail::VisualBlock& blk = blocks_[b];
            const std::string base = prefix + ".block" + std::to_string(b);
            out.push_back({base + ".ln1.g", blk.ln1_g, true});
            out.push_back({base + ".ln1.b", blk.ln1_b, true});
            out.push_back({base + ".wq", blk.wq, true});
            out.push_back({base + ".bq", blk.bq, true});
            out.push_back({base + ".wk", blk.wk, true});
            out.push_back({base + ".bk", blk.bk, true});
            out.push_back({base + ".wv", blk.wv, true});
            out.push_back({base + ".bv", blk.bv, true});
            out.push_back({base + ".wo", blk.wo, true});
            out.push_back({base + ".bo", blk.bo, true});
            out.push_back({base + ".ln2.g", blk.ln2_g, true});
            out.push_back({base + ".ln2.b", blk.ln2_b, true});
            out.push_back({base + ".w1", blk.w1, true});
            out.push_back({base + ".b1", blk.b1, true});
            out.push_back({base + ".w2", blk.w2, true});
            out.push_back({base + ".b2", blk.b2, true});
        }
        return out;
    }

private:
    BackboneConfig cfg_;
    Tensor embed_w_, embed_b_, positions_;
    std::vector<detail::VisualBlock> blocks_;
};

}  // namespace emfuse
