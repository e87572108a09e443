#pragma once

// Text-guided pixel decoder: project both streams into a shared space, let
// class queries attend over visual tokens, pool the attended output into one
// global context vector, fuse it back into every token and score tokens
// against the projected queries.

#include "emfuse/ops.hpp"
#include "emfuse/optim.hpp"
#include "emfuse/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace emfuse {

struct DecoderConfig {
    int d_text = 64;
    int d_visual = 64;
    int d_shared = 64;
    int heads = 4;
    int fusion_level = 4;  // which pyramid tap feeds the decoder (1..4)
    double logit_scale_init = 10.0;
    bool bilinear = true;

    int head_dim() const { return d_shared / heads; }

    void validate() const {
        if (heads < 1 || d_shared % heads != 0) {
            throw std::invalid_argument("decoder: d_shared must divide by heads");
        }
        if (fusion_level < 1 || fusion_level > 4) throw std::invalid_argument("decoder: fusion_level must be 1..4");
        if (logit_scale_init <= 0.0) throw std::invalid_argument("decoder: logit scale must start positive");
    }
};

struct DecoderOutput {
    Tensor logits;     // (B, C, H, W)
    Tensor attention;  // (B, heads, C, N)
};

// Head h of the query/key/value maps occupies columns [h*d_h, (h+1)*d_h) of
// the packed d_shared x d_shared matrices.
class Decoder {
public:
    Decoder(DecoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(Rng::derive(seed, 0xdc));
        const int ds = cfg_.d_shared;
        auto trainable = [&](Shape shape, double stddev) {
            Tensor t = random_normal(std::move(shape), stddev, rng);
            t.set_requires_grad(true);
            return t;
        };
        auto zeros = [](Shape shape) {
            Tensor t = Tensor::zeros(std::move(shape));
            t.set_requires_grad(true);
            return t;
        };
        text_w1_ = trainable({cfg_.d_text, ds}, std::sqrt(1.0 / cfg_.d_text));
        text_b1_ = zeros({ds});
        text_w2_ = trainable({ds, ds}, std::sqrt(1.0 / ds));
        text_b2_ = zeros({ds});
        visual_w_ = trainable({cfg_.d_visual, ds}, std::sqrt(1.0 / cfg_.d_visual));
        visual_b_ = zeros({ds});
        wq_ = trainable({ds, ds}, std::sqrt(1.0 / ds));
        wk_ = trainable({ds, ds}, std::sqrt(1.0 / ds));
        wv_ = trainable({ds, ds}, std::sqrt(1.0 / ds));
        wo_ = trainable({ds, ds}, std::sqrt(1.0 / ds));
        bo_ = zeros({ds});
        fuse_w_ = trainable({2 * ds, ds}, std::sqrt(1.0 / (2 * ds)));
        fuse_b_ = zeros({ds});
        logit_scale_ = Tensor::scalar(cfg_.logit_scale_init);
        logit_scale_.set_requires_grad(true);
    }

    const DecoderConfig& config() const { return cfg_; }

    // (C, d_text) -> (C, d_shared) through a two-layer MLP.
    Tensor project_text(const Tensor& queries) const {
        if (queries.rank() != 2 || queries.shape()[1] != cfg_.d_text) {
            throw std::invalid_argument("project_text: expected C x d_text, got " + shape_str(queries.shape()));
        }
        return add(matmul(gelu(add(matmul(queries, text_w1_), text_b1_)), text_w2_), text_b2_);
    }

    // Per-token linear map; spatial layout untouched.
    Tensor project_visual(const Tensor& features) const {
        if (features.rank() != 3 || features.shape()[2] != cfg_.d_visual) {
            throw std::invalid_argument("project_visual: expected B x N x d_visual, got " +
                                        shape_str(features.shape()));
        }
        return add(matmul(features, visual_w_), visual_b_);
    }

    // Queries broadcast over the batch; returns attended per-class vectors
    // and the per-head attention maps (rows over tokens sum to 1).
    std::pair<Tensor, Tensor> cross_attention(const Tensor& text_proj, const Tensor& visual_proj) const {
        const int c = text_proj.shape()[0];
        const int batch = visual_proj.shape()[0], n = visual_proj.shape()[1];
        const int heads = cfg_.heads, dh = cfg_.head_dim(), ds = cfg_.d_shared;
        Tensor q = reshape(broadcast_batch(permute(reshape(matmul(text_proj, wq_), {c, heads, dh}), {1, 0, 2}), batch),
                           {batch * heads, c, dh});
        auto split_kv = [&](const Tensor& w) {
            return reshape(permute(reshape(matmul(visual_proj, w), {batch, n, heads, dh}), {0, 2, 1, 3}),
                           {batch * heads, n, dh});
        };
        Tensor k = split_kv(wk_);
        Tensor v = split_kv(wv_);
        Tensor attn = softmax(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
        Tensor ctx = reshape(permute(reshape(bmm(attn, v), {batch, heads, c, dh}), {0, 2, 1, 3}), {batch, c, ds});
        Tensor out = add(matmul(ctx, wo_), bo_);
        return {out, reshape(attn, {batch, heads, c, n})};
    }

    // Mean over the class-query axis: one global context vector per image.
    Tensor aggregate_context(const Tensor& attended) const {
        if (attended.rank() != 3) throw std::invalid_argument("aggregate_context: expected B x C x d_shared");
        return mean_axis(attended, 1);
    }

    // Context broadcast to every token, concatenated channel-wise, squeezed
    // back to d_shared by the fusion map, plus a residual from the tokens.
    Tensor fuse(const Tensor& visual_proj, const Tensor& context) const {
        if (visual_proj.rank() != 3 || context.rank() != 2 || visual_proj.shape()[0] != context.shape()[0]) {
            throw std::invalid_argument("fuse: shape mismatch " + shape_str(visual_proj.shape()) + " vs " +
                                        shape_str(context.shape()));
        }
        const int n = visual_proj.shape()[1];
        Tensor cat = concat({visual_proj, broadcast_tokens(context, n)}, 2);
        return add(visual_proj, add(matmul(cat, fuse_w_), fuse_b_));
    }

    // Token-query similarity logits, scaled, laid out on the token grid and
    // upsampled to mask resolution.
    Tensor classify(const Tensor& fused, const Tensor& text_proj, int grid_h, int grid_w, int out_h,
                    int out_w) const {
        const int batch = fused.shape()[0], n = fused.shape()[1];
        const int c = text_proj.shape()[0];
        if (n != grid_h * grid_w) {
            throw std::invalid_argument("classify: token count " + std::to_string(n) + " does not fill a " +
                                        std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
        }
        Tensor sims = mul(matmul(fused, transpose(text_proj)), logit_scale_);
        Tensor grid = reshape(permute(sims, {0, 2, 1}), {batch, c, grid_h, grid_w});
        if (grid_h == out_h && grid_w == out_w) return grid;
        return cfg_.bilinear ? upsample_bilinear(grid, out_h, out_w) : upsample_nearest(grid, out_h, out_w);
    }

    // Full pass: project, attend, pool, fuse, score.
    DecoderOutput forward(const Tensor& queries, const Tensor& features, int grid_h, int grid_w, int out_h,
                          int out_w) const {
        Tensor tproj = project_text(queries);
        Tensor vproj = project_visual(features);
        auto [attended, maps] = cross_attention(tproj, vproj);
        Tensor fused = fuse(vproj, aggregate_context(attended));
        DecoderOutput out;
        out.logits = classify(fused, tproj, grid_h, grid_w, out_h, out_w);
        out.attention = maps;
        return out;
    }

    std::vector<Parameter> parameters(const std::string& prefix) {
        return {
            {prefix + ".text.w1", text_w1_, true}, {prefix + ".text.b1", text_b1_, true},
            {prefix + ".text.w2", text_w2_, true}, {prefix + ".text.b2", text_b2_, true},
            {prefix + ".visual.w", visual_w_, true}, {prefix + ".visual.b", visual_b_, true},
            {prefix + ".attn.wq", wq_, true}, {prefix + ".attn.wk", wk_, true},
            {prefix + ".attn.wv", wv_, true}, {prefix + ".attn.wo", wo_, true},
            {prefix + ".attn.bo", bo_, true}, {prefix + ".fuse.w", fuse_w_, true},
            {prefix + ".fuse.b", fuse_b_, true}, {prefix + ".logit_scale", logit_scale_, true},
        };
    }

private:
    DecoderConfig cfg_;
    Tensor text_w1_, text_b1_, text_w2_, text_b2_;
    Tensor visual_w_, visual_b_;
    Tensor wq_, wk_, wv_, wo_, bo_;
    Tensor fuse_w_, fuse_b_;
    Tensor logit_scale_;
};

}  // namespace emfuse
