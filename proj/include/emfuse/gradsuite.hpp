#pragma once

// Finite-difference coverage of the whole differentiable surface: one check
// per registered op (both arguments where binary), the EM pipeline with a
// pinned init, the decoder attention stack, the losses, and the assembled
// model loss parameter by parameter.

#include "emfuse/decoder.hpp"
#include "emfuse/em.hpp"
#include "emfuse/gradcheck.hpp"
#include "emfuse/model.hpp"
#include "emfuse/objectives.hpp"
#include "emfuse/ops.hpp"

#include <functional>
#include <string>
#include <vector>

namespace emfuse {

struct NamedCheck {
    std::string name;
    GradcheckResult result;
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, random sign: safe denominators and
// kink-free relu probes.
inline Tensor offset_tensor(Shape shape, double lo, double hi, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi) * (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
    return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor hard_tensor(Shape shape, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    return Tensor::from(std::move(shape), std::move(v));
}

// sum(y * w) with a fixed random cotangent, so adjoints are probed with
// non-uniform upstream gradients.
inline std::function<Tensor(const Tensor&)> weighted(std::function<Tensor(const Tensor&)> f, const Tensor& w) {
    return [f = std::move(f), w](const Tensor& x) { return sum(mul(f(x), w)); };
}

}  // namespace detail

inline std::vector<NamedCheck> op_gradchecks(std::uint64_t seed) {
    using detail::hard_tensor;
    using detail::offset_tensor;
    using detail::uniform_tensor;
    using detail::weighted;

    Rng rng(seed);
    std::vector<NamedCheck> checks;
    auto run = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
        checks.push_back({name, gradcheck(f, x)});
    };
    auto normal = [&](Shape shape, double stddev = 1.0) { return random_normal(std::move(shape), stddev, rng); };

    {
        Tensor a = normal({2, 3}), b = normal({2, 3}), suf = normal({3});
        Tensor w = normal({2, 3});
        run("add.lhs", weighted([&](const Tensor& x) { return add(x, b); }, w), a);
        run("add.rhs_suffix", weighted([&](const Tensor& x) { return add(a, x); }, w), suf);
        run("sub.lhs", weighted([&](const Tensor& x) { return sub(x, b); }, w), a);
        run("sub.rhs", weighted([&](const Tensor& x) { return sub(a, x); }, w), b);
        run("mul.lhs", weighted([&](const Tensor& x) { return mul(x, b); }, w), a);
        run("mul.rhs_suffix", weighted([&](const Tensor& x) { return mul(a, x); }, w), suf);
        run("mul.rhs_scalar", weighted([&](const Tensor& x) { return mul(a, x); }, w), normal({1}));
        Tensor den = offset_tensor({2, 3}, 0.5, 1.5, rng);
        run("div.lhs", weighted([&](const Tensor& x) { return div(x, den); }, w), a);
        run("div.rhs", weighted([&](const Tensor& x) { return div(a, x); }, w), den);
        run("scale", weighted([&](const Tensor& x) { return scale(x, -1.7); }, w), a);
        run("add_scalar", weighted([&](const Tensor& x) { return add_scalar(x, 2.5); }, w), a);
        run("neg", weighted([&](const Tensor& x) { return neg(x); }, w), a);
        run("reciprocal", weighted([&](const Tensor& x) { return reciprocal(x); }, w), den);
        run("relu", weighted([&](const Tensor& x) { return relu(x); }, w), offset_tensor({2, 3}, 0.2, 1.5, rng));
        run("gelu", weighted([&](const Tensor& x) { return gelu(x); }, w), a);
        run("sigmoid", weighted([&](const Tensor& x) { return sigmoid(x); }, w), a);
    }
    {
        Tensor a = normal({3, 4}), b = normal({4, 2}), w = normal({3, 2});
        run("matmul.lhs", weighted([&](const Tensor& x) { return matmul(x, b); }, w), a);
        run("matmul.rhs", weighted([&](const Tensor& x) { return matmul(a, x); }, w), b);
        Tensor batched = normal({2, 3, 4}), wb = normal({2, 3, 2});
        run("matmul.batched_lhs", weighted([&](const Tensor& x) { return matmul(x, b); }, wb), batched);
        Tensor bb = normal({2, 4, 2});
        run("bmm.lhs", weighted([&](const Tensor& x) { return bmm(x, bb); }, wb), batched);
        run("bmm.rhs", weighted([&](const Tensor& x) { return bmm(batched, x); }, wb), bb);
    }
    {
        Tensor a = normal({2, 3, 4});
        run("permute", weighted([&](const Tensor& x) { return permute(x, {2, 0, 1}); }, normal({4, 2, 3})), a);
        run("transpose", weighted([&](const Tensor& x) { return transpose(x); }, normal({4, 3})), normal({3, 4}));
        run("transpose_last2", weighted([&](const Tensor& x) { return transpose_last2(x); }, normal({2, 4, 3})), a);
        run("reshape", weighted([&](const Tensor& x) { return reshape(x, {3, 4}); }, normal({3, 4})), normal({2, 6}));
        Tensor part = normal({1, 3});
        run("concat.axis0", weighted([&](const Tensor& x) { return concat({x, part}, 0); }, normal({3, 3})),
            normal({2, 3}));
        Tensor part1 = normal({2, 3});
        run("concat.axis1", weighted([&](const Tensor& x) { return concat({part1, x}, 1); }, normal({2, 5})),
            normal({2, 2}));
        run("select", weighted([&](const Tensor& x) { return select(x, 1); }, normal({2, 2})), normal({3, 2, 2}));
        run("broadcast_batch", weighted([&](const Tensor& x) { return broadcast_batch(x, 2); }, normal({2, 3, 4})),
            normal({3, 4}));
        run("broadcast_tokens", weighted([&](const Tensor& x) { return broadcast_tokens(x, 3); }, normal({2, 3, 4})),
            normal({2, 4}));
    }
    {
        Tensor a = normal({2, 3, 4});
        run("sum", [](const Tensor& x) { return sum(x); }, normal({2, 3}));
        run("mean", [](const Tensor& x) { return mean(x); }, normal({2, 3}));
        run("sum_axis", weighted([&](const Tensor& x) { return sum_axis(x, 1); }, normal({2, 4})), a);
        run("mean_axis", weighted([&](const Tensor& x) { return mean_axis(x, 0); }, normal({3, 4})), a);
        Tensor rows = normal({3, 4}), v = normal({3});
        run("scale_rows.matrix", weighted([&](const Tensor& x) { return scale_rows(x, v); }, normal({3, 4})), rows);
        run("scale_rows.vector", weighted([&](const Tensor& x) { return scale_rows(rows, x); }, normal({3, 4})), v);
        run("softmax", weighted([&](const Tensor& x) { return softmax(x, 1, 0.7); }, normal({2, 3})), normal({2, 3}));
        Tensor g = uniform_tensor({4}, 0.5, 1.5, rng), be = normal({4});
        Tensor lx = normal({2, 4}), lw = normal({2, 4});
        run("layer_norm.x", weighted([&](const Tensor& x) { return layer_norm(x, g, be); }, lw), lx);
        run("layer_norm.gamma", weighted([&](const Tensor& x) { return layer_norm(lx, x, be); }, lw), g);
        run("layer_norm.beta", weighted([&](const Tensor& x) { return layer_norm(lx, g, x); }, lw), be);
        run("logsumexp_last", weighted([&](const Tensor& x) { return logsumexp_last(x); }, normal({2})),
            normal({2, 3}));
        run("take_diag", weighted([&](const Tensor& x) { return take_diag(x); }, normal({3})), normal({3, 3}));
        Tensor targets = hard_tensor({2, 3}, rng);
        run("bce_with_logits", weighted([&](const Tensor& x) { return bce_with_logits(x, targets); }, normal({2, 3})),
            normal({2, 3}));
        run("upsample_bilinear",
            weighted([&](const Tensor& x) { return upsample_bilinear(x, 3, 5); }, normal({1, 2, 3, 5})),
            normal({1, 2, 2, 3}));
        run("upsample_nearest",
            weighted([&](const Tensor& x) { return upsample_nearest(x, 4, 6); }, normal({1, 2, 4, 6})),
            normal({1, 2, 2, 3}));
    }
    {
        // EM pipeline with the init pinned at the base point, matching its
        // stop-gradient contract.
        Tensor feats = normal({4, 3});
        Tensor protos = normal({2, 3});
        Tensor wz = normal({4, 2}), wm = normal({2, 3}), wr = normal({4, 3});
        run("em.e_step.features", weighted([&](const Tensor& x) { return e_step(x, protos, 0.7); }, wz), feats);
        run("em.e_step.prototypes", weighted([&](const Tensor& x) { return e_step(feats, x, 0.7); }, wz), protos);
        Tensor assign = e_step(feats, protos, 0.7).detached();
        run("em.m_step.features", weighted([&](const Tensor& x) { return m_step(x, assign); }, wm), feats);
        run("em.m_step.assignments", weighted([&](const Tensor& x) { return m_step(feats, x); }, wm), assign);
        run("em.reconstruct.assignments", weighted([&](const Tensor& x) { return reconstruct(x, protos); }, wr),
            assign);
        run("em.reconstruct.prototypes", weighted([&](const Tensor& x) { return reconstruct(assign, x); }, wr),
            protos);
        EmConfig cfg;
        cfg.clusters = 2;
        cfg.stages = 2;
        cfg.temperature = 0.7;
        cfg.alpha = 0.5;
        cfg.init = EmInit::FirstK;
        Rng em_rng(Rng::derive(seed, 7));
        Tensor mu0 = init_prototypes(feats, cfg, em_rng);
        run("em.aggregate", weighted([&](const Tensor& x) { return em_with_init(x, mu0, cfg).out; }, wr), feats);
    }
    {
        DecoderConfig dc;
        dc.d_text = 8;
        dc.d_visual = 8;
        dc.d_shared = 8;
        dc.heads = 2;
        Decoder dec(dc, seed);
        Tensor queries = normal({3, 8}), feats = normal({2, 5, 8});
        Tensor wq = normal({2, 3, 8});
        run("decoder.attention.queries",
            weighted(
                [&](const Tensor& x) { return dec.cross_attention(dec.project_text(x), dec.project_visual(feats)).first; },
                wq),
            queries);
        run("decoder.attention.features",
            weighted(
                [&](const Tensor& x) {
                    return dec.cross_attention(dec.project_text(queries), dec.project_visual(x)).first;
                },
                wq),
            feats);
    }
    {
        Tensor logits = normal({2, 3, 2, 2});
        Tensor masks = hard_tensor({2, 3, 2, 2}, rng);
        LossWeights lw;
        run("loss.bce", [&](const Tensor& x) { return bce_loss(x, masks); }, logits);
        run("loss.dice", [&](const Tensor& x) { return dice_loss(x, masks); }, logits);
        run("loss.seg", [&](const Tensor& x) { return seg_loss(x, masks, lw); }, logits);
        Tensor anchors = normal({3, 4});
        run("loss.text_reg", [&](const Tensor& x) { return text_reg_loss(x, anchors, 0.7); }, normal({3, 4}));
    }
    return checks;
}

// Central-difference check of the full-arm training loss against every
// trainable parameter, with EM inits pinned for the duration.
inline std::vector<NamedCheck> model_gradchecks(std::uint64_t seed, std::size_t max_coords_per_param = 0) {
    ModelConfig mc;
    mc.arm = Arm::Full;
    mc.backbone.image_h = 16;
    mc.backbone.image_w = 16;
    mc.backbone.patch = 4;
    mc.backbone.d_model = 16;
    mc.backbone.n_blocks = 4;
    mc.backbone.heads = 2;
    mc.text.d_emb = 16;
    mc.text.heads = 2;
    mc.text.blocks = 2;
    mc.text.n_prompts = 2;
    mc.text.max_len = 16;
    mc.decoder.d_shared = 16;
    mc.decoder.heads = 2;
    mc.decoder.fusion_level = 4;
    mc.class_names = {"left ventricle", "myocardium", "background"};

    SegModel model(mc, seed);
    model.set_freeze_em_init(true);

    Rng rng(Rng::derive(seed, 99));
    Tensor images = detail::uniform_tensor({1, 1, 16, 16}, 0.0, 1.0, rng);
    std::vector<double> mask_v(static_cast<std::size_t>(3) * 16 * 16, 0.0);
    for (int p = 0; p < 16 * 16; ++p) {
        mask_v[static_cast<std::size_t>(rng.uniform_int(3)) * 16 * 16 + p] = 1.0;
    }
    Tensor masks = Tensor::from({1, 3, 16, 16}, std::move(mask_v));
    LossWeights lw;

    auto loss_fn = [&]() {
        ModelForward fwd = model.forward(images);
        return model.compute_loss(fwd, masks, lw).total;
    };
    loss_fn();  // fills the pinned-init cache at the base point

    std::vector<NamedCheck> checks;
    for (Parameter& p : model.parameters()) {
        checks.push_back({"model." + p.name, gradcheck_inplace(loss_fn, p.value, 1e-5, max_coords_per_param)});
    }
    return checks;
}

}  // namespace emfuse
