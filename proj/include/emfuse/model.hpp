#pragma once

// Arm assembly. The ablation ladder shares one backbone/decoder skeleton and
// differs only in where class queries come from and which EM passes run:
//   baseline: free learned query vectors, no text encoder, no EM
//   text:     frozen encoder + trainable prompts, query-anchor regularizer
//   text_em:  text plus the text EM pass on the queries
//   full:     text_em plus the visual EM pass on f4

#include "emfuse/backbone.hpp"
#include "emfuse/decoder.hpp"
#include "emfuse/em.hpp"
#include "emfuse/emft.hpp"
#include "emfuse/objectives.hpp"
#include "emfuse/optim.hpp"
#include "emfuse/phantom.hpp"
#include "emfuse/text.hpp"

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

enum class Arm { Baseline, Text, TextEm, Full };

inline std::string arm_name(Arm arm) {
    switch (arm) {
        case Arm::Baseline: return "baseline";
        case Arm::Text: return "text";
        case Arm::TextEm: return "text_em";
        case Arm::Full: return "full";
    }
    throw std::logic_error("arm_name: bad arm");
}

inline Arm arm_from_string(const std::string& s) {
    if (s == "baseline") return Arm::Baseline;
    if (s == "text" || s == "+text") return Arm::Text;
    if (s == "text_em" || s == "+text_em") return Arm::TextEm;
    if (s == "full") return Arm::Full;
    throw std::invalid_argument("unknown arm '" + s + "' (expected baseline|text|text_em|full)");
}

inline const std::vector<Arm>& ablation_ladder() {
    static const std::vector<Arm> ladder = {Arm::Baseline, Arm::Text, Arm::TextEm, Arm::Full};
    return ladder;
}

inline bool arm_has_text(Arm arm) { return arm != Arm::Baseline; }
inline bool arm_has_text_em(Arm arm) { return arm == Arm::TextEm || arm == Arm::Full; }
inline bool arm_has_vision_em(Arm arm) { return arm == Arm::Full; }

struct ModelConfig {
    Arm arm = Arm::Full;
    BackboneConfig backbone;
    TextConfig text;
    DecoderConfig decoder;
    EmConfig text_em = text_em_defaults();
    EmConfig vision_em = vision_em_defaults();
    std::vector<std::string> class_names = phantom_class_names();

    int n_classes() const { return static_cast<int>(class_names.size()); }
};

struct ModelForward {
    Tensor logits;       // (B, C, H, W)
    Tensor attention;    // (B, heads, C, N)
    Tensor queries_raw;  // queries before the text EM pass (C, d_text)
    Tensor queries;      // queries fed to the decoder
    Tensor f4_raw;       // deepest tap before the visual EM pass
    Tensor features;     // pyramid level consumed by the decoder
};

struct LossBundle {
    Tensor total;
    Tensor seg;
    Tensor reg;  // zero scalar for the baseline arm
};

class SegModel {
public:
    SegModel(ModelConfig cfg, std::uint64_t seed)
        : cfg_(wire(std::move(cfg))),
          seed_(seed),
          backbone_(cfg_.backbone, seed),
          decoder_(cfg_.decoder, seed) {
        if (cfg_.class_names.empty()) throw std::invalid_argument("model: class_names must be non-empty");
        Rng rng(Rng::derive(seed, 0x11));
        if (arm_has_text(cfg_.arm)) {
            encoder_ = std::make_unique<TextEncoder>(Vocabulary::medical_default(), cfg_.text, seed);
            prompts_ = init_prompt_bank(cfg_.text, seed);
            anchors_ = encoder_->make_anchors(cfg_.class_names);
        } else {
            free_queries_ = random_normal({cfg_.n_classes(), cfg_.text.d_emb}, 0.5, rng);
            free_queries_.set_requires_grad(true);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

    // Pins the EM starting prototypes at their values from the next forward
    // pass. The init is a deliberate stop-gradient, so finite-difference
    // probes of the loss only match the tape when the init cannot move.
    void set_freeze_em_init(bool on) {
        freeze_em_init_ = on;
        text_mu0_cached_ = false;
        cached_vision_mu0_.clear();
    }

    ModelForward forward(const Tensor& images) {
        ModelForward out;
        VisualPyramid pyr = backbone_.forward_pyramid(images, nullptr, nullptr);
        out.f4_raw = pyr.levels[3];
        if (arm_has_vision_em(cfg_.arm)) {
            // fresh rng per forward keeps the jitter identical across calls
            Rng jitter_rng(Rng::derive(seed_, 0x5e));
            if (freeze_em_init_) {
                if (cached_vision_mu0_.empty()) {
                    cached_vision_mu0_ = v_ema_inits(pyr.levels[3], cfg_.vision_em, jitter_rng);
                }
                pyr.levels[3] = v_ema_with_inits(pyr.levels[3], cached_vision_mu0_, cfg_.vision_em).out;
            } else {
                pyr.levels[3] = v_ema(pyr.levels[3], cfg_.vision_em, jitter_rng).out;
            }
        }
        out.features = pyr.level(cfg_.decoder.fusion_level);

        if (arm_has_text(cfg_.arm)) {
            out.queries_raw = encoder_->encode_queries(prompts_, cfg_.class_names);
        } else {
            out.queries_raw = free_queries_;
        }
        if (arm_has_text_em(cfg_.arm)) {
            Rng text_rng(Rng::derive(seed_, 0x7a));
            if (freeze_em_init_) {
                EmConfig em_cfg = cfg_.text_em;
                if (out.queries_raw.shape()[0] < em_cfg.clusters) em_cfg.clusters = out.queries_raw.shape()[0];
                if (!text_mu0_cached_) {
                    cached_text_mu0_ = init_prototypes(out.queries_raw, em_cfg, text_rng);
                    text_mu0_cached_ = true;
                }
                out.queries = em_with_init(out.queries_raw, cached_text_mu0_, em_cfg).out;
            } else {
                out.queries = t_ema(out.queries_raw, cfg_.text_em, text_rng).out;
            }
        } else {
            out.queries = out.queries_raw;
        }

        const BackboneConfig& bb = cfg_.backbone;
        DecoderOutput dec = decoder_.forward(out.queries, out.features, bb.grid_h(), bb.grid_w(), bb.image_h,
                                             bb.image_w);
        out.logits = dec.logits;
        out.attention = dec.attention;
        return out;
    }

    // seg + lambda_reg * reg; the regularizer reads the decoder-facing
    // queries so the text EM pass is inside the regularized path.
    LossBundle compute_loss(const ModelForward& f, const Tensor& masks, const LossWeights& w) {
        LossBundle bundle;
        bundle.seg = seg_loss(f.logits, masks, w);
        if (arm_has_text(cfg_.arm)) {
            bundle.reg = text_reg_loss(f.queries, anchors_, cfg_.text.tau_reg);
        } else {
            bundle.reg = Tensor::scalar(0.0);
        }
        bundle.total = total_loss(bundle.seg, bundle.reg, w);
        return bundle;
    }

    std::vector<Parameter> parameters() {
        std::vector<Parameter> params = backbone_.parameters("backbone");
        std::vector<Parameter> dec = decoder_.parameters("decoder");
        params.insert(params.end(), dec.begin(), dec.end());
        if (arm_has_text(cfg_.arm)) {
            params.push_back({"text.prompts", prompts_, true});
        } else {
            params.push_back({"queries.free", free_queries_, true});
        }
        return params;
    }

    std::uint64_t frozen_checksum() const {
        return arm_has_text(cfg_.arm) ? encoder_->checksum() : 0;
    }
    std::uint64_t anchor_checksum() const {
        return arm_has_text(cfg_.arm) ? checksum_bits(anchors_.values()) : 0;
    }
    std::uint64_t prompt_checksum() const {
        return arm_has_text(cfg_.arm) ? checksum_bits(prompts_.values()) : checksum_bits(free_queries_.values());
    }

    const Tensor& anchors() const {
        if (!arm_has_text(cfg_.arm)) throw std::logic_error("anchors: baseline arm has none");
        return anchors_;
    }
    const TextEncoder& encoder() const {
        if (!encoder_) throw std::logic_error("encoder: baseline arm has none");
        return *encoder_;
    }

    void save_checkpoint(const std::string& path) {
        std::vector<NamedTensor> entries;
        for (Parameter& p : parameters()) entries.push_back({p.name, p.value});
        emft_save_container(path, entries);
    }

    void load_checkpoint(const std::string& path) {
        std::vector<NamedTensor> entries = emft_load_container(path);
        std::vector<Parameter> params = parameters();
        if (entries.size() != params.size()) {
            throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                                     std::to_string(entries.size()));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (entries[i].name != params[i].name || entries[i].tensor.shape() != params[i].value.shape()) {
                throw std::runtime_error("checkpoint: mismatch at '" + entries[i].name + "'");
            }
            params[i].value.values() = entries[i].tensor.values();
        }
    }

private:
    static ModelConfig wire(ModelConfig cfg) {
        cfg.decoder.d_text = cfg.text.d_emb;
        cfg.decoder.d_visual = cfg.backbone.d_model;
        cfg.backbone.validate();
        cfg.decoder.validate();
        validate_em_config(cfg.text_em);
        validate_em_config(cfg.vision_em);
        return cfg;
    }

    ModelConfig cfg_;
    std::uint64_t seed_;
    Backbone backbone_;
    Decoder decoder_;
    std::unique_ptr<TextEncoder> encoder_;
    Tensor prompts_;
    Tensor anchors_;
    Tensor free_queries_;
    bool freeze_em_init_ = false;
    bool text_mu0_cached_ = false;
    Tensor cached_text_mu0_;
    std::vector<Tensor> cached_vision_mu0_;
};

}  // namespace emfuse
