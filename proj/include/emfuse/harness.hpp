#pragma once

// Benchmark harness: JSON-configurable training on the source domain only,
// fixed-seed evaluation across domains, the four-arm ablation ladder, the
// fusion-depth sweep, dispersion analysis and report/CSV/PGM emission.
// Reports contain no timing or environment fields so a repeated run is
// byte-identical.

#include "emfuse/model.hpp"
#include "emfuse/objectives.hpp"
#include "emfuse/phantom.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace emfuse {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization (absent keys keep their defaults)
// ---------------------------------------------------------------------------

inline std::string em_init_name(EmInit init) {
    switch (init) {
        case EmInit::SeededSample: return "seeded_sample";
        case EmInit::FirstK: return "first_k";
        case EmInit::MeanJitter: return "mean_jitter";
    }
    throw std::logic_error("em_init_name: bad init");
}

inline EmInit em_init_from_string(const std::string& s) {
    if (s == "seeded_sample") return EmInit::SeededSample;
    if (s == "first_k") return EmInit::FirstK;
    if (s == "mean_jitter") return EmInit::MeanJitter;
    throw std::invalid_argument("unknown em init '" + s + "'");
}

inline json to_json(const EmConfig& c) {
    return {{"clusters", c.clusters}, {"stages", c.stages},       {"temperature", c.temperature},
            {"alpha", c.alpha},       {"init", em_init_name(c.init)}};
}

inline void from_json_into(const json& j, EmConfig& c) {
    c.clusters = j.value("clusters", c.clusters);
    c.stages = j.value("stages", c.stages);
    c.temperature = j.value("temperature", c.temperature);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("init")) c.init = em_init_from_string(j.at("init").get<std::string>());
}

inline json to_json(const BackboneConfig& c) {
    return {{"image_h", c.image_h}, {"image_w", c.image_w},   {"patch", c.patch},
            {"in_channels", c.in_channels}, {"d_model", c.d_model}, {"n_blocks", c.n_blocks},
            {"heads", c.heads},     {"taps", c.taps}};
}

inline void from_json_into(const json& j, BackboneConfig& c) {
    c.image_h = j.value("image_h", c.image_h);
    c.image_w = j.value("image_w", c.image_w);
    c.patch = j.value("patch", c.patch);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.d_model = j.value("d_model", c.d_model);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.heads = j.value("heads", c.heads);
    if (j.contains("taps")) c.taps = j.at("taps").get<std::array<int, 4>>();
}

inline json to_json(const TextConfig& c) {
    return {{"d_emb", c.d_emb},     {"heads", c.heads},   {"blocks", c.blocks},
            {"n_prompts", c.n_prompts}, {"max_len", c.max_len}, {"tau_reg", c.tau_reg}};
}

inline void from_json_into(const json& j, TextConfig& c) {
    c.d_emb = j.value("d_emb", c.d_emb);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.n_prompts = j.value("n_prompts", c.n_prompts);
    c.max_len = j.value("max_len", c.max_len);
    c.tau_reg = j.value("tau_reg", c.tau_reg);
}

inline json to_json(const DecoderConfig& c) {
    return {{"d_shared", c.d_shared},
            {"heads", c.heads},
            {"fusion_level", c.fusion_level},
            {"logit_scale_init", c.logit_scale_init},
            {"bilinear", c.bilinear}};
}

inline void from_json_into(const json& j, DecoderConfig& c) {
    c.d_shared = j.value("d_shared", c.d_shared);
    c.heads = j.value("heads", c.heads);
    c.fusion_level = j.value("fusion_level", c.fusion_level);
    c.logit_scale_init = j.value("logit_scale_init", c.logit_scale_init);
    c.bilinear = j.value("bilinear", c.bilinear);
}

inline json to_json(const ModelConfig& c) {
    return {{"arm", arm_name(c.arm)},
            {"backbone", to_json(c.backbone)},
            {"text", to_json(c.text)},
            {"decoder", to_json(c.decoder)},
            {"text_em", to_json(c.text_em)},
            {"vision_em", to_json(c.vision_em)},
            {"class_names", c.class_names}};
}

inline void from_json_into(const json& j, ModelConfig& c) {
    if (j.contains("arm")) c.arm = arm_from_string(j.at("arm").get<std::string>());
    if (j.contains("backbone")) from_json_into(j.at("backbone"), c.backbone);
    if (j.contains("text")) from_json_into(j.at("text"), c.text);
    if (j.contains("decoder")) from_json_into(j.at("decoder"), c.decoder);
    if (j.contains("text_em")) from_json_into(j.at("text_em"), c.text_em);
    if (j.contains("vision_em")) from_json_into(j.at("vision_em"), c.vision_em);
    if (j.contains("class_names")) c.class_names = j.at("class_names").get<std::vector<std::string>>();
}

inline json to_json(const LossWeights& w) { return {{"bce", w.bce}, {"dice", w.dice}, {"reg", w.reg}}; }

inline void from_json_into(const json& j, LossWeights& w) {
    w.bce = j.value("bce", w.bce);
    w.dice = j.value("dice", w.dice);
    w.reg = j.value("reg", w.reg);
}

inline json to_json(const DomainSpec& s) {
    return {{"id", s.id},       {"name", s.name},           {"gamma", s.gamma},   {"contrast", s.contrast},
            {"noise_sigma", s.noise_sigma}, {"bias_amp", s.bias_amp}, {"invert", s.invert}};
}

inline void from_json_into(const json& j, DomainSpec& s) {
    s.id = j.value("id", s.id);
    s.name = j.value("name", s.name);
    s.gamma = j.value("gamma", s.gamma);
    s.contrast = j.value("contrast", s.contrast);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.bias_amp = j.value("bias_amp", s.bias_amp);
    s.invert = j.value("invert", s.invert);
}

struct TrainConfig {
    int epochs = 45;
    int batches_per_epoch = 64;
    int batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    int eval_samples = 32;
    std::uint64_t eval_seed = 9000;
    LossWeights weights;
    ModelConfig model;
    std::vector<DomainSpec> targets = default_target_domains();

    void validate() const {
        if (epochs < 0 || batches_per_epoch < 1 || batch_size < 1) {
            throw std::invalid_argument("train config: bad schedule");
        }
        if (lr < 0.0 || weight_decay < 0.0 || clip_norm <= 0.0) {
            throw std::invalid_argument("train config: bad optimizer settings");
        }
        if (eval_samples < 1) throw std::invalid_argument("train config: eval_samples must be positive");
        weights.validate();
        for (const DomainSpec& t : targets) {
            if (t.is_source()) throw std::invalid_argument("train config: target list may not contain the source");
        }
    }
};

inline json to_json(const TrainConfig& c) {
    json targets = json::array();
    for (const DomainSpec& t : c.targets) targets.push_back(to_json(t));
    return {{"epochs", c.epochs},
            {"batches_per_epoch", c.batches_per_epoch},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed},
            {"eval_samples", c.eval_samples},
            {"eval_seed", c.eval_seed},
            {"weights", to_json(c.weights)},
            {"model", to_json(c.model)},
            {"targets", targets}};
}

inline void from_json_into(const json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.eval_seed = j.value("eval_seed", c.eval_seed);
    if (j.contains("weights")) from_json_into(j.at("weights"), c.weights);
    if (j.contains("model")) from_json_into(j.at("model"), c.model);
    if (j.contains("targets")) {
        c.targets.clear();
        for (const json& t : j.at("targets")) {
            DomainSpec s;
            from_json_into(t, s);
            c.targets.push_back(s);
        }
    }
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    TrainConfig cfg;
    from_json_into(json::parse(is), cfg);
    return cfg;
}

inline std::string config_hash(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "0x" << std::hex << checksum_string(to_json(cfg).dump());
    return os.str();
}

inline std::string hex_checksum(std::uint64_t h) {
    std::ostringstream os;
    os << "0x" << std::hex << h;
    return os.str();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
    double total = 0.0;
    double seg = 0.0;
    double reg = 0.0;
};

struct TrainResult {
    TrainConfig cfg;
    std::unique_ptr<SegModel> model;
    std::vector<EpochStats> curve;
    double final_loss = 0.0;
    std::vector<int> audit_domains;  // domain ids that produced training data
    std::uint64_t frozen_before = 0, frozen_after = 0;
    std::uint64_t anchors_before = 0, anchors_after = 0;
    std::uint64_t prompts_before = 0, prompts_after = 0;
};

// Source-domain-only training: the loop itself instantiates the source spec,
// so no caller-provided domain can leak in.
inline TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    TrainResult result;
    result.cfg = cfg;
    result.model = std::make_unique<SegModel>(cfg.model, cfg.seed);
    SegModel& model = *result.model;

    result.frozen_before = model.frozen_checksum();
    result.anchors_before = model.anchor_checksum();
    result.prompts_before = model.prompt_checksum();

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    adam_cfg.weight_decay = cfg.weight_decay;
    Adam adam(model.parameters(), adam_cfg);

    const DomainSpec source = source_domain();
    const BackboneConfig& bb = cfg.model.backbone;
    std::uint64_t sample_cursor = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        for (int step = 0; step < cfg.batches_per_epoch; ++step) {
            Batch batch = make_batch(cfg.seed, sample_cursor, cfg.batch_size, source, bb.image_h, bb.image_w);
            sample_cursor += static_cast<std::uint64_t>(cfg.batch_size);
            if (result.audit_domains.empty() || result.audit_domains.back() != source.id) {
                result.audit_domains.push_back(source.id);
            }
            adam.zero_grad();
            ModelForward fwd = model.forward(batch.images);
            LossBundle loss = model.compute_loss(fwd, batch.masks, cfg.weights);
            const double total = loss.total.item();
            if (!std::isfinite(total)) {
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                         std::to_string(step));
            }
            backward(loss.total);
            clip_grad_norm(adam.params(), cfg.clip_norm);
            adam.step();
            stats.total += total;
            stats.seg += loss.seg.item();
            stats.reg += loss.reg.item();
            result.final_loss = total;
        }
        stats.total /= cfg.batches_per_epoch;
        stats.seg /= cfg.batches_per_epoch;
        stats.reg /= cfg.batches_per_epoch;
        result.curve.push_back(stats);
    }

    result.frozen_after = model.frozen_checksum();
    result.anchors_after = model.anchor_checksum();
    result.prompts_after = model.prompt_checksum();
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct DomainEval {
    DomainSpec spec;
    std::vector<double> per_class;  // DSC per mask channel, background included last
    double mean_foreground = 0.0;
};

struct EvalResult {
    std::vector<DomainEval> domains;  // source first, then targets in order
    double target_mean = 0.0;

    const DomainEval& source() const { return domains.front(); }
};

// Hard argmax over class channels -> one-hot planes.
inline std::vector<std::vector<double>> hard_masks(const double* logits, int classes, int pixels) {
    std::vector<std::vector<double>> planes(static_cast<std::size_t>(classes),
                                            std::vector<double>(static_cast<std::size_t>(pixels), 0.0));
    for (int p = 0; p < pixels; ++p) {
        int arg = 0;
        double best = logits[p];
        for (int c = 1; c < classes; ++c) {
            const double v = logits[static_cast<std::size_t>(c) * pixels + p];
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        planes[static_cast<std::size_t>(arg)][static_cast<std::size_t>(p)] = 1.0;
    }
    return planes;
}

inline EvalResult evaluate(SegModel& model, const std::vector<DomainSpec>& specs, int n_samples,
                           std::uint64_t eval_seed) {
    const BackboneConfig& bb = model.config().backbone;
    const int classes = model.config().n_classes();
    const int pixels = bb.image_h * bb.image_w;
    const int chunk = 8;

    EvalResult result;
    double target_sum = 0.0;
    int target_count = 0;
    for (const DomainSpec& spec : specs) {
        const std::uint64_t domain_seed = Rng::derive(eval_seed, static_cast<std::uint64_t>(spec.id) + 101);
        std::vector<double> class_sum(static_cast<std::size_t>(classes), 0.0);
        for (int start = 0; start < n_samples; start += chunk) {
            const int count = std::min(chunk, n_samples - start);
            Batch batch = make_batch(domain_seed, static_cast<std::uint64_t>(start), count, spec, bb.image_h,
                                     bb.image_w);
            ModelForward fwd = model.forward(batch.images);
            for (int b = 0; b < count; ++b) {
                const double* logits = fwd.logits.data() + static_cast<std::size_t>(b) * classes * pixels;
                const double* gt = batch.masks.data() + static_cast<std::size_t>(b) * classes * pixels;
                auto planes = hard_masks(logits, classes, pixels);
                for (int c = 0; c < classes; ++c) {
                    std::vector<double> gt_plane(gt + static_cast<std::size_t>(c) * pixels,
                                                 gt + static_cast<std::size_t>(c + 1) * pixels);
                    class_sum[static_cast<std::size_t>(c)] += dsc_metric(planes[static_cast<std::size_t>(c)], gt_plane);
                }
            }
        }
        DomainEval de;
        de.spec = spec;
        for (int c = 0; c < classes; ++c) de.per_class.push_back(class_sum[static_cast<std::size_t>(c)] / n_samples);
        const int fg = std::min(classes, kPhantomForeground);
        double fg_sum = 0.0;
        for (int c = 0; c < fg; ++c) fg_sum += de.per_class[static_cast<std::size_t>(c)];
        de.mean_foreground = fg_sum / fg;
        if (!spec.is_source()) {
            target_sum += de.mean_foreground;
            ++target_count;
        }
        result.domains.push_back(std::move(de));
    }
    result.target_mean = target_count > 0 ? target_sum / target_count : 0.0;
    return result;
}

inline std::vector<DomainSpec> eval_spec_list(const TrainConfig& cfg) {
    std::vector<DomainSpec> specs = {source_domain()};
    specs.insert(specs.end(), cfg.targets.begin(), cfg.targets.end());
    return specs;
}

// ---------------------------------------------------------------------------
// Dispersion analysis
// ---------------------------------------------------------------------------

struct DispersionAnalysis {
    bool has_text = false, has_vision = false;
    DispersionPair text;
    DispersionPair vision;
    Tensor text_before, text_after;      // (C, d)
    Tensor vision_before, vision_after;  // (B*N, d)
};

// Before/after dumps around the two EM passes; alpha is forced to 1 for the
// "after" side so the dump shows the pure aggregate.
inline DispersionAnalysis analyze_dispersion(SegModel& model, const DomainSpec& spec, int n_samples,
                                             std::uint64_t eval_seed) {
    const ModelConfig& mc = model.config();
    const BackboneConfig& bb = mc.backbone;
    DispersionAnalysis out;
    const std::uint64_t domain_seed = Rng::derive(eval_seed, static_cast<std::uint64_t>(spec.id) + 101);
    Batch batch = make_batch(domain_seed, 0, n_samples, spec, bb.image_h, bb.image_w);
    ModelForward fwd = model.forward(batch.images);

    if (arm_has_text_em(mc.arm)) {
        out.has_text = true;
        out.text_before = fwd.queries_raw.detached();
        EmConfig cfg = mc.text_em;
        cfg.alpha = 1.0;
        Rng text_rng(Rng::derive(model.seed(), 0x7a));
        out.text_after = t_ema(out.text_before, cfg, text_rng).out.detached();
        const int probe_k = std::max(2, mc.n_classes() / 2);
        Rng probe1(Rng::derive(eval_seed, 0xd15));
        Rng probe2(Rng::derive(eval_seed, 0xd15));
        out.text.before = dispersion(out.text_before, probe_k, probe1);
        out.text.after = dispersion(out.text_after, probe_k, probe2);
    }
    if (arm_has_vision_em(mc.arm)) {
        out.has_vision = true;
        const int n = fwd.f4_raw.shape()[0] * fwd.f4_raw.shape()[1];
        const int d = fwd.f4_raw.shape()[2];
        out.vision_before = Tensor::from({n, d}, fwd.f4_raw.values());
        EmConfig cfg = mc.vision_em;
        cfg.alpha = 1.0;
        Rng jitter_rng(Rng::derive(model.seed(), 0x5e));
        Tensor refined = v_ema(fwd.f4_raw.detached(), cfg, jitter_rng).out;
        out.vision_after = Tensor::from({n, d}, refined.values());
        const int probe_k = std::min(cfg.clusters, n - 1);
        Rng probe1(Rng::derive(eval_seed, 0xd16));
        Rng probe2(Rng::derive(eval_seed, 0xd16));
        out.vision.before = dispersion(out.vision_before, probe_k, probe1);
        out.vision.after = dispersion(out.vision_after, probe_k, probe2);
    }
    return out;
}

inline json to_json(const DispersionAnalysis& a) {
    json j = json::object();
    if (a.has_text) j["text_queries"] = to_json(a.text);
    if (a.has_vision) j["f4_features"] = to_json(a.vision);
    return j;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json to_json(const DomainEval& de, const std::vector<std::string>& class_names) {
    json per_class = json::object();
    for (std::size_t c = 0; c < de.per_class.size(); ++c) per_class[class_names[c]] = de.per_class[c];
    return {{"domain", de.spec.name}, {"per_class_dsc", per_class}, {"mean_foreground_dsc", de.mean_foreground}};
}

inline json run_report(const TrainResult& tr, const EvalResult& ev, const DispersionAnalysis* disp) {
    json epochs = json::array();
    for (const EpochStats& e : tr.curve) {
        epochs.push_back({{"total", e.total}, {"seg", e.seg}, {"reg", e.reg}});
    }
    json domains = json::array();
    for (const DomainEval& de : ev.domains) domains.push_back(to_json(de, tr.cfg.model.class_names));
    json report = {
        {"arm", arm_name(tr.cfg.model.arm)},
        {"seed", tr.cfg.seed},
        {"config", to_json(tr.cfg)},
        {"config_hash", config_hash(tr.cfg)},
        {"train",
         {{"epoch_losses", epochs},
          {"final_loss", tr.final_loss},
          {"audit_domains", tr.audit_domains},
          {"checksums",
           {{"frozen_encoder_before", hex_checksum(tr.frozen_before)},
            {"frozen_encoder_after", hex_checksum(tr.frozen_after)},
            {"anchors_before", hex_checksum(tr.anchors_before)},
            {"anchors_after", hex_checksum(tr.anchors_after)},
            {"prompts_before", hex_checksum(tr.prompts_before)},
            {"prompts_after", hex_checksum(tr.prompts_after)}}}}},
        {"eval", {{"domains", domains}, {"target_mean_dsc", ev.target_mean}}},
    };
    if (disp) report["dispersion"] = to_json(*disp);
    return report;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << content;
}

inline std::string metrics_csv(const EvalResult& ev, const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << "domain,class,dsc\n";
    os.precision(6);
    os << std::fixed;
    for (const DomainEval& de : ev.domains) {
        for (std::size_t c = 0; c < de.per_class.size(); ++c) {
            os << de.spec.name << "," << class_names[c] << "," << de.per_class[c] << "\n";
        }
        os << de.spec.name << ",mean_foreground," << de.mean_foreground << "\n";
    }
    os << "targets,mean_foreground," << ev.target_mean << "\n";
    return os.str();
}

// Binary 8-bit PGM, values clamped to [0,1].
inline void write_pgm(const std::string& path, const double* data, int h, int w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < h * w; ++i) {
        const double v = std::min(std::max(data[i], 0.0), 1.0);
        os.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
}

// image / ground truth / prediction triptych for qualitative checks.
inline void write_triptych(const std::string& dir, const std::string& stem, const DomainSample& sample,
                           const std::vector<std::vector<double>>& pred_planes) {
    const int h = sample.image.shape()[1], w = sample.image.shape()[2];
    const int classes = sample.mask.shape()[0];
    write_pgm(dir + "/" + stem + "_image.pgm", sample.image.data(), h, w);
    auto label_map = [&](auto&& plane_at) {
        std::vector<double> lab(static_cast<std::size_t>(h) * w, 0.0);
        for (int c = 0; c < classes; ++c) {
            const double level = classes > 1 ? 1.0 - static_cast<double>(c) / (classes - 1) : 1.0;
            for (int p = 0; p < h * w; ++p) {
                if (plane_at(c, p) != 0.0) lab[static_cast<std::size_t>(p)] = level;
            }
        }
        return lab;
    };
    auto gt = label_map([&](int c, int p) { return sample.mask.data()[static_cast<std::size_t>(c) * h * w + p]; });
    auto pr = label_map([&](int c, int p) { return pred_planes[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)]; });
    write_pgm(dir + "/" + stem + "_mask.pgm", gt.data(), h, w);
    write_pgm(dir + "/" + stem + "_pred.pgm", pr.data(), h, w);
}

// ---------------------------------------------------------------------------
// Ablation ladder and fusion sweep
// ---------------------------------------------------------------------------

struct ArmRun {
    Arm arm;
    std::uint64_t seed;
    double source_dsc = 0.0;
    double target_mean = 0.0;
};

struct AblationReport {
    std::vector<ArmRun> runs;  // ladder-major, seeds inner
    std::vector<std::uint64_t> seeds;

    json to_table() const {
        json rows = json::array();
        for (Arm arm : ablation_ladder()) {
            json per_seed = json::array();
            double mean = 0.0;
            int count = 0;
            for (const ArmRun& r : runs) {
                if (r.arm != arm) continue;
                per_seed.push_back({{"seed", r.seed}, {"target_mean_dsc", r.target_mean}, {"source_dsc", r.source_dsc}});
                mean += r.target_mean;
                ++count;
            }
            rows.push_back({{"arm", arm_name(arm)},
                            {"text", arm_has_text(arm)},
                            {"text_em", arm_has_text_em(arm)},
                            {"vision_em", arm_has_vision_em(arm)},
                            {"per_seed", per_seed},
                            {"mean_target_dsc", count > 0 ? mean / count : 0.0}});
        }
        return {{"rows", rows}};
    }
};

inline ModelConfig arm_config(ModelConfig base, Arm arm) {
    base.arm = arm;
    return base;
}

inline AblationReport ablate(const TrainConfig& base, const std::vector<std::uint64_t>& seeds) {
    AblationReport report;
    report.seeds = seeds;
    for (Arm arm : ablation_ladder()) {
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.model = arm_config(base.model, arm);
            cfg.seed = seed;
            TrainResult tr = train(cfg);
            EvalResult ev = evaluate(*tr.model, eval_spec_list(cfg), cfg.eval_samples, cfg.eval_seed);
            report.runs.push_back({arm, seed, ev.source().mean_foreground, ev.target_mean});
        }
    }
    return report;
}

struct SweepRun {
    int level;
    std::uint64_t seed;
    double target_mean = 0.0;
};

struct SweepReport {
    std::vector<SweepRun> runs;

    json to_table() const {
        json rows = json::array();
        for (int level = 1; level <= 4; ++level) {
            json per_seed = json::array();
            double mean = 0.0;
            int count = 0;
            for (const SweepRun& r : runs) {
                if (r.level != level) continue;
                per_seed.push_back({{"seed", r.seed}, {"target_mean_dsc", r.target_mean}});
                mean += r.target_mean;
                ++count;
            }
            rows.push_back({{"fusion_level", "f" + std::to_string(level)},
                            {"per_seed", per_seed},
                            {"mean_target_dsc", count > 0 ? mean / count : 0.0}});
        }
        return {{"rows", rows}};
    }
};

// ---------------------------------------------------------------------------
// One full job: train, evaluate, analyze, emit artifacts
// ---------------------------------------------------------------------------

struct RunArtifacts {
    TrainResult train;
    EvalResult eval;
    bool has_dispersion = false;
    DispersionAnalysis dispersion;
    json report;
};

inline RunArtifacts run_training_job(const TrainConfig& cfg) {
    RunArtifacts art;
    art.train = train(cfg);
    art.eval = evaluate(*art.train.model, eval_spec_list(cfg), cfg.eval_samples, cfg.eval_seed);
    const Arm arm = cfg.model.arm;
    if (arm_has_text_em(arm) || arm_has_vision_em(arm)) {
        art.has_dispersion = true;
        const int n = std::min(8, cfg.eval_samples);
        art.dispersion = analyze_dispersion(*art.train.model, source_domain(), n, cfg.eval_seed);
    }
    art.report = run_report(art.train, art.eval, art.has_dispersion ? &art.dispersion : nullptr);
    return art;
}

inline void write_dispersion_artifacts(const DispersionAnalysis& a, const std::string& dir) {
    std::filesystem::create_directories(dir);
    if (a.has_text) {
        emft_save(dir + "/queries_before.emft", a.text_before);
        emft_save(dir + "/queries_after.emft", a.text_after);
    }
    if (a.has_vision) {
        emft_save(dir + "/f4_before.emft", a.vision_before);
        emft_save(dir + "/f4_after.emft", a.vision_after);
    }
    write_text_file(dir + "/dispersion.json", to_json(a).dump(2) + "\n");
}

inline void write_run_artifacts(const RunArtifacts& art, const std::string& out_dir, int pgm_samples = 0) {
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir + "/report.json", art.report.dump(2) + "\n");
    write_text_file(out_dir + "/metrics.csv", metrics_csv(art.eval, art.train.cfg.model.class_names));
    art.train.model->save_checkpoint(out_dir + "/checkpoint.emft");
    if (art.has_dispersion) write_dispersion_artifacts(art.dispersion, out_dir + "/dispersion");
    if (pgm_samples > 0) {
        SegModel& model = *art.train.model;
        const BackboneConfig& bb = art.train.cfg.model.backbone;
        const int classes = art.train.cfg.model.n_classes();
        for (const DomainSpec& spec : eval_spec_list(art.train.cfg)) {
            const std::uint64_t domain_seed =
                Rng::derive(art.train.cfg.eval_seed, static_cast<std::uint64_t>(spec.id) + 101);
            for (int i = 0; i < pgm_samples; ++i) {
                DomainSample sample =
                    gen_sample(Rng::derive(domain_seed, static_cast<std::uint64_t>(i)), spec, bb.image_h, bb.image_w);
                Tensor image4 = reshape(sample.image, {1, 1, bb.image_h, bb.image_w});
                ModelForward fwd = model.forward(image4);
                auto planes = hard_masks(fwd.logits.data(), classes, bb.image_h * bb.image_w);
                std::ostringstream stem;
                stem << spec.name << "_" << i;
                write_triptych(out_dir, stem.str(), sample, planes);
            }
        }
    }
}

inline SweepReport sweep_fusion(const TrainConfig& base, const std::vector<std::uint64_t>& seeds) {
    SweepReport report;
    for (int level = 1; level <= 4; ++level) {
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.model.arm = Arm::Full;
            cfg.model.decoder.fusion_level = level;
            cfg.seed = seed;
            TrainResult tr = train(cfg);
            EvalResult ev = evaluate(*tr.model, eval_spec_list(cfg), cfg.eval_samples, cfg.eval_seed);
            report.runs.push_back({level, seed, ev.target_mean});
        }
    }
    return report;
}

}  // namespace emfuse
