// Command-line front end: training runs, checkpoint evaluation, the ablation
// ladder, the fusion-depth sweep, dispersion analysis and the
// finite-difference gradient audit.

#include <CLI11.hpp>

#include "emfuse/gradsuite.hpp"
#include "emfuse/harness.hpp"

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace emfuse;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string arm;
    std::string fusion_level;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file (TrainConfig fields, all optional)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "run seed")->each([&](const std::string&) { args.seed_set = true; });
    cmd->add_option("--arm", args.arm, "model arm: baseline|text|text_em|full");
    cmd->add_option("--fusion-level", args.fusion_level, "decoder tap: f1..f4");
}

int parse_fusion_level(const std::string& s) {
    std::string digits = s;
    if (!digits.empty() && (digits[0] == 'f' || digits[0] == 'F')) digits = digits.substr(1);
    if (digits.size() == 1 && digits[0] >= '1' && digits[0] <= '4') return digits[0] - '0';
    throw CLI::ValidationError("--fusion-level", "expected f1..f4, got '" + s + "'");
}

TrainConfig resolve_config(const CommonArgs& args) {
    TrainConfig cfg;
    if (!args.config_path.empty()) cfg = load_train_config(args.config_path);
    if (args.seed_set) cfg.seed = args.seed;
    if (!args.arm.empty()) cfg.model.arm = arm_from_string(args.arm);
    if (!args.fusion_level.empty()) cfg.model.decoder.fusion_level = parse_fusion_level(args.fusion_level);
    cfg.validate();
    return cfg;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) seeds.push_back(std::stoull(item));
    }
    if (seeds.empty()) throw CLI::ValidationError("--seeds", "expected a comma-separated seed list");
    return seeds;
}

void write_report(const std::string& out_dir, const nlohmann::json& report) {
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir + "/report.json", report.dump(2) + "\n");
}

int cmd_train(const CommonArgs& args, int pgm_samples) {
    TrainConfig cfg = resolve_config(args);
    RunArtifacts art = run_training_job(cfg);
    write_run_artifacts(art, args.out_dir, pgm_samples);
    std::cout << "arm=" << arm_name(cfg.model.arm) << " seed=" << cfg.seed
              << " final_loss=" << art.train.final_loss << " source_dsc=" << art.eval.source().mean_foreground
              << " target_mean_dsc=" << art.eval.target_mean << "\n"
              << "wrote " << args.out_dir << "/report.json\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, int samples) {
    TrainConfig cfg = resolve_config(args);
    SegModel model(cfg.model, cfg.seed);
    model.load_checkpoint(checkpoint);
    const int n = samples > 0 ? samples : cfg.eval_samples;
    EvalResult ev = evaluate(model, eval_spec_list(cfg), n, cfg.eval_seed);
    nlohmann::json report = {{"arm", arm_name(cfg.model.arm)},
                             {"seed", cfg.seed},
                             {"checkpoint", checkpoint},
                             {"config_hash", config_hash(cfg)},
                             {"eval", nlohmann::json::array()},
                             {"target_mean_dsc", ev.target_mean}};
    for (const DomainEval& de : ev.domains) report["eval"].push_back(to_json(de, cfg.model.class_names));
    write_report(args.out_dir, report);
    write_text_file(args.out_dir + "/metrics.csv", metrics_csv(ev, cfg.model.class_names));
    std::cout << "source_dsc=" << ev.source().mean_foreground << " target_mean_dsc=" << ev.target_mean << "\n"
              << "wrote " << args.out_dir << "/report.json\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& seeds_csv) {
    TrainConfig cfg = resolve_config(args);
    AblationReport report = ablate(cfg, parse_seed_list(seeds_csv));
    nlohmann::json table = report.to_table();
    table["config_hash"] = config_hash(cfg);
    write_report(args.out_dir, table);
    std::ostringstream csv;
    csv << "arm,seed,source_dsc,target_mean_dsc\n";
    csv.precision(6);
    csv << std::fixed;
    for (const ArmRun& r : report.runs) {
        csv << arm_name(r.arm) << "," << r.seed << "," << r.source_dsc << "," << r.target_mean << "\n";
    }
    write_text_file(args.out_dir + "/metrics.csv", csv.str());
    for (const auto& row : table["rows"]) {
        std::cout << row["arm"].get<std::string>() << " mean_target_dsc=" << row["mean_target_dsc"].get<double>()
                  << "\n";
    }
    std::cout << "wrote " << args.out_dir << "/report.json\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& seeds_csv) {
    TrainConfig cfg = resolve_config(args);
    SweepReport report = sweep_fusion(cfg, parse_seed_list(seeds_csv));
    nlohmann::json table = report.to_table();
    table["config_hash"] = config_hash(cfg);
    write_report(args.out_dir, table);
    std::ostringstream csv;
    csv << "fusion_level,seed,target_mean_dsc\n";
    csv.precision(6);
    csv << std::fixed;
    for (const SweepRun& r : report.runs) csv << "f" << r.level << "," << r.seed << "," << r.target_mean << "\n";
    write_text_file(args.out_dir + "/metrics.csv", csv.str());
    for (const auto& row : table["rows"]) {
        std::cout << row["fusion_level"].get<std::string>()
                  << " mean_target_dsc=" << row["mean_target_dsc"].get<double>() << "\n";
    }
    std::cout << "wrote " << args.out_dir << "/report.json\n";
    return 0;
}

int cmd_analyze(const CommonArgs& args, const std::string& checkpoint, int samples) {
    TrainConfig cfg = resolve_config(args);
    SegModel model(cfg.model, cfg.seed);
    if (!checkpoint.empty()) model.load_checkpoint(checkpoint);
    const int n = samples > 0 ? samples : std::min(8, cfg.eval_samples);
    DispersionAnalysis analysis = analyze_dispersion(model, source_domain(), n, cfg.eval_seed);
    std::filesystem::create_directories(args.out_dir);
    write_dispersion_artifacts(analysis, args.out_dir);
    nlohmann::json report = to_json(analysis);
    report["config_hash"] = config_hash(cfg);
    report["checkpoint"] = checkpoint;
    write_report(args.out_dir, report);
    std::cout << to_json(analysis).dump(2) << "\nwrote " << args.out_dir << "/report.json\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out_dir, double tolerance) {
    std::vector<NamedCheck> checks = op_gradchecks(seed);
    std::vector<NamedCheck> model_checks = model_gradchecks(seed);
    checks.insert(checks.end(), model_checks.begin(), model_checks.end());
    double worst = 0.0;
    std::string worst_name;
    nlohmann::json rows = nlohmann::json::array();
    for (const NamedCheck& c : checks) {
        rows.push_back({{"name", c.name}, {"max_error", c.result.max_error}});
        if (c.result.max_error > worst) {
            worst = c.result.max_error;
            worst_name = c.name;
        }
        std::cout << (c.result.max_error <= tolerance ? "ok   " : "FAIL ") << c.name
                  << " max_error=" << c.result.max_error << "\n";
    }
    std::cout << "worst: " << worst_name << " (" << worst << "), tolerance " << tolerance << "\n";
    if (!out_dir.empty()) {
        write_report(out_dir, nlohmann::json{{"checks", rows}, {"worst", worst}, {"worst_name", worst_name}});
    }
    return worst <= tolerance ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EM-aggregated text-guided segmentation on synthetic multi-domain phantoms"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, ablate_args, sweep_args, analyze_args;
    int pgm_samples = 0;
    std::string eval_checkpoint, analyze_checkpoint;
    int eval_samples = 0, analyze_samples = 0;
    std::string ablate_seeds = "0,1,2", sweep_seeds = "0,1,2";
    std::uint64_t gradcheck_seed = 0;
    std::string gradcheck_out;
    double gradcheck_tol = 1e-4;

    CLI::App* train_cmd = app.add_subcommand("train", "train one arm and evaluate across domains");
    add_common(train_cmd, train_args);
    train_cmd->add_option("--pgm", pgm_samples, "write N image/mask/prediction PGM triptychs per domain");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint across domains");
    add_common(eval_cmd, eval_args);
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "EMFT checkpoint path")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--samples", eval_samples, "evaluation samples per domain");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the four-arm ladder over a seed list");
    add_common(ablate_cmd, ablate_args);
    ablate_cmd->add_option("--seeds", ablate_seeds, "comma-separated seed list");

    CLI::App* sweep_cmd = app.add_subcommand("sweep-fusion", "train the full arm at every fusion tap");
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated seed list");

    CLI::App* analyze_cmd = app.add_subcommand("analyze-dispersion", "dump features around both EM passes");
    add_common(analyze_cmd, analyze_args);
    analyze_cmd->add_option("--checkpoint", analyze_checkpoint, "EMFT checkpoint path")->check(CLI::ExistingFile);
    analyze_cmd->add_option("--samples", analyze_samples, "samples to analyze");

    CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference audit of every op and the model");
    gradcheck_cmd->add_option("--seed", gradcheck_seed, "probe seed");
    gradcheck_cmd->add_option("--out", gradcheck_out, "optional output directory");
    gradcheck_cmd->add_option("--tolerance", gradcheck_tol, "max relative error allowed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_args, pgm_samples);
        if (eval_cmd->parsed()) return cmd_eval(eval_args, eval_checkpoint, eval_samples);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate_args, ablate_seeds);
        if (sweep_cmd->parsed()) return cmd_sweep(sweep_args, sweep_seeds);
        if (analyze_cmd->parsed()) return cmd_analyze(analyze_args, analyze_checkpoint, analyze_samples);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_seed, gradcheck_out, gradcheck_tol);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
