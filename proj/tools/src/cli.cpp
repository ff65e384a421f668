#include "csm_cli/cli.h"

#include "csm/errors.h"
#include "csm/harness/checkpoint.h"
#include "csm/harness/experiment.h"

#include <CLI11.hpp>

#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace csm::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Common {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
};

ExperimentConfig resolve_config(const Common & c) {
    ExperimentConfig cfg;
    if (!c.config.empty()) {
        cfg = load_config(c.config);
    } else {
        cfg.methods = registered_methods();
        if (const char * env = std::getenv("CF_SEED"); env && *env) cfg.seed = std::stoull(env);
        cfg.propagate_seed();
    }
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.propagate_seed();
    }
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

std::string finetuned_file(const TaskData & t) { return "finetuned_" + t.name + ".csfw"; }

CheckpointMetadata run_metadata(const ExperimentConfig & cfg) {
    return {{"seed", std::to_string(cfg.seed)}, {"config_hash", std::to_string(config_hash(cfg))}};
}

// Loads theta0 and fine-tuned checkpoints written by `finetune`; otherwise trains them from the config.
PreparedTasks prepared_from(const ExperimentConfig & cfg, const std::string & models_dir) {
    if (models_dir.empty()) return prepare_tasks(cfg);
    PreparedTasks p;
    p.family = generate_task_family(cfg.family);
    p.theta0 = load_checkpoint(fs::path(models_dir) / "theta0.csfw");
    if (p.theta0.spec_hash != cfg.spec.hash()) {
        throw LayoutMismatchError("checkpoint " + (fs::path(models_dir) / "theta0.csfw").string() +
                                  " does not match the configured model");
    }
    for (std::size_t t = 0; t < p.family.tasks.size(); ++t) {
        p.finetuned.push_back(load_checkpoint(fs::path(models_dir) / finetuned_file(p.family.tasks[t])));
        p.taskvecs.push_back(compute_task_vector(p.finetuned.back(), p.theta0, static_cast<int>(t)));
    }
    return p;
}

void write_text(const fs::path & path, const std::string & text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
}

int cmd_gen_tasks(const ExperimentConfig & cfg, std::ostream & out) {
    const TaskFamily fam = generate_task_family(cfg.family);
    json j;
    j["seed"] = cfg.seed;
    j["input_dim"] = cfg.family.input_dim;
    j["num_classes"] = cfg.family.num_classes;
    j["base"] = {{"train", fam.base_train.rows()}, {"test", fam.base_test.rows()}};
    j["tasks"] = json::array();
    for (const auto & t : fam.tasks) {
        j["tasks"].push_back({{"name", t.name},
                              {"train", t.train.rows()},
                              {"test", t.test.rows()},
                              {"unlabeled", t.unlabeled.rows()},
                              {"label_permutation", t.label_permutation}});
    }
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "tasks.json", j.dump(2) + "\n");
    out << "generated " << fam.tasks.size() << " tasks -> " << (cfg.output_dir / "tasks.json").string() << "\n";
    return kExitOk;
}

int cmd_finetune(const ExperimentConfig & cfg, std::ostream & out) {
    const PreparedTasks p = prepare_tasks(cfg);
    fs::create_directories(cfg.output_dir);
    CheckpointMetadata meta = run_metadata(cfg);
    meta["role"] = "pretrained";
    save_checkpoint(p.theta0, cfg.output_dir / "theta0.csfw", meta);
    for (std::size_t t = 0; t < p.family.tasks.size(); ++t) {
        const TaskData & task = p.family.tasks[t];
        meta["role"] = "finetuned";
        meta["task_id"] = std::to_string(t);
        save_checkpoint(p.finetuned[t], cfg.output_dir / finetuned_file(task), meta);
        out << task.name << ": pretrained " << evaluate(p.theta0, cfg.spec, task.test) << ", finetuned "
            << evaluate(p.finetuned[t], cfg.spec, task.test) << "\n";
    }
    return kExitOk;
}

int cmd_merge(ExperimentConfig cfg, const std::string & method, std::optional<double> lambda,
              const std::string & mask, const std::string & models, std::ostream & out) {
    cfg.methods = {method};
    if (lambda) {
        cfg.ta_lambda = *lambda;
        cfg.ties_lambda = *lambda;
    }
    if (!mask.empty()) cfg.meta.eval_mask = mask_mode_from_string(mask);
    cfg.meta.report_both_masks = false;
    cfg.validate();
    const PreparedTasks p = prepared_from(cfg, models);
    std::vector<int> all(p.family.tasks.size());
    for (std::size_t t = 0; t < all.size(); ++t) all[t] = static_cast<int>(t);
    const ExperimentResult r = run_methods(cfg, p, all);
    write_experiment_outputs(cfg, r);
    out << report_to_table(r.report);
    return kExitOk;
}

int cmd_meta_learn(ExperimentConfig cfg, const std::string & backend, std::optional<std::size_t> steps,
                   const std::string & models, std::ostream & out) {
    MetaConfig mc = cfg.meta.config;
    mc.backend = merge_backend_from_string(backend);
    mc.lambda = mc.backend == MergeBackend::task_arithmetic ? cfg.ta_lambda : cfg.adamerging.init;
    if (steps) mc.outer_steps = *steps;
    const PreparedTasks p = prepared_from(cfg, models);
    std::vector<Dataset> unlabeled;
    for (const auto & t : p.family.tasks) unlabeled.push_back(t.unlabeled);
    const MetaResult r = meta_learn_mask(p.theta0, p.taskvecs, unlabeled, cfg.spec, mc);

    ParamVector logits = p.theta0;
    logits.data = r.logits.x.values();
    CheckpointMetadata meta = run_metadata(cfg);
    meta["role"] = "mask_logits";
    meta["backend"] = backend;
    meta["steps"] = std::to_string(mc.outer_steps);
    meta["keep_fraction"] = std::to_string(mask_keep_fraction(r.logits.x));
    fs::create_directories(cfg.output_dir);
    save_checkpoint(logits, cfg.output_dir / ("mask_logits_" + backend + ".csfw"), meta);
    write_text(cfg.output_dir / ("meta_trace_" + backend + ".csv"), trace_to_csv(r.trace));
    const auto & first = r.trace.steps.front();
    const auto & last = r.trace.steps.back();
    out << "meta-learned " << mc.outer_steps << " steps; summed entropy " << first.summed_entropy << " -> "
        << last.summed_entropy << "; keep fraction " << last.keep_fraction << "\n";
    return kExitOk;
}

int cmd_eval(const ExperimentConfig & cfg, const std::string & checkpoint, std::ostream & out) {
    const Checkpoint ck = load_checkpoint_with_metadata(checkpoint);
    if (ck.params.spec_hash != cfg.spec.hash()) {
        throw LayoutMismatchError("checkpoint " + checkpoint + " does not match the configured model");
    }
    const TaskFamily fam = generate_task_family(cfg.family);
    EvalReport report;
    std::vector<double> acc;
    for (const auto & t : fam.tasks) {
        report.tasks.push_back(t.name);
        acc.push_back(evaluate(ck.params, cfg.spec, t.test));
    }
    const auto it = ck.metadata.find("method");
    const std::string name = it == ck.metadata.end() ? fs::path(checkpoint).stem().string() : it->second;
    report.add(name, method_group(name), std::move(acc));
    report.metadata["checkpoint"] = checkpoint;
    report.metadata["checkpoint_metadata"] = ck.metadata;
    fs::create_directories(cfg.output_dir);
    emit_report(report, {ReportFormat::csv, ReportFormat::json}, cfg.output_dir, "eval");
    out << report_to_table(report);
    return kExitOk;
}

int cmd_run(const ExperimentConfig & cfg, std::ostream & out) {
    const ExperimentResult r = run_experiment_full(cfg);
    write_experiment_outputs(cfg, r);
    out << report_to_table(r.report);
    return kExitOk;
}

int cmd_report(const std::string & in, const std::string & format, std::ostream & out) {
    std::ifstream f(in);
    if (!f) throw ConfigError("cannot open report " + in);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception & e) {
        throw ConfigError("cannot parse report " + in + ": " + e.what());
    }
    const EvalReport report = report_from_json(j);
    if (format == "csv") {
        out << report_to_csv(report);
    } else if (format == "json") {
        out << report_to_json(report).dump(2) << "\n";
    } else {
        out << report_to_table(report);
    }
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    CLI::App app{"Concrete subspace model merging"};
    app.name("csm");
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    app.add_option("--seed", common.seed, "Override the experiment seed");
    app.add_option("--config", common.config, "Experiment config (JSON)");
    app.add_option("--out", common.out, "Output directory (default: the config's output_dir)");

    auto * gen = app.add_subcommand("gen-tasks", "Generate the synthetic task family and write its summary");
    auto * ft = app.add_subcommand("finetune", "Pre-train the base model and fine-tune one model per task");

    auto * merge = app.add_subcommand("merge", "Merge task vectors with one method");
    std::string method, mask, models;
    std::optional<double> lambda;
    merge->add_option("--method", method, "Merge method")->required()->check(CLI::IsMember(registered_methods()));
    merge->add_option("--lambda", lambda, "Merge coefficient for task arithmetic and Ties-Merging");
    merge->add_option("--mask", mask, "Evaluation mask mode")->check(CLI::IsMember({"binarized", "concrete_expected"}));
    merge->add_option("--models", models, "Directory written by `finetune`");

    auto * meta = app.add_subcommand("meta-learn", "Meta-learn Concrete mask logits");
    std::string backend = "task_arithmetic";
    std::optional<std::size_t> steps;
    meta->add_option("--backend", backend, "Merge backend")
        ->check(CLI::IsMember({"task_arithmetic", "adamerging_task_wise", "adamerging_layer_wise"}))
        ->capture_default_str();
    meta->add_option("--steps", steps, "Outer steps");
    meta->add_option("--models", models, "Directory written by `finetune`");

    auto * ev = app.add_subcommand("eval", "Evaluate a checkpoint on every task");
    std::string checkpoint;
    ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

    auto * run_cmd = app.add_subcommand("run", "Run the full pipeline from a config");
    run_cmd->add_option("--config", common.config, "Experiment config (JSON)")->required();

    auto * rep = app.add_subcommand("report", "Render a saved JSON report");
    std::string in, format = "table";
    rep->add_option("--in", in, "report.json")->required();
    rep->add_option("--format", format, "Output format")->check(CLI::IsMember({"table", "csv", "json"}));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError & e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*rep) return cmd_report(in, format, out);
        const ExperimentConfig cfg = resolve_config(common);
        if (*gen) return cmd_gen_tasks(cfg, out);
        if (*ft) return cmd_finetune(cfg, out);
        if (*merge) return cmd_merge(cfg, method, lambda, mask, models, out);
        if (*meta) return cmd_meta_learn(cfg, backend, steps, models, out);
        if (*ev) return cmd_eval(cfg, checkpoint, out);
        if (*run_cmd) return cmd_run(cfg, out);
    } catch (const std::exception & e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace csm::cli
