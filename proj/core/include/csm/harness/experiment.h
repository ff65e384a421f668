#pragma once

#include "csm/harness/report.h"
#include "csm/harness/task_family.h"
#include "csm/metalearn.h"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace csm {

struct AdaMergingSettings {
    std::size_t steps = 100;
    double lr = 1e-3;
    std::size_t batch_size = 64;
    double init = kDefaultMergeCoefficient;
};

struct MetaSettings {
    MetaConfig config;
    MaskMode eval_mask = MaskMode::binarized;
    bool report_both_masks = true;  // add a row for the other mask mode
};

// Everything needed to reproduce one end-to-end run. Loaded from the JSON schema in
// schemas/experiment_config.schema.json.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    MlpSpec spec{{64, 128, 10}, 0};
    TaskFamilyConfig family;
    TrainConfig pretrain{30, 64, 1e-3, 0};
    TrainConfig finetune{20, 32, 1e-3, 0};
    std::vector<std::string> methods;
    double ta_lambda = kDefaultMergeCoefficient;
    double ties_k = 0.2;
    double ties_lambda = kDefaultMergeCoefficient;
    AdaMergingSettings adamerging;
    MetaSettings meta;
    std::vector<int> unseen_tasks;
    std::filesystem::path output_dir = "out";

    void validate() const;
    // Pushes the top-level seed into every sub-config that carries its own.
    void propagate_seed();
};

// Registered method names, in report order.
const std::vector<std::string> & registered_methods();
std::string method_group(const std::string & method);

ExperimentConfig config_from_json(const nlohmann::json & j);
nlohmann::json config_to_json(const ExperimentConfig & cfg);
// Reads and validates a config file; applies the CF_SEED environment override when set.
ExperimentConfig load_config(const std::filesystem::path & path);
std::uint64_t config_hash(const ExperimentConfig & cfg);

// Pre-trained base, fine-tuned models and task vectors for a config's task family.
struct PreparedTasks {
    TaskFamily family;
    ParamVector theta0;
    std::vector<ParamVector> finetuned;
    std::vector<TaskVector> taskvecs;
};

PreparedTasks prepare_tasks(const ExperimentConfig & cfg);

struct ExperimentResult {
    EvalReport report;
    std::map<std::string, MergedModel> models;
    std::map<std::string, MetaTrace> traces;
    std::map<std::string, MaskLogits> masks;
    std::map<std::string, TtaResult> tta;
};

// Runs every configured method. Merging and meta-learning use only the task vectors and unlabeled
// data of `merge_tasks`; evaluation covers every task.
ExperimentResult run_methods(const ExperimentConfig & cfg, const PreparedTasks & prep,
                             const std::vector<int> & merge_tasks);

EvalReport run_experiment(const ExperimentConfig & cfg);
ExperimentResult run_experiment_full(const ExperimentConfig & cfg);

// Seen/unseen protocol: tasks in `unseen` contribute nothing to merging or meta-learning and are
// reported under the "unseen" group.
ExperimentResult run_generalization(const ExperimentConfig & cfg, const std::vector<int> & unseen);
ExperimentResult run_generalization(const ExperimentConfig & cfg, const PreparedTasks & prep,
                                    const std::vector<int> & unseen);

// Per-step meta-learning trace as CSV (wall time omitted so reruns are byte-identical).
std::string trace_to_csv(const MetaTrace & trace);

// Writes the report (CSV + JSON), meta traces and merged checkpoints under cfg.output_dir.
void write_experiment_outputs(const ExperimentConfig & cfg, const ExperimentResult & result);

// Provenance as checkpoint metadata.
std::map<std::string, std::string> provenance_metadata(const Provenance & p);

} // namespace csm
