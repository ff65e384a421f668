#include "csm/harness/experiment.h"

#include "csm/errors.h"
#include "csm/harness/checkpoint.h"
#include "csm/rng.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace csm {

namespace {

using json = nlohmann::json;

const std::vector<std::string> kMethods = {
    "pretrained",
    "individual",
    "weight_averaging",
    "task_arithmetic",
    "ties_merging",
    "concrete_task_arithmetic",
    "adamerging_task_wise",
    "adamerging_layer_wise",
    "concrete_adamerging_task_wise",
    "concrete_adamerging_layer_wise",
};

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T> & v, const char * sep = ",") {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s << sep;
        if constexpr (std::is_floating_point_v<T>) {
            s << format_double(v[i]);
        } else {
            s << v[i];
        }
    }
    return s.str();
}

TrainConfig train_from_json(const json & j, TrainConfig def) {
    def.epochs = j.value("epochs", def.epochs);
    def.batch_size = j.value("batch_size", def.batch_size);
    def.lr = j.value("lr", def.lr);
    return def;
}

json train_to_json(const TrainConfig & t) {
    return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}};
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) { return splitmix64(seed * 0x9e3779b97f4a7c15ULL + salt); }

} // namespace

const std::vector<std::string> & registered_methods() { return kMethods; }

std::string method_group(const std::string & method) {
    if (method == "pretrained" || method == "individual") return "reference";
    if (method == "weight_averaging") return "other";
    if (method.find("adamerging") != std::string::npos) return "adamerging_based";
    return "task_arithmetic_based";
}

void ExperimentConfig::validate() const {
    spec.validate();
    family.validate();
    pretrain.validate();
    finetune.validate();
    meta.config.validate();
    if (spec.input_dim() != family.input_dim) throw ConfigError("model input size must equal family.input_dim");
    if (spec.num_classes() != family.num_classes) throw ConfigError("model output size must equal family.num_classes");
    for (const auto & m : methods) {
        if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
            throw ConfigError("unknown method '" + m + "'");
        }
    }
    if (!(ties_k > 0.0 && ties_k <= 1.0)) throw ConfigError("ties_merging.k must be in (0, 1]");
    if (adamerging.batch_size == 0 || !(adamerging.lr >= 0.0)) throw ConfigError("adamerging settings out of range");
    std::set<int> seen;
    for (int t : unseen_tasks) {
        if (t < 0 || static_cast<std::size_t>(t) >= family.n_tasks) {
            throw ConfigError("unseen task id " + std::to_string(t) + " out of range");
        }
        if (!seen.insert(t).second) throw ConfigError("duplicate unseen task id " + std::to_string(t));
    }
    if (!unseen_tasks.empty() && unseen_tasks.size() >= family.n_tasks) throw ConfigError("every task is marked unseen");
}

void ExperimentConfig::propagate_seed() {
    spec.seed = derive_seed(seed, 1);
    family.seed = derive_seed(seed, 2);
    pretrain.seed = derive_seed(seed, 3);
    finetune.seed = derive_seed(seed, 4);
    meta.config.seed = derive_seed(seed, 5);
}

ExperimentConfig config_from_json(const json & j) {
    static const std::set<std::string> known = {
        "$schema", "seed", "model", "family", "pretrain", "finetune", "methods", "task_arithmetic",
        "ties_merging", "adamerging", "meta", "unseen_tasks", "output_dir"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto & [key, value] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    try {
        ExperimentConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("model")) c.spec.layer_sizes = j.at("model").at("layer_sizes").get<std::vector<std::size_t>>();
        if (j.contains("family")) {
            const json & f = j.at("family");
            c.family.n_tasks = f.value("n_tasks", c.family.n_tasks);
            c.family.input_dim = f.value("input_dim", c.spec.input_dim());
            c.family.num_classes = f.value("num_classes", c.spec.num_classes());
            c.family.base_train = f.value("base_train", c.family.base_train);
            c.family.base_test = f.value("base_test", c.family.base_test);
            c.family.train_per_task = f.value("train_per_task", c.family.train_per_task);
            c.family.test_per_task = f.value("test_per_task", c.family.test_per_task);
            c.family.unlabeled_per_task = f.value("unlabeled_per_task", c.family.unlabeled_per_task);
            c.family.strength = f.value("strength", c.family.strength);
            c.family.class_separation = f.value("class_separation", c.family.class_separation);
            c.family.noise_std = f.value("noise_std", c.family.noise_std);
        } else {
            c.family.input_dim = c.spec.input_dim();
            c.family.num_classes = c.spec.num_classes();
        }
        if (j.contains("pretrain")) c.pretrain = train_from_json(j.at("pretrain"), c.pretrain);
        if (j.contains("finetune")) c.finetune = train_from_json(j.at("finetune"), c.finetune);
        c.methods = j.value("methods", registered_methods());
        if (j.contains("task_arithmetic")) c.ta_lambda = j.at("task_arithmetic").value("lambda", c.ta_lambda);
        if (j.contains("ties_merging")) {
            c.ties_k = j.at("ties_merging").value("k", c.ties_k);
            c.ties_lambda = j.at("ties_merging").value("lambda", c.ties_lambda);
        }
        if (j.contains("adamerging")) {
            const json & a = j.at("adamerging");
            c.adamerging.steps = a.value("steps", c.adamerging.steps);
            c.adamerging.lr = a.value("lr", c.adamerging.lr);
            c.adamerging.batch_size = a.value("batch_size", c.adamerging.batch_size);
            c.adamerging.init = a.value("init", c.adamerging.init);
        }
        if (j.contains("meta")) {
            const json & m = j.at("meta");
            MetaConfig & mc = c.meta.config;
            mc.outer_steps = m.value("steps", mc.outer_steps);
            mc.inner_lr = m.value("alpha", mc.inner_lr);
            mc.outer_lr = m.value("beta", mc.outer_lr);
            mc.temperature.value = m.value("temperature", mc.temperature.value);
            if (m.contains("temperature_schedule")) {
                const json & s = m.at("temperature_schedule");
                mc.temperature.schedule = Temperature::Schedule{s.at("initial").get<double>(), s.at("final").get<double>(),
                                                                s.at("steps").get<std::size_t>()};
            }
            mc.batch_size = m.value("batch_size", mc.batch_size);
            mc.warm_start = m.value("warm_start", mc.warm_start);
            mc.unroll_inner = m.value("unroll_inner", mc.unroll_inner);
            mc.mean_epsilon = m.value("mean_epsilon", mc.mean_epsilon);
            c.meta.eval_mask = mask_mode_from_string(m.value("eval_mask", std::string("binarized")));
            c.meta.report_both_masks = m.value("report_both_masks", c.meta.report_both_masks);
        }
        c.unseen_tasks = j.value("unseen_tasks", std::vector<int>{});
        c.output_dir = j.value("output_dir", std::string("out"));
        c.propagate_seed();
        c.validate();
        return c;
    } catch (const json::exception & e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
}

json config_to_json(const ExperimentConfig & c) {
    json j;
    j["seed"] = c.seed;
    j["model"] = {{"layer_sizes", c.spec.layer_sizes}};
    j["family"] = {{"n_tasks", c.family.n_tasks},
                   {"input_dim", c.family.input_dim},
                   {"num_classes", c.family.num_classes},
                   {"base_train", c.family.base_train},
                   {"base_test", c.family.base_test},
                   {"train_per_task", c.family.train_per_task},
                   {"test_per_task", c.family.test_per_task},
                   {"unlabeled_per_task", c.family.unlabeled_per_task},
                   {"strength", c.family.strength},
                   {"class_separation", c.family.class_separation},
                   {"noise_std", c.family.noise_std}};
    j["pretrain"] = train_to_json(c.pretrain);
    j["finetune"] = train_to_json(c.finetune);
    j["methods"] = c.methods;
    j["task_arithmetic"] = {{"lambda", c.ta_lambda}};
    j["ties_merging"] = {{"k", c.ties_k}, {"lambda", c.ties_lambda}};
    j["adamerging"] = {{"steps", c.adamerging.steps},
                       {"lr", c.adamerging.lr},
                       {"batch_size", c.adamerging.batch_size},
                       {"init", c.adamerging.init}};
    const MetaConfig & mc = c.meta.config;
    j["meta"] = {{"steps", mc.outer_steps},
                 {"alpha", mc.inner_lr},
                 {"beta", mc.outer_lr},
                 {"temperature", mc.temperature.value},
                 {"batch_size", mc.batch_size},
                 {"warm_start", mc.warm_start},
                 {"unroll_inner", mc.unroll_inner},
                 {"mean_epsilon", mc.mean_epsilon},
                 {"eval_mask", to_string(c.meta.eval_mask)},
                 {"report_both_masks", c.meta.report_both_masks}};
    if (mc.temperature.schedule) {
        j["meta"]["temperature_schedule"] = {{"initial", mc.temperature.schedule->initial},
                                             {"final", mc.temperature.schedule->final},
                                             {"steps", mc.temperature.schedule->steps}};
    }
    j["unseen_tasks"] = c.unseen_tasks;
    j["output_dir"] = c.output_dir.string();
    return j;
}

ExperimentConfig load_config(const std::filesystem::path & path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception & e) {
        throw ConfigError("cannot parse config file " + path.string() + ": " + e.what());
    }
    if (const char * env = std::getenv("CF_SEED"); env && *env) {
        try {
            j["seed"] = std::stoull(env);
        } catch (const std::exception &) {
            throw ConfigError(std::string("CF_SEED is not an unsigned integer: ") + env);
        }
    }
    return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig & cfg) {
    const std::string s = config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

PreparedTasks prepare_tasks(const ExperimentConfig & cfg) {
    cfg.validate();
    PreparedTasks p;
    p.family = generate_task_family(cfg.family);
    p.theta0 = fine_tune(init_pretrained(cfg.spec), cfg.spec, p.family.base_train, cfg.pretrain);
    for (std::size_t t = 0; t < p.family.tasks.size(); ++t) {
        TrainConfig tc = cfg.finetune;
        tc.seed = derive_seed(cfg.finetune.seed, t);
        p.finetuned.push_back(fine_tune(p.theta0, cfg.spec, p.family.tasks[t].train, tc));
        p.taskvecs.push_back(compute_task_vector(p.finetuned.back(), p.theta0, static_cast<int>(t)));
    }
    return p;
}

namespace {

std::vector<double> evaluate_all(const ParamVector & theta, const ExperimentConfig & cfg, const PreparedTasks & prep) {
    std::vector<double> out;
    for (const auto & t : prep.family.tasks) out.push_back(evaluate(theta, cfg.spec, t.test));
    return out;
}

MaskMode other_mode(MaskMode m) {
    return m == MaskMode::binarized ? MaskMode::concrete_expected : MaskMode::binarized;
}

json provenance_json(const Provenance & p) {
    return {{"method", p.method},
            {"weight_kind", p.weight_kind},
            {"weights", p.weights},
            {"mask_fingerprint", p.mask_fingerprint},
            {"seed", p.seed},
            {"task_ids", p.task_ids}};
}

} // namespace

ExperimentResult run_methods(const ExperimentConfig & cfg, const PreparedTasks & prep,
                             const std::vector<int> & merge_tasks) {
    if (merge_tasks.empty()) throw ContractError("no tasks selected for merging");
    std::vector<TaskVector> taus;
    std::vector<ParamVector> models;
    std::vector<Dataset> unlabeled;
    for (int t : merge_tasks) {
        taus.push_back(prep.taskvecs.at(static_cast<std::size_t>(t)));
        models.push_back(prep.finetuned.at(static_cast<std::size_t>(t)));
        unlabeled.push_back(prep.family.tasks.at(static_cast<std::size_t>(t)).unlabeled);
    }
    const std::size_t n = taus.size();
    const std::size_t L = prep.theta0.layout.num_layers();

    ExperimentResult res;
    EvalReport & report = res.report;
    for (const auto & t : prep.family.tasks) report.tasks.push_back(t.name);
    if (!cfg.unseen_tasks.empty()) {
        for (std::size_t t = 0; t < prep.family.tasks.size(); ++t) {
            const bool merged = std::find(merge_tasks.begin(), merge_tasks.end(), static_cast<int>(t)) != merge_tasks.end();
            report.task_groups.push_back(merged ? "seen" : "unseen");
        }
    }
    report.metadata["seed"] = cfg.seed;
    report.metadata["config_hash"] = format_double(static_cast<double>(config_hash(cfg)));
    report.metadata["merge_task_ids"] = merge_tasks;
    report.metadata["parameters"] = prep.theta0.size();
    report.metadata["temperature"] = cfg.meta.config.temperature.value;
    report.metadata["eval_mask"] = to_string(cfg.meta.eval_mask);
    report.metadata["provenance"] = json::object();
    report.metadata["runtime_ms"] = json::object();
    report.metadata["mask_keep_fraction"] = json::object();

    TtaConfig tta;
    tta.steps = cfg.adamerging.steps;
    tta.lr = cfg.adamerging.lr;
    tta.batch_size = cfg.adamerging.batch_size;
    tta.seed = derive_seed(cfg.seed, 6);

    auto record = [&](const std::string & name, const std::string & group, const MergedModel & m) {
        report.add(name, group, evaluate_all(m.theta, cfg, prep));
        report.metadata["provenance"][name] = provenance_json(m.provenance);
        res.models[name] = m;
    };

    for (const auto & method : cfg.methods) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::string group = method_group(method);
        if (method == "pretrained") {
            MergedModel m{prep.theta0, {}};
            m.provenance.method = "pretrained";
            record(method, group, m);
        } else if (method == "individual") {
            std::vector<double> acc;
            for (std::size_t t = 0; t < prep.family.tasks.size(); ++t) {
                acc.push_back(evaluate(prep.finetuned[t], cfg.spec, prep.family.tasks[t].test));
            }
            report.add(method, group, std::move(acc));
        } else if (method == "weight_averaging") {
            MergedModel m{weight_average(models), {}};
            m.provenance.method = method;
            for (const auto & tv : taus) m.provenance.task_ids.push_back(tv.task_id);
            record(method, group, m);
        } else if (method == "task_arithmetic") {
            record(method, group, task_arithmetic_merge(prep.theta0, taus, cfg.ta_lambda));
        } else if (method == "ties_merging") {
            const TaskVector merged = ties_merge(taus, cfg.ties_k);
            const TaskVector single[] = {merged};
            MergedModel m = task_arithmetic_merge(prep.theta0, single, cfg.ties_lambda);
            m.provenance.method = method;
            m.provenance.task_ids.clear();
            for (const auto & tv : taus) m.provenance.task_ids.push_back(tv.task_id);
            m.provenance.extra["k"] = format_double(cfg.ties_k);
            record(method, group, m);
        } else if (method == "adamerging_task_wise" || method == "adamerging_layer_wise") {
            const MergeWeights init = method == "adamerging_task_wise"
                                          ? MergeWeights::task_wise(n, cfg.adamerging.init)
                                          : MergeWeights::layer_wise(n, L, cfg.adamerging.init);
            TtaResult r = tta_optimize_weights(prep.theta0, taus, unlabeled, init, cfg.spec, tta);
            MergedModel m = adamerging_merge(prep.theta0, taus, r.weights);
            m.provenance.seed = tta.seed;
            record(method, group, m);
            res.tta[method] = std::move(r);
        } else if (method == "concrete_task_arithmetic") {
            MetaConfig mc = cfg.meta.config;
            mc.backend = MergeBackend::task_arithmetic;
            mc.lambda = cfg.ta_lambda;
            MetaResult meta = meta_learn_mask(prep.theta0, taus, unlabeled, cfg.spec, mc);
            const Tensor mask = finalize_mask(meta.logits, cfg.meta.eval_mask);
            MergedModel m = concrete_task_arithmetic(prep.theta0, taus, mask, cfg.ta_lambda, mc.mean_epsilon);
            m.provenance.seed = mc.seed;
            m.provenance.extra["mask_mode"] = to_string(cfg.meta.eval_mask);
            record(method, group, m);
            if (cfg.meta.report_both_masks) {
                const MaskMode alt = other_mode(cfg.meta.eval_mask);
                MergedModel ma = concrete_task_arithmetic(prep.theta0, taus, finalize_mask(meta.logits, alt),
                                                          cfg.ta_lambda, mc.mean_epsilon);
                ma.provenance.seed = mc.seed;
                ma.provenance.extra["mask_mode"] = to_string(alt);
                record(method + "[" + to_string(alt) + "]", group, ma);
            }
            report.metadata["mask_keep_fraction"][method] = mask_keep_fraction(meta.logits.x);
            res.traces[method] = std::move(meta.trace);
            res.masks[method] = std::move(meta.logits);
        } else if (method == "concrete_adamerging_task_wise" || method == "concrete_adamerging_layer_wise") {
            const bool task_wise = method == "concrete_adamerging_task_wise";
            MetaConfig mc = cfg.meta.config;
            mc.backend = task_wise ? MergeBackend::adamerging_task_wise : MergeBackend::adamerging_layer_wise;
            mc.lambda = cfg.adamerging.init;
            MetaResult meta = meta_learn_mask(prep.theta0, taus, unlabeled, cfg.spec, mc);
            const MergeWeights init = initial_weights(mc.backend, cfg.adamerging.init, n, L);

            std::vector<MaskMode> modes{cfg.meta.eval_mask};
            if (cfg.meta.report_both_masks) modes.push_back(other_mode(cfg.meta.eval_mask));
            for (std::size_t k = 0; k < modes.size(); ++k) {
                const Tensor mask = finalize_mask(meta.logits, modes[k]);
                ConcreteAdaMergingResult r =
                    concrete_adamerging(prep.theta0, taus, mask, unlabeled, cfg.spec, init, tta, mc.mean_epsilon);
                r.model.provenance.extra["mask_mode"] = to_string(modes[k]);
                const std::string name = k == 0 ? method : method + "[" + to_string(modes[k]) + "]";
                record(name, group, r.model);
                res.tta[name] = std::move(r.tta);
            }
            report.metadata["mask_keep_fraction"][method] = mask_keep_fraction(meta.logits.x);
            res.traces[method] = std::move(meta.trace);
            res.masks[method] = std::move(meta.logits);
        }
        report.metadata["runtime_ms"][method] =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    return res;
}

ExperimentResult run_experiment_full(const ExperimentConfig & cfg) {
    if (!cfg.unseen_tasks.empty()) return run_generalization(cfg, cfg.unseen_tasks);
    const PreparedTasks prep = prepare_tasks(cfg);
    std::vector<int> all(prep.family.tasks.size());
    for (std::size_t t = 0; t < all.size(); ++t) all[t] = static_cast<int>(t);
    return run_methods(cfg, prep, all);
}

EvalReport run_experiment(const ExperimentConfig & cfg) { return run_experiment_full(cfg).report; }

ExperimentResult run_generalization(const ExperimentConfig & cfg, const std::vector<int> & unseen) {
    ExperimentConfig c = cfg;
    c.unseen_tasks = unseen;
    c.validate();
    return run_generalization(c, prepare_tasks(c), unseen);
}

ExperimentResult run_generalization(const ExperimentConfig & cfg, const PreparedTasks & prep,
                                    const std::vector<int> & unseen) {
    if (unseen.empty()) throw ContractError("generalization protocol needs at least one unseen task");
    std::vector<int> seen;
    for (std::size_t t = 0; t < prep.family.tasks.size(); ++t) {
        const int id = static_cast<int>(t);
        if (std::find(unseen.begin(), unseen.end(), id) == unseen.end()) seen.push_back(id);
    }
    for (int u : unseen) {
        if (u < 0 || static_cast<std::size_t>(u) >= prep.family.tasks.size()) {
            throw ContractError("unseen task id " + std::to_string(u) + " out of range");
        }
    }
    if (seen.empty()) throw ContractError("generalization protocol: every task is marked unseen");
    ExperimentConfig c = cfg;
    c.unseen_tasks = unseen;
    ExperimentResult r = run_methods(c, prep, seen);
    r.report.metadata["unseen_task_ids"] = unseen;
    return r;
}

std::string trace_to_csv(const MetaTrace & trace) {
    std::ostringstream out;
    const std::size_t n_tasks = trace.steps.empty() ? 0 : trace.steps.front().task_entropy.size();
    out << "step,summed_entropy";
    for (std::size_t t = 0; t < n_tasks; ++t) out << ",entropy_task" << t;
    out << ",keep_fraction,temperature,skipped\r\n";
    for (const auto & s : trace.steps) {
        out << s.step << ',' << format_double(s.summed_entropy);
        for (std::size_t t = 0; t < n_tasks; ++t) {
            out << ',' << (t < s.task_entropy.size() ? format_double(s.task_entropy[t]) : std::string("nan"));
        }
        out << ',' << format_double(s.keep_fraction) << ',' << format_double(s.temperature) << ','
            << (s.skipped ? 1 : 0) << "\r\n";
    }
    return out.str();
}

std::map<std::string, std::string> provenance_metadata(const Provenance & p) {
    std::map<std::string, std::string> m;
    m["method"] = p.method;
    if (!p.weight_kind.empty()) m["weight_kind"] = p.weight_kind;
    if (!p.weights.empty()) m["weights"] = join(p.weights);
    if (p.weights.size() == 1) m["lambda"] = format_double(p.weights[0]);
    if (p.mask_fingerprint) m["mask_fingerprint"] = std::to_string(p.mask_fingerprint);
    m["seed"] = std::to_string(p.seed);
    m["task_ids"] = join(p.task_ids);
    for (const auto & [k, v] : p.extra) m["extra." + k] = v;
    return m;
}

void write_experiment_outputs(const ExperimentConfig & cfg, const ExperimentResult & result) {
    const auto & dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    emit_report(result.report, {ReportFormat::csv, ReportFormat::json}, dir, "report");
    for (const auto & [name, trace] : result.traces) {
        std::ofstream f(dir / ("meta_trace_" + name + ".csv"), std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write meta trace for " + name);
        f << trace_to_csv(trace);
    }
    for (const auto & [name, model] : result.models) {
        std::string file = name;
        std::replace(file.begin(), file.end(), '[', '.');
        file.erase(std::remove(file.begin(), file.end(), ']'), file.end());
        save_checkpoint(model.theta, dir / ("merged_" + file + ".csfw"), provenance_metadata(model.provenance));
    }
}

} // namespace csm
