// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

#include "csm/errors.h"
#include "csm/harness/checkpoint.h"
#include "csm/harness/experiment.h"
#include "csm_cli/cli.h"
#include "support/oracles.h"
#include "support/tmpdir.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace csm;

namespace {

// Tolerances and thresholds.
constexpr double kGradRelErr = 1e-4;
constexpr double kGradSuiteSeconds = 120.0;
constexpr std::size_t kThresholdDraws = 1000000;
constexpr std::size_t kProbDraws = 100000;
constexpr double kProbTol = 0.01;
constexpr double kSaturationTemp = 1e-3;
constexpr double kSaturationTol = 1e-6;
constexpr double kSaturationFraction = 0.999;
constexpr std::size_t kGumbelDraws = 100000;
constexpr double kGumbelTol = 0.01;
constexpr std::size_t kRescaleDraws = 10000;
constexpr double kRescaleRelTol = 0.02;
constexpr double kReductionTol = 1e-12;
constexpr int kTiesInstances = 200;
constexpr double kTtaReduction = 0.10;
constexpr double kTtaSeconds = 300.0;
constexpr std::size_t kTtaSteps = 100;
constexpr int kSeeds = 5;
constexpr int kOrderingMinSeeds = 4;
constexpr std::size_t kMetaSteps = 300;
constexpr double kOuterLr = 1e-3;
constexpr double kInnerLr = 1.0;
constexpr double kOrderingSeconds = 20.0 * 60.0;
constexpr double kAdaMergingSlack = 0.005;  // 0.5 accuracy points
constexpr int kCheckpointModels = 100;
constexpr int kCorruptions = 100;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, bool ok, const std::string & what, const std::string & detail) {
    std::printf("[%s] criterion %d: %s | %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

void info(const std::string & line) {
    std::printf("       %s\n", line.c_str());
    std::fflush(stdout);
}

std::string fmt(const char * f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

ExperimentConfig acceptance_config(std::uint64_t seed) {
    ExperimentConfig c = load_config(std::filesystem::path(CSM_CONFIG_DIR) / "acceptance.json");
    c.seed = seed;
    c.family.n_tasks = 4;
    c.adamerging.steps = kTtaSteps;
    c.meta.config.outer_steps = kMetaSteps;
    c.meta.config.outer_lr = kOuterLr;
    c.meta.config.inner_lr = kInnerLr;
    c.propagate_seed();
    c.validate();
    return c;
}

std::vector<Dataset> unlabeled_of(const PreparedTasks & p) {
    std::vector<Dataset> u;
    for (const auto & t : p.family.tasks) u.push_back(t.unlabeled);
    return u;
}

// ---------------------------------------------------------------------------------------------
// 1. Gradients of random MLP + entropy + merge + mask-rescale compositions.

double sigmoid_stable(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void criterion_gradients() {
    const auto t0 = Clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int g = 0; g < 50; ++g) {
        const std::size_t in = 2 + rng.below(4), hidden = 2 + rng.below(5), out = 2 + rng.below(4);
        const std::size_t n_tasks = 1 + rng.below(3), rows = 2 + rng.below(4);
        const MlpSpec spec{{in, hidden, out}, rng.next_u64()};
        const Layout layout = make_layout(spec);
        const std::size_t d = layout.total(), L = layout.num_layers();
        const bool layer_wise = g % 2 == 0;
        const double temp = 0.3 + rng.uniform();

        const auto theta0 = oracle::random_vector(rng, d, 0.5);
        std::vector<std::vector<double>> taus;
        for (std::size_t i = 0; i < n_tasks; ++i) taus.push_back(oracle::random_vector(rng, d, 0.3));
        const auto x = oracle::random_vector(rng, rows * in);
        const auto w0 = oracle::random_vector(rng, layer_wise ? n_tasks * L : n_tasks, 0.5);
        const auto logits0 = oracle::random_vector(rng, d, 1.0);
        const Tensor noise = draw_uniform_noise(rng, d);

        // Independent value path: loops over plain vectors.
        const auto value = [&](const std::vector<double> & w, const std::vector<double> & lg) {
            std::vector<double> m(d);
            double mean_m = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                m[j] = sigmoid_stable((lg[j] + std::log(noise[j]) - std::log1p(-noise[j])) / temp);
                mean_m += m[j] / static_cast<double>(d);
            }
            std::vector<double> th = theta0;
            for (std::size_t i = 0; i < n_tasks; ++i) {
                for (std::size_t s = 0; s < L; ++s) {
                    const LayerSlot & slot = layout.slot(s);
                    const double wi = layer_wise ? w[i * L + s] : w[i];
                    for (std::size_t j = slot.offset; j < slot.offset + slot.numel(); ++j) {
                        th[j] += wi * taus[i][j] * m[j] / mean_m;
                    }
                }
            }
            return oracle::mean_softmax_entropy(oracle::mlp_logits(spec.layer_sizes, th, x, rows), rows, out);
        };

        Tape tape;
        const Var w = tape.leaf(Tensor(layer_wise ? Shape{n_tasks, L} : Shape{n_tasks}, w0));
        const Var lg = tape.leaf(Tensor(Shape{d}, logits0));
        const ConcreteMaskSample sample = sample_concrete(lg, temp, noise);
        std::vector<Var> masked;
        for (const auto & t : taus) masked.push_back(mask_and_rescale(tape.constant(Tensor(Shape{d}, t)), sample.values));
        const Var theta = merge_var(tape.constant(Tensor(Shape{d}, theta0)), masked, w,
                                    layer_wise ? WeightKind::layer_wise : WeightKind::task_wise, layout);
        const Var loss = entropy_loss(softmax(forward(theta, spec, tape.constant(Tensor::matrix(rows, in, x))), 1));
        const Gradients grads = tape.backward(loss);

        std::vector<double> ad = grads.of(w).values();
        const Tensor gl = grads.of(lg);
        ad.insert(ad.end(), gl.values().begin(), gl.values().end());

        std::vector<double> joint = w0;
        joint.insert(joint.end(), logits0.begin(), logits0.end());
        const auto split_value = [&](const std::vector<double> & v) {
            return value({v.begin(), v.begin() + static_cast<std::ptrdiff_t>(w0.size())},
                         {v.begin() + static_cast<std::ptrdiff_t>(w0.size()), v.end()});
        };
        worst = std::max(worst, oracle::relative_error(ad, oracle::central_gradient(split_value, joint)));
    }
    const double secs = seconds_since(t0);
    verdict(1, worst < kGradRelErr && secs < kGradSuiteSeconds, "gradient suite (50 random graphs)",
            fmt("max rel err %.3e (< %.0e), %.1f s (< %.0f s)", worst, kGradRelErr, secs, kGradSuiteSeconds));
}

// ---------------------------------------------------------------------------------------------
// 2. Concrete distribution.

void criterion_concrete() {
    Rng rng(202);

    // (a) soft sample above 0.5, hard sample, and binarized soft sample agree on shared noise.
    Tensor x(Shape{kThresholdDraws});
    for (double & v : x.values()) v = rng.normal(0.0, 3.0);
    const Tensor u = draw_uniform_noise(rng, kThresholdDraws);
    const Tensor soft = sample_concrete_values(x, 0.5, u);
    const Tensor hard = sample_bernoulli_hard(x, u);
    const Tensor bin = binarize(soft);
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < kThresholdDraws; ++i) {
        mismatches += hard[i] != bin[i];
        mismatches += (soft[i] > 0.5) != (x[i] + std::log(u[i]) - std::log1p(-u[i]) > 0.0);
    }
    const bool a = mismatches == 0;

    // (b) P(m > 0.5) = sigmoid(x).
    double worst_b = 0.0;
    for (double xv : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
        const Tensor m = sample_concrete_values(Tensor(Shape{kProbDraws}, xv), 0.5, draw_uniform_noise(rng, kProbDraws));
        std::size_t above = 0;
        for (double v : m.data()) above += v > 0.5;
        worst_b = std::max(worst_b, std::fabs(static_cast<double>(above) / kProbDraws - oracle::sigmoid(xv)));
    }
    const bool b = worst_b <= kProbTol;

    // (c) saturation at low temperature, same logits as (b).
    std::size_t near = 0, total = 0;
    double expected_far = 0.0;
    for (double xv : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
        const Tensor m = sample_concrete_values(Tensor(Shape{kProbDraws}, xv), kSaturationTemp,
                                                draw_uniform_noise(rng, kProbDraws));
        for (double v : m.data()) near += std::min(v, 1.0 - v) <= kSaturationTol;
        total += kProbDraws;
        // |x + logit(u)| < temp * log(1/tol - 1) leaves the sample farther than tol from {0, 1}.
        const double band = kSaturationTemp * std::log(1.0 / kSaturationTol - 1.0);
        expected_far += (oracle::sigmoid(band - xv) - oracle::sigmoid(-band - xv)) / 5.0;
    }
    const double frac = static_cast<double>(near) / static_cast<double>(total);
    const bool c = frac >= kSaturationFraction;

    // (d) Gumbel-Softmax argmax frequencies.
    Tape tape;
    const Var logits = tape.constant(Tensor::vector({0.3, -1.0, 2.0, 0.0, 1.1}));
    std::vector<double> counts(5, 0.0);
    for (std::size_t k = 0; k < kGumbelDraws; ++k) {
        const Tensor y = gumbel_softmax_categorical(logits, 0.5, rng).value();
        counts[static_cast<std::size_t>(std::max_element(y.data().begin(), y.data().end()) - y.data().begin())] += 1;
    }
    double z = 0.0;
    for (double l : logits.value().data()) z += std::exp(l);
    double worst_d = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        worst_d = std::max(worst_d, std::fabs(counts[k] / kGumbelDraws - std::exp(logits.value()[k]) / z));
    }
    const bool dd = worst_d <= kGumbelTol;

    verdict(2, a && b && c && dd, "Concrete distribution suite",
            fmt("(a) %zu mismatches in %zu draws %s; (b) max |P-sigmoid| %.4f %s; (c) %.4f%% within %.0e of {0,1} "
                "(need >= %.1f%%) %s; (d) max freq err %.4f %s",
                mismatches, kThresholdDraws, a ? "ok" : "BAD", worst_b, b ? "ok" : "BAD", 100 * frac, kSaturationTol,
                100 * kSaturationFraction, c ? "ok" : "BAD", worst_d, dd ? "ok" : "BAD"));
    if (!c) {
        info(fmt("(c) analytic fraction outside the band for x in {-2..2}: %.4f%%; the 99.9%% bound cannot hold here",
                 100 * expected_far));
    }
}

// ---------------------------------------------------------------------------------------------
// 3. Drop-and-rescale unbiasedness.

void criterion_rescale() {
    Rng rng(303);
    const std::size_t d = 50;
    const Tensor tau(Shape{d}, oracle::random_vector(rng, d));
    double worst = 0.0;
    std::string per_p;
    for (double p : {0.3, 0.5, 0.9}) {
        const Tensor logits(Shape{d}, std::log(p / (1.0 - p)));
        std::vector<double> acc(d, 0.0);
        Tape tape;
        for (std::size_t k = 0; k < kRescaleDraws; ++k) {
            const Tensor m = sample_bernoulli_hard(logits, rng);
            const Tensor r = mask_and_rescale(tape.constant(tau), tape.constant(m)).value();
            for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
            tape.clear();
        }
        double worst_p = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            worst_p = std::max(worst_p, std::fabs(acc[j] / kRescaleDraws - tau[j]) / std::fabs(tau[j]));
        }
        const double se = std::sqrt((1.0 - p) / p / kRescaleDraws);
        per_p += fmt(" p=%.1f: %.2f%% (per-coordinate s.e. %.2f%%);", p, 100 * worst_p, 100 * se);
        worst = std::max(worst, worst_p);
    }
    verdict(3, worst <= kRescaleRelTol, "rescale unbiasedness (max relative deviation <= 2%)", per_p);
}


// ---------------------------------------------------------------------------------------------
// 4. Reduction identities on the acceptance family.

void criterion_reductions(const ExperimentConfig & cfg, const PreparedTasks & prep) {
    const auto & theta0 = prep.theta0;
    const auto & taus = prep.taskvecs;
    const std::size_t n = taus.size(), L = theta0.layout.num_layers();
    const auto unlabeled = unlabeled_of(prep);
    const Tensor ones = Tensor::ones({theta0.size()});
    const double lam = cfg.ta_lambda;

    const ParamVector ta = task_arithmetic_merge(theta0, taus, lam).theta;
    const double e_cta = max_abs_diff(concrete_task_arithmetic(theta0, taus, ones, lam).theta.data, ta.data);

    double e_cam = 0.0;
    for (const auto & init : {MergeWeights::task_wise(n, lam), MergeWeights::layer_wise(n, L, lam)}) {
        const auto c = concrete_adamerging(theta0, taus, ones, unlabeled, cfg.spec, init, TtaConfig{0, 1e-3, 64, 1});
        e_cam = std::max(e_cam, max_abs_diff(c.model.theta.data, adamerging_merge(theta0, taus, init).theta.data));
    }

    const double e_tw = max_abs_diff(adamerging_merge(theta0, taus, MergeWeights::task_wise(n, lam)).theta.data, ta.data);
    const double e_lw =
        max_abs_diff(adamerging_merge(theta0, taus, MergeWeights::layer_wise(n, L, lam)).theta.data, ta.data);

    const double worst = std::max({e_cta, e_cam, e_tw, e_lw});
    verdict(4, worst <= kReductionTol, "reduction identities",
            fmt("ones-mask Concrete TA vs TA %.1e; Concrete AdaMerging(0 steps) vs init %.1e; equal-weight "
                "AdaMerging vs TA %.1e (task-wise) %.1e (layer-wise); bound %.0e",
                e_cta, e_cam, e_tw, e_lw, kReductionTol));
}

// ---------------------------------------------------------------------------------------------
// 5. Ties-Merging against the brute-force reference.

void criterion_ties() {
    Rng rng(505);
    int exact = 0;
    for (int inst = 0; inst < kTiesInstances; ++inst) {
        const std::size_t n = 1 + rng.below(5), d = 1 + rng.below(30);
        const double k = std::vector<double>{0.2, 0.5, 1.0}[inst % 3];
        const ParamVector base = [&] {
            ParamVector p = init_pretrained(MlpSpec{{1, d}, 0});
            std::fill(p.data.begin(), p.data.end(), 0.0);
            return p;
        }();
        std::vector<TaskVector> vs;
        std::vector<std::vector<double>> raw;
        for (std::size_t t = 0; t < n; ++t) {
            ParamVector p = base;
            for (std::size_t j = 0; j < d; ++j) {
                // Mix in exact zeros and repeated magnitudes so ties are exercised.
                const std::uint64_t kind = rng.below(6);
                p.data[j] = kind == 0 ? 0.0 : kind == 1 ? (rng.below(2) ? 1.0 : -1.0) : rng.normal();
            }
            vs.push_back(compute_task_vector(p, base, static_cast<int>(t)));
            raw.push_back(vs.back().delta);
        }
        exact += ties_merge(vs, k).delta == oracle::ties_reference(raw, k);
    }
    verdict(5, exact == kTiesInstances, "Ties-Merging oracle", fmt("%d/%d instances identical", exact, kTiesInstances));
}

// ---------------------------------------------------------------------------------------------
// 6. Layer-wise AdaMerging test-time adaptation lowers the summed entropy.

void criterion_tta(const ExperimentConfig & cfg, const PreparedTasks & prep) {
    ExperimentConfig c = cfg;
    c.methods = {"adamerging_layer_wise"};
    std::vector<int> all;
    for (std::size_t t = 0; t < prep.taskvecs.size(); ++t) all.push_back(static_cast<int>(t));
    const auto t0 = Clock::now();
    const ExperimentResult r = run_methods(c, prep, all);
    const double secs = seconds_since(t0);

    const auto unlabeled = unlabeled_of(prep);
    const MergeWeights init = MergeWeights::layer_wise(prep.taskvecs.size(), prep.theta0.layout.num_layers(),
                                                       cfg.adamerging.init);
    const double before = summed_entropy(adamerging_merge(prep.theta0, prep.taskvecs, init).theta, cfg.spec, unlabeled);
    const double after = summed_entropy(r.models.at("adamerging_layer_wise").theta, cfg.spec, unlabeled);
    const double drop = (before - after) / before;
    verdict(6, drop >= kTtaReduction && secs < kTtaSeconds, "TTA descent (layer-wise, 100 steps)",
            fmt("summed entropy %.4f -> %.4f (%.1f%% lower, need >= %.0f%%), d = %zu, %.1f s (< %.0f s)", before,
                after, 100 * drop, 100 * kTtaReduction, prep.theta0.size(), secs, kTtaSeconds));
}

// ---------------------------------------------------------------------------------------------
// 7 and 8. Seeded desk-scale comparisons.

void criteria_ordering() {
    const auto t0 = Clock::now();
    int cta_wins = 0, trace_drops = 0, cam_ok = 0, cam_expected_ok = 0;
    std::string rows7, rows8;
    for (int s = 1; s <= kSeeds; ++s) {
        const ExperimentConfig cfg = acceptance_config(static_cast<std::uint64_t>(s));
        const ExperimentResult r = run_experiment_full(cfg);
        const double ta = r.report.find("task_arithmetic")->average;
        const double cta = r.report.find("concrete_task_arithmetic")->average;
        const auto & trace = r.traces.at("concrete_task_arithmetic").steps;
        const bool win = cta >= ta, drop = trace.back().summed_entropy < trace.front().summed_entropy;
        cta_wins += win;
        trace_drops += drop;
        rows7 += fmt(" s%d: %.2f vs %.2f, H %.3f -> %.3f;", s, 100 * cta, 100 * ta, trace.front().summed_entropy,
                     trace.back().summed_entropy);

        const double am = r.report.find("adamerging_layer_wise")->average;
        const double cam = r.report.find("concrete_adamerging_layer_wise")->average;
        cam_ok += cam >= am - kAdaMergingSlack;
        rows8 += fmt(" s%d: %.2f vs %.2f;", s, 100 * cam, 100 * am);
        if (const MethodResult * e = r.report.find("concrete_adamerging_layer_wise[concrete_expected]")) {
            cam_expected_ok += e->average >= am - kAdaMergingSlack;
        }
    }
    const double secs = seconds_since(t0);
    verdict(7, cta_wins >= kOrderingMinSeeds && trace_drops == kSeeds && secs < kOrderingSeconds,
            "Concrete TA >= Task Arithmetic and meta-trace descent",
            fmt("wins %d/%d (need %d), entropy drops %d/%d, %.0f s (< %.0f s);", cta_wins, kSeeds, kOrderingMinSeeds,
                trace_drops, kSeeds, secs, kOrderingSeconds) + rows7);
    verdict(8, cam_ok >= kOrderingMinSeeds, "layer-wise Concrete AdaMerging >= AdaMerging - 0.5 points (binarized mask)",
            fmt("%d/%d seeds (need %d);", cam_ok, kSeeds, kOrderingMinSeeds) + rows8);
    info(fmt("expected-mask evaluation of the same runs meets the bound in %d/%d seeds", cam_expected_ok, kSeeds));
}

// ---------------------------------------------------------------------------------------------
// 9. Generalization protocol.

bool is_merged(const std::string & name) { return name != "pretrained" && name != "individual"; }

void criterion_generalization(const ExperimentConfig & cfg, const PreparedTasks & prep) {
    const int held_out = static_cast<int>(prep.taskvecs.size()) - 1;
    const std::vector<int> seen_ids = [&] {
        std::vector<int> v;
        for (int t = 0; t < held_out; ++t) v.push_back(t);
        return v;
    }();

    const ExperimentResult a = run_generalization(cfg, prep, {held_out});
    const ExperimentResult b = run_generalization(cfg, prep, {held_out});

    // Provenance lists exactly the seen ids.
    bool provenance_ok = !a.models.empty();
    for (const auto & [name, m] : a.models) {
        if (is_merged(name)) provenance_ok = provenance_ok && m.provenance.task_ids == seen_ids;
    }

    // Replacing everything the held-out task could contribute leaves every merged model unchanged.
    PreparedTasks scrambled = prep;
    Rng rng(909);
    for (double & v : scrambled.taskvecs[static_cast<std::size_t>(held_out)].delta) v = rng.normal(0.0, 5.0);
    for (double & v : scrambled.finetuned[static_cast<std::size_t>(held_out)].data) v = rng.normal(0.0, 5.0);
    for (double & v : scrambled.family.tasks[static_cast<std::size_t>(held_out)].unlabeled.features.values()) {
        v = rng.normal(0.0, 5.0);
    }
    const ExperimentResult c = run_generalization(cfg, scrambled, {held_out});
    bool isolated = true;
    std::size_t compared = 0;
    for (const auto & [name, m] : a.models) {
        if (!is_merged(name)) continue;
        isolated = isolated && c.models.at(name).theta.data == m.theta.data;
        ++compared;
    }

    bool deterministic = report_to_csv(a.report) == report_to_csv(b.report);
    for (const auto & [name, m] : a.models) deterministic = deterministic && b.models.at(name).theta.data == m.theta.data;

    const bool groups_ok = a.report.task_groups.back() == "unseen";
    verdict(9, provenance_ok && isolated && deterministic && groups_ok, "generalization protocol (1 held-out task)",
            fmt("provenance seen-only %s; %zu merged models unchanged when the held-out task is scrambled %s; "
                "deterministic %s",
                provenance_ok ? "yes" : "NO", compared, isolated ? "yes" : "NO", deterministic ? "yes" : "NO"));
    const MethodResult * ta = a.report.find("task_arithmetic");
    if (ta) {
        info(fmt("task arithmetic seen avg %.2f, unseen avg %.2f", 100 * ta->group_averages.at("seen"),
                 100 * ta->group_averages.at("unseen")));
    }
}

// ---------------------------------------------------------------------------------------------
// 10. Checkpoints and byte-identical reruns.

std::string slurp(const std::filesystem::path & p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void criterion_infrastructure() {
    toy::TempDir dir("acceptance");
    Rng rng(1010);

    int exact = 0;
    for (int i = 0; i < kCheckpointModels; ++i) {
        std::vector<std::size_t> sizes;
        const std::size_t layers = 2 + rng.below(3);
        for (std::size_t l = 0; l < layers; ++l) sizes.push_back(1 + rng.below(20));
        ParamVector p = init_pretrained(MlpSpec{sizes, rng.next_u64()});
        for (double & v : p.data) v = rng.normal(0.0, std::exp(rng.normal(0.0, 5.0)));
        const auto path = dir.path / fmt("m%d.csfw", i);
        save_checkpoint(p, path, {{"index", std::to_string(i)}});
        const ParamVector q = load_checkpoint(path);
        exact += q.layout == p.layout && q.spec_hash == p.spec_hash && q.data.size() == p.data.size() &&
                 std::memcmp(q.data.data(), p.data.data(), p.data.size() * sizeof(double)) == 0;
    }

    int detected = 0;
    for (int i = 0; i < kCorruptions; ++i) {
        ParamVector p = init_pretrained(MlpSpec{{3 + rng.below(5), 4, 2}, rng.next_u64()});
        std::vector<std::uint8_t> bytes = encode_checkpoint(p);
        const std::size_t payload = p.size() * 8, start = bytes.size() - 4 - payload;
        bytes[start + rng.below(payload)] ^= static_cast<std::uint8_t>(1u << rng.below(8));
        try {
            decode_checkpoint(bytes);
        } catch (const CorruptFileError &) {
            ++detected;
        }
    }

    const std::string config = (std::filesystem::path(CSM_CONFIG_DIR) / "acceptance.json").string();
    std::ostringstream out, err;
    const int c1 = cli::run({"run", "--config", config, "--out", (dir.path / "run1").string()}, out, err);
    const int c2 = cli::run({"run", "--config", config, "--out", (dir.path / "run2").string()}, out, err);
    const std::string r1 = slurp(dir.path / "run1" / "report.csv"), r2 = slurp(dir.path / "run2" / "report.csv");
    const bool identical = c1 == 0 && c2 == 0 && !r1.empty() && r1 == r2;

    verdict(10, exact == kCheckpointModels && detected == kCorruptions && identical, "infrastructure",
            fmt("bit-exact round trips %d/%d; corruptions detected %d/%d; two `run --config` CSVs identical %s (%zu bytes)",
                exact, kCheckpointModels, detected, kCorruptions, identical ? "yes" : "NO", r1.size()));
    if (!err.str().empty()) info("cli stderr: " + err.str());
}

void guarded(int id, const std::function<void()> & body) {
    try {
        body();
    } catch (const std::exception & e) {
        verdict(id, false, "aborted", e.what());
    }
}

} // namespace

int main() {
    const auto t0 = Clock::now();
    guarded(1, criterion_gradients);
    guarded(2, criterion_concrete);
    guarded(3, criterion_rescale);

    const ExperimentConfig cfg = acceptance_config(1);
    const PreparedTasks prep = prepare_tasks(cfg);
    guarded(4, [&] { criterion_reductions(cfg, prep); });
    guarded(5, criterion_ties);
    guarded(6, [&] { criterion_tta(cfg, prep); });
    guarded(7, criteria_ordering);
    guarded(9, [&] { criterion_generalization(cfg, prep); });
    guarded(10, criterion_infrastructure);

    std::printf("%d criteria failed, %.0f s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
