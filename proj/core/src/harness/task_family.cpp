#include "csm/harness/task_family.h"

#include "csm/errors.h"
#include "csm/rng.h"

#include <cmath>
#include <numeric>

namespace csm {

void TaskFamilyConfig::validate() const {
    if (n_tasks == 0) throw ConfigError("task family needs at least one task");
    if (input_dim < 2 || num_classes < 2) throw ConfigError("task family needs input_dim >= 2 and num_classes >= 2");
    if (base_train == 0 || train_per_task == 0 || test_per_task == 0 || unlabeled_per_task == 0) {
        throw ConfigError("task family split sizes must be positive");
    }
    if (!(strength >= 0.0) || !(noise_std > 0.0) || !(class_separation > 0.0)) {
        throw ConfigError("task family strength must be >= 0 and noise/separation > 0");
    }
}

namespace {

// Product of 2 * dim Givens rotations on random coordinate pairs, angles uniform in +-strength * pi.
Tensor random_rotation(std::size_t dim, double strength, Rng & rng) {
    Tensor r(Shape{dim, dim});
    for (std::size_t i = 0; i < dim; ++i) r[i * dim + i] = 1.0;
    for (std::size_t k = 0; k < 2 * dim; ++k) {
        const std::size_t a = rng.below(dim);
        std::size_t b = rng.below(dim - 1);
        if (b >= a) ++b;
        const double angle = strength * M_PI * (2.0 * rng.uniform() - 1.0);
        const double c = std::cos(angle), s = std::sin(angle);
        for (std::size_t row = 0; row < dim; ++row) {
            const double ra = r[row * dim + a], rb = r[row * dim + b];
            r[row * dim + a] = c * ra - s * rb;
            r[row * dim + b] = s * ra + c * rb;
        }
    }
    return r;
}

// round(strength * C) random transpositions applied to the identity.
std::vector<int> random_permutation(std::size_t classes, double strength, Rng & rng) {
    std::vector<int> perm(classes);
    std::iota(perm.begin(), perm.end(), 0);
    const auto swaps = static_cast<std::size_t>(std::llround(strength * static_cast<double>(classes)));
    for (std::size_t k = 0; k < swaps; ++k) {
        const std::size_t a = rng.below(classes);
        std::size_t b = rng.below(classes - 1);
        if (b >= a) ++b;
        std::swap(perm[a], perm[b]);
    }
    return perm;
}

Dataset sample_split(const Tensor & means, const Tensor * rotation, const std::vector<int> * perm, std::size_t n,
                     double noise_std, Split split, Rng & rng) {
    const std::size_t classes = means.dim(0), dim = means.dim(1);
    Dataset d;
    d.num_classes = classes;
    d.split = split;
    std::vector<double> feats(n * dim);
    std::vector<double> point(dim);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t c = r % classes;
        for (std::size_t j = 0; j < dim; ++j) point[j] = means[c * dim + j] + noise_std * rng.normal();
        double * dst = feats.data() + r * dim;
        if (rotation) {
            for (std::size_t j = 0; j < dim; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < dim; ++k) acc += point[k] * (*rotation)[k * dim + j];
                dst[j] = acc;
            }
        } else {
            std::copy(point.begin(), point.end(), dst);
        }
        if (split != Split::unlabeled) d.labels.push_back(perm ? (*perm)[c] : static_cast<int>(c));
    }
    d.features = Tensor::matrix(n, dim, std::move(feats));
    return d;
}

} // namespace

TaskFamily generate_task_family(const TaskFamilyConfig & cfg) {
    cfg.validate();
    Rng root(cfg.seed, 0x7461736b);
    Rng mean_rng = root.split(0);

    TaskFamily fam;
    fam.class_means = Tensor(Shape{cfg.num_classes, cfg.input_dim});
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < cfg.input_dim; ++j) {
            const double v = mean_rng.normal();
            fam.class_means[c * cfg.input_dim + j] = v;
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < cfg.input_dim; ++j) fam.class_means[c * cfg.input_dim + j] *= cfg.class_separation / norm;
    }

    Rng base_rng = root.split(1);
    fam.base_train = sample_split(fam.class_means, nullptr, nullptr, cfg.base_train, cfg.noise_std, Split::train, base_rng);
    fam.base_test = sample_split(fam.class_means, nullptr, nullptr, cfg.base_test, cfg.noise_std, Split::test, base_rng);

    for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
        Rng task_rng = root.split(100 + t);
        TaskData td;
        td.name = "task" + std::to_string(t);
        td.rotation = random_rotation(cfg.input_dim, cfg.strength, task_rng);
        td.label_permutation = random_permutation(cfg.num_classes, cfg.strength, task_rng);
        const Tensor * rot = cfg.strength > 0.0 ? &td.rotation : nullptr;
        td.train = sample_split(fam.class_means, rot, &td.label_permutation, cfg.train_per_task, cfg.noise_std, Split::train, task_rng);
        td.test = sample_split(fam.class_means, rot, &td.label_permutation, cfg.test_per_task, cfg.noise_std, Split::test, task_rng);
        td.unlabeled = sample_split(fam.class_means, rot, nullptr, cfg.unlabeled_per_task, cfg.noise_std, Split::unlabeled, task_rng);
        fam.tasks.push_back(std::move(td));
    }
    return fam;
}

} // namespace csm
