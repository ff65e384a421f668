#pragma once

#include "csm/nn.h"

#include <cstdint>
#include <string>
#include <vector>

namespace csm {

// Synthetic family of related classification tasks. A base Gaussian mixture (one mean per class)
// is shared; task i sees the mixture through its own input rotation R_i and label permutation pi_i.
// `strength` scales both: 0 gives identity rotations and permutations, so every task matches the base.
struct TaskFamilyConfig {
    std::size_t n_tasks = 4;
    std::size_t input_dim = 64;
    std::size_t num_classes = 10;
    std::size_t base_train = 2000;
    std::size_t base_test = 500;
    std::size_t train_per_task = 1000;
    std::size_t test_per_task = 500;
    std::size_t unlabeled_per_task = 500;
    double strength = 0.5;
    double class_separation = 5.0;  // norm of each class mean
    double noise_std = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TaskData {
    std::string name;
    Dataset train;
    Dataset test;
    Dataset unlabeled;        // features only
    Tensor rotation;          // [input_dim x input_dim], applied as x * R
    std::vector<int> label_permutation;
};

struct TaskFamily {
    Dataset base_train;
    Dataset base_test;
    Tensor class_means;       // [num_classes x input_dim]
    std::vector<TaskData> tasks;
};

TaskFamily generate_task_family(const TaskFamilyConfig & cfg);

} // namespace csm
