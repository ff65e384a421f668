#include "csm/task_vector.h"

#include "csm/errors.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csm {

TaskVector compute_task_vector(const ParamVector & finetuned, const ParamVector & base, int task_id) {
    require_same_layout(finetuned, base, "compute_task_vector");
    TaskVector tv;
    tv.layout = base.layout;
    tv.spec_hash = base.spec_hash;
    tv.task_id = task_id;
    tv.delta.resize(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) tv.delta[i] = finetuned.data[i] - base.data[i];
    return tv;
}

ParamVector apply_task_vector(const ParamVector & base, const TaskVector & tv) {
    if (base.layout != tv.layout || base.spec_hash != tv.spec_hash || base.size() != tv.size()) {
        throw LayoutMismatchError("apply_task_vector: parameter layouts differ");
    }
    ParamVector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += tv.delta[i];
    return out;
}

void require_shared_layout(std::span<const TaskVector> taskvecs, const char * what) {
    for (const auto & tv : taskvecs) {
        if (tv.layout != taskvecs[0].layout || tv.spec_hash != taskvecs[0].spec_hash || tv.size() != taskvecs[0].size()) {
            throw LayoutMismatchError(std::string(what) + ": task vector layouts differ");
        }
    }
}

ParamVector weight_average(std::span<const ParamVector> models) {
    if (models.empty()) throw ContractError("weight_average: no models");
    for (const auto & m : models) require_same_layout(m, models[0], "weight_average");
    ParamVector out = models[0];
    const double n = static_cast<double>(models.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        double s = 0.0;
        for (const auto & m : models) s += m.data[j];
        out.data[j] = s / n;
    }
    return out;
}

TaskVector sum_scale(std::span<const TaskVector> taskvecs, double coeff) {
    if (taskvecs.empty()) throw ContractError("sum_scale: no task vectors");
    require_shared_layout(taskvecs, "sum_scale");
    TaskVector out = taskvecs[0];
    out.task_id = -1;
    for (std::size_t j = 0; j < out.size(); ++j) {
        double s = 0.0;
        for (const auto & tv : taskvecs) s += tv.delta[j];
        out.delta[j] = coeff * s;
    }
    return out;
}

namespace {

std::vector<double> trim_top_k(const std::vector<double> & v, std::size_t keep) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&v](std::size_t a, std::size_t b) { return std::abs(v[a]) > std::abs(v[b]); });
    std::vector<double> out(v.size(), 0.0);
    for (std::size_t r = 0; r < keep && r < idx.size(); ++r) out[idx[r]] = v[idx[r]];
    return out;
}

} // namespace

TaskVector ties_merge(std::span<const TaskVector> taskvecs, double trim_fraction) {
    if (taskvecs.empty()) throw ContractError("ties_merge: no task vectors");
    if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) throw ContractError("ties_merge: trim fraction must be in (0, 1]");
    require_shared_layout(taskvecs, "ties_merge");

    const std::size_t d = taskvecs[0].size();
    const auto keep = static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(d)));

    std::vector<std::vector<double>> trimmed;
    trimmed.reserve(taskvecs.size());
    for (const auto & tv : taskvecs) trimmed.push_back(trim_top_k(tv.delta, keep));

    TaskVector out = taskvecs[0];
    out.task_id = -1;
    for (std::size_t j = 0; j < d; ++j) {
        double total = 0.0;
        for (const auto & t : trimmed) total += t[j];
        const double sign = total >= 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto & t : trimmed) {
            if (t[j] != 0.0 && (t[j] > 0.0) == (sign > 0.0)) {
                acc += t[j];
                ++count;
            }
        }
        out.delta[j] = count ? acc / static_cast<double>(count) : 0.0;
    }
    return out;
}

} // namespace csm
