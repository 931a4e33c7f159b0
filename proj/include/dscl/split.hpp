#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dscl/dataset.hpp"
#include "dscl/rng.hpp"

namespace dscl {

/// Partition class ids 0..n_classes-1 into n_tasks ordered groups: seeded
/// shuffle, then round-robin, so group sizes differ by at most one (the
/// first n_classes % n_tasks groups get the extra class).
inline std::vector<std::vector<int64_t>> split_tasks(int64_t n_classes, int64_t n_tasks,
                                                     uint64_t seed) {
    if (n_classes < 1) throw ConfigError("need at least one class to split");
    if (n_tasks < 1 || n_tasks > n_classes)
        throw ConfigError("cannot split " + std::to_string(n_classes) + " classes into " +
                          std::to_string(n_tasks) + " tasks");
    std::vector<int64_t> ids(static_cast<size_t>(n_classes));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(derive_seed(seed, "split_tasks"));
    rng.shuffle(ids);
    std::vector<std::vector<int64_t>> tasks(static_cast<size_t>(n_tasks));
    for (int64_t i = 0; i < n_classes; ++i)
        tasks[static_cast<size_t>(i % n_tasks)].push_back(ids[static_cast<size_t>(i)]);
    return tasks;
}

/// Per-class stratified index split into (rest, held_out). Each class keeps
/// at least one sample on each side whenever it has two or more; a class
/// with a single sample stays entirely in `rest`. Both lists come back in
/// ascending order so downstream iteration is deterministic.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> stratified_split(
    const std::vector<int64_t>& labels, double held_out_fraction, uint64_t seed) {
    if (held_out_fraction < 0.0 || held_out_fraction >= 1.0)
        throw ConfigError("held_out_fraction must be in [0,1)");
    std::map<int64_t, std::vector<int64_t>> by_class;
    for (size_t i = 0; i < labels.size(); ++i)
        by_class[labels[i]].push_back(static_cast<int64_t>(i));

    std::vector<int64_t> rest, held;
    for (auto& [c, idx] : by_class) {
        Rng rng(derive_seed(seed, "stratified_split", static_cast<uint64_t>(c)));
        rng.shuffle(idx);
        int64_t n_held = 0;
        if (held_out_fraction > 0.0 && idx.size() >= 2) {
            n_held = std::llround(held_out_fraction * static_cast<double>(idx.size()));
            n_held = std::clamp<int64_t>(n_held, 1, static_cast<int64_t>(idx.size()) - 1);
        }
        for (size_t i = 0; i < idx.size(); ++i)
            (static_cast<int64_t>(i) < n_held ? held : rest).push_back(idx[i]);
    }
    std::sort(rest.begin(), rest.end());
    std::sort(held.begin(), held.end());
    return {std::move(rest), std::move(held)};
}

/// Samples of the given global classes, labels remapped to the position of
/// their class in `class_ids` (task-local 0..k-1). Sample order follows the
/// source dataset; class_names follow the class_ids order.
template <typename T>
Dataset<T> subset_by_classes(const Dataset<T>& ds, const std::vector<int64_t>& class_ids) {
    ds.validate();
    std::map<int64_t, int64_t> local;
    for (size_t k = 0; k < class_ids.size(); ++k) {
        if (!local.emplace(class_ids[k], static_cast<int64_t>(k)).second)
            throw ConfigError("duplicate class id " + std::to_string(class_ids[k]));
    }
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < ds.size(); ++i)
        if (local.count(ds.labels[static_cast<size_t>(i)])) idx.push_back(i);

    Dataset<T> out = ds.select(idx);
    for (int64_t& lab : out.labels) lab = local.at(lab);
    out.class_names.clear();
    for (int64_t gid : class_ids)
        out.class_names.push_back(gid < static_cast<int64_t>(ds.class_names.size())
                                      ? ds.class_names[static_cast<size_t>(gid)]
                                      : "class_" + std::to_string(gid));
    return out;
}

}  // namespace dscl
