#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dscl/dataset.hpp"
#include "dscl/network.hpp"
#include "dscl/ops.hpp"

namespace dscl {

enum class EvalMode { task_aware, task_agnostic };

inline std::string eval_mode_name(EvalMode m) {
    return m == EvalMode::task_aware ? "task_aware" : "task_agnostic";
}

/// Lower-triangular accuracy record: rows[t][k] = percent accuracy on task
/// k's test set measured after training task t, populated for k <= t.
struct AccuracyMatrix {
    std::vector<std::vector<double>> rows;

    int64_t tasks() const { return static_cast<int64_t>(rows.size()); }

    double at(int64_t t, int64_t k) const {
        if (t < 0 || t >= tasks() || k < 0 || k > t)
            throw MetricError("accuracy matrix index (" + std::to_string(t) + "," +
                              std::to_string(k) + ") outside the lower triangle");
        return rows[static_cast<size_t>(t)][static_cast<size_t>(k)];
    }

    /// Append the evaluation row taken after training the next task; entry k
    /// is the accuracy on task k, so row t must carry t+1 entries.
    void push_row(std::vector<double> row) {
        if (static_cast<int64_t>(row.size()) != tasks() + 1)
            throw MetricError("row " + std::to_string(tasks()) + " must have " +
                              std::to_string(tasks() + 1) + " entries, got " +
                              std::to_string(row.size()));
        for (double v : row)
            if (!(v >= 0.0 && v <= 100.0))
                throw MetricError("accuracy " + std::to_string(v) + " outside [0,100]");
        rows.push_back(std::move(row));
    }

    void validate_complete() const {
        if (rows.empty()) throw MetricError("empty accuracy matrix");
        for (size_t t = 0; t < rows.size(); ++t)
            if (rows[t].size() != t + 1)
                throw MetricError("accuracy matrix row " + std::to_string(t) + " has " +
                                  std::to_string(rows[t].size()) + " entries, want " +
                                  std::to_string(t + 1));
    }
};

/// Mean of the final row: average accuracy over every task after the last
/// one finished training.
inline double mean_accuracy(const AccuracyMatrix& a) {
    a.validate_complete();
    const std::vector<double>& last = a.rows.back();
    double s = 0.0;
    for (double v : last) s += v;
    return s / static_cast<double>(last.size());
}

/// Mean signed accuracy change over the non-final tasks: final accuracy
/// minus the best each task ever reached, so forgetting reports negative.
/// Zero for a single task and whenever no column ever decayed.
inline double mean_forgetting(const AccuracyMatrix& a) {
    a.validate_complete();
    const int64_t T = a.tasks();
    if (T == 1) return 0.0;
    double s = 0.0;
    for (int64_t k = 0; k + 1 < T; ++k) {
        double best = 0.0;
        for (int64_t t = k; t < T; ++t) best = std::max(best, a.at(t, k));
        s += a.at(T - 1, k) - best;
    }
    return s / static_cast<double>(T - 1);
}

namespace detail {

/// First-wins argmax over row `row` of a [N,K] matrix.
template <typename T>
int64_t row_argmax(const Tensor<T>& m, int64_t row) {
    const int64_t K = m.dims[1];
    const T* p = m.ptr() + row * K;
    int64_t best = 0;
    for (int64_t j = 1; j < K; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

}  // namespace detail

/// Percent accuracy of task_id's own head on `test` (task-aware protocol:
/// the task identity selects the head, argmax within it).
template <typename T>
double evaluate_task_aware(Network<T>& net, const Dataset<T>& test, int64_t task_id,
                           int64_t batch_size = 64) {
    test.validate();
    if (test.size() == 0) throw EvalError("empty test set");
    if (task_id < 0 || task_id >= net.task_count())
        throw EvalError("no head for task " + std::to_string(task_id));
    int64_t correct = 0;
    for (int64_t first = 0; first < test.size(); first += batch_size) {
        const int64_t b = std::min<int64_t>(batch_size, test.size() - first);
        const Tensor<T> logits =
            net.forward_task(nullptr, test.batch_images(first, b), task_id, false);
        const std::vector<int64_t> labels = test.batch_labels(first, b);
        for (int64_t i = 0; i < b; ++i)
            if (detail::row_argmax(logits, i) == labels[static_cast<size_t>(i)]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

/// Task-agnostic percent accuracy: softmax scores of the first n_seen heads
/// are concatenated and a prediction is correct only when the global argmax
/// lands inside the sample's own task block at its true label. Heads beyond
/// n_seen are never evaluated.
template <typename T>
double evaluate_task_agnostic(Network<T>& net, const Dataset<T>& test, int64_t task_id,
                              int64_t n_seen, int64_t batch_size = 64) {
    test.validate();
    if (test.size() == 0) throw EvalError("empty test set");
    if (n_seen < 1 || n_seen > net.task_count())
        throw EvalError("n_seen must name between 1 and " + std::to_string(net.task_count()) +
                        " heads");
    if (task_id < 0 || task_id >= n_seen)
        throw EvalError("task " + std::to_string(task_id) + " is not among the " +
                        std::to_string(n_seen) + " seen tasks");
    int64_t correct = 0;
    for (int64_t first = 0; first < test.size(); first += batch_size) {
        const int64_t b = std::min<int64_t>(batch_size, test.size() - first);
        const Tensor<T> trunk =
            net.forward_trunk(nullptr, test.batch_images(first, b), false);
        std::vector<Tensor<T>> probs;
        int64_t offset_of_task = 0;
        for (int64_t h = 0; h < n_seen; ++h) {
            if (h < task_id) offset_of_task += net.head_spec(h).fc_out;
            probs.push_back(softmax<T>(nullptr, net.forward_head(nullptr, net.head_spec(h), trunk)));
        }
        const std::vector<int64_t> labels = test.batch_labels(first, b);
        for (int64_t i = 0; i < b; ++i) {
            T best = probs[0][i * probs[0].dims[1]];
            int64_t best_slot = 0, slot = 0;
            for (const Tensor<T>& p : probs) {
                const int64_t k = p.dims[1];
                for (int64_t j = 0; j < k; ++j, ++slot) {
                    const T v = p[i * k + j];
                    if (v > best) {
                        best = v;
                        best_slot = slot;
                    }
                }
            }
            if (best_slot == offset_of_task + labels[static_cast<size_t>(i)]) ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

/// One evaluation row after training task n_seen-1: entry k is task k's
/// accuracy under the requested protocol.
template <typename T>
std::vector<double> evaluate_row(Network<T>& net, const std::vector<Dataset<T>>& tests,
                                 int64_t n_seen, EvalMode mode, int64_t batch_size = 64) {
    if (n_seen < 1 || n_seen > static_cast<int64_t>(tests.size()))
        throw EvalError("n_seen exceeds the provided test sets");
    std::vector<double> row;
    row.reserve(static_cast<size_t>(n_seen));
    for (int64_t k = 0; k < n_seen; ++k)
        row.push_back(mode == EvalMode::task_aware
                          ? evaluate_task_aware(net, tests[static_cast<size_t>(k)], k, batch_size)
                          : evaluate_task_agnostic(net, tests[static_cast<size_t>(k)], k, n_seen,
                                                   batch_size));
    return row;
}

}  // namespace dscl
