#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dscl/dataset.hpp"
#include "dscl/metrics.hpp"
#include "dscl/network.hpp"
#include "dscl/ops.hpp"
#include "dscl/optim.hpp"
#include "dscl/regularizers.hpp"
#include "dscl/rng.hpp"
#include "dscl/split.hpp"

namespace dscl {

/// Schedule knobs for one task's optimisation.
struct TrainConfig {
    std::vector<double> lr_grid{5e-2, 5e-3, 5e-4};
    int64_t batch_size = 32;
    int64_t max_epochs = 200;
    double weight_decay = 0.0002;
    double momentum = 0.9;
    int64_t patience = 15;       ///< epochs without val-loss improvement before a decay
    double lr_decay_factor = 3.0;
    double min_lr = 1e-6;        ///< training stops once a decay goes below this
    double val_fraction = 0.1;   ///< stratified held-out slice steering the schedule;
                                 ///< 0 reads the schedule off the training slice itself
    double improve_tol = 1e-5;   ///< absolute loss drop that counts as progress
    uint64_t seed = 0;

    void validate() const {
        if (lr_grid.empty()) throw ConfigError("lr_grid must not be empty");
        for (double lr : lr_grid)
            if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
        if (!(min_lr > 0.0) || min_lr >= *std::min_element(lr_grid.begin(), lr_grid.end()))
            throw ConfigError("min_lr must be positive and below every grid learning rate");
        if (patience < 1) throw ConfigError("patience must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (!(lr_decay_factor > 1.0)) throw ConfigError("lr_decay_factor must exceed 1");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw ConfigError("val_fraction must be in [0,1)");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
        if (improve_tol < 0.0) throw ConfigError("improve_tol must be non-negative");
    }
};

struct EpochLog {
    int64_t task = 0;
    double grid_lr = 0.0;  ///< grid candidate this epoch belongs to
    int64_t epoch = 0;
    double lr = 0.0;       ///< rate in effect during the epoch
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

template <typename T>
struct TrainResult {
    double winner_lr = 0.0;
    double winner_val_acc = 0.0;
    std::vector<EpochLog> log;            ///< every candidate's epochs, in grid order
    std::unique_ptr<Regularizer<T>> reg;  ///< winner's evolved state; task-end already fired
};

namespace detail {

/// Mean cross-entropy and percent accuracy of one head on a dataset, in
/// eval mode (pure map, nothing recorded).
template <typename T>
std::pair<double, double> head_metrics(Network<T>& net, const Dataset<T>& ds, int64_t task_id,
                                       int64_t batch_size) {
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int64_t first = 0; first < ds.size(); first += batch_size) {
        const int64_t b = std::min<int64_t>(batch_size, ds.size() - first);
        const Tensor<T> logits =
            net.forward_task(nullptr, ds.batch_images(first, b), task_id, false);
        const std::vector<int64_t> labels = ds.batch_labels(first, b);
        const Tensor<T> ce = cross_entropy_with_logits<T>(nullptr, logits, labels);
        loss_sum += static_cast<double>(ce[0]) * static_cast<double>(b);
        for (int64_t i = 0; i < b; ++i)
            if (row_argmax(logits, i) == labels[static_cast<size_t>(i)]) ++correct;
    }
    const double n = static_cast<double>(ds.size());
    return {loss_sum / n, 100.0 * static_cast<double>(correct) / n};
}

/// Train one grid candidate: SGD with momentum under the patience-driven
/// decay schedule, firing the regularizer's batch hooks. Leaves `net` at the
/// best-validation-loss weights seen and returns their final val accuracy.
template <typename T>
double train_candidate(Network<T>& net, Regularizer<T>& reg, int64_t task_id,
                       const Dataset<T>& train_set, const Dataset<T>& val_set, double grid_lr,
                       const TrainConfig& cfg, std::vector<EpochLog>& log) {
    Sgd<T> opt(cfg.momentum, cfg.weight_decay);
    const std::vector<std::string> tnames = net.trainable_names(task_id);
    const std::vector<std::string> snames = shared_param_names(net);

    double lr = grid_lr;
    double best_val = std::numeric_limits<double>::infinity();
    std::map<std::string, std::vector<T>> best = net.snapshot();
    int64_t stale = 0;

    std::vector<int64_t> order(static_cast<size_t>(train_set.size()));
    for (int64_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        // One shuffle stream per (task, epoch): every candidate and every
        // method sees the same batch order, so a zero-strength penalty
        // reproduces plain finetuning bit for bit.
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch_order",
                                    static_cast<uint64_t>(task_id) * 1000003ull +
                                        static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double train_loss = 0.0;
        for (int64_t first = 0; first < train_set.size(); first += cfg.batch_size) {
            const int64_t b = std::min<int64_t>(cfg.batch_size, train_set.size() - first);
            const Dataset<T> batch = train_set.select(
                {order.begin() + first, order.begin() + first + b});

            Tape tape;
            Tensor<T> loss, pen;
            if (reg.wants_all_head_logits()) {
                std::vector<Tensor<T>> all = net.forward_all(&tape, batch.images, true);
                loss = cross_entropy_with_logits<T>(&tape, all[static_cast<size_t>(task_id)],
                                                    batch.labels);
                pen = reg.penalty(&tape, net, task_id, batch.images, &all);
            } else {
                Tensor<T> logits = net.forward_task(&tape, batch.images, task_id, true);
                loss = cross_entropy_with_logits<T>(&tape, logits, batch.labels);
                pen = reg.penalty(&tape, net, task_id, batch.images, nullptr);
            }
            train_loss += static_cast<double>(loss[0]) * static_cast<double>(b);
            if (pen.defined()) loss = elementwise_add<T>(&tape, loss, pen);
            tape.backward(loss);

            std::vector<std::pair<std::string, Tensor<T>>> params;
            params.reserve(tnames.size());
            for (const std::string& n : tnames) params.emplace_back(n, net.param(n));
            std::vector<std::vector<T>> g_before, th_before;
            if (reg.needs_step_trace()) {
                for (const std::string& n : snames) {
                    g_before.push_back(net.param(n).grad());
                    th_before.push_back(net.param(n).values());
                }
            }
            opt.step(params, lr);
            if (reg.needs_step_trace()) {
                std::vector<std::vector<T>> deltas(snames.size());
                for (size_t k = 0; k < snames.size(); ++k) {
                    const std::vector<T>& now = net.param(snames[k]).values();
                    deltas[k].resize(now.size());
                    for (size_t i = 0; i < now.size(); ++i)
                        deltas[k][i] = now[i] - th_before[k][i];
                }
                reg.on_batch_end(snames, g_before, deltas);
            }
        }
        train_loss /= static_cast<double>(train_set.size());

        const auto [val_loss, val_acc] = head_metrics(net, val_set, task_id, cfg.batch_size);
        log.push_back({task_id, grid_lr, epoch, lr, train_loss, val_loss, val_acc});

        if (val_loss < best_val - cfg.improve_tol) {
            best_val = val_loss;
            best = net.snapshot();
            stale = 0;
        } else if (++stale >= cfg.patience) {
            lr /= cfg.lr_decay_factor;
            net.restore(best);
            opt.reset_velocity();
            stale = 0;
            if (lr < cfg.min_lr) break;
        }
    }
    net.restore(best);
    return head_metrics(net, val_set, task_id, cfg.batch_size).second;
}

}  // namespace detail

/// Train one task under the learning-rate grid: every candidate starts from
/// the same pre-task weights with its own deep copy of the regularizer; the
/// candidate with the best final validation accuracy wins (earlier grid
/// entries win ties), its weights stay in `net`, and its regularizer — the
/// one whose task-end hook then fires on the winning model — is returned.
/// The caller must have fired reg.on_task_start already.
template <typename T>
TrainResult<T> train_task(Network<T>& net, const Regularizer<T>& reg, int64_t task_id,
                          const Dataset<T>& data, const TrainConfig& cfg) {
    cfg.validate();
    data.validate();
    if (data.size() == 0) throw DataError("empty task data");
    if (task_id < 0 || task_id >= net.task_count())
        throw StateError("no head for task " + std::to_string(task_id));

    const auto [train_idx, val_idx] = stratified_split(
        data.labels, cfg.val_fraction, derive_seed(cfg.seed, "val_split", static_cast<uint64_t>(task_id)));
    const Dataset<T> train_set = data.select(train_idx);
    const Dataset<T> val_set = val_idx.empty() ? train_set : data.select(val_idx);

    const std::map<std::string, std::vector<T>> pre = net.snapshot();
    net.set_active_task(task_id);

    TrainResult<T> out;
    std::map<std::string, std::vector<T>> winner;
    double best_acc = -1.0;
    for (double grid_lr : cfg.lr_grid) {
        net.restore(pre);
        std::unique_ptr<Regularizer<T>> cand = reg.clone();
        std::vector<EpochLog> cand_log;
        const double acc =
            detail::train_candidate(net, *cand, task_id, train_set, val_set, grid_lr, cfg, cand_log);
        out.log.insert(out.log.end(), cand_log.begin(), cand_log.end());
        if (acc > best_acc) {
            best_acc = acc;
            out.winner_lr = grid_lr;
            out.winner_val_acc = acc;
            winner = net.snapshot();
            out.reg = std::move(cand);
        }
    }
    net.restore(winner);
    out.reg->on_task_end(net, task_id, data);
    return out;
}

}  // namespace dscl
