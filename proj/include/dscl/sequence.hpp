#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dscl/checkpoint.hpp"
#include "dscl/data.hpp"
#include "dscl/metrics.hpp"
#include "dscl/network.hpp"
#include "dscl/regularizers.hpp"
#include "dscl/train.hpp"

namespace dscl {

/// Everything a task-incremental run needs beyond the model and the data.
struct SequenceConfig {
    TrainConfig train;
    RegConfig reg;
    std::string out_dir;          ///< artifact directory; empty writes nothing
    int64_t eval_batch = 64;
    bool write_checkpoints = true;
};

template <typename T>
struct SequenceResult {
    AccuracyMatrix aware, agnostic;
    std::vector<double> winner_lrs;       ///< grid winner per task
    std::vector<EpochLog> log;
    std::unique_ptr<Regularizer<T>> reg;  ///< state after the final task
};

namespace detail {

/// Shortest exact decimal for a double, so re-runs emit identical bytes.
inline std::string num_str(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_matrix_csv(const std::string& path, const AccuracyMatrix& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ReportError("cannot open '" + path + "' for writing");
    const int64_t T = m.tasks();
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t k = 0; k < T; ++k) {
            if (k) f << ",";
            if (k <= t) f << num_str(m.at(t, k));
        }
        f << "\n";
    }
    if (!f) throw ReportError("short write to '" + path + "'");
}

inline nlohmann::json mode_metrics_json(const AccuracyMatrix& m) {
    nlohmann::json j;
    j["mean_accuracy"] = mean_accuracy(m);
    j["mean_forgetting"] = mean_forgetting(m);
    j["final_row"] = m.rows.back();
    j["curves"] = m.rows;
    return j;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ReportError("cannot open '" + path + "' for writing");
    f << j.dump(2) << "\n";
    if (!f) throw ReportError("short write to '" + path + "'");
}

}  // namespace detail

/// Run the task-incremental protocol: for each task in order fire the
/// regularizer lifecycle, train under the learning-rate grid, then evaluate
/// every seen task in both protocols. With an out_dir set, writes
/// matrix_aware.csv / matrix_agnostic.csv, metrics.json, log.jsonl,
/// config.json, and a checkpoint task_<t>.dscl (weights plus regularizer
/// state) after each task. Fully seeded: identical inputs give identical
/// results and identical artifact bytes.
template <typename T>
SequenceResult<T> run_sequence(Network<T>& net, const std::vector<TaskData<T>>& tasks,
                               const SequenceConfig& cfg) {
    cfg.train.validate();
    const int64_t n_tasks = static_cast<int64_t>(tasks.size());
    if (n_tasks < 1) throw ConfigError("run_sequence needs at least one task");
    if (n_tasks > net.task_count())
        throw ConfigError("network has heads for " + std::to_string(net.task_count()) +
                          " tasks but " + std::to_string(n_tasks) + " were provided");

    const bool artifacts = !cfg.out_dir.empty();
    if (artifacts) std::filesystem::create_directories(cfg.out_dir);

    std::vector<Dataset<T>> test_sets;
    for (const TaskData<T>& td : tasks) test_sets.push_back(td.test);

    SequenceResult<T> result;
    result.reg = make_regularizer<T>(cfg.reg);
    for (int64_t t = 0; t < n_tasks; ++t) {
        net.set_active_task(t);
        result.reg->on_task_start(net, t);
        TrainResult<T> r =
            train_task(net, *result.reg, t, tasks[static_cast<size_t>(t)].train, cfg.train);
        result.reg = std::move(r.reg);
        result.winner_lrs.push_back(r.winner_lr);
        result.log.insert(result.log.end(), r.log.begin(), r.log.end());

        result.aware.push_row(
            evaluate_row(net, test_sets, t + 1, EvalMode::task_aware, cfg.eval_batch));
        result.agnostic.push_row(
            evaluate_row(net, test_sets, t + 1, EvalMode::task_agnostic, cfg.eval_batch));

        if (artifacts && cfg.write_checkpoints)
            save_checkpoint((std::filesystem::path(cfg.out_dir) /
                             ("task_" + std::to_string(t) + ".dscl"))
                                .string(),
                            checkpoint_of(net, result.reg->serialize()));
    }

    if (artifacts) {
        namespace fs = std::filesystem;
        detail::write_matrix_csv((fs::path(cfg.out_dir) / "matrix_aware.csv").string(),
                                 result.aware);
        detail::write_matrix_csv((fs::path(cfg.out_dir) / "matrix_agnostic.csv").string(),
                                 result.agnostic);

        nlohmann::json metrics;
        metrics["tasks"] = n_tasks;
        metrics["task_aware"] = detail::mode_metrics_json(result.aware);
        metrics["task_agnostic"] = detail::mode_metrics_json(result.agnostic);
        metrics["winner_lrs"] = result.winner_lrs;
        detail::write_json((fs::path(cfg.out_dir) / "metrics.json").string(), metrics);

        nlohmann::json config;
        config["arch"] = net.spec().arch_name;
        config["method"] = result.reg->kind();
        config["lambda"] = result.reg->lambda();
        config["seed"] = cfg.train.seed;
        config["tasks"] = n_tasks;
        config["lr_grid"] = cfg.train.lr_grid;
        config["batch_size"] = cfg.train.batch_size;
        config["max_epochs"] = cfg.train.max_epochs;
        config["momentum"] = cfg.train.momentum;
        config["weight_decay"] = cfg.train.weight_decay;
        config["patience"] = cfg.train.patience;
        config["lr_decay_factor"] = cfg.train.lr_decay_factor;
        config["min_lr"] = cfg.train.min_lr;
        config["val_fraction"] = cfg.train.val_fraction;
        detail::write_json((fs::path(cfg.out_dir) / "config.json").string(), config);

        std::ofstream log_file((fs::path(cfg.out_dir) / "log.jsonl").string(), std::ios::trunc);
        if (!log_file) throw ReportError("cannot open log.jsonl for writing");
        for (const EpochLog& e : result.log) {
            nlohmann::json line;
            line["task"] = e.task;
            line["grid_lr"] = e.grid_lr;
            line["epoch"] = e.epoch;
            line["lr"] = e.lr;
            line["train_loss"] = e.train_loss;
            line["val_loss"] = e.val_loss;
            line["val_acc"] = e.val_acc;
            log_file << line.dump() << "\n";
        }
        if (!log_file) throw ReportError("short write to log.jsonl");
    }
    return result;
}

}  // namespace dscl
