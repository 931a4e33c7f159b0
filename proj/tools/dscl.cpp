/// Command-line surface for the experiment engine: `gen` materializes
/// datasets, `train` runs task sequences across seeds (one worker process per
/// seed), and `report` aggregates completed run directories into tables.
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dscl/config.hpp"
#include "dscl/report.hpp"
#include "dscl/sequence.hpp"

namespace fs = std::filesystem;
using namespace dscl;

namespace {

struct NamedError {
    const char* type;
    int code;
};

NamedError classify(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return {"ConfigError", 2};
    if (dynamic_cast<const DataError*>(&e)) return {"DataError", 3};
    if (dynamic_cast<const FormatError*>(&e)) return {"FormatError", 3};
    if (dynamic_cast<const ReportError*>(&e)) return {"ReportError", 3};
    if (dynamic_cast<const NumericsError*>(&e)) return {"NumericsError", 4};
    return {"Error", 1};
}

nlohmann::json error_json(const std::exception& e) {
    const NamedError n = classify(e);
    nlohmann::json j;
    j["error"]["type"] = n.type;
    j["error"]["message"] = e.what();
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ReportError("cannot open '" + path + "' for writing");
    f << j.dump(2) << "\n";
    if (!f) throw ReportError("short write to '" + path + "'");
}

/// Stacks per-task datasets into one corpus with globally renumbered labels.
Dataset<float> concat_with_global_labels(const std::vector<const Dataset<float>*>& parts) {
    int64_t n = 0;
    for (const Dataset<float>* p : parts) n += p->size();
    const Dims d0 = parts.front()->images.dims;
    Dataset<float> out;
    out.images = Tensor<float>::zeros({n, d0[1], d0[2], d0[3]});
    int64_t at = 0, label_base = 0;
    for (const Dataset<float>* p : parts) {
        std::copy(p->images.ptr(), p->images.ptr() + p->images.numel(),
                  out.images.ptr() + at * d0[1] * d0[2] * d0[3]);
        for (int64_t l : p->labels) out.labels.push_back(label_base + l);
        for (const std::string& c : p->class_names) out.class_names.push_back(c);
        at += p->size();
        label_base += static_cast<int64_t>(p->class_names.size());
    }
    out.validate();
    return out;
}

int cmd_gen(const ExperimentConfig& cfg) {
    validate_config(cfg, /*check_paths=*/true);
    fs::create_directories(cfg.out_dir);
    nlohmann::json manifest;
    manifest["config"] = config_to_json(cfg);

    if (!cfg.data.generator.empty()) {
        const auto tasks = build_tasks<float>(cfg);
        std::vector<const Dataset<float>*> train_parts, test_parts;
        std::vector<std::vector<int64_t>> task_ids;
        int64_t gid = 0;
        for (const TaskData<float>& td : tasks) {
            train_parts.push_back(&td.train);
            test_parts.push_back(&td.test);
            std::vector<int64_t> ids;
            for (size_t c = 0; c < td.train.class_names.size(); ++c) ids.push_back(gid++);
            task_ids.push_back(std::move(ids));
        }
        const Dataset<float> train = concat_with_global_labels(train_parts);
        const Dataset<float> test = concat_with_global_labels(test_parts);
        const std::string train_file = cfg.data.generator + "_train.dsds";
        const std::string test_file = cfg.data.generator + "_test.dsds";
        save_dsds(train, (fs::path(cfg.out_dir) / train_file).string());
        save_dsds(test, (fs::path(cfg.out_dir) / test_file).string());
        manifest["benchmark"] = cfg.data.generator;
        manifest["classes"] = train.class_names;
        manifest["tasks"] = task_ids;
        manifest["files"]["train"] = train_file;
        manifest["files"]["test"] = test_file;
        manifest["counts"]["train"] = train.size();
        manifest["counts"]["test"] = test.size();
    } else {
        const Dataset<float> train = load_image_dir<float>(cfg.data.corpus,
                                                           cfg.arch_cfg.input_size);
        save_dsds(train, (fs::path(cfg.out_dir) / "corpus.dsds").string());
        manifest["classes"] = train.class_names;
        manifest["files"]["train"] = "corpus.dsds";
        manifest["counts"]["train"] = train.size();
        if (!cfg.data.corpus_test.empty()) {
            const Dataset<float> test = load_image_dir<float>(cfg.data.corpus_test,
                                                              cfg.arch_cfg.input_size);
            save_dsds(test, (fs::path(cfg.out_dir) / "corpus_test.dsds").string());
            manifest["files"]["test"] = "corpus_test.dsds";
            manifest["counts"]["test"] = test.size();
        }
    }
    write_json_file((fs::path(cfg.out_dir) / "manifest.json").string(), manifest);
    std::printf("wrote %s\n", (fs::path(cfg.out_dir) / "manifest.json").c_str());
    return 0;
}

void print_dry_run(const ExperimentConfig& cfg) {
    std::cout << config_to_json(cfg).dump(2) << "\n";
    const std::vector<int64_t> counts = task_class_counts(cfg);
    const MultiHeadSpec spec = build_network(
        arch_builder_name(cfg.arch), cfg.arch_cfg,
        counts.empty() ? std::vector<int64_t>{1} : counts);
    std::cout << "parameters:\n";
    for (const FeSpec& fe : spec.fes)
        std::cout << "  fe " << (fe.prefix.empty() ? "main" : fe.prefix) << ": "
                  << fe.param_count() << "\n";
    std::cout << "  fe_total: " << spec.fe_param_count() << "\n";
    if (counts.empty()) {
        std::cout << "  heads: unresolved (corpus not readable)\n";
        return;
    }
    for (const HeadSpec& h : spec.heads)
        std::cout << "  head_" << h.task_id << " (" << h.fc_out << " classes): "
                  << h.param_count() << "\n";
    std::cout << "  head_total: " << spec.head_param_count() << "\n";
    std::cout << "  total: " << spec.param_count() << "\n";
}

void run_one_seed(const ExperimentConfig& cfg, const MultiHeadSpec& spec,
                  const std::vector<TaskData<float>>& tasks, uint64_t seed) {
    const std::string run_dir =
        (fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed))).string();
    Network<float> net(spec, seed);
    SequenceConfig sc;
    sc.train = cfg.train;
    sc.train.seed = seed;
    sc.reg = cfg.method;
    sc.out_dir = run_dir;
    const SequenceResult<float> r = run_sequence(net, tasks, sc);

    ExperimentConfig resolved = cfg;
    resolved.seeds = {seed};
    write_json_file((fs::path(run_dir) / "experiment.json").string(),
                    config_to_json(resolved));
    std::printf("seed %llu done: aware %.2f%% / agnostic %.2f%% mean accuracy\n",
                static_cast<unsigned long long>(seed), mean_accuracy(r.aware),
                mean_accuracy(r.agnostic));
}

size_t worker_cap(size_t n_cells) {
    const char* env = std::getenv("DSCL_THREADS");
    if (env != nullptr) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1)
            throw ConfigError("DSCL_THREADS must be a positive integer, got '" +
                              std::string(env) + "'");
        return std::min<size_t>(static_cast<size_t>(v), n_cells);
    }
    return std::min<size_t>(std::max(1u, std::thread::hardware_concurrency()), n_cells);
}

int cmd_train(const ExperimentConfig& cfg) {
    validate_config(cfg, /*check_paths=*/!cfg.dry_run);
    if (cfg.dry_run) {
        print_dry_run(cfg);
        return 0;
    }
    const std::vector<TaskData<float>> tasks = build_tasks<float>(cfg);
    std::vector<int64_t> counts;
    for (const TaskData<float>& td : tasks)
        counts.push_back(detail::class_count(td.train));
    const MultiHeadSpec spec = build_network(arch_builder_name(cfg.arch), cfg.arch_cfg, counts);

    const size_t n = cfg.seeds.size();
    const size_t cap = worker_cap(n);
    std::vector<pid_t> pids(n, -1);
    std::vector<int> codes(n, -1);
    size_t launched = 0, active = 0;
    while (launched < n || active > 0) {
        if (launched < n && active < cap) {
            std::cout.flush();
            const pid_t pid = fork();
            if (pid == 0) {
                int code = 0;
                try {
                    run_one_seed(cfg, spec, tasks, cfg.seeds[launched]);
                } catch (const std::exception& e) {
                    const std::string line = error_json(e).dump() + "\n";
                    std::fwrite(line.data(), 1, line.size(), stderr);
                    const fs::path dir =
                        fs::path(cfg.out_dir) / ("seed_" + std::to_string(cfg.seeds[launched]));
                    std::error_code ec;
                    fs::create_directories(dir, ec);
                    std::ofstream ef(dir / "error.json");
                    ef << error_json(e).dump(2) << "\n";
                    code = classify(e).code;
                }
                std::fflush(nullptr);
                std::_Exit(code);
            }
            if (pid < 0) throw Error("fork failed: " + std::string(std::strerror(errno)));
            pids[launched] = pid;
            ++launched;
            ++active;
        } else {
            int status = 0;
            const pid_t done = waitpid(-1, &status, 0);
            if (done < 0) throw Error("waitpid failed");
            for (size_t i = 0; i < launched; ++i)
                if (pids[i] == done)
                    codes[i] = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
            --active;
        }
    }
    for (size_t i = 0; i < n; ++i)
        if (codes[i] != 0) {
            std::fprintf(stderr, "seed %llu failed with exit code %d\n",
                         static_cast<unsigned long long>(cfg.seeds[i]), codes[i]);
            return codes[i];
        }
    std::printf("all %zu runs complete under %s\n", n, cfg.out_dir.c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out,
               const std::string& mode) {
    std::vector<RunRecord> records;
    for (const std::string& d : run_dirs) records.push_back(load_run(d));
    write_report(std::move(records), out, mode);
    std::printf("report written to %s\n", out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"disentangled-representation continual-learning experiments"};
    app.require_subcommand(1);

    std::string config_path, preset_name, arch, method, mode, out;
    double width = -1;
    int64_t tasks = -1;
    std::vector<uint64_t> seeds;
    bool dry = false;
    std::vector<std::string> run_dirs;

    const auto add_config_flags = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (JSON), or a preset name");
        sub->add_option("--preset", preset_name,
                        "shipped preset: fig1, flowers10, capacity-check");
        sub->add_option("--seed", seeds, "training seed; repeat for several runs");
        sub->add_option("--arch", arch, "resnet18 | resnet18h | color | shape | ds");
        sub->add_option("--method", method, "finetune | lwf | ewc | si | mas");
        sub->add_option("--width", width, "channel width multiplier");
        sub->add_option("--tasks", tasks, "number of tasks for a corpus split");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--mode", mode, "aware | agnostic | both");
    };

    CLI::App* gen = app.add_subcommand("gen", "materialize datasets and a manifest");
    add_config_flags(gen);
    CLI::App* train = app.add_subcommand("train", "run the task sequence for every seed");
    add_config_flags(train);
    train->add_flag("--dry-run", dry, "print the resolved config and parameter counts only");
    CLI::App* report =
        app.add_subcommand("report", "aggregate run directories into tables and curves");
    report->add_option("runs", run_dirs, "completed run directories")->required();
    report->add_option("--out", out, "report directory (default: report)");
    report->add_option("--mode", mode, "aware | agnostic | both");

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed())
            return cmd_report(run_dirs, out.empty() ? "report" : out,
                              mode.empty() ? "both" : mode);

        if (!config_path.empty() && !preset_name.empty())
            throw ConfigError("pass either --config or --preset, not both");
        ExperimentConfig cfg;
        if (!preset_name.empty())
            cfg = preset(preset_name);
        else if (!config_path.empty()) {
            if (fs::exists(config_path))
                cfg = config_from_file(config_path);
            else
                try {
                    cfg = preset(config_path);  // --config may also name a preset
                } catch (const ConfigError&) {
                    throw ConfigError("config '" + config_path +
                                      "' is neither a readable file nor a preset name");
                }
        }
        else
            throw ConfigError("a config is required: pass --config FILE or --preset NAME");

        if (!arch.empty()) cfg.arch = arch;
        if (!method.empty() && method != cfg.method.method) {
            cfg.method.method = method;
            cfg.method.lambda = -1;  // fall back to the new method's default strength
        }
        if (width > 0) cfg.arch_cfg.width_mult = width;
        if (tasks > 0) cfg.data.n_tasks = tasks;
        if (!out.empty()) cfg.out_dir = out;
        if (!mode.empty()) cfg.mode = mode;
        if (!seeds.empty()) cfg.seeds = seeds;
        if (dry) cfg.dry_run = true;

        return gen->parsed() ? cmd_gen(cfg) : cmd_train(cfg);
    } catch (const std::exception& e) {
        std::cerr << error_json(e).dump() << "\n";
        return classify(e).code;
    }
}
