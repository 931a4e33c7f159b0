#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "dscl/arch.hpp"
#include "dscl/data.hpp"
#include "dscl/regularizers.hpp"
#include "dscl/split.hpp"
#include "dscl/train.hpp"

namespace dscl {

/// Dataset source: either the procedural benchmark generator or an on-disk
/// corpus (class-directory tree or packed .dsds file). Exactly one of
/// `generator` and `corpus` may be set.
struct DataConfig {
    std::string generator;       ///< "fig1" or empty
    int64_t n_train_per_class = 100;
    int64_t n_test_per_class = 50;
    uint64_t seed = 1234;        ///< generator stream / corpus split stream
    std::string corpus;          ///< train corpus path (class dirs or .dsds)
    std::string corpus_test;     ///< optional separate test corpus
    double test_fraction = 0.2;  ///< held-out test share when corpus_test is empty
    int64_t n_tasks = 2;
};

/// Full description of one experiment cell: what to build, how to regularize,
/// what data to learn, how to schedule training, and where to write results.
struct ExperimentConfig {
    std::string arch = "ds";  ///< resnet18 | resnet18h | color | shape | ds
    ArchConfig arch_cfg;
    RegConfig method;
    DataConfig data;
    TrainConfig train;
    std::string out_dir = "runs";
    std::vector<uint64_t> seeds = {0};
    std::string mode = "both";  ///< aware | agnostic | both
    bool dry_run = false;       ///< resolve, count parameters, train nothing
};

inline const std::vector<std::string>& arch_kinds() {
    static const std::vector<std::string> kinds = {"resnet18", "resnet18h", "color", "shape",
                                                   "ds"};
    return kinds;
}

/// Maps the config-facing architecture kind onto the builder's name.
inline std::string arch_builder_name(const std::string& kind) {
    if (kind == "ds") return "resnet18_ds";
    if (kind == "resnet18h") return "resnet18_h";
    if (std::find(arch_kinds().begin(), arch_kinds().end(), kind) == arch_kinds().end())
        throw ConfigError("unknown architecture '" + kind + "'");
    return kind;
}

/// Inverse of arch_builder_name, for run directories written by the harness.
inline std::string arch_kind_of(const std::string& builder) {
    if (builder == "resnet18_ds") return "ds";
    if (builder == "resnet18_h") return "resnet18h";
    return builder;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& block,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("'" + block + "' must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed) known = known || item.key() == k;
        if (!known) throw ConfigError("unknown key '" + item.key() + "' in " + block);
    }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("key '") + key + "' has the wrong type");
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::check_keys(
        j, "config", {"arch", "method", "data", "train", "out_dir", "seeds", "mode", "dry_run"});
    if (j.contains("arch")) {
        const nlohmann::json& a = j.at("arch");
        detail::check_keys(a, "arch", {"kind", "input_size", "width_mult", "head_channels",
                                       "strict_color", "grayscale_coeffs"});
        detail::read_key(a, "kind", c.arch);
        detail::read_key(a, "input_size", c.arch_cfg.input_size);
        detail::read_key(a, "width_mult", c.arch_cfg.width_mult);
        detail::read_key(a, "head_channels", c.arch_cfg.head_channels);
        detail::read_key(a, "strict_color", c.arch_cfg.strict_color);
        detail::read_key(a, "grayscale_coeffs", c.arch_cfg.grayscale_coeffs);
    }
    if (j.contains("method")) {
        const nlohmann::json& m = j.at("method");
        detail::check_keys(m, "method", {"name", "lambda", "temperature", "xi",
                                         "empirical_fisher", "fisher_samples", "seed"});
        detail::read_key(m, "name", c.method.method);
        detail::read_key(m, "lambda", c.method.lambda);
        detail::read_key(m, "temperature", c.method.temperature);
        detail::read_key(m, "xi", c.method.xi);
        detail::read_key(m, "empirical_fisher", c.method.empirical_fisher);
        detail::read_key(m, "fisher_samples", c.method.importance_samples);
        detail::read_key(m, "seed", c.method.seed);
    }
    if (j.contains("data")) {
        const nlohmann::json& d = j.at("data");
        detail::check_keys(d, "data",
                           {"generator", "n_train_per_class", "n_test_per_class", "seed",
                            "corpus", "corpus_test", "test_fraction", "n_tasks"});
        detail::read_key(d, "generator", c.data.generator);
        detail::read_key(d, "n_train_per_class", c.data.n_train_per_class);
        detail::read_key(d, "n_test_per_class", c.data.n_test_per_class);
        detail::read_key(d, "seed", c.data.seed);
        detail::read_key(d, "corpus", c.data.corpus);
        detail::read_key(d, "corpus_test", c.data.corpus_test);
        detail::read_key(d, "test_fraction", c.data.test_fraction);
        detail::read_key(d, "n_tasks", c.data.n_tasks);
    }
    if (j.contains("train")) {
        const nlohmann::json& t = j.at("train");
        detail::check_keys(t, "train",
                           {"lr_grid", "batch_size", "max_epochs", "weight_decay", "momentum",
                            "patience", "lr_decay_factor", "min_lr", "val_fraction",
                            "improve_tol"});
        detail::read_key(t, "lr_grid", c.train.lr_grid);
        detail::read_key(t, "batch_size", c.train.batch_size);
        detail::read_key(t, "max_epochs", c.train.max_epochs);
        detail::read_key(t, "weight_decay", c.train.weight_decay);
        detail::read_key(t, "momentum", c.train.momentum);
        detail::read_key(t, "patience", c.train.patience);
        detail::read_key(t, "lr_decay_factor", c.train.lr_decay_factor);
        detail::read_key(t, "min_lr", c.train.min_lr);
        detail::read_key(t, "val_fraction", c.train.val_fraction);
        detail::read_key(t, "improve_tol", c.train.improve_tol);
    }
    detail::read_key(j, "out_dir", c.out_dir);
    detail::read_key(j, "seeds", c.seeds);
    detail::read_key(j, "mode", c.mode);
    detail::read_key(j, "dry_run", c.dry_run);
    return c;
}

/// Serializes a config with every field spelled out and the method strength
/// resolved, so the echo fully determines the run.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["arch"]["kind"] = c.arch;
    j["arch"]["input_size"] = c.arch_cfg.input_size;
    j["arch"]["width_mult"] = c.arch_cfg.width_mult;
    j["arch"]["head_channels"] = c.arch_cfg.head_channels;
    j["arch"]["strict_color"] = c.arch_cfg.strict_color;
    j["arch"]["grayscale_coeffs"] = c.arch_cfg.grayscale_coeffs;
    j["method"]["name"] = c.method.method;
    j["method"]["lambda"] =
        c.method.lambda < 0 ? default_lambda(c.method.method) : c.method.lambda;
    j["method"]["temperature"] = c.method.temperature;
    j["method"]["xi"] = c.method.xi;
    j["method"]["empirical_fisher"] = c.method.empirical_fisher;
    j["method"]["fisher_samples"] = c.method.importance_samples;
    j["method"]["seed"] = c.method.seed;
    j["data"]["generator"] = c.data.generator;
    j["data"]["n_train_per_class"] = c.data.n_train_per_class;
    j["data"]["n_test_per_class"] = c.data.n_test_per_class;
    j["data"]["seed"] = c.data.seed;
    j["data"]["corpus"] = c.data.corpus;
    j["data"]["corpus_test"] = c.data.corpus_test;
    j["data"]["test_fraction"] = c.data.test_fraction;
    j["data"]["n_tasks"] = c.data.n_tasks;
    j["train"]["lr_grid"] = c.train.lr_grid;
    j["train"]["batch_size"] = c.train.batch_size;
    j["train"]["max_epochs"] = c.train.max_epochs;
    j["train"]["weight_decay"] = c.train.weight_decay;
    j["train"]["momentum"] = c.train.momentum;
    j["train"]["patience"] = c.train.patience;
    j["train"]["lr_decay_factor"] = c.train.lr_decay_factor;
    j["train"]["min_lr"] = c.train.min_lr;
    j["train"]["val_fraction"] = c.train.val_fraction;
    j["train"]["improve_tol"] = c.train.improve_tol;
    j["out_dir"] = c.out_dir;
    j["seeds"] = c.seeds;
    j["mode"] = c.mode;
    j["dry_run"] = c.dry_run;
    return j;
}

inline ExperimentConfig config_from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

/// Shipped presets. `flowers10` expects the corpus at data/flowers (override
/// with a config file or flags); `capacity-check` only counts parameters.
inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    if (name == "fig1") {
        c.arch = "resnet18";
        c.arch_cfg.input_size = 32;
        c.arch_cfg.width_mult = 0.25;
        c.arch_cfg.head_channels = 128;
        c.method.method = "finetune";
        c.data.generator = "fig1";
        c.data.n_train_per_class = 100;
        c.data.n_test_per_class = 50;
        c.data.seed = 1234;
        c.data.n_tasks = 2;
        c.train.lr_grid = {5e-3};
        c.train.max_epochs = 20;
        c.seeds = {0, 1, 2, 3, 4};
        c.out_dir = "runs/fig1";
        return c;
    }
    if (name == "flowers10") {
        c.arch = "ds";
        c.arch_cfg.input_size = 224;
        c.arch_cfg.width_mult = 1.0;
        c.arch_cfg.head_channels = 512;
        c.method.method = "finetune";
        c.data.corpus = "data/flowers";
        c.data.test_fraction = 0.2;
        c.data.n_tasks = 10;
        c.seeds = {0, 1, 2};
        c.out_dir = "runs/flowers10";
        return c;
    }
    if (name == "capacity-check") {
        c.arch = "ds";
        c.arch_cfg.input_size = 224;
        c.arch_cfg.width_mult = 1.0;
        c.arch_cfg.head_channels = 512;
        c.data.generator = "fig1";
        c.dry_run = true;
        c.out_dir = "runs/capacity-check";
        return c;
    }
    throw ConfigError("unknown preset '" + name +
                      "' (available: fig1, flowers10, capacity-check)");
}

/// Total validation: every field checked, unknown values rejected. Path
/// existence is skipped for dry runs, which touch no data.
inline void validate_config(const ExperimentConfig& c, bool check_paths = true) {
    arch_builder_name(c.arch);  // throws on unknown kind
    c.arch_cfg.validate();
    default_lambda(c.method.method);  // throws on unknown method
    if (c.method.temperature <= 0) throw ConfigError("method.temperature must be positive");
    if (c.method.xi < 0) throw ConfigError("method.xi must be non-negative");
    if (c.method.importance_samples < 0)
        throw ConfigError("method.fisher_samples must be non-negative");

    const bool gen = !c.data.generator.empty();
    const bool corpus = !c.data.corpus.empty();
    if (gen == corpus)
        throw ConfigError("data must name exactly one source: a generator or a corpus");
    if (gen) {
        if (c.data.generator != "fig1")
            throw ConfigError("unknown generator '" + c.data.generator + "'");
        if (c.data.n_tasks != 2)
            throw ConfigError("the fig1 benchmark defines exactly 2 tasks");
        if (c.data.n_train_per_class < 1 || c.data.n_test_per_class < 1)
            throw ConfigError("generator sample counts must be >= 1");
    } else {
        if (c.data.n_tasks < 1) throw ConfigError("data.n_tasks must be >= 1");
        if (c.data.corpus_test.empty() &&
            !(c.data.test_fraction > 0 && c.data.test_fraction < 1))
            throw ConfigError(
                "data.test_fraction must lie in (0,1) when no test corpus is given");
        if (check_paths) {
            if (!std::filesystem::exists(c.data.corpus))
                throw ConfigError("data.corpus '" + c.data.corpus + "' does not exist");
            if (!c.data.corpus_test.empty() && !std::filesystem::exists(c.data.corpus_test))
                throw ConfigError("data.corpus_test '" + c.data.corpus_test +
                                  "' does not exist");
        }
    }

    c.train.validate();
    if (c.seeds.empty()) throw ConfigError("seeds must be non-empty");
    std::vector<uint64_t> sorted = c.seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ConfigError("seeds must be distinct");
    if (c.mode != "aware" && c.mode != "agnostic" && c.mode != "both")
        throw ConfigError("mode must be aware, agnostic, or both");
    if (c.out_dir.empty()) throw ConfigError("out_dir must be non-empty");
}

namespace detail {

template <typename T>
int64_t class_count(const Dataset<T>& ds) {
    if (!ds.class_names.empty()) return static_cast<int64_t>(ds.class_names.size());
    int64_t top = -1;
    for (int64_t l : ds.labels) top = std::max(top, l);
    return top + 1;
}

}  // namespace detail

/// Materializes the task list an experiment trains on. Corpus classes are
/// grouped into tasks by the seeded round-robin split; a missing test corpus
/// is carved out of the training corpus by a stratified per-class holdout.
template <typename T = float>
std::vector<TaskData<T>> build_tasks(const ExperimentConfig& c) {
    if (!c.data.generator.empty())
        return fig1_benchmark<T>(c.arch_cfg.input_size, c.data.n_train_per_class,
                                 c.data.n_test_per_class, c.data.seed);

    Dataset<T> train = load_image_dir<T>(c.data.corpus, c.arch_cfg.input_size);
    Dataset<T> test;
    if (!c.data.corpus_test.empty()) {
        test = load_image_dir<T>(c.data.corpus_test, c.arch_cfg.input_size);
    } else {
        const auto [rest, held] =
            stratified_split(train.labels, c.data.test_fraction, c.data.seed);
        if (held.empty()) throw DataError("test holdout from '" + c.data.corpus + "' is empty");
        test = train.select(held);
        train = train.select(rest);
    }
    const int64_t n_classes = detail::class_count(train);
    if (n_classes < 1) throw DataError("corpus '" + c.data.corpus + "' has no classes");
    if (detail::class_count(test) != n_classes)
        throw DataError("train and test corpora disagree on the number of classes");

    const auto groups = split_tasks(n_classes, c.data.n_tasks, c.data.seed);
    std::vector<TaskData<T>> out;
    for (const auto& g : groups) {
        TaskData<T> td;
        td.train = subset_by_classes(train, g);
        td.test = subset_by_classes(test, g);
        out.push_back(std::move(td));
    }
    return out;
}

/// Classes per task without building the task datasets; empty when the corpus
/// is absent so the split cannot be resolved yet (dry runs report it as such).
inline std::vector<int64_t> task_class_counts(const ExperimentConfig& c) {
    if (!c.data.generator.empty()) return {2, 2};
    int64_t n_classes = -1;
    const std::filesystem::path p(c.data.corpus);
    if (std::filesystem::is_directory(p)) {
        n_classes = 0;
        for (const auto& e : std::filesystem::directory_iterator(p))
            if (e.is_directory()) ++n_classes;
    } else if (std::filesystem::is_regular_file(p)) {
        const Dataset<float> ds = load_dsds<float>(c.data.corpus);
        n_classes = detail::class_count(ds);
    }
    if (n_classes < 1) return {};
    std::vector<int64_t> counts;
    for (const auto& g : split_tasks(n_classes, c.data.n_tasks, c.data.seed))
        counts.push_back(static_cast<int64_t>(g.size()));
    return counts;
}

/// Builds the architecture an experiment describes; head widths come from the
/// resolved task split.
inline MultiHeadSpec spec_of(const ExperimentConfig& c) {
    const std::vector<int64_t> counts = task_class_counts(c);
    if (counts.empty())
        throw ConfigError("cannot resolve task classes: corpus '" + c.data.corpus +
                          "' is not readable");
    return build_network(arch_builder_name(c.arch), c.arch_cfg, counts);
}

}  // namespace dscl
