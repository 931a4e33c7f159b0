#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dscl/common.hpp"
#include "dscl/config.hpp"

namespace dscl {

/// One completed run directory, as the aggregator sees it.
struct RunRecord {
    std::string dir;
    std::string arch;    ///< config-facing kind (resnet18, ds, ...)
    std::string method;  ///< finetune | lwf | ewc | si | mas
    uint64_t seed = 0;
    int64_t tasks = 0;
    nlohmann::json metrics;      ///< parsed metrics.json
    nlohmann::json fingerprint;  ///< experiment config sans seed/output, if present
};

namespace detail {

inline nlohmann::json read_json_file(const std::string& path, const char* what) {
    std::ifstream f(path);
    if (!f) throw ReportError(std::string("cannot open ") + what + " '" + path + "'");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ReportError(std::string(what) + " '" + path + "' is not valid JSON: " + e.what());
    }
}

/// Sample statistics over seeds; a single run reports its value unadorned.
struct MeanStd {
    double mean = 0;
    double std = 0;
    size_t n = 0;

    static MeanStd of(const std::vector<double>& xs) {
        MeanStd m;
        m.n = xs.size();
        for (double x : xs) m.mean += x;
        m.mean /= static_cast<double>(m.n);
        if (m.n > 1) {
            double ss = 0;
            for (double x : xs) ss += (x - m.mean) * (x - m.mean);
            m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
        }
        return m;
    }
    std::string cell() const {
        char buf[64];
        if (n > 1)
            std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, std);
        else
            std::snprintf(buf, sizeof buf, "%.2f", mean);
        return buf;
    }
};

inline std::vector<std::string> ordered(const std::set<std::string>& present,
                                        const std::vector<std::string>& canonical) {
    std::vector<std::string> out;
    for (const std::string& c : canonical)
        if (present.count(c)) out.push_back(c);
    for (const std::string& p : present)
        if (std::find(canonical.begin(), canonical.end(), p) == canonical.end())
            out.push_back(p);
    return out;
}

}  // namespace detail

/// Reads one run directory. The experiment snapshot is preferred; directories
/// holding only the harness artifacts fall back to the harness config.
inline RunRecord load_run(const std::string& dir) {
    namespace fs = std::filesystem;
    RunRecord r;
    r.dir = dir;
    r.metrics = detail::read_json_file((fs::path(dir) / "metrics.json").string(), "metrics");
    if (!r.metrics.contains("tasks") || !r.metrics.contains("task_aware"))
        throw ReportError("'" + dir + "/metrics.json' is not a run metrics file");
    r.tasks = r.metrics.at("tasks").get<int64_t>();
    const fs::path exp = fs::path(dir) / "experiment.json";
    if (fs::exists(exp)) {
        nlohmann::json e = detail::read_json_file(exp.string(), "experiment snapshot");
        r.arch = e.at("arch").at("kind").get<std::string>();
        r.method = e.at("method").at("name").get<std::string>();
        const auto seeds = e.at("seeds").get<std::vector<uint64_t>>();
        if (seeds.size() != 1)
            throw ReportError("'" + dir + "' snapshot does not describe a single run");
        r.seed = seeds[0];
        e.erase("seeds");
        e.erase("out_dir");
        r.fingerprint = std::move(e);
    } else {
        nlohmann::json c =
            detail::read_json_file((fs::path(dir) / "config.json").string(), "run config");
        r.arch = arch_kind_of(c.at("arch").get<std::string>());
        r.method = c.at("method").get<std::string>();
        r.seed = c.at("seed").get<uint64_t>();
    }
    return r;
}

/// Aggregates runs into the accuracy/forgetting tables and per-task curves.
/// Results do not depend on the order the run directories are given in.
inline void write_report(std::vector<RunRecord> runs, const std::string& out_dir,
                         const std::string& mode = "both") {
    namespace fs = std::filesystem;
    if (runs.empty()) throw ReportError("no run directories to aggregate");
    if (mode != "aware" && mode != "agnostic" && mode != "both")
        throw ReportError("mode must be aware, agnostic, or both");

    std::sort(runs.begin(), runs.end(), [](const RunRecord& a, const RunRecord& b) {
        return std::tie(a.arch, a.method, a.seed) < std::tie(b.arch, b.method, b.seed);
    });
    for (size_t i = 1; i < runs.size(); ++i) {
        const RunRecord &a = runs[i - 1], &b = runs[i];
        if (a.arch == b.arch && a.method == b.method && a.seed == b.seed)
            throw ReportError("duplicate run cell (" + a.arch + ", " + a.method + ", seed " +
                              std::to_string(a.seed) + ") in '" + a.dir + "' and '" + b.dir +
                              "'");
        if (a.tasks != b.tasks)
            throw ReportError("incompatible runs: '" + a.dir + "' has " +
                              std::to_string(a.tasks) + " tasks, '" + b.dir + "' has " +
                              std::to_string(b.tasks));
        if (!a.fingerprint.is_null() && !b.fingerprint.is_null()) {
            nlohmann::json fa = a.fingerprint, fb = b.fingerprint;
            // Everything but the identity of the cell must agree.
            for (nlohmann::json* f : {&fa, &fb}) {
                f->at("arch").erase("kind");
                f->at("method") = nlohmann::json::object();
                f->erase("mode");
                f->erase("dry_run");
            }
            if (fa != fb)
                throw ReportError("incompatible runs: '" + a.dir + "' and '" + b.dir +
                                  "' describe different experiments");
        }
    }

    std::set<std::string> archs, methods;
    std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> cells;
    for (const RunRecord& r : runs) {
        archs.insert(r.arch);
        methods.insert(r.method);
        cells[{r.arch, r.method}].push_back(&r);
    }
    const std::vector<std::string> arch_order = detail::ordered(archs, arch_kinds());
    const std::vector<std::string> method_order =
        detail::ordered(methods, {"finetune", "lwf", "ewc", "si", "mas"});
    std::vector<std::string> modes;
    if (mode != "agnostic") modes.push_back("task_aware");
    if (mode != "aware") modes.push_back("task_agnostic");

    fs::create_directories(out_dir);
    const auto open = [](const std::string& path) {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw ReportError("cannot open '" + path + "' for writing");
        return f;
    };

    for (const char* metric : {"mean_accuracy", "mean_forgetting"}) {
        const std::string file =
            std::string(metric) == "mean_accuracy" ? "table_acc.csv" : "table_forg.csv";
        std::ofstream f = open((fs::path(out_dir) / file).string());
        f << "mode,arch";
        for (const std::string& m : method_order) f << "," << m << " mean±sd(n-1)";
        f << "\n";
        for (const std::string& mo : modes)
            for (const std::string& a : arch_order) {
                f << mo << "," << a;
                for (const std::string& m : method_order) {
                    f << ",";
                    const auto it = cells.find({a, m});
                    if (it == cells.end()) continue;
                    std::vector<double> xs;
                    for (const RunRecord* r : it->second)
                        xs.push_back(r->metrics.at(mo).at(metric).get<double>());
                    f << detail::MeanStd::of(xs).cell();
                }
                f << "\n";
            }
        if (!f) throw ReportError("short write to " + file);
    }

    for (const std::string& mo : modes) {
        std::ofstream f = open((fs::path(out_dir) / ("curves_" + mo + ".csv")).string());
        f << "arch,method,after_task,task,mean,std\n";
        for (const std::string& a : arch_order)
            for (const std::string& m : method_order) {
                const auto it = cells.find({a, m});
                if (it == cells.end()) continue;
                const int64_t tasks = it->second.front()->tasks;
                for (int64_t t = 0; t < tasks; ++t)
                    for (int64_t k = 0; k <= t; ++k) {
                        std::vector<double> xs;
                        for (const RunRecord* r : it->second)
                            xs.push_back(r->metrics.at(mo)
                                             .at("curves")[static_cast<size_t>(t)]
                                                          [static_cast<size_t>(k)]
                                             .get<double>());
                        const detail::MeanStd s = detail::MeanStd::of(xs);
                        char buf[96];
                        std::snprintf(buf, sizeof buf, "%.17g,", s.mean);
                        f << a << "," << m << "," << t << "," << k << "," << buf;
                        if (s.n > 1) {
                            std::snprintf(buf, sizeof buf, "%.17g", s.std);
                            f << buf;
                        }
                        f << "\n";
                    }
            }
        if (!f) throw ReportError("short write to curves_" + mo + ".csv");
    }
}

}  // namespace dscl
