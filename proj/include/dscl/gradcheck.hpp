#pragma once

#include <functional>
#include <string>
#include <utility>

#include "dscl/rng.hpp"
#include "dscl/tape.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

struct GradCheckReport {
    double max_rel_err = 0;
    int64_t entries_checked = 0;
    std::string worst_param;
    int64_t worst_index = -1;
    double worst_analytic = 0;
    double worst_fd = 0;
};

inline double grad_rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max(std::abs(analytic) + std::abs(fd), 1e-6);
}

/// Central-difference gradient check at 64-bit precision.
///
/// `loss_fn` must rebuild the computation each call: with a tape it produces a
/// differentiable scalar, with nullptr a pure forward evaluation. `params` are
/// the same tensor handles the closure captured (shared storage), each with
/// requires_grad already set. `stateful_buffers` (e.g. batch-norm running
/// statistics mutated by a training-mode forward) are snapshotted on entry and
/// restored before every evaluation so repeated forwards stay comparable.
/// When `max_entries_per_param` is positive, larger parameters are probed at
/// that many seeded, distinct entries instead of exhaustively.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(Tape*)>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<double>>>& params,
    const std::vector<Tensor<double>>& stateful_buffers = {},
    int64_t max_entries_per_param = -1, uint64_t subsample_seed = 0, double h = 1e-5) {
    for (const auto& [name, p] : params) {
        if (!p.defined()) throw StateError("grad_check: parameter '" + name + "' undefined");
        if (!p.requires_grad)
            throw StateError("grad_check: parameter '" + name + "' has requires_grad=false");
    }

    std::vector<std::vector<double>> snapshots;
    snapshots.reserve(stateful_buffers.size());
    for (const auto& b : stateful_buffers) snapshots.push_back(b.values());
    auto restore = [&]() {
        for (size_t i = 0; i < stateful_buffers.size(); ++i)
            const_cast<Tensor<double>&>(stateful_buffers[i]).values() = snapshots[i];
    };

    for (const auto& [name, p] : params) const_cast<Tensor<double>&>(p).clear_grad();

    restore();
    Tape tape;
    Tensor<double> loss = loss_fn(&tape);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params)
        analytic.push_back(p.has_grad() ? p.grad()
                                        : std::vector<double>(p.values().size(), 0.0));

    GradCheckReport rep;
    Rng pick(derive_seed(subsample_seed, "gradcheck_subsample"));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        Tensor<double>& p = const_cast<Tensor<double>&>(params[pi].second);
        const int64_t n = p.numel();
        std::vector<int64_t> idx;
        if (max_entries_per_param > 0 && n > max_entries_per_param) {
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            pick.shuffle(all);
            idx.assign(all.begin(), all.begin() + max_entries_per_param);
        } else {
            idx.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        }
        for (int64_t i : idx) {
            const double orig = p[i];
            p[i] = orig + h;
            restore();
            const double fp = loss_fn(nullptr)[0];
            p[i] = orig - h;
            restore();
            const double fm = loss_fn(nullptr)[0];
            p[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[pi][static_cast<size_t>(i)];
            const double e = grad_rel_err(an, fd);
            ++rep.entries_checked;
            if (e > rep.max_rel_err) {
                rep.max_rel_err = e;
                rep.worst_param = name;
                rep.worst_index = i;
                rep.worst_analytic = an;
                rep.worst_fd = fd;
            }
        }
    }
    restore();
    for (const auto& [name, p] : params) const_cast<Tensor<double>&>(p).clear_grad();
    return rep;
}

}  // namespace dscl
