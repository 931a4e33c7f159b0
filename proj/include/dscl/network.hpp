#pragma once

#include <map>

#include "dscl/arch.hpp"
#include "dscl/ops.hpp"
#include "dscl/rng.hpp"

namespace dscl {

/// An instantiated multi-head network: named parameter/buffer tensors plus the
/// forward pass over its spec. Single-writer: one thread owns a Network.
template <typename T = float>
class Network {
   public:
    Network() = default;

    Network(MultiHeadSpec spec, uint64_t init_seed) : spec_(std::move(spec)) {
        for (const auto& fe : spec_.fes) {
            init_conv(fe.conv1, init_seed);
            init_bn(fe.bn1, init_seed);
            for (const auto& stage : fe.stages)
                for (const auto& b : stage) {
                    init_conv(b.conv1, init_seed);
                    init_bn(b.bn1, init_seed);
                    init_conv(b.conv2, init_seed);
                    init_bn(b.bn2, init_seed);
                    if (b.has_downsample) {
                        init_conv(b.ds_conv, init_seed);
                        init_bn(b.ds_bn, init_seed);
                    }
                }
        }
        for (const auto& h : spec_.heads) {
            if (h.has_conv) init_conv(h.conv, init_seed);
            init_linear(h.prefix + "fc", h.fc_in, h.fc_out, init_seed);
        }
    }

    const MultiHeadSpec& spec() const { return spec_; }
    std::map<std::string, Tensor<T>>& params() { return params_; }
    const std::map<std::string, Tensor<T>>& params() const { return params_; }
    std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
    const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

    Tensor<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw StateError("no parameter named '" + name + "'");
        return it->second;
    }
    Tensor<T>& buffer(const std::string& name) {
        auto it = buffers_.find(name);
        if (it == buffers_.end()) throw StateError("no buffer named '" + name + "'");
        return it->second;
    }

    /// Names of the parameters trained while `active_task` is the current
    /// task: every shared (non-head) parameter plus that task's head.
    /// Lexicographic order, so downstream iteration is deterministic.
    std::vector<std::string> trainable_names(int64_t active_task) const {
        const std::string active_prefix = "head." + std::to_string(active_task) + ".";
        std::vector<std::string> out;
        for (const auto& [name, p] : params_) {
            if (name.rfind("head.", 0) == 0) {
                if (name.rfind(active_prefix, 0) == 0) out.push_back(name);
            } else {
                out.push_back(name);
            }
        }
        return out;
    }

    /// Marks shared parameters and the active head trainable; freezes every
    /// other head so no gradient is ever accumulated into it.
    void set_active_task(int64_t active_task) {
        const std::string active_prefix = "head." + std::to_string(active_task) + ".";
        for (auto& [name, p] : params_) {
            if (name.rfind("head.", 0) == 0)
                p.requires_grad = name.rfind(active_prefix, 0) == 0;
            else
                p.requires_grad = true;
        }
    }

    int64_t task_count() const { return static_cast<int64_t>(spec_.heads.size()); }

    /// Trunk features shared by all heads: fused pre-pool map, or pooled
    /// feature vector for plain (linear-head) networks. Branch maps on
    /// different spatial grids (strict color keeps full resolution) are
    /// average-pooled down to the coarser grid before the channel concat.
    Tensor<T> forward_trunk(Tape* tape, const Tensor<T>& images, bool training) {
        Tensor<T> fused;
        if (spec_.fusion == Fusion::channel_concat) {
            Tensor<T> a = forward_fe(tape, spec_.fes.at(0), images, training);
            Tensor<T> b = forward_fe(tape, spec_.fes.at(1), images, training);
            if (a.dims[2] != b.dims[2] || a.dims[3] != b.dims[3]) {
                Tensor<T>& fine = a.dims[2] > b.dims[2] ? a : b;
                const Tensor<T>& coarse = a.dims[2] > b.dims[2] ? b : a;
                if (coarse.dims[2] < 1 || fine.dims[2] % coarse.dims[2] != 0 ||
                    fine.dims[3] % coarse.dims[3] != 0 ||
                    fine.dims[2] / coarse.dims[2] != fine.dims[3] / coarse.dims[3])
                    throw ShapeError("channel fusion: branch maps " + dims_str(a.dims) +
                                     " and " + dims_str(b.dims) + " have incompatible grids");
                const int64_t k = fine.dims[2] / coarse.dims[2];
                fine = avgpool2d(tape, fine, k, k);
            }
            fused = channel_concat(tape, a, b);
        } else {
            fused = forward_fe(tape, spec_.fes.at(0), images, training);
        }
        if (spec_.trunk_pool) return flatten(tape, global_avgpool(tape, fused));
        return fused;
    }

    Tensor<T> forward_head(Tape* tape, const HeadSpec& head, const Tensor<T>& trunk_out) {
        if (head.has_conv) {
            Tensor<T> h = conv2d(tape, trunk_out, param(head.conv.name + ".weight"),
                                 param(head.conv.name + ".bias"), head.conv.stride,
                                 head.conv.padding);
            h = relu(tape, h);
            h = flatten(tape, global_avgpool(tape, h));
            return linear(tape, h, param(head.prefix + "fc.weight"),
                          param(head.prefix + "fc.bias"));
        }
        return linear(tape, trunk_out, param(head.prefix + "fc.weight"),
                      param(head.prefix + "fc.bias"));
    }

    /// Logits of one task's head.
    Tensor<T> forward_task(Tape* tape, const Tensor<T>& images, int64_t task_id,
                           bool training) {
        return forward_head(tape, head_spec(task_id), forward_trunk(tape, images, training));
    }

    /// Logits of every head off a single trunk evaluation (index = task id).
    std::vector<Tensor<T>> forward_all(Tape* tape, const Tensor<T>& images, bool training) {
        Tensor<T> trunk_out = forward_trunk(tape, images, training);
        std::vector<Tensor<T>> logits;
        logits.reserve(spec_.heads.size());
        for (const auto& h : spec_.heads) logits.push_back(forward_head(tape, h, trunk_out));
        return logits;
    }

    const HeadSpec& head_spec(int64_t task_id) const {
        for (const auto& h : spec_.heads)
            if (h.task_id == task_id) return h;
        throw StateError("no head for task " + std::to_string(task_id));
    }

    /// Deep copy: fresh storage for every parameter and buffer.
    Network clone() const {
        Network n;
        n.spec_ = spec_;
        for (const auto& [name, p] : params_) n.params_.emplace(name, p.clone());
        for (const auto& [name, b] : buffers_) n.buffers_.emplace(name, b.clone());
        return n;
    }

    /// Value snapshot of all parameters and buffers (no grads, no flags).
    std::map<std::string, std::vector<T>> snapshot() const {
        std::map<std::string, std::vector<T>> s;
        for (const auto& [name, p] : params_) s.emplace(name, p.values());
        for (const auto& [name, b] : buffers_) s.emplace(name, b.values());
        return s;
    }

    void restore(const std::map<std::string, std::vector<T>>& snap) {
        for (auto& [name, p] : params_) p.values() = snap.at(name);
        for (auto& [name, b] : buffers_) b.values() = snap.at(name);
    }

    void clear_grads() {
        for (auto& [name, p] : params_) p.clear_grad();
    }

   private:
    MultiHeadSpec spec_;
    std::map<std::string, Tensor<T>> params_;
    std::map<std::string, Tensor<T>> buffers_;

    Rng param_rng(uint64_t seed, const std::string& name) {
        return Rng(derive_seed(seed, "init:" + name));
    }

    void init_conv(const ConvDesc& c, uint64_t seed) {
        // Kaiming fan-in normal for weights, zero biases.
        Tensor<T> w = Tensor<T>::zeros({c.out_c, c.in_c, c.kernel, c.kernel});
        const double fan_in = static_cast<double>(c.in_c * c.kernel * c.kernel);
        Rng rng = param_rng(seed, c.name + ".weight");
        const double std = std::sqrt(2.0 / fan_in);
        for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, std));
        w.requires_grad = true;
        params_.emplace(c.name + ".weight", std::move(w));
        if (c.bias) {
            Tensor<T> b = Tensor<T>::zeros({c.out_c});
            b.requires_grad = true;
            params_.emplace(c.name + ".bias", std::move(b));
        }
    }

    void init_bn(const BnDesc& d, uint64_t) {
        Tensor<T> gamma = Tensor<T>::full({d.channels}, T(1));
        Tensor<T> beta = Tensor<T>::zeros({d.channels});
        gamma.requires_grad = beta.requires_grad = true;
        params_.emplace(d.name + ".weight", std::move(gamma));
        params_.emplace(d.name + ".bias", std::move(beta));
        buffers_.emplace(d.name + ".running_mean", Tensor<T>::zeros({d.channels}));
        buffers_.emplace(d.name + ".running_var", Tensor<T>::full({d.channels}, T(1)));
    }

    void init_linear(const std::string& name, int64_t in_f, int64_t out_f, uint64_t seed) {
        // Kaiming fan-in normal for weights, zero biases.
        Tensor<T> w = Tensor<T>::zeros({out_f, in_f});
        Rng rng = param_rng(seed, name + ".weight");
        const double std = std::sqrt(2.0 / static_cast<double>(in_f));
        for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, std));
        Tensor<T> b = Tensor<T>::zeros({out_f});
        w.requires_grad = b.requires_grad = true;
        params_.emplace(name + ".weight", std::move(w));
        params_.emplace(name + ".bias", std::move(b));
    }

    Tensor<T> forward_conv(Tape* tape, const ConvDesc& c, const Tensor<T>& x) {
        return conv2d(tape, x, param(c.name + ".weight"),
                      c.bias ? param(c.name + ".bias") : Tensor<T>{}, c.stride, c.padding);
    }

    Tensor<T> forward_bn(Tape* tape, const BnDesc& d, const Tensor<T>& x, bool training) {
        return batchnorm2d(tape, x, param(d.name + ".weight"), param(d.name + ".bias"),
                           buffer(d.name + ".running_mean"), buffer(d.name + ".running_var"),
                           training);
    }

    Tensor<T> forward_fe(Tape* tape, const FeSpec& fe, const Tensor<T>& images,
                         bool training) {
        Tensor<T> h = images;
        if (fe.gray_stem)
            h = rgb_to_gray(tape, h, fe.gray_coeffs[0], fe.gray_coeffs[1], fe.gray_coeffs[2]);
        h = relu(tape, forward_bn(tape, fe.bn1, forward_conv(tape, fe.conv1, h), training));
        if (fe.has_maxpool)
            h = maxpool2d(tape, h, fe.mp_kernel, fe.mp_stride, fe.mp_padding);
        for (const auto& stage : fe.stages)
            for (const auto& b : stage) {
                Tensor<T> identity = h;
                Tensor<T> out =
                    relu(tape, forward_bn(tape, b.bn1, forward_conv(tape, b.conv1, h),
                                          training));
                out = forward_bn(tape, b.bn2, forward_conv(tape, b.conv2, out), training);
                if (b.has_downsample)
                    identity = forward_bn(tape, b.ds_bn,
                                          forward_conv(tape, b.ds_conv, identity), training);
                h = relu(tape, elementwise_add(tape, out, identity));
            }
        return h;
    }
};

}  // namespace dscl
