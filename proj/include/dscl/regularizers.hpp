#pragma once

#include <functional>
#include <memory>

#include "dscl/checkpoint.hpp"
#include "dscl/dataset.hpp"

namespace dscl {

/// Method selection plus the knobs shared by the five regularizers. A negative
/// lambda means "use the method's default strength".
struct RegConfig {
    std::string method = "finetune";  // finetune | lwf | ewc | si | mas
    double lambda = -1.0;
    double temperature = 2.0;        // lwf softening
    double xi = 0.1;                 // si damping
    bool empirical_fisher = true;    // ewc: ground-truth labels; false = sampled labels
    int64_t importance_samples = 0;  // cap for ewc/mas estimation passes; 0 = all
    uint64_t seed = 0;               // stream for sampled-label fisher
};

inline double default_lambda(const std::string& method) {
    if (method == "ewc") return 5000.0;
    if (method == "si" || method == "mas" || method == "lwf") return 1.0;
    if (method == "finetune") return 0.0;
    throw ConfigError("unknown method '" + method + "'");
}

template <typename T>
std::vector<std::string> shared_param_names(const Network<T>& net) {
    std::vector<std::string> out;
    for (const auto& [name, p] : net.params())
        if (name.rfind("head.", 0) != 0) out.push_back(name);
    return out;  // map order: lexicographic, deterministic
}

/// Per-sample importance estimation cores. Both run one tape per sample and
/// reduce the per-sample gradient magnitudes of the given parameters; they are
/// shared by the EWC and MAS passes and by their brute-force oracle tests.
template <typename T>
using SampleLoss = std::function<Tensor<T>(Tape*, int64_t)>;

template <typename T>
std::map<std::string, std::vector<double>> mean_squared_grads(
    const std::vector<std::pair<std::string, Tensor<T>>>& params, int64_t n_samples,
    const SampleLoss<T>& loss_of_sample) {
    if (n_samples < 1) throw StateError("importance estimation needs at least one sample");
    std::map<std::string, std::vector<double>> acc;
    for (const auto& [name, p] : params) acc[name].assign(p.values().size(), 0.0);
    for (const auto& [name, p] : params) const_cast<Tensor<T>&>(p).clear_grad();
    for (int64_t s = 0; s < n_samples; ++s) {
        Tape tape;
        Tensor<T> loss = loss_of_sample(&tape, s);
        tape.backward(loss);
        for (const auto& [name, p] : params) {
            if (p.has_grad()) {
                const std::vector<T>& g = p.grad();
                std::vector<double>& a = acc[name];
                for (size_t i = 0; i < g.size(); ++i)
                    a[i] += static_cast<double>(g[i]) * static_cast<double>(g[i]);
            }
            const_cast<Tensor<T>&>(p).clear_grad();
        }
    }
    for (auto& [name, a] : acc)
        for (double& v : a) v /= static_cast<double>(n_samples);
    return acc;
}

template <typename T>
std::map<std::string, std::vector<double>> mean_abs_grads(
    const std::vector<std::pair<std::string, Tensor<T>>>& params, int64_t n_samples,
    const SampleLoss<T>& loss_of_sample) {
    if (n_samples < 1) throw StateError("importance estimation needs at least one sample");
    std::map<std::string, std::vector<double>> acc;
    for (const auto& [name, p] : params) acc[name].assign(p.values().size(), 0.0);
    for (const auto& [name, p] : params) const_cast<Tensor<T>&>(p).clear_grad();
    for (int64_t s = 0; s < n_samples; ++s) {
        Tape tape;
        Tensor<T> loss = loss_of_sample(&tape, s);
        tape.backward(loss);
        for (const auto& [name, p] : params) {
            if (p.has_grad()) {
                const std::vector<T>& g = p.grad();
                std::vector<double>& a = acc[name];
                for (size_t i = 0; i < g.size(); ++i) a[i] += std::abs(static_cast<double>(g[i]));
            }
            const_cast<Tensor<T>&>(p).clear_grad();
        }
    }
    for (auto& [name, a] : acc)
        for (double& v : a) v /= static_cast<double>(n_samples);
    return acc;
}

/// Uniform lifecycle for the continual-learning methods. The training loop
/// fires on_task_start before the first batch of a task, on_batch_end after
/// every optimizer step (only when needs_step_trace()), penalty on every
/// batch's loss, and on_task_end exactly once with the winning model.
///
/// penalty returns an UNDEFINED tensor when the term is exactly zero (first
/// task, or lambda = 0); the loop then adds nothing to the loss, so a
/// zero-strength method follows the finetune trajectory bit for bit.
template <typename T>
class Regularizer {
   public:
    virtual ~Regularizer() = default;
    virtual const char* kind() const = 0;
    double lambda() const { return cfg_.lambda; }
    const RegConfig& config() const { return cfg_; }

    virtual void on_task_start(Network<T>&, int64_t) {}
    virtual bool needs_step_trace() const { return false; }
    virtual void on_batch_end(const std::vector<std::string>&,
                              const std::vector<std::vector<T>>&,
                              const std::vector<std::vector<T>>&) {}
    virtual void on_task_end(Network<T>&, int64_t, const Dataset<T>&) {}
    virtual bool wants_all_head_logits() const { return false; }
    virtual Tensor<T> penalty(Tape* tape, Network<T>& model, int64_t active_task,
                              const Tensor<T>& images,
                              const std::vector<Tensor<T>>* all_logits) = 0;
    virtual std::unique_ptr<Regularizer<T>> clone() const = 0;

    std::string serialize() const {
        std::string out;
        bytes::put_str(out, kind());
        bytes::put_f64(out, cfg_.lambda);
        bytes::put_f64(out, cfg_.temperature);
        bytes::put_f64(out, cfg_.xi);
        bytes::put_u32(out, cfg_.empirical_fisher ? 1 : 0);
        bytes::put_u64(out, static_cast<uint64_t>(cfg_.importance_samples));
        bytes::put_u64(out, cfg_.seed);
        serialize_state(out);
        return out;
    }

   protected:
    explicit Regularizer(RegConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.lambda < 0) cfg_.lambda = default_lambda(cfg_.method);
        if (cfg_.importance_samples < 0)
            throw ConfigError("importance_samples must be >= 0");
    }
    virtual void serialize_state(std::string&) const {}
    virtual void deserialize_state(bytes::Reader&, const MultiHeadSpec&) {}

    RegConfig cfg_;

    template <typename U>
    friend std::unique_ptr<Regularizer<U>> deserialize_regularizer(const std::string&,
                                                                   const MultiHeadSpec&);
};

namespace detail {

inline void put_named_f64(std::string& out,
                          const std::map<std::string, std::vector<double>>& m) {
    bytes::put_u64(out, m.size());
    for (const auto& [name, v] : m) {
        bytes::put_str(out, name);
        bytes::put_u64(out, v.size());
        for (double x : v) bytes::put_f64(out, x);
    }
}

inline std::map<std::string, std::vector<double>> get_named_f64(bytes::Reader& r) {
    std::map<std::string, std::vector<double>> m;
    const uint64_t n = r.get_u64();
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = r.get_str();
        const uint64_t len = r.get_u64();
        std::vector<double> v(len);
        for (uint64_t k = 0; k < len; ++k) v[k] = r.get_f64();
        m.emplace(std::move(name), std::move(v));
    }
    return m;
}

}  // namespace detail

template <typename T>
class FinetuneRegularizer final : public Regularizer<T> {
   public:
    explicit FinetuneRegularizer(RegConfig cfg) : Regularizer<T>(std::move(cfg)) {}
    const char* kind() const override { return "finetune"; }
    Tensor<T> penalty(Tape*, Network<T>&, int64_t, const Tensor<T>&,
                      const std::vector<Tensor<T>>*) override {
        return {};
    }
    std::unique_ptr<Regularizer<T>> clone() const override {
        return std::make_unique<FinetuneRegularizer>(*this);
    }
};

/// Shared machinery for the quadratic-penalty family:
///   penalty = (lambda/2) * sum_i Omega_i (theta_i - anchor_i)^2
/// over the shared (non-head) parameters, as a single fused tape node with
/// backward contribution lambda * Omega_i * (theta_i - anchor_i).
template <typename T>
class QuadraticRegularizer : public Regularizer<T> {
   public:
    const std::map<std::string, std::vector<double>>& omega() const { return *omega_; }
    const std::map<std::string, std::vector<T>>& anchors() const { return *anchor_; }

    Tensor<T> penalty(Tape* tape, Network<T>& model, int64_t, const Tensor<T>&,
                      const std::vector<Tensor<T>>*) override {
        if (this->cfg_.lambda == 0 || anchor_->empty()) return {};
        std::vector<std::string> names;
        std::vector<Tensor<T>> handles;
        double acc = 0;
        for (const auto& [name, om] : *omega_) {
            Tensor<T>& p = model.param(name);
            auto ait = anchor_->find(name);
            if (ait == anchor_->end() || ait->second.size() != p.values().size() ||
                om.size() != p.values().size())
                throw StateError("importance/anchor shape mismatch for '" + name + "'");
            const std::vector<T>& a = ait->second;
            for (size_t i = 0; i < om.size(); ++i) {
                const double d = static_cast<double>(p[static_cast<int64_t>(i)]) -
                                 static_cast<double>(a[i]);
                acc += om[i] * d * d;
            }
            names.push_back(name);
            handles.push_back(p);
        }
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(0.5 * this->cfg_.lambda * acc));
        check_finite(out, "quadratic_penalty");
        if (tape) {
            auto omega = omega_;
            auto anchor = anchor_;
            const double lam = this->cfg_.lambda;
            Tensor<T> out_c = out;
            auto fn = [out_c, names = std::move(names), handles = std::move(handles), omega,
                       anchor, lam]() {
                if (!out_c.has_grad()) return;
                const double g = static_cast<double>(out_c.grad()[0]);
                for (size_t k = 0; k < names.size(); ++k) {
                    const Tensor<T>& p = handles[k];
                    const std::vector<double>& om = omega->at(names[k]);
                    const std::vector<T>& a = anchor->at(names[k]);
                    std::vector<T>& dp = p.ensure_grad();
                    for (size_t i = 0; i < om.size(); ++i)
                        dp[i] += static_cast<T>(
                            g * lam * om[i] *
                            (static_cast<double>(p[static_cast<int64_t>(i)]) -
                             static_cast<double>(a[i])));
                }
            };
            out.tape_serial = tape->record(std::move(fn));
        }
        return out;
    }

   protected:
    explicit QuadraticRegularizer(RegConfig cfg)
        : Regularizer<T>(std::move(cfg)),
          omega_(std::make_shared<std::map<std::string, std::vector<double>>>()),
          anchor_(std::make_shared<std::map<std::string, std::vector<T>>>()) {}

    QuadraticRegularizer(const QuadraticRegularizer& other)
        : Regularizer<T>(other),
          omega_(std::make_shared<std::map<std::string, std::vector<double>>>(*other.omega_)),
          anchor_(std::make_shared<std::map<std::string, std::vector<T>>>(*other.anchor_)) {}

    void add_importance(const std::map<std::string, std::vector<double>>& delta) {
        for (const auto& [name, v] : delta) {
            std::vector<double>& om = (*omega_)[name];
            if (om.empty()) om.assign(v.size(), 0.0);
            if (om.size() != v.size())
                throw StateError("importance size changed for '" + name + "'");
            for (size_t i = 0; i < v.size(); ++i) om[i] += v[i];
        }
    }

    void set_anchor(Network<T>& model) {
        anchor_->clear();
        for (const std::string& name : shared_param_names(model))
            (*anchor_)[name] = model.param(name).values();
    }

    void serialize_state(std::string& out) const override {
        detail::put_named_f64(out, *omega_);
        bytes::put_u64(out, anchor_->size());
        for (const auto& [name, v] : *anchor_) {
            bytes::put_str(out, name);
            bytes::put_u64(out, v.size());
            for (T x : v) bytes::put_f64(out, static_cast<double>(x));
        }
    }
    void deserialize_state(bytes::Reader& r, const MultiHeadSpec&) override {
        *omega_ = detail::get_named_f64(r);
        anchor_->clear();
        const uint64_t n = r.get_u64();
        for (uint64_t i = 0; i < n; ++i) {
            std::string name = r.get_str();
            const uint64_t len = r.get_u64();
            std::vector<T> v(len);
            for (uint64_t k = 0; k < len; ++k) v[k] = static_cast<T>(r.get_f64());
            anchor_->emplace(std::move(name), std::move(v));
        }
    }

    std::shared_ptr<std::map<std::string, std::vector<double>>> omega_;
    std::shared_ptr<std::map<std::string, std::vector<T>>> anchor_;
};

/// Elastic weight consolidation: importance = diagonal empirical Fisher,
/// the per-sample squared gradient of the task cross-entropy, averaged over
/// the task's samples; accumulated across tasks as a running sum with the
/// anchor at the latest task boundary. Estimation runs the network in eval
/// mode (single-sample batches).
template <typename T>
class EwcRegularizer final : public QuadraticRegularizer<T> {
   public:
    explicit EwcRegularizer(RegConfig cfg) : QuadraticRegularizer<T>(std::move(cfg)) {}
    const char* kind() const override { return "ewc"; }

    void on_task_end(Network<T>& model, int64_t task_id, const Dataset<T>& data) override {
        if (data.size() == 0) throw StateError("ewc: empty task dataset");
        const std::vector<int64_t> idx = estimation_indices(data.size());
        std::vector<std::pair<std::string, Tensor<T>>> params;
        for (const std::string& n : shared_param_names(model))
            params.emplace_back(n, model.param(n));
        Rng label_rng(derive_seed(this->cfg_.seed, "fisher_sampled_labels", task_id));
        auto loss_of = [&](Tape* tape, int64_t s) {
            const int64_t i = idx[static_cast<size_t>(s)];
            Tensor<T> logits = model.forward_task(tape, data.sample_image(i), task_id, false);
            int64_t label = data.labels[static_cast<size_t>(i)];
            if (!this->cfg_.empirical_fisher) {
                Tensor<T> probs = softmax<T>(nullptr, logits);
                double u = label_rng.uniform(0.0, 1.0), c = 0;
                label = logits.dims[1] - 1;
                for (int64_t k = 0; k < logits.dims[1]; ++k) {
                    c += static_cast<double>(probs[k]);
                    if (u < c) {
                        label = k;
                        break;
                    }
                }
            }
            return cross_entropy_with_logits<T>(tape, logits, {label});
        };
        this->add_importance(
            mean_squared_grads<T>(params, static_cast<int64_t>(idx.size()), loss_of));
        this->set_anchor(model);
        model.clear_grads();
    }

    std::unique_ptr<Regularizer<T>> clone() const override {
        return std::make_unique<EwcRegularizer>(*this);
    }

   private:
    std::vector<int64_t> estimation_indices(int64_t n) const {
        int64_t limit = this->cfg_.importance_samples > 0
                            ? std::min(n, this->cfg_.importance_samples)
                            : n;
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(limit));
        for (int64_t k = 0; k < limit; ++k) idx.push_back(k * n / limit);  // evenly spaced
        return idx;
    }
};

/// Memory aware synapses: importance = mean absolute gradient of the squared
/// L2 norm of the active head's pre-softmax output, per sample, eval mode.
template <typename T>
class MasRegularizer final : public QuadraticRegularizer<T> {
   public:
    explicit MasRegularizer(RegConfig cfg) : QuadraticRegularizer<T>(std::move(cfg)) {}
    const char* kind() const override { return "mas"; }

    void on_task_end(Network<T>& model, int64_t task_id, const Dataset<T>& data) override {
        if (data.size() == 0) throw StateError("mas: empty task dataset");
        int64_t n = data.size();
        int64_t limit = this->cfg_.importance_samples > 0
                            ? std::min(n, this->cfg_.importance_samples)
                            : n;
        std::vector<int64_t> idx;
        for (int64_t k = 0; k < limit; ++k) idx.push_back(k * n / limit);
        std::vector<std::pair<std::string, Tensor<T>>> params;
        for (const std::string& name : shared_param_names(model))
            params.emplace_back(name, model.param(name));
        auto loss_of = [&](Tape* tape, int64_t s) {
            const int64_t i = idx[static_cast<size_t>(s)];
            Tensor<T> logits = model.forward_task(tape, data.sample_image(i), task_id, false);
            return sum_squares<T>(tape, logits);
        };
        this->add_importance(mean_abs_grads<T>(params, limit, loss_of));
        this->set_anchor(model);
        model.clear_grads();
    }

    std::unique_ptr<Regularizer<T>> clone() const override {
        return std::make_unique<MasRegularizer>(*this);
    }
};

/// Synaptic intelligence: the path integral omega_i += -g_i * delta_i is
/// accumulated at every optimizer step (g = the gradient the step consumed,
/// delta = the realized parameter change); at the task boundary
///   Omega_i += max(omega_i, 0) / ((theta_end - theta_start)^2 + xi).
template <typename T>
class SiRegularizer final : public QuadraticRegularizer<T> {
   public:
    explicit SiRegularizer(RegConfig cfg) : QuadraticRegularizer<T>(std::move(cfg)) {
        if (this->cfg_.xi <= 0) throw ConfigError("si: xi must be positive");
    }
    const char* kind() const override { return "si"; }
    bool needs_step_trace() const override { return true; }

    void on_task_start(Network<T>& model, int64_t) override {
        si_start_.clear();
        si_omega_.clear();
        for (const std::string& name : shared_param_names(model))
            si_start_[name] = model.param(name).values();
    }

    void on_batch_end(const std::vector<std::string>& names,
                      const std::vector<std::vector<T>>& grads,
                      const std::vector<std::vector<T>>& deltas) override {
        for (size_t k = 0; k < names.size(); ++k) {
            std::vector<double>& om = si_omega_[names[k]];
            if (om.empty()) om.assign(grads[k].size(), 0.0);
            for (size_t i = 0; i < grads[k].size(); ++i)
                om[i] += -static_cast<double>(grads[k][i]) * static_cast<double>(deltas[k][i]);
        }
    }

    void on_task_end(Network<T>& model, int64_t, const Dataset<T>&) override {
        std::map<std::string, std::vector<double>> delta;
        for (const std::string& name : shared_param_names(model)) {
            const std::vector<T>& end = model.param(name).values();
            auto sit = si_start_.find(name);
            if (sit == si_start_.end()) throw StateError("si: missing start snapshot");
            const std::vector<T>& start = sit->second;
            auto oit = si_omega_.find(name);
            std::vector<double>& d = delta[name];
            d.assign(end.size(), 0.0);
            for (size_t i = 0; i < end.size(); ++i) {
                const double drift = static_cast<double>(end[i]) - static_cast<double>(start[i]);
                const double om = oit == si_omega_.end() ? 0.0 : oit->second[i];
                d[i] = std::max(om, 0.0) / (drift * drift + this->cfg_.xi);
            }
        }
        this->add_importance(delta);
        si_omega_.clear();
        si_start_.clear();
        this->set_anchor(model);
    }

    std::unique_ptr<Regularizer<T>> clone() const override {
        return std::make_unique<SiRegularizer>(*this);
    }

   protected:
    void serialize_state(std::string& out) const override {
        QuadraticRegularizer<T>::serialize_state(out);
        detail::put_named_f64(out, si_omega_);
        bytes::put_u64(out, si_start_.size());
        for (const auto& [name, v] : si_start_) {
            bytes::put_str(out, name);
            bytes::put_u64(out, v.size());
            for (T x : v) bytes::put_f64(out, static_cast<double>(x));
        }
    }
    void deserialize_state(bytes::Reader& r, const MultiHeadSpec& spec) override {
        QuadraticRegularizer<T>::deserialize_state(r, spec);
        si_omega_ = detail::get_named_f64(r);
        si_start_.clear();
        const uint64_t n = r.get_u64();
        for (uint64_t i = 0; i < n; ++i) {
            std::string name = r.get_str();
            const uint64_t len = r.get_u64();
            std::vector<T> v(len);
            for (uint64_t k = 0; k < len; ++k) v[k] = static_cast<T>(r.get_f64());
            si_start_.emplace(std::move(name), std::move(v));
        }
    }

   private:
    std::map<std::string, std::vector<double>> si_omega_;
    std::map<std::string, std::vector<T>> si_start_;
};

/// Learning without forgetting: a frozen deep copy of the model at task start
/// becomes the teacher; every batch adds lambda times the sum over old heads
/// of the temperature-softened KL between teacher and student logits. The new
/// head trains on plain cross-entropy; the student's old-head logits come off
/// the same trunk forward as the task loss.
template <typename T>
class LwfRegularizer final : public Regularizer<T> {
   public:
    explicit LwfRegularizer(RegConfig cfg) : Regularizer<T>(std::move(cfg)) {
        if (this->cfg_.temperature <= 0) throw ConfigError("lwf: temperature must be positive");
    }
    const char* kind() const override { return "lwf"; }

    void on_task_start(Network<T>& model, int64_t task_id) override {
        if (task_id > 0) {
            teacher_ = std::make_shared<Network<T>>(model.clone());
            old_tasks_ = task_id;
        }
    }

    bool wants_all_head_logits() const override {
        return teacher_ != nullptr && this->cfg_.lambda != 0;
    }

    Tensor<T> penalty(Tape* tape, Network<T>&, int64_t, const Tensor<T>& images,
                      const std::vector<Tensor<T>>* all_logits) override {
        if (!teacher_ || this->cfg_.lambda == 0) return {};
        if (!all_logits || static_cast<int64_t>(all_logits->size()) < old_tasks_)
            throw StateError("lwf: student logits for old heads were not provided");
        std::vector<Tensor<T>> teacher_logits = teacher_->forward_all(nullptr, images, false);
        Tensor<T> total;
        for (int64_t t = 0; t < old_tasks_; ++t) {
            Tensor<T> kl = kl_divergence_of_softened_logits<T>(
                tape, teacher_logits[static_cast<size_t>(t)],
                (*all_logits)[static_cast<size_t>(t)], this->cfg_.temperature);
            total = total.defined() ? elementwise_add<T>(tape, total, kl) : kl;
        }
        return weighted_sum<T>(tape, total,
                               Tensor<T>::scalar(static_cast<T>(this->cfg_.lambda)));
    }

    std::unique_ptr<Regularizer<T>> clone() const override {
        auto c = std::make_unique<LwfRegularizer>(this->cfg_);
        c->old_tasks_ = old_tasks_;
        if (teacher_) c->teacher_ = std::make_shared<Network<T>>(teacher_->clone());
        return c;
    }

    const Network<T>* teacher() const { return teacher_.get(); }

   protected:
    void serialize_state(std::string& out) const override {
        bytes::put_u64(out, static_cast<uint64_t>(old_tasks_));
        bytes::put_u32(out, teacher_ ? 1 : 0);
        if (teacher_) {
            uint64_t n = teacher_->params().size() + teacher_->buffers().size();
            bytes::put_u64(out, n);
            for (const auto& [name, p] : teacher_->params()) bytes::put_tensor(out, name, p);
            for (const auto& [name, b] : teacher_->buffers()) bytes::put_tensor(out, name, b);
        }
    }
    void deserialize_state(bytes::Reader& r, const MultiHeadSpec& spec) override {
        old_tasks_ = static_cast<int64_t>(r.get_u64());
        if (r.get_u32() == 1) {
            teacher_ = std::make_shared<Network<T>>(spec, /*init_seed=*/0);
            CheckpointData<T> ckpt;
            const uint64_t n = r.get_u64();
            for (uint64_t i = 0; i < n; ++i) {
                auto [name, t] = bytes::get_tensor<T>(r);
                ckpt.records.emplace(std::move(name), std::move(t));
            }
            load_into_network(ckpt, *teacher_);
        }
    }

   private:
    std::shared_ptr<Network<T>> teacher_;
    int64_t old_tasks_ = 0;
};

template <typename T>
std::unique_ptr<Regularizer<T>> make_regularizer(const RegConfig& cfg) {
    if (cfg.method == "finetune") return std::make_unique<FinetuneRegularizer<T>>(cfg);
    if (cfg.method == "lwf") return std::make_unique<LwfRegularizer<T>>(cfg);
    if (cfg.method == "ewc") return std::make_unique<EwcRegularizer<T>>(cfg);
    if (cfg.method == "si") return std::make_unique<SiRegularizer<T>>(cfg);
    if (cfg.method == "mas") return std::make_unique<MasRegularizer<T>>(cfg);
    throw ConfigError("unknown method '" + cfg.method + "'");
}

/// Rebuilds a serialized regularizer; `spec` is needed to reinstantiate a
/// teacher network when one is embedded.
template <typename T>
std::unique_ptr<Regularizer<T>> deserialize_regularizer(const std::string& blob,
                                                        const MultiHeadSpec& spec) {
    bytes::Reader r(blob);
    RegConfig cfg;
    cfg.method = r.get_str();
    cfg.lambda = r.get_f64();
    cfg.temperature = r.get_f64();
    cfg.xi = r.get_f64();
    cfg.empirical_fisher = r.get_u32() == 1;
    cfg.importance_samples = static_cast<int64_t>(r.get_u64());
    cfg.seed = r.get_u64();
    std::unique_ptr<Regularizer<T>> reg = make_regularizer<T>(cfg);
    reg->deserialize_state(r, spec);
    if (!r.done()) throw FormatError("trailing bytes after regularizer state");
    return reg;
}

}  // namespace dscl
