#pragma once

#include <map>
#include <string>

#include "dscl/tensor.hpp"

namespace dscl {

/// SGD with classical momentum and decoupled-into-gradient weight decay:
///   v <- momentum * v + grad + weight_decay * theta
///   theta <- theta - lr * v
/// Gradients are cleared by the step. Velocities persist per parameter name
/// and can be reset (done on every learning-rate decay).
template <typename T>
class Sgd {
   public:
    Sgd(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

    /// One update over a fixed, ordered set of named parameters. Every listed
    /// parameter must carry a gradient (a step without one is a wiring bug).
    void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
        for (auto& [name, p] : params) {
            if (!p.has_grad())
                throw OptimError("sgd_step: parameter '" + name + "' has no gradient");
            std::vector<T>& v = velocity_[name];
            if (v.empty()) v.assign(p.values().size(), T(0));
            const std::vector<T>& g = p.grad();
            std::vector<T>& theta = p.values();
            const T mom = static_cast<T>(momentum_), wd = static_cast<T>(wd_),
                    eta = static_cast<T>(lr);
            for (size_t i = 0; i < theta.size(); ++i) {
                v[i] = mom * v[i] + g[i] + wd * theta[i];
                theta[i] -= eta * v[i];
            }
            p.clear_grad();
        }
    }

    void reset_velocity() { velocity_.clear(); }

   private:
    double momentum_, wd_;
    std::map<std::string, std::vector<T>> velocity_;
};

}  // namespace dscl
