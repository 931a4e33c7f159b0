#include <gtest/gtest.h>

#include "dscl/optim.hpp"

using namespace dscl;

namespace {

std::vector<std::pair<std::string, Tensor<double>>> one_param(Tensor<double>& p) {
    return {{"w", p}};
}

void set_grad(Tensor<double>& p, std::vector<double> g) { p.ensure_grad() = std::move(g); }

}  // namespace

TEST(Sgd, TwoStepMomentumHandValues) {
    Tensor<double> w = Tensor<double>::from({1}, {1.0});
    Sgd<double> opt(0.9, 0.0);
    auto params = one_param(w);

    set_grad(w, {0.1});
    opt.step(params, 0.1);
    EXPECT_NEAR(w[0], 0.99, 1e-15);  // v = 0.1, step 0.01

    set_grad(w, {0.1});
    opt.step(params, 0.1);
    EXPECT_NEAR(w[0], 0.971, 1e-15);  // v = 0.9*0.1 + 0.1 = 0.19, step 0.019
}

TEST(Sgd, WeightDecayActsThroughGradient) {
    Tensor<double> w = Tensor<double>::from({1}, {1.0});
    Sgd<double> opt(0.0, 0.01);
    auto params = one_param(w);
    set_grad(w, {0.0});
    opt.step(params, 0.001);
    EXPECT_NEAR(w[0], 0.99999, 1e-15);  // v = 0.01 * 1.0, step 1e-5
}

TEST(Sgd, VelocityResetDropsMomentum) {
    Tensor<double> w = Tensor<double>::from({1}, {0.0});
    Sgd<double> opt(0.9, 0.0);
    auto params = one_param(w);

    set_grad(w, {1.0});
    opt.step(params, 0.1);
    EXPECT_NEAR(w[0], -0.1, 1e-15);

    opt.reset_velocity();
    set_grad(w, {1.0});
    opt.step(params, 0.1);
    EXPECT_NEAR(w[0], -0.2, 1e-15);  // without the reset this step would be 0.19

    set_grad(w, {1.0});
    opt.step(params, 0.1);
    EXPECT_NEAR(w[0], -0.39, 1e-15);  // velocity kept building after the reset
}

TEST(Sgd, StepConsumesGradients) {
    Tensor<double> w = Tensor<double>::from({2}, {1.0, 2.0});
    Sgd<double> opt(0.9, 0.0);
    auto params = one_param(w);
    set_grad(w, {0.5, -0.5});
    opt.step(params, 0.1);
    EXPECT_FALSE(w.has_grad());
}

TEST(Sgd, MissingGradientIsAWiringBug) {
    Tensor<double> w = Tensor<double>::from({1}, {1.0});
    Sgd<double> opt(0.9, 0.0);
    auto params = one_param(w);
    EXPECT_THROW(opt.step(params, 0.1), OptimError);
}

TEST(Sgd, IndependentVelocityPerParameterName) {
    Tensor<double> a = Tensor<double>::from({1}, {0.0});
    Tensor<double> b = Tensor<double>::from({1}, {0.0});
    Sgd<double> opt(0.9, 0.0);
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"a", a}, {"b", b}};
    a.ensure_grad() = {1.0};
    b.ensure_grad() = {2.0};
    opt.step(params, 0.1);
    a.ensure_grad() = {1.0};
    b.ensure_grad() = {2.0};
    opt.step(params, 0.1);
    EXPECT_NEAR(a[0], -0.1 - 0.19, 1e-15);
    EXPECT_NEAR(b[0], -0.2 - 0.38, 1e-15);
}
