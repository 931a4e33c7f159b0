#include <gtest/gtest.h>

#include "dscl/gradcheck.hpp"
#include "dscl/ops.hpp"
#include "oracles.hpp"

using namespace dscl;

namespace {

constexpr double kGradTol = 1e-4;

Tensor<double> coeffs_for(Rng& rng, const Dims& dims) {
    Tensor<double> c = oracle::random_away_from_zero(rng, dims, 0.2, 1.0);
    return c;
}

}  // namespace

TEST(Tape, DetachedAndForeignLossesAreRejected) {
    Tape tape;
    auto loose = Tensor<double>::scalar(5.0);
    EXPECT_THROW(tape.backward(loose), TapeError);  // never produced by an op

    // Produced with no tape: still detached.
    auto x = Tensor<double>::from({1, 2}, {1.0, 2.0});
    x.requires_grad = true;
    auto y = sum_squares<double>(nullptr, x);
    EXPECT_THROW(tape.backward(y), TapeError);

    // Non-scalar losses are rejected.
    Tape t2;
    auto v = relu<double>(&t2, x);
    EXPECT_THROW(t2.backward(v), TapeError);

    Tensor<double> undef;
    EXPECT_THROW(t2.backward(undef), TapeError);
}

TEST(Tape, SingleReplayOnly) {
    auto x = Tensor<double>::from({1, 2}, {3.0, 4.0});
    x.requires_grad = true;
    Tape tape;
    auto loss = sum_squares<double>(&tape, x);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);  // d(x^2)/dx = 2x
    EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
    EXPECT_THROW(tape.backward(loss), TapeError);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
    // x used twice: add(x, x) doubles the gradient.
    auto x = Tensor<double>::from({1, 2}, {1.0, 2.0});
    x.requires_grad = true;
    Tape tape;
    auto two_x = elementwise_add<double>(&tape, x, x);
    auto loss = sum_squares<double>(&tape, two_x);  // sum (2x)^2 = 4 sum x^2
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0 * 1.0);  // d/dx 4x^2 = 8x
    EXPECT_DOUBLE_EQ(x.grad()[1], 8.0 * 2.0);
}

TEST(Tape, NoGradPathsStayClean) {
    auto x = Tensor<double>::from({1, 2}, {1.0, 2.0});  // requires_grad = false
    auto w = Tensor<double>::from({1, 2}, {0.5, 0.5});
    w.requires_grad = true;
    Tape tape;
    auto prod = weighted_sum<double>(&tape, w, x);  // differentiates w only
    tape.backward(prod);
    EXPECT_FALSE(x.has_grad());
    ASSERT_TRUE(w.has_grad());
    EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
}

TEST(GradCheck, Conv2dAllRoles) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_conv"));
        auto x = oracle::random_uniform(rng, {2, 3, 6, 6}, -1, 1);
        auto w = oracle::random_uniform(rng, {4, 3, 3, 3}, -1, 1);
        auto b = oracle::random_uniform(rng, {4}, -1, 1);
        x.requires_grad = w.requires_grad = b.requires_grad = true;
        auto r = coeffs_for(rng, {2, 4, 3, 3});  // stride 2, padding 1 output
        auto fn = [&](Tape* t) {
            auto y = conv2d<double>(t, x, w, b, 2, 1);
            return weighted_sum<double>(t, y, r);
        };
        auto rep = grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol)
            << "seed " << seed << " worst " << rep.worst_param << "[" << rep.worst_index
            << "] analytic " << rep.worst_analytic << " fd " << rep.worst_fd;
    }
}

TEST(GradCheck, Conv2dOneByOneStride) {
    Rng rng(derive_seed(11, "gc_conv1x1"));
    auto x = oracle::random_uniform(rng, {2, 4, 5, 5}, -1, 1);
    auto w = oracle::random_uniform(rng, {3, 4, 1, 1}, -1, 1);
    x.requires_grad = w.requires_grad = true;
    auto r = coeffs_for(rng, {2, 3, 3, 3});
    auto fn = [&](Tape* t) {
        auto y = conv2d<double>(t, x, w, {}, 2, 0);
        return weighted_sum<double>(t, y, r);
    };
    auto rep = grad_check(fn, {{"x", x}, {"w", w}}, {}, -1, 11);
    EXPECT_LT(rep.max_rel_err, kGradTol) << rep.worst_param;
}

TEST(GradCheck, BatchNormTrainingMode) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_bn"));
        auto x = oracle::random_uniform(rng, {3, 2, 4, 4}, -2, 2);
        auto gamma = oracle::random_uniform(rng, {2}, 0.5, 1.5);
        auto beta = oracle::random_uniform(rng, {2}, -0.5, 0.5);
        auto rm = Tensor<double>::zeros({2});
        auto rv = Tensor<double>::full({2}, 1.0);
        x.requires_grad = gamma.requires_grad = beta.requires_grad = true;
        auto r = coeffs_for(rng, x.dims);
        auto fn = [&](Tape* t) {
            auto y = batchnorm2d<double>(t, x, gamma, beta, rm, rv, true);
            return weighted_sum<double>(t, y, r);
        };
        // Training-mode forwards update rm/rv; gradcheck restores them between probes.
        auto rep = grad_check(fn, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, {rm, rv}, -1,
                              seed);
        EXPECT_LT(rep.max_rel_err, kGradTol)
            << "seed " << seed << " worst " << rep.worst_param << " analytic "
            << rep.worst_analytic << " fd " << rep.worst_fd;
    }
}

TEST(GradCheck, BatchNormEvalMode) {
    Rng rng(derive_seed(21, "gc_bn_eval"));
    auto x = oracle::random_uniform(rng, {2, 3, 3, 3}, -2, 2);
    auto gamma = oracle::random_uniform(rng, {3}, 0.5, 1.5);
    auto beta = oracle::random_uniform(rng, {3}, -0.5, 0.5);
    auto rm = oracle::random_uniform(rng, {3}, -0.2, 0.2);
    auto rv = oracle::random_uniform(rng, {3}, 0.8, 1.2);
    x.requires_grad = gamma.requires_grad = beta.requires_grad = true;
    auto r = coeffs_for(rng, x.dims);
    auto fn = [&](Tape* t) {
        auto y = batchnorm2d<double>(t, x, gamma, beta, rm, rv, false);
        return weighted_sum<double>(t, y, r);
    };
    auto rep = grad_check(fn, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, {}, -1, 21);
    EXPECT_LT(rep.max_rel_err, kGradTol) << rep.worst_param;
}

TEST(GradCheck, ReluAwayFromKink) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_relu"));
        auto x = oracle::random_away_from_zero(rng, {2, 3, 4, 4});
        x.requires_grad = true;
        auto r = coeffs_for(rng, x.dims);
        auto fn = [&](Tape* t) { return weighted_sum<double>(t, relu<double>(t, x), r); };
        auto rep = grad_check(fn, {{"x", x}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "seed " << seed;
    }
}

TEST(GradCheck, MaxPoolOnDistinctGrid) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_pool"));
        auto x = oracle::distinct_grid(rng, {2, 2, 6, 6});
        x.requires_grad = true;
        auto fn = [&](Tape* t) {
            auto y = maxpool2d<double>(t, x, 3, 2, 1);
            auto r = Tensor<double>::full(y.dims, 1.0);
            // Squared sum keeps per-entry weights distinct from 1.
            return sum_squares<double>(t, y);
        };
        auto rep = grad_check(fn, {{"x", x}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "seed " << seed;
    }
}

TEST(GradCheck, AvgPoolWindows) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_avgpool"));
        auto x = oracle::random_uniform(rng, {2, 2, 6, 6}, -1, 1);
        x.requires_grad = true;
        auto fn = [&](Tape* t) {
            auto y = avgpool2d<double>(t, x, 3, 3);
            return sum_squares<double>(t, y);
        };
        auto rep = grad_check(fn, {{"x", x}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "seed " << seed;
    }
}

TEST(GradCheck, GlobalAvgPoolFlattenLinear) {
    Rng rng(derive_seed(31, "gc_tail"));
    auto x = oracle::random_uniform(rng, {2, 3, 4, 4}, -1, 1);
    auto w = oracle::random_uniform(rng, {5, 3}, -1, 1);
    auto b = oracle::random_uniform(rng, {5}, -1, 1);
    x.requires_grad = w.requires_grad = b.requires_grad = true;
    auto r = coeffs_for(rng, {2, 5});
    auto fn = [&](Tape* t) {
        auto pooled = global_avgpool<double>(t, x);
        auto flat = flatten<double>(t, pooled);
        auto logits = linear<double>(t, flat, w, b);
        return weighted_sum<double>(t, logits, r);
    };
    auto rep = grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}, {}, -1, 31);
    EXPECT_LT(rep.max_rel_err, kGradTol) << rep.worst_param;
}

TEST(GradCheck, AddConcatGray) {
    Rng rng(derive_seed(41, "gc_struct"));
    auto a = oracle::random_uniform(rng, {2, 3, 3, 3}, -1, 1);
    auto b = oracle::random_uniform(rng, {2, 3, 3, 3}, -1, 1);
    a.requires_grad = b.requires_grad = true;
    auto r = coeffs_for(rng, {2, 7, 3, 3});
    auto fn = [&](Tape* t) {
        auto summed = elementwise_add<double>(t, a, b);        // [2,3,3,3]
        auto gray = rgb_to_gray<double>(t, summed);            // [2,1,3,3]
        auto cat = channel_concat<double>(t, summed, gray);    // [2,4,3,3]
        auto cat2 = channel_concat<double>(t, cat, summed);    // [2,7,3,3]
        return weighted_sum<double>(t, cat2, r);
    };
    auto rep = grad_check(fn, {{"a", a}, {"b", b}}, {}, -1, 41);
    EXPECT_LT(rep.max_rel_err, kGradTol) << rep.worst_param;
}

TEST(GradCheck, SoftmaxAndLosses) {
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(derive_seed(seed, "gc_loss"));
        auto logits = oracle::random_uniform(rng, {3, 4}, -2, 2);
        logits.requires_grad = true;
        auto r = coeffs_for(rng, {3, 4});
        auto fn_sm = [&](Tape* t) {
            return weighted_sum<double>(t, softmax<double>(t, logits), r);
        };
        auto rep = grad_check(fn_sm, {{"logits", logits}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "softmax seed " << seed;

        std::vector<int64_t> labels = {rng.uniform_int(0, 3), rng.uniform_int(0, 3),
                                       rng.uniform_int(0, 3)};
        auto fn_ce = [&](Tape* t) {
            return cross_entropy_with_logits<double>(t, logits, labels);
        };
        rep = grad_check(fn_ce, {{"logits", logits}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "ce seed " << seed;

        auto teacher = oracle::random_uniform(rng, {3, 4}, -2, 2);
        auto fn_kl = [&](Tape* t) {
            return kl_divergence_of_softened_logits<double>(t, teacher, logits, 2.0);
        };
        rep = grad_check(fn_kl, {{"student", logits}}, {}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol) << "kl seed " << seed;
    }
}

TEST(GradCheck, CrossEntropyClosedForm) {
    // Analytic gradient must equal (softmax - onehot)/N exactly.
    auto logits = Tensor<double>::from({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 1.0});
    logits.requires_grad = true;
    Tape tape;
    auto loss = cross_entropy_with_logits<double>(&tape, logits, {1, 2});
    tape.backward(loss);
    for (int64_t n = 0; n < 2; ++n) {
        std::vector<double> row(logits.ptr() + n * 3, logits.ptr() + (n + 1) * 3);
        auto p = oracle::softmax_naive(row);
        for (int64_t k = 0; k < 3; ++k) {
            double want = p[static_cast<size_t>(k)];
            if ((n == 0 && k == 1) || (n == 1 && k == 2)) want -= 1.0;
            EXPECT_NEAR(logits.grad()[static_cast<size_t>(n * 3 + k)], want / 2.0, 1e-12);
        }
    }
}

TEST(GradCheck, ResidualBlockComposite) {
    // conv -> bn -> add skip -> relu, the BasicBlock spine, checked end to end.
    for (uint64_t seed : {1, 2, 3}) {
        Rng rng(derive_seed(seed, "gc_block"));
        auto x = oracle::random_uniform(rng, {2, 3, 5, 5}, -1, 1);
        auto w = oracle::random_uniform(rng, {3, 3, 3, 3}, -0.5, 0.5);
        auto gamma = oracle::random_uniform(rng, {3}, 0.8, 1.2);
        auto beta = oracle::random_uniform(rng, {3}, 0.3, 0.6);  // push relu off its kink
        auto rm = Tensor<double>::zeros({3});
        auto rv = Tensor<double>::full({3}, 1.0);
        x.requires_grad = w.requires_grad = gamma.requires_grad = beta.requires_grad = true;
        auto r = coeffs_for(rng, {2, 3, 5, 5});
        auto fn = [&](Tape* t) {
            auto c = conv2d<double>(t, x, w, {}, 1, 1);
            auto n = batchnorm2d<double>(t, c, gamma, beta, rm, rv, true);
            auto s = elementwise_add<double>(t, n, x);
            auto a = relu<double>(t, s);
            return weighted_sum<double>(t, a, r);
        };
        auto rep = grad_check(fn, {{"x", x}, {"w", w}, {"gamma", gamma}, {"beta", beta}},
                              {rm, rv}, -1, seed);
        EXPECT_LT(rep.max_rel_err, kGradTol)
            << "seed " << seed << " worst " << rep.worst_param << " analytic "
            << rep.worst_analytic << " fd " << rep.worst_fd;
    }
}

TEST(GradCheck, SubsamplingProbesLargeParams) {
    Rng rng(derive_seed(51, "gc_subsample"));
    auto x = oracle::random_uniform(rng, {2, 8, 6, 6}, -1, 1);
    auto w = oracle::random_uniform(rng, {8, 8, 3, 3}, -0.3, 0.3);
    x.requires_grad = w.requires_grad = true;
    auto r = coeffs_for(rng, {2, 8, 6, 6});
    auto fn = [&](Tape* t) {
        return weighted_sum<double>(t, conv2d<double>(t, x, w, {}, 1, 1), r);
    };
    auto rep = grad_check(fn, {{"x", x}, {"w", w}}, {}, 16, 51);
    EXPECT_EQ(rep.entries_checked, 32);  // 16 per parameter
    EXPECT_LT(rep.max_rel_err, kGradTol);
}
