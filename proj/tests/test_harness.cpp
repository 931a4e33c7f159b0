#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dscl/arch.hpp"
#include "dscl/data.hpp"
#include "dscl/metrics.hpp"
#include "dscl/network.hpp"
#include "dscl/sequence.hpp"
#include "dscl/train.hpp"

using namespace dscl;
namespace fs = std::filesystem;

namespace {

MultiHeadSpec tiny_spec(int64_t tasks, int64_t channels, int64_t classes) {
    MultiHeadSpec net;
    net.arch_name = "tiny";
    FeSpec fe;
    fe.prefix = "";
    fe.gray_stem = false;
    fe.conv1 = {"conv1", channels, channels, 1, 1, 0, false};
    fe.bn1 = {"bn1", channels};
    fe.has_maxpool = false;
    fe.out_channels = channels;
    net.fes.push_back(fe);
    net.fusion = Fusion::none;
    net.trunk_pool = true;
    for (int64_t t = 0; t < tasks; ++t) {
        HeadSpec h;
        h.task_id = t;
        h.prefix = "head." + std::to_string(t) + ".";
        h.has_conv = false;
        h.fc_in = channels;
        h.fc_out = classes;
        net.heads.push_back(h);
    }
    return net;
}

/// Two identity heads with different gains on a pass-through trunk, so every
/// logit equals a known function of the input pixel.
Network<double> identity_net() {
    Network<double> net(tiny_spec(2, 2, 2), 3);
    net.param("conv1.weight").values() = {1, 0, 0, 1};
    net.param("head.0.fc.weight").values() = {1, 0, 0, 1};
    net.param("head.0.fc.bias").values() = {0, 0};
    net.param("head.1.fc.weight").values() = {0.5, 0, 0, 0.5};
    net.param("head.1.fc.bias").values() = {0, 0};
    return net;
}

/// 1x1 two-channel samples with hand-picked channel values and labels.
Dataset<double> samples(const std::vector<std::pair<std::array<double, 2>, int64_t>>& rows) {
    Dataset<double> d;
    d.images = Tensor<double>::zeros({static_cast<int64_t>(rows.size()), 2, 1, 1});
    for (size_t i = 0; i < rows.size(); ++i) {
        d.images[static_cast<int64_t>(2 * i)] = rows[i].first[0];
        d.images[static_cast<int64_t>(2 * i + 1)] = rows[i].first[1];
        d.labels.push_back(rows[i].second);
    }
    return d;
}

Dataset<double> tiny_data(uint64_t seed, int64_t n, int64_t channels, int64_t hw,
                          int64_t classes) {
    Rng rng(derive_seed(seed, "tiny_data"));
    Dataset<double> d;
    d.images = Tensor<double>::zeros({n, channels, hw, hw});
    for (int64_t i = 0; i < d.images.numel(); ++i) d.images[i] = rng.uniform(-1.0, 1.0);
    for (int64_t i = 0; i < n; ++i) d.labels.push_back(i % classes);
    d.validate();
    return d;
}

/// Two linearly separable color classes rendered with mild jitter; the tiny
/// pass-through trunk can reach perfect accuracy on them.
std::vector<TaskData<double>> color_tasks(int64_t n_train, int64_t n_test, uint64_t seed) {
    return fig1_benchmark<double>(8, n_train, n_test, seed);
}

SequenceConfig mini_cfg(const std::string& method, double lambda, uint64_t seed,
                        const std::string& out_dir = "") {
    SequenceConfig cfg;
    cfg.train.lr_grid = {5e-3};
    cfg.train.batch_size = 4;
    cfg.train.max_epochs = 4;
    cfg.train.patience = 15;
    cfg.train.val_fraction = 0.25;
    cfg.train.seed = seed;
    cfg.reg.method = method;
    cfg.reg.lambda = lambda;
    cfg.reg.seed = seed + 1;
    cfg.out_dir = out_dir;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Accuracy matrix arithmetic
// ---------------------------------------------------------------------------

TEST(Metrics, ConstantMatrixHasMeanFiftyAndNoForgetting) {
    AccuracyMatrix a;
    a.push_row({50});
    a.push_row({50, 50});
    a.push_row({50, 50, 50});
    EXPECT_DOUBLE_EQ(mean_accuracy(a), 50.0);
    EXPECT_DOUBLE_EQ(mean_forgetting(a), 0.0);
}

TEST(Metrics, WorkedTwoTaskExample) {
    AccuracyMatrix a;
    a.push_row({80});
    a.push_row({60, 70});
    EXPECT_DOUBLE_EQ(mean_accuracy(a), 65.0);
    EXPECT_DOUBLE_EQ(mean_forgetting(a), -20.0);
}

TEST(Metrics, NonDecayingColumnsForgetNothing) {
    AccuracyMatrix a;
    a.push_row({40});
    a.push_row({50, 60});
    a.push_row({55, 70, 80});
    EXPECT_DOUBLE_EQ(mean_forgetting(a), 0.0);
    AccuracyMatrix single;
    single.push_row({90});
    EXPECT_DOUBLE_EQ(mean_forgetting(single), 0.0);
    EXPECT_DOUBLE_EQ(mean_accuracy(single), 90.0);
}

TEST(Metrics, MalformedMatricesAreRejected) {
    AccuracyMatrix a;
    a.push_row({80});
    EXPECT_THROW(a.push_row({60, 70, 80}), MetricError);  // wrong row length
    EXPECT_THROW(a.push_row({60, 170}), MetricError);     // accuracy out of range
    EXPECT_THROW(a.at(0, 1), MetricError);                // upper triangle
    EXPECT_THROW(a.at(1, 0), MetricError);                // beyond recorded rows
    AccuracyMatrix broken;
    broken.rows = {{80}, {60}};
    EXPECT_THROW(mean_accuracy(broken), MetricError);
    EXPECT_THROW(mean_forgetting(AccuracyMatrix{}), MetricError);
}

// ---------------------------------------------------------------------------
// Evaluation protocols
// ---------------------------------------------------------------------------

TEST(Eval, HandBuiltLogitsGiveExactRows) {
    Network<double> net = identity_net();
    // Task 0: logits equal the pixel; task 1: logits are half the pixel.
    const Dataset<double> test0 =
        samples({{{2, 1}, 0}, {{1, 3}, 1}, {{0, 1}, 0}, {{4, 0}, 0}});
    const Dataset<double> test1 =
        samples({{{1, 4}, 1}, {{2, 0}, 0}, {{0, 2}, 0}, {{3, 1}, 0}});

    EXPECT_DOUBLE_EQ(evaluate_task_aware(net, test0, 0), 75.0);
    EXPECT_DOUBLE_EQ(evaluate_task_aware(net, test1, 1), 75.0);

    // Agnostic over both heads: task-0 samples survive (their head's scores
    // are sharper), while every task-1 sample is captured by head 0.
    EXPECT_DOUBLE_EQ(evaluate_task_agnostic(net, test0, 0, 2), 75.0);
    EXPECT_DOUBLE_EQ(evaluate_task_agnostic(net, test1, 1, 2), 0.0);

    const std::vector<Dataset<double>> tests = {test0, test1};
    EXPECT_EQ(evaluate_row(net, tests, 2, EvalMode::task_aware), (std::vector<double>{75, 75}));
    EXPECT_EQ(evaluate_row(net, tests, 2, EvalMode::task_agnostic), (std::vector<double>{75, 0}));
}

TEST(Eval, SingleSeenTaskMakesProtocolsAgree) {
    Network<double> net = identity_net();
    const Dataset<double> test0 =
        samples({{{2, 1}, 0}, {{1, 3}, 1}, {{0, 1}, 0}, {{4, 0}, 0}});
    EXPECT_DOUBLE_EQ(evaluate_task_agnostic(net, test0, 0, 1),
                     evaluate_task_aware(net, test0, 0));
}

TEST(Eval, UntrainedNetworkSitsAtChanceLevels) {
    // Random init, labels independent of images: task-aware accuracy is the
    // one-in-c chance level and task-agnostic one-in-2c, within 3-4 sigma of
    // the binomial mean at n = 800.
    Network<double> net(tiny_spec(2, 3, 4), 17);
    Dataset<double> test = tiny_data(5, 800, 3, 2, 4);
    EXPECT_NEAR(evaluate_task_aware(net, test, 0), 25.0, 6.0);
    EXPECT_NEAR(evaluate_task_agnostic(net, test, 0, 2), 12.5, 5.5);
}

TEST(Eval, ProtocolErrorsAreReported) {
    Network<double> net = identity_net();
    const Dataset<double> test0 = samples({{{2, 1}, 0}});
    EXPECT_THROW(evaluate_task_aware(net, test0, 7), EvalError);
    EXPECT_THROW(evaluate_task_agnostic(net, test0, 1, 1), EvalError);  // task not seen
    EXPECT_THROW(evaluate_task_agnostic(net, test0, 0, 3), EvalError);  // more heads than exist
    Dataset<double> empty;
    empty.images = Tensor<double>::zeros({0, 2, 1, 1});
    EXPECT_THROW(evaluate_task_aware(net, empty, 0), EvalError);
    const std::vector<Dataset<double>> tests = {test0};
    EXPECT_THROW(evaluate_row(net, tests, 2, EvalMode::task_aware), EvalError);
}

// ---------------------------------------------------------------------------
// Single-task training schedule
// ---------------------------------------------------------------------------

TEST(Train, PatienceLadderDecaysTenTimesThenStops) {
    // With an unreachable improvement tolerance only the first epoch counts
    // as progress, so the rate decays every `patience` epochs: ten decays by
    // 3 take 5e-2 below 1e-6 and training stops after 11 logged epochs.
    Network<double> net(tiny_spec(1, 2, 2), 11);
    const Dataset<double> data = tiny_data(21, 8, 2, 1, 2);
    TrainConfig cfg;
    cfg.lr_grid = {5e-2};
    cfg.batch_size = 4;
    cfg.max_epochs = 200;
    cfg.patience = 1;
    cfg.val_fraction = 0.25;
    cfg.improve_tol = 1e9;
    cfg.seed = 2;

    const auto reg = make_regularizer<double>(RegConfig{});
    const TrainResult<double> r = train_task(net, *reg, 0, data, cfg);
    ASSERT_EQ(r.log.size(), 11u);
    double lr = 5e-2;
    EXPECT_DOUBLE_EQ(r.log[0].lr, lr);
    EXPECT_DOUBLE_EQ(r.log[1].lr, lr);  // decay happens after the epoch is logged
    for (size_t e = 2; e < r.log.size(); ++e) {
        lr /= 3.0;
        EXPECT_DOUBLE_EQ(r.log[e].lr, lr);
        EXPECT_GE(r.log[e].lr, cfg.min_lr);
    }
    EXPECT_LT(lr / 3.0, cfg.min_lr);  // the decay that ended the run
}

TEST(Train, UntriggeredPatienceRunsAllEpochs) {
    Network<double> net(tiny_spec(1, 2, 2), 11);
    const Dataset<double> data = tiny_data(21, 8, 2, 1, 2);
    TrainConfig cfg;
    cfg.lr_grid = {5e-3};
    cfg.batch_size = 4;
    cfg.max_epochs = 5;
    cfg.patience = 50;
    cfg.val_fraction = 0.25;
    cfg.seed = 2;
    const auto reg = make_regularizer<double>(RegConfig{});
    const TrainResult<double> r = train_task(net, *reg, 0, data, cfg);
    ASSERT_EQ(r.log.size(), 5u);
    for (const EpochLog& e : r.log) EXPECT_DOUBLE_EQ(e.lr, 5e-3);
}

TEST(Train, GridWinnerIsTheBestValidationAccuracy) {
    // A vanishing learning rate cannot learn the color pair; the real rate
    // reaches (near-)perfect validation accuracy and must win the grid.
    Network<double> net(tiny_spec(1, 3, 2), 4);
    const auto tasks = color_tasks(20, 4, 31);
    TrainConfig cfg;
    cfg.lr_grid = {5e-2, 1e-9};
    cfg.min_lr = 1e-12;
    cfg.batch_size = 8;
    cfg.max_epochs = 8;
    cfg.patience = 15;
    cfg.val_fraction = 0.2;
    cfg.seed = 3;
    const auto reg = make_regularizer<double>(RegConfig{});
    const TrainResult<double> r = train_task(net, *reg, 0, tasks[0].train, cfg);
    EXPECT_DOUBLE_EQ(r.winner_lr, 5e-2);
    EXPECT_GE(r.winner_val_acc, 90.0);
    // Both candidates appear in the log, each for every epoch it ran.
    bool saw_slow = false;
    for (const EpochLog& e : r.log) saw_slow |= e.grid_lr == 1e-9;
    EXPECT_TRUE(saw_slow);
}

TEST(Train, RejectsEmptyDataAndBadConfig) {
    Network<double> net(tiny_spec(1, 2, 2), 11);
    const auto reg = make_regularizer<double>(RegConfig{});
    Dataset<double> empty;
    empty.images = Tensor<double>::zeros({0, 2, 1, 1});
    EXPECT_THROW(train_task(net, *reg, 0, empty, TrainConfig{}), DataError);

    const Dataset<double> data = tiny_data(21, 8, 2, 1, 2);
    EXPECT_THROW(train_task(net, *reg, 3, data, TrainConfig{}), StateError);

    TrainConfig bad;
    bad.min_lr = 1.0;
    EXPECT_THROW(train_task(net, *reg, 0, data, bad), ConfigError);
    bad = TrainConfig{};
    bad.patience = 0;
    EXPECT_THROW(train_task(net, *reg, 0, data, bad), ConfigError);
    bad = TrainConfig{};
    bad.lr_grid.clear();
    EXPECT_THROW(train_task(net, *reg, 0, data, bad), ConfigError);
}

// ---------------------------------------------------------------------------
// Task sequences
// ---------------------------------------------------------------------------

TEST(Sequence, ZeroStrengthMethodsReproduceFinetuneExactly) {
    const auto tasks = color_tasks(8, 4, 41);
    std::map<std::string, std::map<std::string, std::vector<double>>> finals;
    std::map<std::string, AccuracyMatrix> matrices;
    for (const std::string method : {"finetune", "ewc", "si", "lwf", "mas"}) {
        Network<double> net(tiny_spec(2, 3, 2), 5);
        const auto r = run_sequence(net, tasks, mini_cfg(method, 0.0, 7));
        finals[method] = net.snapshot();
        matrices[method] = r.aware;
    }
    for (const std::string method : {"ewc", "si", "lwf", "mas"}) {
        EXPECT_EQ(finals[method], finals["finetune"]) << method;
        EXPECT_EQ(matrices[method].rows, matrices["finetune"].rows) << method;
    }
}

TEST(Sequence, SingleTaskSequenceIsMethodInvariant) {
    const std::vector<TaskData<double>> one_task = {color_tasks(8, 4, 43)[0]};
    std::map<std::string, std::vector<double>> rows;
    std::map<std::string, std::map<std::string, std::vector<double>>> finals;
    for (const std::string method : {"finetune", "lwf", "ewc"}) {
        Network<double> net(tiny_spec(1, 3, 2), 6);
        const auto r = run_sequence(net, one_task, mini_cfg(method, 5.0, 9));
        rows[method] = r.aware.rows[0];
        finals[method] = net.snapshot();
    }
    EXPECT_EQ(rows["lwf"], rows["finetune"]);
    EXPECT_EQ(rows["ewc"], rows["finetune"]);
    EXPECT_EQ(finals["lwf"], finals["finetune"]);
    EXPECT_EQ(finals["ewc"], finals["finetune"]);
}

TEST(Sequence, RerunsAndArtifactsAreBitIdentical) {
    const auto tasks = color_tasks(8, 4, 47);
    const std::string dir_a = (fs::path(::testing::TempDir()) / "dscl_seq_a").string();
    const std::string dir_b = (fs::path(::testing::TempDir()) / "dscl_seq_b").string();
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    Network<double> net_a(tiny_spec(2, 3, 2), 8);
    Network<double> net_b(tiny_spec(2, 3, 2), 8);
    const auto ra = run_sequence(net_a, tasks, mini_cfg("ewc", 1.0, 13, dir_a));
    const auto rb = run_sequence(net_b, tasks, mini_cfg("ewc", 1.0, 13, dir_b));

    EXPECT_EQ(ra.aware.rows, rb.aware.rows);
    EXPECT_EQ(ra.agnostic.rows, rb.agnostic.rows);
    EXPECT_EQ(ra.winner_lrs, rb.winner_lrs);
    EXPECT_EQ(net_a.snapshot(), net_b.snapshot());

    for (const std::string name : {"metrics.json", "matrix_aware.csv", "matrix_agnostic.csv",
                                   "log.jsonl", "config.json"}) {
        std::ifstream fa(fs::path(dir_a) / name, std::ios::binary);
        std::ifstream fb(fs::path(dir_b) / name, std::ios::binary);
        const std::string a((std::istreambuf_iterator<char>(fa)), {});
        const std::string b((std::istreambuf_iterator<char>(fb)), {});
        ASSERT_FALSE(a.empty()) << name;
        EXPECT_EQ(a, b) << name;
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST(Sequence, ArtifactsRoundTripThroughCheckpoints) {
    const auto tasks = color_tasks(8, 4, 53);
    const std::string dir = (fs::path(::testing::TempDir()) / "dscl_seq_ckpt").string();
    fs::remove_all(dir);
    Network<double> net(tiny_spec(2, 3, 2), 9);
    const auto r = run_sequence(net, tasks, mini_cfg("si", 1.0, 15, dir));

    // The matrices respect the protocol ordering everywhere.
    for (int64_t t = 0; t < 2; ++t)
        for (int64_t k = 0; k <= t; ++k)
            EXPECT_LE(r.agnostic.at(t, k), r.aware.at(t, k) + 1e-12);

    // metrics.json parses and echoes the matrices.
    std::ifstream mf(fs::path(dir) / "metrics.json");
    const auto metrics = nlohmann::json::parse(mf);
    EXPECT_EQ(metrics["tasks"], 2);
    EXPECT_DOUBLE_EQ(metrics["task_aware"]["mean_accuracy"].get<double>(),
                     mean_accuracy(r.aware));
    EXPECT_DOUBLE_EQ(metrics["task_agnostic"]["mean_forgetting"].get<double>(),
                     mean_forgetting(r.agnostic));

    // config.json names the run; log.jsonl has one parsable line per epoch.
    std::ifstream cf(fs::path(dir) / "config.json");
    const auto config = nlohmann::json::parse(cf);
    EXPECT_EQ(config["arch"], "tiny");
    EXPECT_EQ(config["method"], "si");
    std::ifstream lf(fs::path(dir) / "log.jsonl");
    std::string line;
    size_t lines = 0;
    while (std::getline(lf, line)) {
        const auto entry = nlohmann::json::parse(line);
        EXPECT_TRUE(entry.contains("val_loss"));
        ++lines;
    }
    EXPECT_EQ(lines, r.log.size());

    // Reloading the final checkpoint reproduces the evaluation bit for bit,
    // and its embedded regularizer blob restores the same method state.
    const auto ckpt = load_checkpoint<double>((fs::path(dir) / "task_1.dscl").string());
    Network<double> restored(tiny_spec(2, 3, 2), 1);
    load_into_network(ckpt, restored);
    std::vector<Dataset<double>> test_sets = {tasks[0].test, tasks[1].test};
    EXPECT_EQ(evaluate_row(restored, test_sets, 2, EvalMode::task_aware),
              r.aware.rows[1]);
    EXPECT_EQ(evaluate_row(restored, test_sets, 2, EvalMode::task_agnostic),
              r.agnostic.rows[1]);
    const auto reg = deserialize_regularizer<double>(ckpt.extra, restored.spec());
    EXPECT_STREQ(reg->kind(), "si");
    EXPECT_EQ(reg->serialize(), r.reg->serialize());
    fs::remove_all(dir);
}

TEST(Sequence, RejectsMoreTasksThanHeads) {
    const auto tasks = color_tasks(4, 2, 59);
    Network<double> net(tiny_spec(1, 3, 2), 10);
    EXPECT_THROW(run_sequence(net, tasks, mini_cfg("finetune", 0.0, 1)), ConfigError);
}
