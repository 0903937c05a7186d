#include <doctest.h>

#include "condserv/mlp.hpp"
#include "helpers.hpp"

using namespace condserv;

namespace {

Dataset toy_separable(int n, std::uint64_t seed) {
    // two clusters with clearly separated distance signatures
    RandomStream rng(seed);
    Dataset d;
    for (int i = 0; i < n; ++i) {
        bool success = i % 2 == 0;
        std::array<double, 3> base =
            success ? std::array<double, 3>{0.001, 0.01, 0.05}
                    : std::array<double, 3>{0.02, 0.5, 0.8};
        for (double& v : base) v *= 1.0 + 0.2 * rng.uniform(-1, 1);
        d.add_row(base, success ? 1 : 0);
    }
    return d;
}

}  // namespace

TEST_CASE("forward basics") {
    MlpModel zero = make_mlp({3, 64, 64, 32, 1}, 9);
    for (auto& w : zero.weights)
        for (auto& v : w) v = 0.0;
    CHECK(zero.forward({0.3, -0.2, 0.9}) == doctest::Approx(0.5));

    zero.biases.back()[0] = 1.7;
    CHECK(zero.forward({0, 0, 0}) == doctest::Approx(1.0 / (1.0 + std::exp(-1.7))));

    MlpModel m = make_mlp({3, 64, 64, 32, 1}, 10);
    RandomStream rng(4);
    for (int i = 0; i < 50; ++i) {
        double p = m.forward({rng.normal(), rng.normal(), rng.normal()});
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
}

TEST_CASE("bce_loss closed forms") {
    CHECK(bce_loss(0.5, 0) == doctest::Approx(std::log(2.0)));
    CHECK(bce_loss(0.5, 1) == doctest::Approx(std::log(2.0)));
    CHECK(bce_loss(1.0, 1) <= 1e-6);
    CHECK(bce_loss(0.0, 0) <= 1e-6);
    CHECK(bce_loss(0.9, 0) == doctest::Approx(std::log(10.0)));
}

TEST_CASE("backward matches central finite differences") {
    MlpModel m = make_mlp({3, 64, 64, 32, 1}, 21);
    RandomStream rng(22);
    std::vector<BatchRow> batch;
    for (int i = 0; i < 16; ++i)
        batch.push_back(BatchRow{{rng.normal(), rng.normal(), rng.normal()},
                                 rng.bernoulli(0.5) ? 1 : 0});

    Gradients g = backward(m, batch);
    int checked = 0;
    for (int l = 0; l < m.layer_count(); ++l) {
        for (int rep = 0; rep < 12 && checked < 6 * (l + 1); ++rep) {
            bool is_weight = rep % 5 != 4;
            auto& vec =
                is_weight ? m.weights[static_cast<size_t>(l)] : m.biases[static_cast<size_t>(l)];
            size_t idx = rng.uniform_int(vec.size());
            if (oracle::crosses_relu_kink(m, is_weight, l, idx, batch)) continue;
            double fd = oracle::fd_gradient(m, is_weight, l, idx, batch);
            double an = is_weight ? g.weights[static_cast<size_t>(l)][idx]
                                  : g.biases[static_cast<size_t>(l)][idx];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            CHECK(std::abs(fd - an) / denom < 1e-4);
            ++checked;
        }
    }
    CHECK(checked >= 15);
}

TEST_CASE("backward is invariant under row duplication") {
    MlpModel m = make_mlp({3, 64, 64, 32, 1}, 31);
    std::vector<BatchRow> batch{{{0.5, -1.0, 0.25}, 1}, {{-0.3, 0.4, 1.2}, 0}};
    std::vector<BatchRow> doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    Gradients a = backward(m, batch);
    Gradients b = backward(m, doubled);
    for (size_t l = 0; l < a.weights.size(); ++l)
        for (size_t i = 0; i < a.weights[l].size(); ++i)
            CHECK(a.weights[l][i] == doctest::Approx(b.weights[l][i]).epsilon(1e-12));
}

TEST_CASE("backward on a 1-1-1 network equals the hand-computed chain rule") {
    MlpModel m;
    m.sizes = {1, 1, 1};
    m.weights = {{0.7}, {-1.3}};
    m.biases = {{0.2}, {0.4}};
    m.feat_mean = {0.0};
    m.feat_std = {1.0};

    double x = 0.9;
    int y = 1;
    // forward: h = relu(w0 x + b0), p = sigma(w1 h + b1)
    double z0 = 0.7 * x + 0.2;
    double h = std::max(0.0, z0);
    double z1 = -1.3 * h + 0.4;
    double p = 1.0 / (1.0 + std::exp(-z1));
    // backward: dL/dz1 = p - y
    double d1 = p - y;
    double gw1 = d1 * h;
    double gb1 = d1;
    double d0 = d1 * -1.3 * (z0 > 0 ? 1.0 : 0.0);
    double gw0 = d0 * x;
    double gb0 = d0;

    Gradients g = backward(m, {BatchRow{{x}, y}});
    CHECK(g.weights[1][0] == doctest::Approx(gw1).epsilon(1e-12));
    CHECK(g.biases[1][0] == doctest::Approx(gb1).epsilon(1e-12));
    CHECK(g.weights[0][0] == doctest::Approx(gw0).epsilon(1e-12));
    CHECK(g.biases[0][0] == doctest::Approx(gb0).epsilon(1e-12));
}

TEST_CASE("training separates the toy set and is reproducible") {
    Dataset d = toy_separable(400, 77);
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.learning_rate = 1e-5;
    cfg.iterations = 2500;

    TrainResult r1 = train(d, cfg);
    CHECK(accuracy(r1.model, d) >= 0.95);
    CHECK(r1.loss_curve.size() == 2500);
    for (double v : r1.loss_curve) CHECK(std::isfinite(v));
    CHECK(r1.loss_curve.back() < r1.loss_curve.front());

    TrainResult r2 = train(d, cfg);
    CHECK(r1.model.weights == r2.model.weights);
    CHECK(r1.model.biases == r2.model.biases);

    CHECK_THROWS_AS(train(Dataset{}, cfg), EmptyDatasetError);
}

TEST_CASE("tiny datasets train by sampling with replacement") {
    Dataset d = toy_separable(20, 78);  // fewer rows than the batch size
    TrainConfig cfg;
    cfg.seed = 6;
    cfg.iterations = 200;
    TrainResult r = train(d, cfg);
    CHECK(r.loss_curve.size() == 200);
    for (double v : r.loss_curve) CHECK(std::isfinite(v));
}

TEST_CASE("model file round-trips bit-exactly") {
    Dataset d = toy_separable(64, 79);
    TrainConfig cfg;
    cfg.seed = 7;
    cfg.iterations = 50;
    TrainResult r = train(d, cfg);

    auto path = std::filesystem::temp_directory_path() / "condserv_test" / "model.json";
    std::filesystem::create_directories(path.parent_path());
    save_model(r.model, path);
    MlpModel loaded = load_model(path);
    CHECK(loaded.sizes == r.model.sizes);
    CHECK(loaded.weights == r.model.weights);
    CHECK(loaded.biases == r.model.biases);
    CHECK(loaded.feat_mean == r.model.feat_mean);
    CHECK(loaded.feat_std == r.model.feat_std);
}

TEST_CASE("dataset csv round trip") {
    Dataset d;
    d.add_row({0.123456789012345, 2e-7, 0.99}, 1);
    d.add_row({1.0 / 3.0, 0.5, 0.25}, 0);
    d.add_row({std::nan(""), 0.5, 0.25}, 0);  // dropped at construction
    CHECK(d.size() == 2);

    auto path = std::filesystem::temp_directory_path() / "condserv_test" / "data.csv";
    std::filesystem::create_directories(path.parent_path());
    save_dataset_csv(d, path);
    Dataset back = load_dataset_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back.features[0][0] == d.features[0][0]);
    CHECK(back.features[1][0] == d.features[1][0]);
    CHECK(back.labels == d.labels);
}
