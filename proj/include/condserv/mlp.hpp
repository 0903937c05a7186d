#pragma once

// Small fully-connected classifier: 3 inputs, hidden layers 64/64/32 with
// ReLU, one logistic output. Training is plain mini-batch Adam on binary
// cross-entropy, single-threaded and fully seeded so runs are bit
// reproducible. Inputs are standardized with statistics taken from the
// training split and stored in the model file.

#include <filesystem>
#include <fstream>
#include <optional>

#include <json.hpp>

#include "condserv/core.hpp"

namespace condserv {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct MlpModel {
    std::vector<int> sizes{3, 64, 64, 32, 1};
    // weights[l] is sizes[l+1] x sizes[l], row-major; biases[l] has sizes[l+1]
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
    std::vector<double> feat_mean{0, 0, 0};
    std::vector<double> feat_std{1, 1, 1};

    int layer_count() const { return static_cast<int>(sizes.size()) - 1; }

    void validate() const {
        if (sizes.size() < 2) throw std::invalid_argument("MlpModel: too few layers");
        if (weights.size() != biases.size() ||
            static_cast<int>(weights.size()) != layer_count())
            throw std::invalid_argument("MlpModel: layer shape mismatch");
        for (int l = 0; l < layer_count(); ++l) {
            if (static_cast<int>(weights[l].size()) != sizes[l + 1] * sizes[l] ||
                static_cast<int>(biases[l].size()) != sizes[l + 1])
                throw std::invalid_argument("MlpModel: weight shape mismatch");
        }
        auto all_finite = [](const std::vector<double>& v) {
            for (double x : v)
                if (!std::isfinite(x)) return false;
            return true;
        };
        for (const auto& w : weights)
            if (!all_finite(w)) throw std::invalid_argument("MlpModel: non-finite weight");
        for (const auto& b : biases)
            if (!all_finite(b)) throw std::invalid_argument("MlpModel: non-finite bias");
    }

    std::vector<double> standardize(const std::vector<double>& x) const {
        std::vector<double> out(x.size());
        for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - feat_mean[i]) / feat_std[i];
        return out;
    }

    // Probability of success for raw (unstandardized) features.
    double predict(const std::vector<double>& raw) const {
        return forward(standardize(raw));
    }

    // Forward pass on already-standardized features.
    double forward(const std::vector<double>& x) const {
        std::vector<double> act = x;
        for (int l = 0; l < layer_count(); ++l) {
            std::vector<double> next(static_cast<size_t>(sizes[l + 1]));
            for (int o = 0; o < sizes[l + 1]; ++o) {
                double s = biases[l][static_cast<size_t>(o)];
                const double* w = &weights[l][static_cast<size_t>(o) * sizes[l]];
                for (int i = 0; i < sizes[l]; ++i) s += w[i] * act[static_cast<size_t>(i)];
                next[static_cast<size_t>(o)] = s;
            }
            bool last = l == layer_count() - 1;
            for (double& v : next) {
                if (last)
                    v = 1.0 / (1.0 + std::exp(-v));
                else
                    v = v > 0 ? v : 0.0;
            }
            act = std::move(next);
        }
        return act[0];
    }
};

inline MlpModel make_mlp(const std::vector<int>& sizes, std::uint64_t seed) {
    MlpModel m;
    m.sizes = sizes;
    RandomStream rng(derive_seed(seed, 0, 0x4D4C50ULL));
    for (int l = 0; l < m.layer_count(); ++l) {
        int fan_in = sizes[static_cast<size_t>(l)];
        int fan_out = sizes[static_cast<size_t>(l) + 1];
        double lim = std::sqrt(6.0 / (fan_in + fan_out));
        std::vector<double> w(static_cast<size_t>(fan_in) * fan_out);
        for (double& v : w) v = rng.uniform(-lim, lim);
        m.weights.push_back(std::move(w));
        m.biases.emplace_back(static_cast<size_t>(fan_out), 0.0);
    }
    return m;
}

inline double bce_loss(double p, int y) {
    double pc = std::clamp(p, 1e-7, 1.0 - 1e-7);
    return -(y * std::log(pc) + (1 - y) * std::log(1.0 - pc));
}

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
    std::vector<std::array<double, 3>> features;
    std::vector<int> labels;

    size_t size() const { return features.size(); }

    // Rows with non-finite features are dropped at construction.
    void add_row(const std::array<double, 3>& f, int label) {
        for (double v : f)
            if (!std::isfinite(v)) return;
        features.push_back(f);
        labels.push_back(label);
    }
};

inline void save_dataset_csv(const Dataset& d, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write dataset: " + path.string());
    f << "d_pq,d_cq,d_rp,success\n";
    char buf[160];
    for (size_t i = 0; i < d.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%d\n", d.features[i][0],
                      d.features[i][1], d.features[i][2], d.labels[i]);
        f << buf;
    }
}

inline Dataset load_dataset_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read dataset: " + path.string());
    Dataset d;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::array<double, 3> feat{};
        int label = 0;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%d", &feat[0], &feat[1], &feat[2],
                        &label) == 4)
            d.add_row(feat, label);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double learning_rate = 1e-5;
    int batch_size = 128;
    int iterations = 2500;
    std::optional<int> patience;  // early stop when loss stalls this many checks
    std::uint64_t seed = 1;

    void validate() const {
        if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch >= 1");
    }
};

struct EmptyDatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Gradients {
    std::vector<std::vector<double>> weights, biases;

    static Gradients zeros_like(const MlpModel& m) {
        Gradients g;
        for (int l = 0; l < m.layer_count(); ++l) {
            g.weights.emplace_back(m.weights[static_cast<size_t>(l)].size(), 0.0);
            g.biases.emplace_back(m.biases[static_cast<size_t>(l)].size(), 0.0);
        }
        return g;
    }
};

struct BatchRow {
    std::vector<double> x;  // standardized features, sizes[0] wide
    int y = 0;
};

// Exact gradients of the mean BCE over the batch, by backpropagation.
inline Gradients backward(const MlpModel& model, const std::vector<BatchRow>& batch) {
    if (batch.empty()) throw std::invalid_argument("backward: empty batch");
    Gradients g = Gradients::zeros_like(model);
    int L = model.layer_count();
    double inv_n = 1.0 / static_cast<double>(batch.size());

    for (const BatchRow& row : batch) {
        if (static_cast<int>(row.x.size()) != model.sizes[0])
            throw std::invalid_argument("backward: feature width mismatch");
        // forward with cached activations
        std::vector<std::vector<double>> acts(static_cast<size_t>(L) + 1);
        acts[0] = row.x;
        for (int l = 0; l < L; ++l) {
            std::vector<double> z(static_cast<size_t>(model.sizes[l + 1]));
            for (int o = 0; o < model.sizes[l + 1]; ++o) {
                double s = model.biases[static_cast<size_t>(l)][static_cast<size_t>(o)];
                const double* w =
                    &model.weights[static_cast<size_t>(l)][static_cast<size_t>(o) * model.sizes[l]];
                for (int i = 0; i < model.sizes[l]; ++i)
                    s += w[i] * acts[static_cast<size_t>(l)][static_cast<size_t>(i)];
                z[static_cast<size_t>(o)] = s;
            }
            if (l == L - 1) {
                for (double& v : z) v = 1.0 / (1.0 + std::exp(-v));
            } else {
                for (double& v : z) v = v > 0 ? v : 0.0;
            }
            acts[static_cast<size_t>(l) + 1] = std::move(z);
        }

        // Output delta for logistic + BCE is p - y. The loss clamps p, so in
        // the saturated region the exact gradient is zero.
        double p = acts[static_cast<size_t>(L)][0];
        double delta0 = (p > 1e-7 && p < 1.0 - 1e-7) ? (p - row.y) : 0.0;
        std::vector<double> delta{delta0};

        for (int l = L - 1; l >= 0; --l) {
            const auto& a_in = acts[static_cast<size_t>(l)];
            for (int o = 0; o < model.sizes[l + 1]; ++o) {
                double d = delta[static_cast<size_t>(o)] * inv_n;
                g.biases[static_cast<size_t>(l)][static_cast<size_t>(o)] += d;
                double* gw =
                    &g.weights[static_cast<size_t>(l)][static_cast<size_t>(o) * model.sizes[l]];
                for (int i = 0; i < model.sizes[l]; ++i)
                    gw[i] += d * a_in[static_cast<size_t>(i)];
            }
            if (l == 0) break;
            std::vector<double> prev(static_cast<size_t>(model.sizes[l]), 0.0);
            for (int i = 0; i < model.sizes[l]; ++i) {
                if (acts[static_cast<size_t>(l)][static_cast<size_t>(i)] <= 0) continue;  // ReLU
                double s = 0;
                for (int o = 0; o < model.sizes[l + 1]; ++o)
                    s += model.weights[static_cast<size_t>(l)]
                                      [static_cast<size_t>(o) * model.sizes[l] + i] *
                         delta[static_cast<size_t>(o)];
                prev[static_cast<size_t>(i)] = s;
            }
            delta = std::move(prev);
        }
    }
    return g;
}

struct TrainResult {
    MlpModel model;
    std::vector<double> loss_curve;  // mean batch BCE per iteration
};

inline TrainResult train(const Dataset& dataset, const TrainConfig& config) {
    config.validate();
    if (dataset.size() == 0) throw EmptyDatasetError("train: empty dataset");

    MlpModel model = make_mlp({3, 64, 64, 32, 1}, config.seed);
    for (int f = 0; f < 3; ++f) {
        double mean = 0;
        for (const auto& row : dataset.features) mean += row[static_cast<size_t>(f)];
        mean /= static_cast<double>(dataset.size());
        double var = 0;
        for (const auto& row : dataset.features) {
            double d = row[static_cast<size_t>(f)] - mean;
            var += d * d;
        }
        var /= static_cast<double>(dataset.size());
        model.feat_mean[static_cast<size_t>(f)] = mean;
        model.feat_std[static_cast<size_t>(f)] = std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0;
    }

    std::vector<BatchRow> rows(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
        auto s = model.standardize(
            {dataset.features[i][0], dataset.features[i][1], dataset.features[i][2]});
        rows[i] = BatchRow{s, dataset.labels[i]};
    }

    Gradients m = Gradients::zeros_like(model);
    Gradients v = Gradients::zeros_like(model);
    RandomStream rng(derive_seed(config.seed, 1, 0x545241494EULL));

    TrainResult result;
    std::vector<size_t> order(rows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // forces a shuffle on the first iteration

    bool with_replacement = rows.size() < static_cast<size_t>(config.batch_size);
    double best_loss = std::numeric_limits<double>::infinity();
    int stall = 0;

    for (int it = 1; it <= config.iterations; ++it) {
        std::vector<BatchRow> batch;
        batch.reserve(static_cast<size_t>(config.batch_size));
        if (with_replacement) {
            for (int k = 0; k < config.batch_size; ++k)
                batch.push_back(rows[static_cast<size_t>(rng.uniform_int(rows.size()))]);
        } else {
            for (int k = 0; k < config.batch_size; ++k) {
                if (cursor >= order.size()) {
                    rng.shuffle(order);
                    cursor = 0;
                }
                batch.push_back(rows[order[cursor++]]);
            }
        }

        Gradients g = backward(model, batch);

        double corr1 = 1.0 - std::pow(config.beta1, it);
        double corr2 = 1.0 - std::pow(config.beta2, it);
        for (int l = 0; l < model.layer_count(); ++l) {
            auto upd = [&](std::vector<double>& param, std::vector<double>& gm,
                           std::vector<double>& gv, const std::vector<double>& grad) {
                for (size_t i = 0; i < param.size(); ++i) {
                    gm[i] = config.beta1 * gm[i] + (1 - config.beta1) * grad[i];
                    gv[i] = config.beta2 * gv[i] + (1 - config.beta2) * grad[i] * grad[i];
                    double mh = gm[i] / corr1;
                    double vh = gv[i] / corr2;
                    param[i] -= config.learning_rate * mh / (std::sqrt(vh) + config.eps);
                }
            };
            upd(model.weights[static_cast<size_t>(l)], m.weights[static_cast<size_t>(l)],
                v.weights[static_cast<size_t>(l)], g.weights[static_cast<size_t>(l)]);
            upd(model.biases[static_cast<size_t>(l)], m.biases[static_cast<size_t>(l)],
                v.biases[static_cast<size_t>(l)], g.biases[static_cast<size_t>(l)]);
        }

        double loss = 0;
        for (const BatchRow& row : batch) loss += bce_loss(model.forward(row.x), row.y);
        loss /= static_cast<double>(batch.size());
        result.loss_curve.push_back(loss);

        if (config.patience) {
            if (loss < best_loss - 1e-6) {
                best_loss = loss;
                stall = 0;
            } else if (++stall >= *config.patience) {
                break;
            }
        }
    }

    result.model = std::move(model);
    return result;
}

inline double accuracy(const MlpModel& model, const Dataset& d) {
    if (d.size() == 0) return 0.0;
    size_t hit = 0;
    for (size_t i = 0; i < d.size(); ++i) {
        double p = model.predict({d.features[i][0], d.features[i][1], d.features[i][2]});
        hit += (p >= 0.5 ? 1 : 0) == d.labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Model file

inline void save_model(const MlpModel& model, const fs::path& path) {
    model.validate();
    json j;
    j["format_version"] = "1";
    j["sizes"] = model.sizes;
    j["weights"] = model.weights;
    j["biases"] = model.biases;
    j["feat_mean"] = model.feat_mean;
    j["feat_std"] = model.feat_std;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write model: " + path.string());
    f << j.dump(2) << "\n";
}

inline MlpModel load_model(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read model: " + path.string());
    json j = json::parse(f);
    if (j.value("format_version", "") != "1")
        throw std::runtime_error("unknown model format version in " + path.string());
    MlpModel m;
    m.sizes = j.at("sizes").get<std::vector<int>>();
    m.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    m.biases = j.at("biases").get<std::vector<std::vector<double>>>();
    m.feat_mean = j.at("feat_mean").get<std::vector<double>>();
    m.feat_std = j.at("feat_std").get<std::vector<double>>();
    m.validate();
    return m;
}

}  // namespace condserv
