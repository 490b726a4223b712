#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsodetect/common.hpp"
#include "dsodetect/nn.hpp"
#include "dsodetect/synthgen.hpp"

namespace dso {

struct TrainingConfig {
    // paper defaults: ADAM, lr 0.001, 50 epochs, batch 16
    double learning_rate = 0.001;
    int epochs = 50;
    int batch_size = 16;
    std::uint64_t seed = 42;
    std::optional<int> early_stop;  // patience in epochs; restores best-val weights

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("training: learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("training: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
        if (early_stop && *early_stop < 1) throw ConfigError("training: early_stop patience must be >= 1");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["optimizer"] = "adam";
        j["learning_rate"] = learning_rate;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["seed"] = seed;
        if (early_stop) j["early_stop"] = *early_stop;
        return j;
    }

    static TrainingConfig from_json(const nlohmann::json& j) {
        TrainingConfig c;
        c.learning_rate = j.value("learning_rate", 0.001);
        c.epochs = j.value("epochs", 50);
        c.batch_size = j.value("batch_size", 16);
        c.seed = j.value("seed", static_cast<std::uint64_t>(42));
        if (j.contains("early_stop")) c.early_stop = j["early_stop"].get<int>();
        return c;
    }
};

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

using TrainingHistory = std::vector<EpochStats>;

namespace traindetail {

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<std::vector<float>> m, v;

    explicit Adam(const Network<float>& net, double lr_in) : lr(lr_in) {
        const auto& w = const_cast<Network<float>&>(net).weights();
        m.resize(w.size());
        v.resize(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i].assign(w[i].size(), 0.0f);
            v[i].assign(w[i].size(), 0.0f);
        }
    }

    void step(Network<float>& net) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        auto& weights = net.weights();
        const auto& grads = net.grads();
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (!net.tensor_trainable(i)) continue;
            for (std::size_t k = 0; k < weights[i].size(); ++k) {
                const double g = grads[i][k];
                m[i][k] = static_cast<float>(beta1 * m[i][k] + (1.0 - beta1) * g);
                v[i][k] = static_cast<float>(beta2 * v[i][k] + (1.0 - beta2) * g * g);
                const double mhat = m[i][k] / bc1;
                const double vhat = v[i][k] / bc2;
                weights[i][k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

// numerically stable binary cross-entropy with logits
inline double bce_loss(double logit, double label) {
    return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::fabs(logit)));
}

inline void load_batch(const std::vector<LabeledPatch>& patches, const std::vector<int>& order,
                       std::size_t begin, std::size_t end, std::vector<float>& chw,
                       std::vector<float>& labels) {
    constexpr int n = LabeledPatch::kSize;
    const std::size_t per = static_cast<std::size_t>(3) * n * n;
    chw.resize((end - begin) * per);
    labels.resize(end - begin);
    for (std::size_t s = begin; s < end; ++s) {
        const LabeledPatch& p = patches[order[s]];
        float* dst = chw.data() + (s - begin) * per;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    dst[(static_cast<std::size_t>(c) * n + y) * n + x] =
                        dequantize16(p.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c]);
        labels[s - begin] = p.dso_present ? 1.0f : 0.0f;
    }
}

}  // namespace traindetail

// Fraction of patches where thresholding forward at 0.5 (ties count as
// present) matches the stored label.
inline double evaluate_accuracy(const ModelParams& params, const std::vector<LabeledPatch>& patches,
                                int jobs = 1) {
    if (patches.empty()) throw DomainError("evaluate_accuracy: empty patch list");
    Network<float> net(params);
    std::vector<float> chw, labels;
    std::vector<int> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    long long correct = 0;
    const std::size_t chunk = 32;
    for (std::size_t begin = 0; begin < patches.size(); begin += chunk) {
        const std::size_t end = std::min(patches.size(), begin + chunk);
        traindetail::load_batch(patches, order, begin, end, chw, labels);
        const auto logits = net.forward(chw.data(), static_cast<int>(end - begin), false, jobs);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            const bool predicted = sigmoid(logits[i]) >= 0.5;
            if (predicted == (labels[i] >= 0.5f)) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(patches.size());
}

struct ClassifierReport {
    double accuracy = 0.0;
    double recall_present = 0.0;
    double recall_absent = 0.0;
    double precision_present = 0.0;
};

// Accuracy plus per-class recall; the source material's "precision" figure
// is ambiguous between accuracy and precision, so both are reported.
inline ClassifierReport classifier_report(const ModelParams& params,
                                          const std::vector<LabeledPatch>& patches, int jobs = 1) {
    if (patches.empty()) throw DomainError("classifier_report: empty patch list");
    Network<float> net(params);
    std::vector<float> chw, labels;
    std::vector<int> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    const std::size_t chunk = 32;
    for (std::size_t begin = 0; begin < patches.size(); begin += chunk) {
        const std::size_t end = std::min(patches.size(), begin + chunk);
        traindetail::load_batch(patches, order, begin, end, chw, labels);
        const auto logits = net.forward(chw.data(), static_cast<int>(end - begin), false, jobs);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            const bool predicted = sigmoid(logits[i]) >= 0.5;
            const bool actual = labels[i] >= 0.5f;
            if (predicted && actual) ++tp;
            else if (predicted && !actual) ++fp;
            else if (!predicted && actual) ++fn;
            else ++tn;
        }
    }
    ClassifierReport r;
    r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(patches.size());
    r.recall_present = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    r.recall_absent = (tn + fp) > 0 ? static_cast<double>(tn) / (tn + fp) : 0.0;
    r.precision_present = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    return r;
}

// Trains the binary patch classifier: ADAM on binary cross-entropy,
// validation accuracy once per epoch, optional early stopping with
// best-weight restore. Bit-deterministic for a fixed seed and jobs count
// (reductions run in a fixed order even with jobs > 1). Emits one JSON
// line per epoch when progress is given.
inline std::pair<ModelParams, TrainingHistory> train(const DatasetSplit& split,
                                                     const TrainingConfig& config, int jobs = 1,
                                                     std::ostream* progress = nullptr,
                                                     const ArchDescriptor& arch = desk_arch()) {
    config.validate();
    if (split.train.empty()) throw ConfigError("train: empty training split");

    ModelParams params = init_params(arch, config.seed);
    Network<float> net(params);
    traindetail::Adam adam(net, config.learning_rate);
    Rng shuffle_rng(derive_seed(config.seed, 31));

    TrainingHistory history;
    std::vector<int> order(split.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    double best_val = -1.0;
    int best_epoch = -1;
    int since_best = 0;
    std::vector<std::vector<float>> best_weights;

    std::vector<float> chw, labels;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        long long correct = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            traindetail::load_batch(split.train, order, begin, end, chw, labels);
            const int bn = static_cast<int>(end - begin);
            const auto logits = net.forward(chw.data(), bn, true, jobs);
            std::vector<float> dlogit(bn);
            for (int i = 0; i < bn; ++i) {
                const double z = logits[i], y = labels[i];
                loss_sum += traindetail::bce_loss(z, y);
                const bool predicted = sigmoid(z) >= 0.5;
                if (predicted == (y >= 0.5)) ++correct;
                dlogit[i] = static_cast<float>((sigmoid(z) - y) / bn);
            }
            if (!std::isfinite(loss_sum))
                throw TrainError("training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
            net.zero_grads();
            net.backward(dlogit, true, false, jobs);
            adam.step(net);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(order.size());
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        if (!split.val.empty()) {
            net.export_params(params);
            stats.val_accuracy = evaluate_accuracy(params, split.val, jobs);
        }
        history.push_back(stats);
        if (progress) {
            nlohmann::json j;
            j["epoch"] = stats.epoch;
            j["train_loss"] = stats.train_loss;
            j["train_accuracy"] = stats.train_accuracy;
            j["val_accuracy"] = stats.val_accuracy;
            (*progress) << j.dump() << "\n" << std::flush;
        }

        if (config.early_stop) {
            if (stats.val_accuracy > best_val) {
                best_val = stats.val_accuracy;
                best_epoch = epoch;
                since_best = 0;
                best_weights = net.weights();
            } else if (++since_best >= *config.early_stop) {
                break;
            }
        }
    }

    if (config.early_stop && !best_weights.empty()) {
        net.weights() = best_weights;
        (void)best_epoch;
    }
    net.export_params(params);
    return {std::move(params), std::move(history)};
}

// ---------------------------------------------------------------------------
// Checkpoint: one self-describing JSON file (format/version, architecture,
// training config, all tensors). Round-trips bit-exactly: float values are
// serialized as shortest-round-trip doubles.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "dsodetect-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelParams& params, const TrainingConfig& config) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["arch"] = params.arch.to_json();
    j["training"] = config.to_json();
    j["param_count"] = params.param_count();
    nlohmann::json tensors;
    for (const auto& t : params.tensors) {
        nlohmann::json jt;
        jt["shape"] = t.shape;
        jt["trainable"] = t.trainable;
        nlohmann::json vals = nlohmann::json::array();
        for (float v : t.values) vals.push_back(static_cast<double>(v));
        jt["values"] = std::move(vals);
        tensors[t.name] = std::move(jt);
    }
    j["tensors"] = std::move(tensors);
    return j;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const TrainingConfig& config) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << checkpoint_to_json(params, config).dump(1) << "\n";
}

inline std::pair<ModelParams, TrainingConfig> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint parse error in " + path + ": " + e.what());
    }
    if (j.value("format", "") != kCheckpointFormat)
        throw IoError("not a checkpoint file: " + path);
    if (j.value("version", 0) != kCheckpointVersion)
        throw IoError("unsupported checkpoint version in " + path);

    ModelParams params;
    params.arch = ArchDescriptor::from_json(j.at("arch"));
    nndetail::build_plan(params.arch, params.tensors);  // canonical tensor order/shapes
    for (auto& t : params.tensors) {
        if (!j.at("tensors").contains(t.name))
            throw IoError("checkpoint missing tensor '" + t.name + "'");
        const auto& jt = j.at("tensors").at(t.name);
        const auto& vals = jt.at("values");
        if (vals.size() != t.count())
            throw IoError("checkpoint tensor '" + t.name + "' has wrong size");
        for (std::size_t i = 0; i < t.count(); ++i)
            t.values[i] = static_cast<float>(vals[i].get<double>());
    }
    return {std::move(params), TrainingConfig::from_json(j.at("training"))};
}

}  // namespace dso
