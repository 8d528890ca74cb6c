#include <cmath>
#include <numeric>
#include <sstream>

#include "headseg/diffnet.hpp"
#include "headseg/metrics.hpp"

namespace headseg::diffnet {

namespace {

void check_samples(const std::vector<TrainSample>& samples, const NetShape& shape, const char* which)
{
    for (const auto& s : samples) {
        if (!s.ops) throw ArgumentError(std::string(which) + " sample " + s.name + " has no operators");
        const auto V = s.ops->num_vertices();
        if (s.features.rows() != V || static_cast<Eigen::Index>(s.labels.size()) != V) {
            throw ArgumentError(std::string(which) + " sample " + s.name + ": features, labels and operators disagree on vertex count");
        }
        if (s.features.cols() != shape.input_dim) {
            throw ArgumentError(std::string(which) + " sample " + s.name + " has " + std::to_string(s.features.cols()) +
                                " feature channels, expected " + std::to_string(shape.input_dim));
        }
        if (s.ops->basis.cols() != shape.k) {
            throw ArgumentError(std::string(which) + " sample " + s.name + " carries " + std::to_string(s.ops->basis.cols()) +
                                " eigenpairs, network uses " + std::to_string(shape.k));
        }
    }
}

double mean_miou(const DiffusionNetParams& params, const std::vector<TrainSample>& samples)
{
    std::vector<double> scores(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const auto& s = samples[i];
        const Eigen::MatrixXf logits = forward<float>(params.shape, params.values, *s.ops, s.features);
        scores[i] = metrics::miou(predict_labels(logits), s.labels);
    });
    return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

// Typical diffusion time range over the training meshes.
std::pair<double, double> time_range(const std::vector<TrainSample>& samples)
{
    double lo = 0.0, hi = 0.0;
    for (const auto& s : samples) {
        const auto& ev = s.ops->eigenvalues;
        const double top = static_cast<double>(ev.maxCoeff());
        double first = top;
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            if (static_cast<double>(ev[i]) > 1e-6 * top) {
                first = static_cast<double>(ev[i]);
                break;
            }
        }
        lo += 1.0 / top;
        hi += 1.0 / first;
    }
    lo /= static_cast<double>(samples.size());
    hi /= static_cast<double>(samples.size());
    if (!(lo > 0) || !std::isfinite(hi)) throw ArgumentError("train: degenerate spectrum in training set");
    return {lo, std::max(lo, hi)};
}

} // namespace

std::array<double, 2> inverse_frequency_weights(const std::vector<TrainSample>& samples)
{
    std::array<double, 2> count{0.0, 0.0};
    for (const auto& s : samples) {
        for (auto l : s.labels) count[l] += 1.0;
    }
    const double total = count[0] + count[1];
    std::array<double, 2> w{1.0, 1.0};
    for (int c = 0; c < 2; ++c) {
        if (count[c] > 0) w[c] = total / (2.0 * count[c]);
    }
    return w;
}

Eigen::VectorXf accumulate_gradients(const DiffusionNetParams& params, const std::vector<const TrainSample*>& batch,
                                     const std::array<double, 2>& class_weights, double* loss_sum)
{
    std::vector<Eigen::VectorXf> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
        const auto& s = *batch[i];
        ForwardCache<float> cache;
        const Eigen::MatrixXf logits = forward<float>(params.shape, params.values, *s.ops, s.features, &cache);
        const auto loss = cross_entropy<float>(logits, s.labels, class_weights);
        losses[i] = static_cast<double>(loss.value);
        grads[i] = backward<float>(params.shape, params.values, *s.ops, cache, loss.d_logits);
    });
    Eigen::VectorXf total = Eigen::VectorXf::Zero(params.values.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        total += grads[i];
        loss += losses[i];
    }
    if (loss_sum) *loss_sum = loss;
    return total;
}

TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& validation_set,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch)
{
    if (train_set.empty()) throw ArgumentError("train: training set is empty");
    if (config.epochs < 1 || config.batch_size < 1) throw ArgumentError("train: epochs and batch size must be positive");
    if (!(config.adam.learning_rate > 0) || !(config.adam.epsilon > 0) || config.adam.beta1 < 0 || config.adam.beta1 >= 1 ||
        config.adam.beta2 < 0 || config.adam.beta2 >= 1) {
        throw ArgumentError("train: invalid optimizer settings");
    }
    const NetShape shape{config.blocks, config.width, static_cast<int>(train_set.front().features.cols()), config.k};
    check_samples(train_set, shape, "training");
    check_samples(validation_set, shape, "validation");

    TrainResult result;
    result.class_weights = config.balance_classes ? inverse_frequency_weights(train_set) : std::array<double, 2>{1.0, 1.0};
    const auto [t_min, t_max] = time_range(train_set);
    DiffusionNetParams params = initialize(shape, config.seed, t_min, t_max);
    AdamState<float> adam;
    Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double best = -1.0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            std::vector<const TrainSample*> batch;
            for (std::size_t j = start; j < std::min(order.size(), start + config.batch_size); ++j) {
                batch.push_back(&train_set[order[j]]);
            }
            double batch_loss = 0.0;
            Eigen::VectorXf grads = accumulate_gradients(params, batch, result.class_weights, &batch_loss);
            if (!std::isfinite(batch_loss) || !grads.allFinite()) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << " on sample " << batch.front()->name
                    << " (parameter norm " << params.values.norm() << ", gradient norm " << grads.norm()
                    << ", learning rate " << config.adam.learning_rate << ")";
                throw TrainingError(msg.str());
            }
            grads /= static_cast<float>(batch.size());
            adam_step<float>(params.values, grads, adam, config.adam);
            loss_total += batch_loss;
        }
        EpochLog entry{epoch, loss_total / static_cast<double>(train_set.size()),
                       mean_miou(params, validation_set.empty() ? train_set : validation_set)};
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        if (entry.validation_miou > best) {
            best = entry.validation_miou;
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

} // namespace headseg::diffnet
