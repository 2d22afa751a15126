#ifndef FEAL_FEDERATION_HPP
#define FEAL_FEDERATION_HPP

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "feal/data.hpp"
#include "feal/evidential.hpp"
#include "feal/losses.hpp"
#include "feal/nn.hpp"
#include "feal/numerics.hpp"

namespace feal {

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class AggregationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kMaxAnnotationRatio = 0.85;

/// One client's view: labeled and unlabeled item indices drawn from its
/// partition's training split, plus the last local model.
struct ClientState {
    std::size_t id = 0;
    const Partition* data = nullptr;
    std::vector<std::size_t> labeled;    // annotation order
    std::vector<std::size_t> unlabeled;  // ascending
    ModelParams local;
    std::size_t budget = 0;

    std::size_t pool_size() const { return labeled.size() + unlabeled.size(); }
};

inline ClientState make_client(std::size_t id, const Partition& data, std::size_t budget) {
    ClientState c;
    c.id = id;
    c.data = &data;
    c.unlabeled = data.train;
    std::sort(c.unlabeled.begin(), c.unlabeled.end());
    c.budget = budget;
    return c;
}

struct TrainOptions {
    /// Fixed number of optimizer steps; when unset, `local_epochs` passes over L_k.
    std::optional<std::size_t> local_steps;
    std::size_t local_epochs = 1;
    std::size_t batch_size = 32;
    LossOptions loss;
    AdamConfig adam;
};

struct LocalTrainResult {
    ModelParams params;
    double mean_loss = 0.0;
    std::size_t steps = 0;
};

/// Loss and accumulated parameter gradient of one labeled item.
inline double accumulate_item_gradient(const ModelParams& p, const Partition& data,
                                       std::size_t item, const LossOptions& loss, double weight,
                                       ModelParams& grad) {
    const std::size_t k = data.classes;
    const std::size_t cells = data.cells;
    std::vector<ForwardCache> caches;
    caches.reserve(cells);
    std::vector<double> logits(cells * k);
    for (std::size_t m = 0; m < cells; ++m) {
        caches.push_back(forward(p, data.cell_features(item, m)));
        std::copy(caches.back().logits.begin(), caches.back().logits.end(),
                  logits.begin() + static_cast<std::ptrdiff_t>(m * k));
    }
    const auto labels = data.one_hot_labels(item);
    const auto res = total_loss(logits, labels, k, loss);
    std::vector<double> g(k);
    for (std::size_t m = 0; m < cells; ++m) {
        for (std::size_t c = 0; c < k; ++c) {
            g[c] = weight * res.grad_logits[m * k + c];
        }
        backward_accumulate(p, caches[m], g, grad);
    }
    return res.value;
}

/// Trains a copy of `global` on the client's labeled set and stores the
/// result as the client's local model.
inline LocalTrainResult local_train(ClientState& c, const ModelParams& global,
                                    const TrainOptions& opts, Rng& rng) {
    if (c.labeled.empty()) {
        throw ProtocolError("local_train: client " + std::to_string(c.id) +
                            " has an empty labeled set");
    }
    if (opts.batch_size == 0) {
        throw std::invalid_argument("local_train: batch size must be positive");
    }
    LocalTrainResult out;
    out.params = global;
    const std::size_t per_epoch = (c.labeled.size() + opts.batch_size - 1) / opts.batch_size;
    const std::size_t steps = opts.local_steps ? *opts.local_steps : opts.local_epochs * per_epoch;
    AdamState adam(opts.adam, global.flat_size());
    std::vector<std::size_t> order = c.labeled;
    std::size_t cursor = order.size();
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        ModelParams grad = zero_params(global.widths);
        const std::size_t batch = std::min(opts.batch_size, order.size());
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch_loss += accumulate_item_gradient(out.params, *c.data, order[cursor++], opts.loss,
                                                   1.0 / static_cast<double>(batch), grad);
        }
        loss_sum += batch_loss / static_cast<double>(batch);
        adam_step(adam, out.params, grad);
    }
    out.steps = steps;
    out.mean_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    c.local = out.params;
    return out;
}

/// Mean training loss of `p` over the client's labeled set.
inline double labeled_loss(const ModelParams& p, const ClientState& c, const LossOptions& loss) {
    if (c.labeled.empty()) {
        return 0.0;
    }
    ModelParams scratch = zero_params(p.widths);
    double total = 0.0;
    for (auto i : c.labeled) {
        total += accumulate_item_gradient(p, *c.data, i, loss, 0.0, scratch);
    }
    return total / static_cast<double>(c.labeled.size());
}

struct WeightedParams {
    const ModelParams* params;
    double weight;
};

/// FedAvg: flat-vector mean with weights normalized to sum to one.
inline ModelParams fedavg_aggregate(std::span<const WeightedParams> entries) {
    if (entries.empty()) {
        throw AggregationError("fedavg_aggregate: no entries");
    }
    double total = 0.0;
    for (const auto& e : entries) {
        if (e.params == nullptr || !e.params->same_architecture(*entries.front().params)) {
            throw AggregationError("fedavg_aggregate: architecture mismatch");
        }
        if (!(e.weight > 0.0) || !std::isfinite(e.weight)) {
            throw AggregationError("fedavg_aggregate: weights must be positive");
        }
        total += e.weight;
    }
    std::vector<double> acc(entries.front().params->flat_size(), 0.0);
    for (const auto& e : entries) {
        const double w = e.weight / total;
        const auto flat = e.params->flatten();
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += w * flat[i];
        }
    }
    ModelParams out = zero_params(entries.front().params->widths);
    out.assign_flat(acc);
    return out;
}

struct GlobalMetrics {
    double accuracy = 0.0;
    double bma = 0.0;
    std::vector<double> client_accuracy;
    /// Mean hard Dice over foreground classes; set for segmentation data.
    std::optional<double> dice;
};

/// Argmax of the expected categorical prediction; ties go to the lowest class.
inline std::size_t predict_class(std::span<const double> logits) {
    const auto p = posterior(alpha_from_logits(logits));
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Mean of per-class recall over classes with at least one true instance.
inline double balanced_accuracy(std::span<const std::size_t> truth,
                                std::span<const std::size_t> predicted, std::size_t classes) {
    std::vector<double> hit(classes, 0.0);
    std::vector<double> support(classes, 0.0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        support[truth[i]] += 1.0;
        if (truth[i] == predicted[i]) {
            hit[truth[i]] += 1.0;
        }
    }
    double sum = 0.0;
    int present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        if (support[c] > 0.0) {
            sum += hit[c] / support[c];
            ++present;
        }
    }
    return present > 0 ? sum / present : 0.0;
}

/// Hard Dice of one item averaged over foreground classes 1..C-1; a class
/// absent from both masks scores 1.
inline double hard_dice(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::size_t classes) {
    double sum = 0.0;
    for (std::size_t c = 1; c < classes; ++c) {
        double inter = 0.0;
        double size = 0.0;
        for (std::size_t m = 0; m < truth.size(); ++m) {
            const bool t = truth[m] == c;
            const bool p = predicted[m] == c;
            inter += (t && p) ? 1.0 : 0.0;
            size += (t ? 1.0 : 0.0) + (p ? 1.0 : 0.0);
        }
        sum += size > 0.0 ? 2.0 * inter / size : 1.0;
    }
    return sum / static_cast<double>(classes - 1);
}

/// Accuracy and BMA of the global model over every client's test split
/// (per cell for segmentation).
inline GlobalMetrics evaluate_global(const ModelParams& p, std::span<const Partition> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("evaluate_global: no partitions");
    }
    GlobalMetrics m;
    std::vector<std::size_t> truth;
    std::vector<std::size_t> pred;
    const std::size_t classes = parts.front().classes;
    const bool segmentation = parts.front().cells > 1;
    double dice_sum = 0.0;
    std::size_t dice_items = 0;
    for (const auto& part : parts) {
        if (part.test.empty()) {
            throw std::invalid_argument("evaluate_global: empty test partition");
        }
        std::size_t correct = 0;
        std::size_t total = 0;
        for (auto i : part.test) {
            std::vector<std::size_t> item_truth;
            std::vector<std::size_t> item_pred;
            for (std::size_t c = 0; c < part.cells; ++c) {
                const auto y = static_cast<std::size_t>(part.labels[i * part.cells + c]);
                const auto yhat = predict_class(forward(p, part.cell_features(i, c)).logits);
                item_truth.push_back(y);
                item_pred.push_back(yhat);
                correct += (y == yhat) ? 1 : 0;
                ++total;
            }
            if (segmentation) {
                dice_sum += hard_dice(item_truth, item_pred, classes);
                ++dice_items;
            }
            truth.insert(truth.end(), item_truth.begin(), item_truth.end());
            pred.insert(pred.end(), item_pred.begin(), item_pred.end());
        }
        m.client_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(total));
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        correct += truth[i] == pred[i] ? 1 : 0;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    m.bma = balanced_accuracy(truth, pred, classes);
    if (segmentation) {
        m.dice = dice_sum / static_cast<double>(dice_items);
    }
    return m;
}

struct RoundLog {
    std::size_t comm_round = 0;
    std::vector<double> client_train_loss;
    GlobalMetrics metrics;
};

/// T communication rounds of local training from the current global model
/// followed by size-weighted FedAvg. Each client draws from its own stream.
inline ModelParams federated_training(std::vector<ClientState>& clients, ModelParams global,
                                      std::size_t comm_rounds, const TrainOptions& opts,
                                      std::span<const Partition> eval_parts,
                                      std::uint64_t stream_seed, std::vector<RoundLog>* log,
                                      bool evaluate_each_round = true) {
    std::vector<Rng> rngs;
    for (const auto& c : clients) {
        rngs.emplace_back(derive_seed(stream_seed, c.id));
    }
    for (std::size_t t = 1; t <= comm_rounds; ++t) {
        RoundLog entry;
        entry.comm_round = t;
        for (std::size_t k = 0; k < clients.size(); ++k) {
            entry.client_train_loss.push_back(local_train(clients[k], global, opts, rngs[k]).mean_loss);
        }
        std::vector<WeightedParams> entries;
        for (const auto& c : clients) {
            entries.push_back({&c.local, static_cast<double>(c.labeled.size())});
        }
        global = fedavg_aggregate(entries);
        if (log != nullptr) {
            if (evaluate_each_round || t == comm_rounds) {
                entry.metrics = evaluate_global(global, eval_parts);
            }
            log->push_back(std::move(entry));
        }
    }
    return global;
}

}  // namespace feal

#endif  // FEAL_FEDERATION_HPP
