#ifndef FEAL_LOSSES_HPP
#define FEAL_LOSSES_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "feal/evidential.hpp"
#include "feal/numerics.hpp"

namespace feal {

/// Loss value and its gradient with respect to the logits that produced the
/// Dirichlet (length C, or M*C row-major for a segmentation batch).
struct LossResult {
    double value = 0.0;
    std::vector<double> grad_logits;
};

enum class TaskKind { ce, dice };

/// How the raw-logit evidence term of the regularizer reduces over classes.
enum class LogitReduction { sum, mean };

inline std::vector<double> one_hot(std::size_t label, std::size_t classes) {
    if (label >= classes) {
        throw std::invalid_argument("one_hot: label out of range");
    }
    std::vector<double> y(classes, 0.0);
    y[label] = 1.0;
    return y;
}

namespace detail {

inline void require_one_hot(std::span<const double> y, std::size_t classes, const char* who) {
    if (y.size() != classes) {
        throw std::invalid_argument(std::string(who) + ": label length mismatch");
    }
    int ones = 0;
    for (double v : y) {
        if (v == 1.0) {
            ++ones;
        } else if (v != 0.0) {
            throw std::invalid_argument(std::string(who) + ": label is not one-hot");
        }
    }
    if (ones != 1) {
        throw std::invalid_argument(std::string(who) + ": label is not one-hot");
    }
}

inline double relu_gate(double z) { return z > 0.0 ? 1.0 : 0.0; }

}  // namespace detail

/// Bayes risk of cross-entropy: sum_c y_c (psi(S) - psi(alpha_c)).
inline LossResult task_loss_ce(std::span<const double> logits, std::span<const double> y) {
    const auto d = alpha_from_logits(logits);
    detail::require_one_hot(y, d.classes(), "task_loss_ce");
    const double s = d.strength();
    const double psi_s = digamma(s);
    const double tri_s = trigamma(s);
    LossResult r;
    r.grad_logits.resize(d.classes());
    for (std::size_t c = 0; c < d.classes(); ++c) {
        if (y[c] != 0.0) {
            r.value += y[c] * (psi_s - digamma(d.alpha(c)));
        }
        const double g_alpha = tri_s - y[c] * trigamma(d.alpha(c));
        r.grad_logits[c] = g_alpha * detail::relu_gate(logits[c]);
    }
    return r;
}

/// Bayes risk of the soft Dice loss over M pixels. `logits` and `labels` are
/// M x C row-major.
inline LossResult task_loss_dice(std::span<const double> logits, std::span<const double> labels,
                                 std::size_t classes) {
    if (classes < 2) {
        throw std::invalid_argument("task_loss_dice: need at least two classes");
    }
    if (logits.empty() || logits.size() % classes != 0) {
        throw std::invalid_argument("task_loss_dice: empty or ragged batch");
    }
    if (labels.size() != logits.size()) {
        throw std::invalid_argument("task_loss_dice: label shape mismatch");
    }
    const std::size_t pixels = logits.size() / classes;
    const std::size_t k = classes;

    std::vector<double> alpha(logits.size());
    std::vector<double> rho(logits.size());
    std::vector<double> strength(pixels);
    for (std::size_t m = 0; m < pixels; ++m) {
        auto z = logits.subspan(m * k, k);
        detail::require_one_hot(labels.subspan(m * k, k), k, "task_loss_dice");
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (!std::isfinite(z[c])) {
                throw std::domain_error("task_loss_dice: non-finite logit");
            }
            alpha[m * k + c] = std::max(0.0, z[c]) + 1.0;
            s += alpha[m * k + c];
        }
        strength[m] = s;
        for (std::size_t c = 0; c < k; ++c) {
            rho[m * k + c] = alpha[m * k + c] / s;
        }
    }

    std::vector<double> num(k, 0.0);
    std::vector<double> den(k, 0.0);
    for (std::size_t m = 0; m < pixels; ++m) {
        for (std::size_t c = 0; c < k; ++c) {
            const double y = labels[m * k + c];
            const double p = rho[m * k + c];
            num[c] += y * p;
            den[c] += y * y + p * p + p * (1.0 - p) / (strength[m] + 1.0);
        }
    }

    LossResult r;
    const double scale = 2.0 / static_cast<double>(k);
    double ratio_sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        ratio_sum += num[c] / den[c];
    }
    r.value = 1.0 - scale * ratio_sum;

    r.grad_logits.assign(logits.size(), 0.0);
    std::vector<double> g_rho(k);
    for (std::size_t m = 0; m < pixels; ++m) {
        const double s = strength[m];
        const double s1 = s + 1.0;
        double g_s = 0.0;  // explicit dependence through the variance term
        for (std::size_t c = 0; c < k; ++c) {
            const double y = labels[m * k + c];
            const double p = rho[m * k + c];
            const double dden_drho = 2.0 * p + (1.0 - 2.0 * p) / s1;
            g_rho[c] = -scale * (y / den[c] - num[c] / (den[c] * den[c]) * dden_drho);
            const double dden_ds = -p * (1.0 - p) / (s1 * s1);
            g_s += scale * num[c] / (den[c] * den[c]) * dden_ds;
        }
        // rho_c = alpha_c / S  =>  d rho_c / d alpha_j = (delta_cj - rho_c) / S
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            dot += g_rho[c] * rho[m * k + c];
        }
        for (std::size_t j = 0; j < k; ++j) {
            const double g_alpha = (g_rho[j] - dot) / s + g_s;
            r.grad_logits[m * k + j] = g_alpha * detail::relu_gate(logits[m * k + j]);
        }
    }
    return r;
}

/// KL[Dir(alpha_tilde) || Dir(1)] - (C / S) * reduce(logits), with
/// alpha_tilde = y + (1 - y) * alpha.
inline LossResult reg_loss(std::span<const double> logits, std::span<const double> y,
                           LogitReduction reduction = LogitReduction::sum) {
    const auto d = alpha_from_logits(logits);
    const std::size_t k = d.classes();
    detail::require_one_hot(y, k, "reg_loss");
    const double kd = static_cast<double>(k);

    std::vector<double> at(k);
    double st = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        at[c] = y[c] + (1.0 - y[c]) * d.alpha(c);
        st += at[c];
    }
    const double psi_st = digamma(st);
    const double tri_st = trigamma(st);
    double kl = ln_gamma(st) - ln_gamma(kd);
    for (std::size_t c = 0; c < k; ++c) {
        kl += -ln_gamma(at[c]) + (at[c] - 1.0) * (digamma(at[c]) - psi_st);
    }

    const double s = d.strength();
    const double per_logit = reduction == LogitReduction::sum ? 1.0 : 1.0 / kd;
    double reduced = 0.0;
    for (double z : logits) {
        reduced += per_logit * z;
    }

    LossResult r;
    r.value = kl - (kd / s) * reduced;
    r.grad_logits.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
        const double gate = detail::relu_gate(logits[j]);
        const double g_kl = ((at[j] - 1.0) * trigamma(at[j]) - (st - kd) * tri_st) * (1.0 - y[j]);
        const double g_term = -(kd / s) * per_logit + (kd * reduced / (s * s)) * gate;
        r.grad_logits[j] = g_kl * gate + g_term;
    }
    return r;
}

/// Pixel-averaged regularizer over an M x C batch.
inline LossResult reg_loss_mean(std::span<const double> logits, std::span<const double> labels,
                                std::size_t classes,
                                LogitReduction reduction = LogitReduction::sum) {
    if (classes < 2 || logits.empty() || logits.size() % classes != 0 ||
        labels.size() != logits.size()) {
        throw std::invalid_argument("reg_loss_mean: shape mismatch");
    }
    const std::size_t pixels = logits.size() / classes;
    LossResult r;
    r.grad_logits.assign(logits.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(pixels);
    for (std::size_t m = 0; m < pixels; ++m) {
        auto one = reg_loss(logits.subspan(m * classes, classes),
                            labels.subspan(m * classes, classes), reduction);
        r.value += inv * one.value;
        for (std::size_t c = 0; c < classes; ++c) {
            r.grad_logits[m * classes + c] = inv * one.grad_logits[c];
        }
    }
    return r;
}

struct LossOptions {
    TaskKind task = TaskKind::ce;
    double lambda = 1e-2;
    LogitReduction reduction = LogitReduction::sum;
};

inline constexpr double kDefaultLambdaClassification = 1e-2;
inline constexpr double kDefaultLambdaSegmentation = 1e-4;

/// L_task + lambda * L_reg over one item of M pixels (M = 1 for
/// classification). `logits` and `labels` are M x C row-major.
inline LossResult total_loss(std::span<const double> logits, std::span<const double> labels,
                             std::size_t classes, const LossOptions& opts) {
    if (!(opts.lambda >= 0.0)) {
        throw std::invalid_argument("total_loss: lambda must be non-negative");
    }
    LossResult task;
    LossResult reg;
    if (opts.task == TaskKind::ce) {
        if (logits.size() != classes) {
            throw std::invalid_argument("total_loss: cross-entropy expects a single pixel");
        }
        task = task_loss_ce(logits, labels);
        if (opts.lambda == 0.0) {
            return task;
        }
        reg = reg_loss(logits, labels, opts.reduction);
    } else {
        task = task_loss_dice(logits, labels, classes);
        if (opts.lambda == 0.0) {
            return task;
        }
        reg = reg_loss_mean(logits, labels, classes, opts.reduction);
    }
    task.value += opts.lambda * reg.value;
    for (std::size_t i = 0; i < task.grad_logits.size(); ++i) {
        task.grad_logits[i] += opts.lambda * reg.grad_logits[i];
    }
    return task;
}

}  // namespace feal

#endif  // FEAL_LOSSES_HPP
