#pragma once

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/autodiff/ops.hpp"
#include "d2ae/autodiff/parameter.hpp"

namespace d2ae {

inline constexpr double kProbFloor = 1e-12;

struct TrainConfig {
    double lambda_T = 1.0;
    double lambda_P = 0.1;
    double lambda_X = 3e-4;
    double lr = 0.01;
    double lr_decay = 0.1;
    std::size_t decay_every = 40;
    std::size_t batch_size = 32;
    std::size_t epochs = 120;
    std::uint64_t seed = 7;
    double momentum = 0.0;
    /// "sgd" (with optional momentum) or "adam".
    std::string optimizer = "sgd";
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    /// L2 penalty coefficient added to the gradient of every weight tensor (biases excluded).
    double weight_decay = 0.0;
    /// Ablation switches for the two identity-dispelling terms.
    bool use_adv = true;
    bool use_conf = true;
    /// Confusion head reads augmented f_P (true) or clean f_P (false).
    bool confusion_on_augmented = true;
    bool classify_on_augmented = true;
    /// Learning-rate multiplier for the identity classifier of f_P (the adversary).
    double adv_lr_scale = 1.0;

    double lr_at(std::size_t epoch) const {
        const std::size_t k = decay_every == 0 ? 0 : epoch / decay_every;
        return lr * std::pow(lr_decay, static_cast<double>(k));
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
        if (lambda_T < 0 || lambda_P < 0 || lambda_X < 0) fail("loss weights must be >= 0");
        if (batch_size < 2) fail("batch_size must be >= 2");
        if (!(lr >= 0) || !(lr_decay > 0)) fail("lr must be >= 0 and lr_decay > 0");
        if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0,1)");
        if (optimizer != "sgd" && optimizer != "adam") fail("optimizer must be 'sgd' or 'adam'");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
            fail("adam coefficients out of range");
        if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
        if (!(adv_lr_scale > 0)) fail("adv_lr_scale must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lambda_T", c.lambda_T},     {"lambda_P", c.lambda_P},
         {"lambda_X", c.lambda_X},     {"lr", c.lr},
         {"lr_decay", c.lr_decay},     {"decay_every", c.decay_every},
         {"batch_size", c.batch_size}, {"epochs", c.epochs},
         {"seed", c.seed},             {"momentum", c.momentum},
         {"optimizer", c.optimizer},   {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2}, {"adam_eps", c.adam_eps},
         {"weight_decay", c.weight_decay},
         {"use_adv", c.use_adv},       {"use_conf", c.use_conf},
         {"confusion_on_augmented", c.confusion_on_augmented},
         {"classify_on_augmented", c.classify_on_augmented},
         {"adv_lr_scale", c.adv_lr_scale}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.lambda_T = j.value("lambda_T", d.lambda_T);
    c.lambda_P = j.value("lambda_P", d.lambda_P);
    c.lambda_X = j.value("lambda_X", d.lambda_X);
    c.lr = j.value("lr", d.lr);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.decay_every = j.value("decay_every", d.decay_every);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.epochs = j.value("epochs", d.epochs);
    c.seed = j.value("seed", d.seed);
    c.momentum = j.value("momentum", d.momentum);
    c.optimizer = j.value("optimizer", d.optimizer);
    c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.use_adv = j.value("use_adv", d.use_adv);
    c.use_conf = j.value("use_conf", d.use_conf);
    c.confusion_on_augmented = j.value("confusion_on_augmented", d.confusion_on_augmented);
    c.classify_on_augmented = j.value("classify_on_augmented", d.classify_on_augmented);
    c.adv_lr_scale = j.value("adv_lr_scale", d.adv_lr_scale);
}

/// Batch means of the five loss terms and their weighted total.
struct LossBundle {
    double l_id = 0;
    double l_adv = 0;
    double l_conf = 0;
    double l_rec_clean = 0;
    double l_rec_aug = 0;
    double total = 0;
    /// Set when some probability hit the 1e-12 floor before the log.
    bool clamped = false;
};

inline void to_json(nlohmann::json& j, const LossBundle& b) {
    j = {{"l_id", b.l_id},
         {"l_adv", b.l_adv},
         {"l_conf", b.l_conf},
         {"l_rec_clean", b.l_rec_clean},
         {"l_rec_aug", b.l_rec_aug},
         {"total", b.total}};
}

/// L = λ_T L_I + λ_P (L_adv + L_H) + λ_X (L̃_X + L_X); a term switched off by ablation weighs zero.
inline double total_objective(const LossBundle& b, const TrainConfig& c) {
    const double dispel = (c.use_adv ? b.l_adv : 0.0) + (c.use_conf ? b.l_conf : 0.0);
    return c.lambda_T * b.l_id + c.lambda_P * dispel + c.lambda_X * (b.l_rec_aug + b.l_rec_clean);
}

// Plain-vector forms of the per-sample losses.

inline double loss_identity(std::span<const double> y, std::size_t t, bool* clamped = nullptr) {
    if (t >= y.size()) throw std::out_of_range("loss_identity: label out of range");
    if (y[t] < kProbFloor && clamped) *clamped = true;
    return -std::log(std::max(y[t], kProbFloor));
}

inline double loss_adv_identity(std::span<const double> y_gated, std::size_t t, bool* clamped = nullptr) {
    return loss_identity(y_gated, t, clamped);
}

/// Cross-entropy to the uniform target: −(1/K) Σ_j log y_j, minimal (ln K) at uniform y.
inline double loss_confusion(std::span<const double> y, bool* clamped = nullptr) {
    if (y.empty()) throw std::invalid_argument("loss_confusion: empty distribution");
    double s = 0;
    for (double v : y) {
        if (v < kProbFloor && clamped) *clamped = true;
        s += std::log(std::max(v, kProbFloor));
    }
    return -s / static_cast<double>(y.size());
}

inline double loss_reconstruction(std::span<const double> x, std::span<const double> xr) {
    if (x.size() != xr.size())
        throw ShapeError("loss_reconstruction: sizes " + std::to_string(x.size()) + " and " +
                         std::to_string(xr.size()) + " differ");
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - xr[i];
        s += d * d;
    }
    return 0.5 * s;
}

// Graph forms over a batch; each returns the batch mean.

namespace detail {

template <typename T>
bool below_floor(const Tensor<T>& y) {
    for (T v : y.data())
        if (static_cast<double>(v) < kProbFloor) return true;
    return false;
}

}  // namespace detail

/// −mean_n log y[n, t_n] for probabilities y of shape (N, K).
template <typename T>
Var<T> identity_loss(Var<T> y, const std::vector<std::size_t>& labels, bool* clamped = nullptr) {
    const Shape s = y.shape();
    if (s.size() != 2 || s[0] != labels.size())
        throw ShapeError("identity_loss: probabilities " + shape_str(s) + " vs " + std::to_string(labels.size()) +
                         " labels");
    Tensor<T> onehot(s);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] >= s[1]) throw std::out_of_range("identity_loss: label out of range");
        onehot[n * s[1] + labels[n]] = T{1};
    }
    if (clamped && detail::below_floor(y.value())) *clamped = true;
    Var<T> ll = mul(log(clamp_min(y, static_cast<T>(kProbFloor))), y.graph().constant(std::move(onehot)));
    return scale(sum(ll), static_cast<T>(-1.0 / static_cast<double>(s[0])));
}

/// −(1/(N K)) Σ log y: the confusion loss averaged over the batch.
template <typename T>
Var<T> confusion_loss(Var<T> y, bool* clamped = nullptr) {
    const Shape s = y.shape();
    if (s.size() != 2) throw ShapeError("confusion_loss: expected (N,K), got " + shape_str(s));
    if (clamped && detail::below_floor(y.value())) *clamped = true;
    return scale(sum(log(clamp_min(y, static_cast<T>(kProbFloor)))), static_cast<T>(-1.0 / static_cast<double>(y.value().size())));
}

/// ½ Σ (x − x̃)² per image, averaged over the batch.
template <typename T>
Var<T> reconstruction_loss(Var<T> x, Var<T> xr) {
    return scale(squared_difference_sum(x, xr), static_cast<T>(0.5 / static_cast<double>(x.shape().at(0))));
}

enum class LossTerm { Identity, Adversarial, Confusion, Reconstruction };

/// Parameter groups each term may update.
inline GroupSet route(LossTerm t, const TrainConfig& c) {
    using G = ParamGroup;
    switch (t) {
        case LossTerm::Identity:
            return {G::Enc, G::BranchT, G::ClsT};
        case LossTerm::Adversarial:
            return {G::ClsP};
        case LossTerm::Confusion:
            // Without the adversarial term nothing else trains the identity classifier of f_P.
            return c.use_adv ? GroupSet{G::Enc, G::BranchP} : GroupSet{G::Enc, G::BranchP, G::ClsP};
        case LossTerm::Reconstruction:
            return {G::Enc, G::BranchT, G::BranchP, G::Dec};
    }
    throw std::logic_error("route: unknown term");
}

}  // namespace d2ae
