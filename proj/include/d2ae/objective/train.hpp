#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/data/dataset.hpp"
#include "d2ae/model/d2ae_model.hpp"
#include "d2ae/objective/losses.hpp"

namespace d2ae {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// (N, 3, S, S) batch from dataset samples.
template <typename T>
Tensor<T> stack_images(const Dataset& ds, std::span<const std::size_t> idx) {
    if (idx.empty()) throw std::invalid_argument("stack_images: empty index list");
    const Shape& s = ds.samples.at(idx[0]).image.shape();
    const std::size_t per = shape_size(s);
    Tensor<T> out(Shape{idx.size(), s[0], s[1], s[2]});
    for (std::size_t n = 0; n < idx.size(); ++n) {
        const auto& img = ds.samples.at(idx[n]).image;
        if (img.shape() != s) throw ShapeError("stack_images: inconsistent image shapes");
        for (std::size_t k = 0; k < per; ++k) out[n * per + k] = static_cast<T>(img[k]);
    }
    return out;
}

inline std::vector<std::size_t> identity_labels(const Dataset& ds, std::span<const std::size_t> idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(static_cast<std::size_t>(ds.samples.at(i).identity));
    return out;
}

/// Graph handles of every loss term for one batch.
template <typename T>
struct LossTerms {
    FullForward<T> fwd;
    Var<T> l_id, l_adv, l_conf, l_rec_clean, l_rec_aug;
    bool clamped = false;

    LossBundle bundle(const TrainConfig& c) const {
        LossBundle b;
        b.l_id = static_cast<double>(l_id.value().item());
        b.l_adv = static_cast<double>(l_adv.value().item());
        b.l_conf = static_cast<double>(l_conf.value().item());
        b.l_rec_clean = static_cast<double>(l_rec_clean.value().item());
        b.l_rec_aug = static_cast<double>(l_rec_aug.value().item());
        b.total = total_objective(b, c);
        b.clamped = clamped;
        return b;
    }
};

template <typename T>
LossTerms<T> compute_loss_terms(D2AEModel<T>& m, Graph<T>& g, const BoundParams<T>& p, const Tensor<T>& images,
                                const std::vector<std::size_t>& labels, const TrainConfig& c,
                                const ForwardOptions<T>& opt) {
    if (images.rank() != 4 || images.dim(0) != labels.size())
        throw ShapeError("loss terms: " + std::to_string(labels.size()) + " labels for batch " +
                         shape_str(images.shape()));
    ForwardOptions<T> o = opt;
    o.confusion_on_augmented = c.confusion_on_augmented;
    o.classify_on_augmented = c.classify_on_augmented;
    LossTerms<T> t;
    Var<T> x = g.view(images);
    t.fwd = forward_full(m, g, p, x, o);
    t.l_id = identity_loss(t.fwd.y_T, labels, &t.clamped);
    t.l_adv = identity_loss(t.fwd.y_P_gated, labels, &t.clamped);
    t.l_conf = confusion_loss(t.fwd.y_P, &t.clamped);
    t.l_rec_clean = reconstruction_loss(x, t.fwd.x_clean);
    t.l_rec_aug = reconstruction_loss(x, t.fwd.x_aug);
    return t;
}

/// One forward pass and one group-filtered backward per routed term. Gradients are added to
/// Parameter::grad and left in place; the returned bundle holds the term values.
template <typename T>
LossBundle accumulate_routed_gradients(D2AEModel<T>& m, const Tensor<T>& images,
                                       const std::vector<std::size_t>& labels, const TrainConfig& c,
                                       const ForwardOptions<T>& opt) {
    Graph<T> g(true);
    auto p = bind(m, g);
    LossTerms<T> t = compute_loss_terms(m, g, p, images, labels, c, opt);
    const LossBundle b = t.bundle(c);
    if (!std::isfinite(b.total)) throw NonFiniteError("train_step: non-finite loss");
    auto run = [&](Var<T> term, double w, LossTerm which) {
        if (w == 0.0) return;
        g.backward(scale(term, static_cast<T>(w)), route(which, c));
    };
    run(t.l_id, c.lambda_T, LossTerm::Identity);
    if (c.use_adv) run(t.l_adv, c.lambda_P, LossTerm::Adversarial);
    if (c.use_conf) run(t.l_conf, c.lambda_P, LossTerm::Confusion);
    run(add(t.l_rec_clean, t.l_rec_aug), c.lambda_X, LossTerm::Reconstruction);
    return b;
}

/// Update rule state: SGD velocity buffers (momentum > 0) or Adam moment estimates.
template <typename T>
struct Optimizer {
    std::vector<Tensor<T>> first;
    std::vector<Tensor<T>> second;
    std::size_t steps = 0;

    void step(D2AEModel<T>& m, double lr, const TrainConfig& c) {
        auto& ps = m.params();
        const bool adam = c.optimizer == "adam";
        if ((adam || c.momentum > 0) && first.size() != ps.size()) {
            first.clear();
            second.clear();
            for (const auto& p : ps) {
                first.push_back(Tensor<T>::zeros_like(p.value));
                if (adam) second.push_back(Tensor<T>::zeros_like(p.value));
            }
        }
        ++steps;
        const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(steps));
        const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(steps));
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& p = ps[i];
            const double lr_p = p.group() == ParamGroup::ClsP ? lr * c.adv_lr_scale : lr;
            T* v = p.value.ptr();
            const std::size_t n = p.value.size();
            if (c.weight_decay > 0 && p.value.rank() > 1) {
                T* g = p.grad.ptr();
                for (std::size_t k = 0; k < n; ++k) g[k] += static_cast<T>(c.weight_decay) * v[k];
            }
            const T* gr = p.grad.ptr();
            if (adam) {
                T* m1 = first[i].ptr();
                T* m2 = second[i].ptr();
                const T b1 = static_cast<T>(c.adam_beta1), b2 = static_cast<T>(c.adam_beta2);
                for (std::size_t k = 0; k < n; ++k) {
                    m1[k] = b1 * m1[k] + (T{1} - b1) * gr[k];
                    m2[k] = b2 * m2[k] + (T{1} - b2) * gr[k] * gr[k];
                    const double mh = m1[k] / bc1, vh = m2[k] / bc2;
                    v[k] -= static_cast<T>(lr_p * mh / (std::sqrt(vh) + c.adam_eps));
                }
            } else if (c.momentum > 0) {
                T* vel = first[i].ptr();
                for (std::size_t k = 0; k < n; ++k) {
                    vel[k] = static_cast<T>(c.momentum) * vel[k] + gr[k];
                    v[k] -= static_cast<T>(lr_p) * vel[k];
                }
            } else {
                for (std::size_t k = 0; k < n; ++k) v[k] -= static_cast<T>(lr_p) * gr[k];
            }
            p.zero_grad();
        }
    }
};

/// Routed gradients followed by one SGD update on all groups; gradients are zeroed afterwards.
/// On a non-finite loss the parameters and running statistics are left as they were.
template <typename T>
LossBundle train_step(D2AEModel<T>& m, const Tensor<T>& images, const std::vector<std::size_t>& labels,
                      const TrainConfig& c, double lr, Rng& rng, Optimizer<T>* opt = nullptr) {
    if (images.rank() != 4 || images.dim(0) < 2) throw std::invalid_argument("train_step: batch needs >= 2 samples");
    const Tensor<T> sig_t = m.sigma_T, sig_p = m.sigma_P;
    LossBundle b;
    try {
        ForwardOptions<T> o;
        o.mode = AugmentMode::Train;
        o.rng = &rng;
        b = accumulate_routed_gradients(m, images, labels, c, o);
    } catch (const NonFiniteError& e) {
        m.zero_grad();
        m.sigma_T = sig_t;
        m.sigma_P = sig_p;
        throw TrainingError(std::string("step aborted: ") + e.what());
    }
    Optimizer<T> local;
    (opt ? *opt : local).step(m, lr, c);
    return b;
}

/// Frozen-model metrics on one split: identity accuracy of each head on clean features,
/// mean entropy of y_P, and mean per-image PSNR of clean reconstructions.
struct SplitMetrics {
    double id_acc_T = 0;
    double id_acc_P = 0;
    double entropy_P = 0;
    double psnr = 0;
};

inline void to_json(nlohmann::json& j, const SplitMetrics& s) {
    j = {{"id_acc_T", s.id_acc_T}, {"id_acc_P", s.id_acc_P}, {"entropy_P", s.entropy_P}, {"psnr", s.psnr}};
}

inline double psnr(std::span<const float> a, std::span<const float> b) {
    double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        se += d * d;
    }
    const double mse = std::max(se / static_cast<double>(a.size()), 1e-20);
    return 10.0 * std::log10(1.0 / mse);
}

template <typename T>
SplitMetrics evaluate_split(const D2AEModel<T>& m, const Dataset& ds, Split split, std::size_t chunk = 64) {
    const auto idx = ds.indices(split);
    SplitMetrics r;
    if (idx.empty()) return r;
    std::size_t hit_t = 0, hit_p = 0;
    for (std::size_t s0 = 0; s0 < idx.size(); s0 += chunk) {
        std::span<const std::size_t> part(idx.data() + s0, std::min(chunk, idx.size() - s0));
        Tensor<T> x = stack_images<T>(ds, part);
        Graph<T> g(false);
        auto p = bind(m, g);
        Var<T> trunk = encode_trunk(m, p, g.view(x));
        Var<T> ft = branch_features(m, p, trunk, Branch::T);
        Var<T> fp = branch_features(m, p, trunk, Branch::P);
        // Copies: node storage moves as the graph grows.
        const Tensor<T> yt = classifier_probs(m, p, ft, Branch::T).value();
        const Tensor<T> yp = classifier_probs(m, p, fp, Branch::P).value();
        const Tensor<T> xr = decode_features(m, p, ft, fp).value();
        const std::size_t k = yt.dim(1), per = shape_size(x.shape()) / part.size();
        for (std::size_t n = 0; n < part.size(); ++n) {
            const auto label = static_cast<std::size_t>(ds.samples[part[n]].identity);
            auto argmax = [&](const Tensor<T>& y) {
                return static_cast<std::size_t>(std::max_element(y.ptr() + n * k, y.ptr() + (n + 1) * k) -
                                                (y.ptr() + n * k));
            };
            hit_t += argmax(yt) == label;
            hit_p += argmax(yp) == label;
            double h = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const double v = yp[n * k + j];
                if (v > 0) h -= v * std::log(v);
            }
            r.entropy_P += h;
            std::vector<float> a(per), b(per);
            for (std::size_t q = 0; q < per; ++q) {
                a[q] = static_cast<float>(x[n * per + q]);
                b[q] = static_cast<float>(xr[n * per + q]);
            }
            r.psnr += psnr(a, b);
        }
    }
    const double n = static_cast<double>(idx.size());
    r.id_acc_T = hit_t / n;
    r.id_acc_P = hit_p / n;
    r.entropy_P /= n;
    r.psnr /= n;
    return r;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    LossBundle mean;
    nlohmann::json eval;
};

inline nlohmann::json epoch_json(const EpochRecord& r) {
    nlohmann::json j = r.mean;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["eval"] = r.eval;
    return j;
}

struct TrainOptions {
    /// Receives one JSON line per epoch when set.
    std::ostream* log = nullptr;
    /// Val-split metrics every this many epochs (0 = never); the last epoch is always evaluated.
    std::size_t eval_every = 10;
    /// Called after each epoch; returning false stops training early.
    std::function<bool(const EpochRecord&)> on_epoch;
};

/// Epoch loop over the train split with seeded shuffling and a step learning-rate schedule.
/// A trailing batch smaller than two samples is dropped.
template <typename T>
std::vector<EpochRecord> train(D2AEModel<T>& m, const Dataset& ds, const TrainConfig& c,
                               const TrainOptions& opts = {}) {
    c.validate();
    std::vector<std::size_t> order = ds.indices(Split::Train);
    if (order.size() < 2) throw std::invalid_argument("train: need at least two training samples");
    if (static_cast<std::size_t>(ds.manifest.n_id) > m.config().n_id)
        throw std::invalid_argument("train: dataset has more identities than the model's classifiers");
    Rng noise_rng = derive_rng(c.seed, {0xA06});
    Optimizer<T> optimizer;
    std::vector<EpochRecord> log;
    for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
        Rng shuffle_rng = derive_rng(c.seed, {0x5F1, epoch});
        // Fisher-Yates with the portable uniform draw so the order is library independent.
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const auto j = static_cast<std::size_t>(uniform(shuffle_rng, 0.0, static_cast<double>(i + 1)));
            std::swap(order[i], order[std::min(j, i)]);
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = c.lr_at(epoch);
        std::size_t steps = 0;
        for (std::size_t s0 = 0; s0 + 2 <= order.size(); s0 += c.batch_size) {
            std::span<const std::size_t> part(order.data() + s0, std::min(c.batch_size, order.size() - s0));
            if (part.size() < 2) break;
            LossBundle b;
            try {
                b = train_step(m, stack_images<T>(ds, part), identity_labels(ds, part), c, rec.lr, noise_rng,
                               &optimizer);
            } catch (const TrainingError& e) {
                throw TrainingError("epoch " + std::to_string(rec.epoch) + ", step " + std::to_string(steps + 1) +
                                    ": " + e.what());
            }
            rec.mean.l_id += b.l_id;
            rec.mean.l_adv += b.l_adv;
            rec.mean.l_conf += b.l_conf;
            rec.mean.l_rec_clean += b.l_rec_clean;
            rec.mean.l_rec_aug += b.l_rec_aug;
            rec.mean.total += b.total;
            rec.mean.clamped = rec.mean.clamped || b.clamped;
            ++steps;
        }
        const double k = static_cast<double>(std::max<std::size_t>(steps, 1));
        for (double* v : {&rec.mean.l_id, &rec.mean.l_adv, &rec.mean.l_conf, &rec.mean.l_rec_clean,
                          &rec.mean.l_rec_aug, &rec.mean.total})
            *v /= k;
        const bool last = epoch + 1 == c.epochs;
        if ((opts.eval_every && rec.epoch % opts.eval_every == 0) || last) {
            if (!ds.indices(Split::Val).empty()) rec.eval = evaluate_split(m, ds, Split::Val);
        }
        if (rec.eval.is_null()) rec.eval = nlohmann::json::object();
        if (opts.log) *opts.log << epoch_json(rec).dump() << '\n' << std::flush;
        log.push_back(rec);
        if (opts.on_epoch && !opts.on_epoch(rec)) break;
    }
    return log;
}

}  // namespace d2ae
