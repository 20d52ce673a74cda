#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/analytics/features.hpp"
#include "d2ae/data/dataset.hpp"
#include "d2ae/model/d2ae_model.hpp"
#include "d2ae/rng.hpp"

namespace d2ae {

struct ProbeConfig {
    std::size_t epochs = 200;
    double penalty = 1e-3;
    double step = 0.1;  // learning rate step / sqrt(t)
    double holdout = 0.2;
    std::uint64_t seed = 11;
};

/// One linear attribute probe: decision value w·f + b with ‖w‖ = 1, over one branch.
struct ProbeEntry {
    std::string attribute;
    Branch branch = Branch::P;
    std::vector<double> w;
    double bias = 0;
    double accuracy = 0;  // held-out
    std::size_t epochs = 0;
    double penalty = 0;

    double decision(std::span<const double> f) const {
        if (f.size() != w.size()) throw std::invalid_argument("probe '" + attribute + "': feature length mismatch");
        double s = bias;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * f[i];
        return s;
    }
};

struct ProbeModel {
    std::vector<ProbeEntry> entries;

    const ProbeEntry* find(const std::string& attribute, Branch b) const {
        for (const auto& e : entries)
            if (e.attribute == attribute && e.branch == b) return &e;
        return nullptr;
    }
    bool empty() const { return entries.empty(); }
};

inline void to_json(nlohmann::json& j, const ProbeEntry& e) {
    j = {{"attribute", e.attribute}, {"branch", std::string(branch_name(e.branch))},
         {"w", e.w},                 {"bias", e.bias},
         {"accuracy", e.accuracy},   {"epochs", e.epochs},
         {"penalty", e.penalty}};
}

inline void from_json(const nlohmann::json& j, ProbeEntry& e) {
    e.attribute = j.at("attribute").get<std::string>();
    const auto b = j.at("branch").get<std::string>();
    if (b != "T" && b != "P") throw std::invalid_argument("probe branch must be T or P, got " + b);
    e.branch = b == "T" ? Branch::T : Branch::P;
    e.w = j.at("w").get<std::vector<double>>();
    e.bias = j.at("bias").get<double>();
    e.accuracy = j.value("accuracy", 0.0);
    e.epochs = j.value("epochs", std::size_t{0});
    e.penalty = j.value("penalty", 0.0);
}

inline void to_json(nlohmann::json& j, const ProbeModel& m) { j = {{"probes", m.entries}}; }
inline void from_json(const nlohmann::json& j, ProbeModel& m) {
    m.entries = j.at("probes").get<std::vector<ProbeEntry>>();
}

namespace detail {

struct Standardizer {
    Eigen::RowVectorXd mean, sd;

    static Standardizer fit(const Eigen::MatrixXd& x) {
        Standardizer s;
        s.mean = x.colwise().mean();
        s.sd.resize(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double v = (x.col(j).array() - s.mean(j)).square().sum() / std::max<Eigen::Index>(x.rows() - 1, 1);
            s.sd(j) = v > 1e-24 ? std::sqrt(v) : 1.0;
        }
        return s;
    }
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        return (x.rowwise() - mean).array().rowwise() / sd.array();
    }
};

inline void check_binary(const std::vector<int>& y, std::size_t rows) {
    if (y.size() != rows) throw std::invalid_argument("probe: label count does not match feature rows");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw std::invalid_argument("probe: labels must be 0/1");
        pos += v;
    }
    if (pos < 2 || y.size() - pos < 2) throw std::invalid_argument("probe: need at least two samples of each class");
}

}  // namespace detail

/// Soft-margin linear SVM by per-sample subgradient descent on hinge + L2, fitted on standardized
/// features and mapped back to raw feature space with a unit-norm normal.
inline ProbeEntry fit_probe(const Eigen::MatrixXd& x, const std::vector<int>& y, const ProbeConfig& cfg) {
    detail::check_binary(y, static_cast<std::size_t>(x.rows()));
    const auto st = detail::Standardizer::fit(x);
    const Eigen::MatrixXd z = st.apply(x);
    const std::size_t n = static_cast<std::size_t>(z.rows());
    Eigen::VectorXd w = Eigen::VectorXd::Zero(z.cols());
    double b = 0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, {0x5B});
    std::size_t t = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t i = n - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(i + 1)))]);
        for (std::size_t i : order) {
            const double eta = cfg.step / std::sqrt(static_cast<double>(++t));
            const double yi = y[i] ? 1.0 : -1.0;
            const auto row = z.row(static_cast<Eigen::Index>(i));
            const double margin = yi * (row.dot(w) + b);
            w *= 1.0 - eta * cfg.penalty;
            if (margin < 1.0) {
                w += eta * yi * row.transpose();
                b += eta * yi;
            }
        }
    }
    Eigen::VectorXd w_raw = w.array() / st.sd.transpose().array();
    double b_raw = b - w_raw.dot(st.mean.transpose());
    const double norm = w_raw.norm();
    ProbeEntry out;
    out.epochs = cfg.epochs;
    out.penalty = cfg.penalty;
    if (norm > 0) {
        w_raw /= norm;
        b_raw /= norm;
    } else {
        w_raw.setZero();
        w_raw(0) = 1.0;
        b_raw = 0;
    }
    // Stored as f32 in checkpoints; rounding here keeps save/load exact.
    for (Eigen::Index i = 0; i < w_raw.size(); ++i) out.w.push_back(static_cast<float>(w_raw(i)));
    out.bias = b_raw;
    return out;
}

inline double probe_accuracy(const ProbeEntry& p, const Eigen::MatrixXd& x, const std::vector<int>& y) {
    if (static_cast<std::size_t>(x.rows()) != y.size() || y.empty())
        throw std::invalid_argument("probe_accuracy: label count mismatch");
    std::size_t hit = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::RowVectorXd r = x.row(i);
        const double d = p.decision(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
        hit += (d > 0) == (y[static_cast<std::size_t>(i)] == 1);
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

/// Fits on a seeded random (1 − holdout) share and reports accuracy on the rest.
inline ProbeEntry train_probe(const Eigen::MatrixXd& x, const std::vector<int>& y, const ProbeConfig& cfg = {}) {
    detail::check_binary(y, static_cast<std::size_t>(x.rows()));
    const std::size_t n = y.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, {0x401D});
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(i + 1)))]);
    const std::size_t n_eval = std::clamp<std::size_t>(static_cast<std::size_t>(std::round(cfg.holdout * n)), 1, n - 4);
    auto take = [&](std::size_t from, std::size_t to, Eigen::MatrixXd& xs, std::vector<int>& ys) {
        xs.resize(static_cast<Eigen::Index>(to - from), x.cols());
        ys.clear();
        for (std::size_t k = from; k < to; ++k) {
            xs.row(static_cast<Eigen::Index>(k - from)) = x.row(static_cast<Eigen::Index>(order[k]));
            ys.push_back(y[order[k]]);
        }
    };
    Eigen::MatrixXd xf, xe;
    std::vector<int> yf, ye;
    take(0, n - n_eval, xf, yf);
    take(n - n_eval, n, xe, ye);
    ProbeEntry p = fit_probe(xf, yf, cfg);
    p.accuracy = probe_accuracy(p, xe, ye);
    return p;
}

struct IdentityProbeConfig {
    std::size_t epochs = 500;
    double lr = 0.5;
    double penalty = 1e-4;
};

/// Multiclass softmax regression trained by full-batch gradient descent on standardized features.
struct IdentityProbe {
    detail::Standardizer st;
    Eigen::MatrixXd W;  // (d, K)
    Eigen::RowVectorXd b;

    std::vector<int> predict(const Eigen::MatrixXd& x) const {
        const Eigen::MatrixXd logits = (st.apply(x) * W).rowwise() + b;
        std::vector<int> out(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            Eigen::Index k;
            logits.row(i).maxCoeff(&k);
            out[static_cast<std::size_t>(i)] = static_cast<int>(k);
        }
        return out;
    }

    double accuracy(const Eigen::MatrixXd& x, const std::vector<int>& labels) const {
        const auto pred = predict(x);
        if (pred.size() != labels.size() || pred.empty()) throw std::invalid_argument("identity probe: label mismatch");
        std::size_t hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
        return static_cast<double>(hit) / static_cast<double>(pred.size());
    }
};

inline IdentityProbe fit_identity_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels, int n_classes,
                                        const IdentityProbeConfig& cfg = {}) {
    if (static_cast<std::size_t>(x.rows()) != labels.size() || labels.empty())
        throw std::invalid_argument("identity probe: label count mismatch");
    IdentityProbe p;
    p.st = detail::Standardizer::fit(x);
    const Eigen::MatrixXd z = p.st.apply(x);
    const Eigen::Index n = z.rows(), k = n_classes;
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        if (l < 0 || l >= n_classes) throw std::out_of_range("identity probe: label out of range");
        y(i, l) = 1.0;
    }
    p.W = Eigen::MatrixXd::Zero(z.cols(), k);
    p.b = Eigen::RowVectorXd::Zero(k);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        Eigen::MatrixXd s = (z * p.W).rowwise() + p.b;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mx = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - mx).exp();
            s.row(i) /= s.row(i).sum();
        }
        const Eigen::MatrixXd d = (s - y) / static_cast<double>(n);
        p.W -= cfg.lr * (z.transpose() * d + cfg.penalty * p.W);
        p.b -= cfg.lr * d.colwise().sum();
    }
    return p;
}

struct ProbeRow {
    std::string attribute;
    double acc_T = 0, acc_P = 0, acc_C = 0;
};

/// Probe accuracies per attribute and feature source, plus identity-classification accuracies.
struct ProbeTable {
    std::vector<ProbeRow> rows;
    double identity_T = 0, identity_P = 0, identity_C = 0;
};

inline void to_json(nlohmann::json& j, const ProbeTable& t) {
    j["attributes"] = nlohmann::json::array();
    for (const auto& r : t.rows)
        j["attributes"].push_back({{"attribute", r.attribute},
                                   {"acc_T", r.acc_T},
                                   {"acc_P", r.acc_P},
                                   {"acc_C", r.acc_C},
                                   {"diff_T_minus_P", r.acc_T - r.acc_P}});
    j["identity"] = {{"acc_T", t.identity_T}, {"acc_P", t.identity_P}, {"acc_C", t.identity_C}};
}

inline std::string probe_table_csv(const ProbeTable& t) {
    std::string s = "attribute,acc_T,acc_P,acc_C,diff_T_minus_P\n";
    auto line = [&](const std::string& name, double a, double b, double c) {
        s += name + "," + std::to_string(a) + "," + std::to_string(b) + "," + std::to_string(c) + "," +
             std::to_string(a - b) + "\n";
    };
    for (const auto& r : t.rows) line(r.attribute, r.acc_T, r.acc_P, r.acc_C);
    line("identity", t.identity_T, t.identity_P, t.identity_C);
    return s;
}

/// Probes are fitted on training-split features and scored on test-split features.
inline ProbeTable probe_suite(const FeatureSet& train_fs, const FeatureSet& test_fs, const Dataset& ds,
                              const ProbeConfig& cfg = {}, const IdentityProbeConfig& icfg = {}) {
    const auto tr_labels = binarize_factors(ds, train_fs.samples);
    const auto te_labels = binarize_factors(ds, test_fs.samples);
    const Eigen::MatrixXd trC = train_fs.concat(), teC = test_fs.concat();
    ProbeTable t;
    for (std::size_t a = 0; a < tr_labels.names.size(); ++a) {
        ProbeRow r;
        r.attribute = tr_labels.names[a];
        r.acc_T = probe_accuracy(fit_probe(train_fs.T, tr_labels.labels[a], cfg), test_fs.T, te_labels.labels[a]);
        r.acc_P = probe_accuracy(fit_probe(train_fs.P, tr_labels.labels[a], cfg), test_fs.P, te_labels.labels[a]);
        r.acc_C = probe_accuracy(fit_probe(trC, tr_labels.labels[a], cfg), teC, te_labels.labels[a]);
        t.rows.push_back(r);
    }
    const int k = ds.manifest.n_id;
    t.identity_T = fit_identity_probe(train_fs.T, train_fs.identity, k, icfg).accuracy(test_fs.T, test_fs.identity);
    t.identity_P = fit_identity_probe(train_fs.P, train_fs.identity, k, icfg).accuracy(test_fs.P, test_fs.identity);
    t.identity_C = fit_identity_probe(trC, train_fs.identity, k, icfg).accuracy(teC, test_fs.identity);
    return t;
}

/// Editing probes: one per factor attribute and branch, fitted on the given features, with
/// held-out accuracy measured on `eval_fs`.
inline ProbeModel train_edit_probes(const FeatureSet& fit_fs, const FeatureSet& eval_fs, const Dataset& ds,
                                    const ProbeConfig& cfg = {}) {
    const auto fl = binarize_factors(ds, fit_fs.samples);
    const auto el = binarize_factors(ds, eval_fs.samples);
    ProbeModel pm;
    for (Branch b : {Branch::P, Branch::T}) {
        for (std::size_t a = 0; a < fl.names.size(); ++a) {
            ProbeEntry e = fit_probe(fit_fs.of(b), fl.labels[a], cfg);
            e.attribute = fl.names[a];
            e.branch = b;
            e.accuracy = probe_accuracy(e, eval_fs.of(b), el.labels[a]);
            pm.entries.push_back(std::move(e));
        }
    }
    return pm;
}

}  // namespace d2ae
