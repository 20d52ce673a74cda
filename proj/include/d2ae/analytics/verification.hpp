#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace d2ae {

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) throw std::invalid_argument("cosine_similarity: zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <typename T>
double cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
    return cosine_similarity(std::span<const T>(a), std::span<const T>(b));
}

struct RocPoint {
    double threshold;  // predict "same" when score >= threshold
    double fpr;
    double tpr;
};

struct TprAtFpr {
    double target_fpr;
    double tpr;
    double threshold;
};

struct VerificationReport {
    double accuracy = 0;
    double best_threshold = 0;
    std::vector<TprAtFpr> tpr_at;
    /// Ordered by decreasing threshold, so FPR and TPR are both nondecreasing.
    std::vector<RocPoint> roc;
};

inline void to_json(nlohmann::json& j, const VerificationReport& r) {
    j["accuracy"] = r.accuracy;
    j["best_threshold"] = r.best_threshold;
    j["tpr_at_fpr"] = nlohmann::json::array();
    for (const auto& t : r.tpr_at)
        j["tpr_at_fpr"].push_back({{"fpr", t.target_fpr}, {"tpr", t.tpr}, {"threshold", t.threshold}});
    j["roc"] = nlohmann::json::array();
    for (const auto& p : r.roc) {
        // +inf is not representable in JSON; the all-reject point is reported with a null threshold.
        nlohmann::json th = std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr);
        j["roc"].push_back({{"threshold", th}, {"fpr", p.fpr}, {"tpr", p.tpr}});
    }
}

/// Threshold sweep over every distinct score plus +inf (reject all). Accuracy is the best
/// (TP+TN)/total; TPR@FPR is the largest TPR whose FPR does not exceed the target. Ties go to
/// the higher threshold.
inline VerificationReport verification_roc(std::span<const double> same, std::span<const double> diff,
                                           std::span<const double> fprs = {}) {
    if (same.empty() || diff.empty()) throw std::invalid_argument("verification_roc: empty score list");
    struct Scored {
        double s;
        bool same;
    };
    std::vector<Scored> all;
    all.reserve(same.size() + diff.size());
    for (double s : same) all.push_back({s, true});
    for (double s : diff) all.push_back({s, false});
    for (const auto& x : all)
        if (!std::isfinite(x.s)) throw std::invalid_argument("verification_roc: non-finite score");
    std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.s > b.s; });

    const double np = static_cast<double>(same.size()), nn = static_cast<double>(diff.size());
    VerificationReport r;
    r.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < all.size();) {
        const double th = all[i].s;
        for (; i < all.size() && all[i].s == th; ++i) (all[i].same ? tp : fp)++;
        r.roc.push_back({th, fp / nn, tp / np});
    }
    r.accuracy = -1;
    for (const auto& p : r.roc) {
        const double acc = (p.tpr * np + (1.0 - p.fpr) * nn) / (np + nn);
        if (acc > r.accuracy) {
            r.accuracy = acc;
            r.best_threshold = p.threshold;
        }
    }
    for (double target : fprs) {
        TprAtFpr best{target, -1.0, 0.0};
        for (const auto& p : r.roc)
            if (p.fpr <= target && p.tpr > best.tpr) {
                best.tpr = p.tpr;
                best.threshold = p.threshold;
            }
        r.tpr_at.push_back(best);
    }
    return r;
}

inline VerificationReport verification_roc(const std::vector<double>& same, const std::vector<double>& diff,
                                           const std::vector<double>& fprs = {}) {
    return verification_roc(std::span<const double>(same), std::span<const double>(diff),
                            std::span<const double>(fprs));
}

}  // namespace d2ae
