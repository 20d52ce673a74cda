#pragma once

#include <json.hpp>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/analytics/features.hpp"
#include "d2ae/analytics/probe.hpp"
#include "d2ae/analytics/stats.hpp"
#include "d2ae/analytics/verification.hpp"
#include "d2ae/data/dataset.hpp"
#include "d2ae/objective/train.hpp"

namespace d2ae {

struct EvalConfig {
    std::size_t n_pairs = 1000;
    std::uint64_t pair_seed = 13;
    std::vector<double> fprs{0.01, 0.1};
    ProbeConfig probe;
    IdentityProbeConfig identity_probe;
};

enum class FeatureSource { T, P, C };

inline const char* source_name(FeatureSource s) { return s == FeatureSource::T ? "f_T" : s == FeatureSource::P ? "f_P" : "f_C"; }

/// Cosine-similarity verification over pairs whose samples all appear in `fs`.
inline VerificationReport verify_pairs(const FeatureSet& fs, const std::vector<VerificationPair>& pairs,
                                       FeatureSource src, const std::vector<double>& fprs) {
    std::map<std::size_t, Eigen::Index> row;
    for (std::size_t i = 0; i < fs.samples.size(); ++i) row[fs.samples[i]] = static_cast<Eigen::Index>(i);
    const Eigen::MatrixXd x = src == FeatureSource::T ? fs.T : src == FeatureSource::P ? fs.P : fs.concat();
    std::vector<double> same, diff;
    for (const auto& p : pairs) {
        auto ia = row.find(p.a), ib = row.find(p.b);
        if (ia == row.end() || ib == row.end()) throw std::invalid_argument("verify_pairs: pair sample not in feature set");
        const Eigen::VectorXd a = x.row(ia->second), b = x.row(ib->second);
        const double s = cosine_similarity(std::span<const double>(a.data(), a.size()),
                                           std::span<const double>(b.data(), b.size()));
        (p.same ? same : diff).push_back(s);
    }
    return verification_roc(same, diff, fprs);
}

inline nlohmann::json channel_report(const FeatureSet& fs) {
    nlohmann::json j;
    j["gaussianity"] = {{"f_T", gaussianity_summary(channel_gaussianity(fs.T))},
                        {"f_P", gaussianity_summary(channel_gaussianity(fs.P))}};
    j["correlation"] = correlation_summary(channel_correlation(fs.T, fs.P));
    j["samples"] = fs.size();
    return j;
}

/// Verification, probe suite, channel Gaussianity and correlation, plus test-split
/// reconstruction and classifier metrics.
template <typename T>
nlohmann::json eval_report(const D2AEModel<T>& m, const Dataset& ds, const EvalConfig& cfg = {}) {
    const FeatureSet train_fs = extract_features(m, ds, Split::Train);
    const FeatureSet test_fs = extract_features(m, ds, Split::Test);
    const auto pairs = make_pairs(ds, cfg.n_pairs, cfg.pair_seed);
    nlohmann::json j;
    for (auto s : {FeatureSource::T, FeatureSource::P, FeatureSource::C})
        j["verification"][source_name(s)] = verify_pairs(test_fs, pairs, s, cfg.fprs);
    j["verification"]["n_pairs"] = pairs.size();
    j["probes"] = probe_suite(train_fs, test_fs, ds, cfg.probe, cfg.identity_probe);
    const nlohmann::json ch = channel_report(test_fs);
    j["gaussianity"] = ch["gaussianity"];
    j["correlation"] = ch["correlation"];
    j["test"] = evaluate_split(m, ds, Split::Test);
    return j;
}

}  // namespace d2ae
