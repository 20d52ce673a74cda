#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

#include "d2ae/data/dataset.hpp"
#include "d2ae/model/d2ae_model.hpp"
#include "d2ae/objective/train.hpp"

namespace d2ae {

/// Clean features of a set of samples, one row per sample.
struct FeatureSet {
    Eigen::MatrixXd T;
    Eigen::MatrixXd P;
    std::vector<std::size_t> samples;
    std::vector<int> identity;

    Eigen::MatrixXd of(Branch b) const { return b == Branch::T ? T : P; }
    Eigen::MatrixXd concat() const {
        Eigen::MatrixXd c(T.rows(), T.cols() + P.cols());
        c << T, P;
        return c;
    }
    std::size_t size() const { return samples.size(); }
};

template <typename T>
FeatureSet extract_features(const D2AEModel<T>& m, const Dataset& ds, std::span<const std::size_t> idx,
                            std::size_t chunk = 64) {
    FeatureSet fs;
    const std::size_t nt = m.config().feat_dim_T, np = m.config().feat_dim_P;
    fs.T.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(nt));
    fs.P.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(np));
    for (std::size_t s0 = 0; s0 < idx.size(); s0 += chunk) {
        std::span<const std::size_t> part = idx.subspan(s0, std::min(chunk, idx.size() - s0));
        auto [ft, fp] = encode_batch(m, stack_images<T>(ds, part));
        for (std::size_t n = 0; n < part.size(); ++n) {
            const auto r = static_cast<Eigen::Index>(s0 + n);
            for (std::size_t j = 0; j < nt; ++j) fs.T(r, static_cast<Eigen::Index>(j)) = ft[n * nt + j];
            for (std::size_t j = 0; j < np; ++j) fs.P(r, static_cast<Eigen::Index>(j)) = fp[n * np + j];
        }
    }
    fs.samples.assign(idx.begin(), idx.end());
    for (auto i : idx) fs.identity.push_back(ds.samples.at(i).identity);
    return fs;
}

template <typename T>
FeatureSet extract_features(const D2AEModel<T>& m, const Dataset& ds, Split split) {
    const auto idx = ds.indices(split);
    return extract_features(m, ds, std::span<const std::size_t>(idx));
}

template <typename T>
FeaturePair<T> mean_features(const FeatureSet& fs) {
    if (fs.size() == 0) throw std::invalid_argument("mean_features: empty feature set");
    FeaturePair<T> out;
    const Eigen::VectorXd mt = fs.T.colwise().mean(), mp = fs.P.colwise().mean();
    for (Eigen::Index j = 0; j < mt.size(); ++j) out.f_T.push_back(static_cast<T>(mt(j)));
    for (Eigen::Index j = 0; j < mp.size(); ++j) out.f_P.push_back(static_cast<T>(mp(j)));
    return out;
}

/// decode(f̄ + alpha·w on one branch) − decode(f̄): the image change driven by one direction.
template <typename T>
Tensor<T> residual_map(const D2AEModel<T>& m, const FeaturePair<T>& mean, Branch b, std::span<const double> w,
                       double alpha) {
    if (w.size() != mean.of(b).size())
        throw std::invalid_argument("residual_map: direction length " + std::to_string(w.size()) +
                                    " does not match branch " + std::string(branch_name(b)));
    FeaturePair<T> moved = mean;
    auto& f = moved.of(b);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(f[i] + alpha * w[i]);
    Tensor<T> out = decode(m, moved);
    const Tensor<T> base = decode(m, mean);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= base[i];
    return out;
}

/// Share of a (3, S, S) residual's squared energy falling inside an (S, S) mask.
template <typename T>
double masked_energy_fraction(const Tensor<T>& residual, const Tensor<float>& mask) {
    const std::size_t plane = residual.size() / 3;
    if (mask.size() != plane) throw std::invalid_argument("masked_energy_fraction: mask size mismatch");
    double in = 0, total = 0;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
            const double e = static_cast<double>(residual[c * plane + p]) * residual[c * plane + p];
            total += e;
            if (mask[p] > 0.5f) in += e;
        }
    return total > 0 ? in / total : 0.0;
}

}  // namespace d2ae
