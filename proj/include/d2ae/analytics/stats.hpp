#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace d2ae {

struct ChannelGaussianity {
    double adj_r2 = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;  // false for (near) zero-variance channels
    std::size_t bins = 0;
};

/// Adjusted R² of the moment-matched Gaussian density against a histogram of one channel.
inline ChannelGaussianity gaussianity_of(const Eigen::VectorXd& v) {
    const auto n = static_cast<std::size_t>(v.size());
    if (n < 100) throw std::invalid_argument("channel_gaussianity: need at least 100 samples");
    ChannelGaussianity out;
    const double mu = v.mean();
    const double var = (v.array() - mu).square().sum() / static_cast<double>(n - 1);
    out.bins = std::min<std::size_t>(50, n / 20);
    if (!(var > 1e-12)) return out;
    const double sd = std::sqrt(var);
    const std::size_t k = out.bins;
    const double lo = mu - 4 * sd, width = 8 * sd / static_cast<double>(k);
    std::vector<double> counts(k, 0.0);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double pos = (v(i) - lo) / width;
        if (pos < 0 || pos >= static_cast<double>(k)) continue;
        counts[std::min(static_cast<std::size_t>(pos), k - 1)] += 1;
    }
    auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - mu) / (sd * std::sqrt(2.0))); };
    std::vector<double> emp(k), fit(k);
    double mean_emp = 0;
    for (std::size_t b = 0; b < k; ++b) {
        emp[b] = counts[b] / (static_cast<double>(n) * width);
        fit[b] = (cdf(lo + (b + 1) * width) - cdf(lo + b * width)) / width;
        mean_emp += emp[b];
    }
    mean_emp /= static_cast<double>(k);
    double ss_res = 0, ss_tot = 0;
    for (std::size_t b = 0; b < k; ++b) {
        ss_res += (emp[b] - fit[b]) * (emp[b] - fit[b]);
        ss_tot += (emp[b] - mean_emp) * (emp[b] - mean_emp);
    }
    const double r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    out.adj_r2 = 1.0 - (1.0 - r2) * static_cast<double>(k - 1) / static_cast<double>(k - 3);
    out.defined = true;
    return out;
}

/// One score per column of a (samples × channels) matrix.
inline std::vector<ChannelGaussianity> channel_gaussianity(const Eigen::MatrixXd& features) {
    std::vector<ChannelGaussianity> out;
    for (Eigen::Index j = 0; j < features.cols(); ++j) out.push_back(gaussianity_of(features.col(j)));
    return out;
}

inline nlohmann::json gaussianity_summary(const std::vector<ChannelGaussianity>& g) {
    nlohmann::json scores = nlohmann::json::array();
    double sum = 0;
    std::size_t n = 0, above = 0;
    for (const auto& c : g) {
        scores.push_back(c.defined ? nlohmann::json(c.adj_r2) : nlohmann::json(nullptr));
        if (!c.defined) continue;
        sum += c.adj_r2;
        above += c.adj_r2 >= 0.9;
        ++n;
    }
    return {{"adj_r2", scores},
            {"mean", n ? sum / static_cast<double>(n) : 0.0},
            {"fraction_ge_0_9", n ? static_cast<double>(above) / static_cast<double>(n) : 0.0},
            {"undefined", g.size() - n}};
}

struct CorrelationReport {
    Eigen::MatrixXd rho;                // Pearson over [f_T, f_P]; undefined entries are NaN
    std::vector<bool> defined;          // per channel
    std::vector<std::size_t> histogram; // off-diagonal |rho| in 0.05-wide bins over [0, 1]
    double fraction_below_0_3 = 0;
};

inline CorrelationReport channel_correlation(const Eigen::MatrixXd& ft, const Eigen::MatrixXd& fp) {
    if (ft.rows() != fp.rows()) throw std::invalid_argument("channel_correlation: row counts differ");
    if (ft.rows() < 100) throw std::invalid_argument("channel_correlation: need at least 100 samples");
    Eigen::MatrixXd x(ft.rows(), ft.cols() + fp.cols());
    x << ft, fp;
    const Eigen::Index d = x.cols();
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = c.transpose() * c;
    CorrelationReport r;
    r.rho.resize(d, d);
    r.defined.resize(static_cast<std::size_t>(d));
    const double n = static_cast<double>(x.rows());
    for (Eigen::Index i = 0; i < d; ++i) r.defined[static_cast<std::size_t>(i)] = cov(i, i) / n > 1e-12;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i; j < d; ++j) {
            if (!r.defined[static_cast<std::size_t>(i)] || !r.defined[static_cast<std::size_t>(j)])
                r.rho(i, j) = std::numeric_limits<double>::quiet_NaN();
            else if (i == j)
                r.rho(i, j) = 1.0;
            else
                r.rho(i, j) = std::clamp(cov(i, j) / std::sqrt(cov(i, i) * cov(j, j)), -1.0, 1.0);
            r.rho(j, i) = r.rho(i, j);
        }
    r.histogram.assign(20, 0);
    std::size_t pairs = 0, below = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i + 1; j < d; ++j) {
            const double a = std::abs(r.rho(i, j));
            if (std::isnan(a)) continue;
            ++r.histogram[std::min<std::size_t>(static_cast<std::size_t>(a / 0.05), 19)];
            ++pairs;
            below += a < 0.3;
        }
    r.fraction_below_0_3 = pairs ? static_cast<double>(below) / static_cast<double>(pairs) : 0.0;
    return r;
}

inline nlohmann::json correlation_summary(const CorrelationReport& r) {
    std::size_t undefined = 0;
    for (bool b : r.defined) undefined += !b;
    return {{"fraction_abs_below_0_3", r.fraction_below_0_3},
            {"histogram_bin_width", 0.05},
            {"histogram", r.histogram},
            {"undefined_channels", undefined}};
}

/// Projection on the top two principal components. Each component's largest-magnitude loading
/// is made positive; missing components (rank < 2) are zero columns.
inline Eigen::MatrixXd embed_2d(const Eigen::MatrixXd& x) {
    if (x.rows() < 3) throw std::invalid_argument("embed_2d: need at least 3 samples");
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), 2);
    const Eigen::Index d = cov.rows();
    const double top = std::max(es.eigenvalues()(d - 1), 0.0);
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, d); ++k) {
        const double lambda = es.eigenvalues()(d - 1 - k);
        if (!(lambda > 1e-12 * std::max(top, 1e-300))) continue;
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
        Eigen::Index imax;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0) v = -v;
        out.col(k) = c * v;
    }
    return out;
}

}  // namespace d2ae
