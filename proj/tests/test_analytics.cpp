#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "test_support.hpp"

using namespace d2ae;
using namespace d2ae::testing;

namespace {

// Exhaustive threshold enumeration, written independently of verification_roc.
struct Brute {
    double accuracy = 0;
    double tpr_at(double target) const { return tpr_at_fpr.at(target); }
    std::map<double, double> tpr_at_fpr;
};

Brute brute_force(const std::vector<double>& same, const std::vector<double>& diff, const std::vector<double>& fprs) {
    std::vector<double> th(same);
    th.insert(th.end(), diff.begin(), diff.end());
    th.push_back(std::numeric_limits<double>::infinity());
    Brute b;
    for (double t : fprs) b.tpr_at_fpr[t] = 0;
    for (double t : th) {
        double tp = 0, tn = 0, fp = 0;
        for (double s : same) tp += s >= t;
        for (double s : diff) (s >= t ? fp : tn) += 1;
        b.accuracy = std::max(b.accuracy, (tp + tn) / static_cast<double>(same.size() + diff.size()));
        const double fpr = fp / diff.size(), tpr = tp / same.size();
        for (double target : fprs)
            if (fpr <= target) b.tpr_at_fpr[target] = std::max(b.tpr_at_fpr[target], tpr);
    }
    return b;
}

Eigen::MatrixXd gaussian_matrix(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng r(seed);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = nd(r);
    return x;
}

}  // namespace

TEST(Cosine, ClosedForms) {
    const std::vector<double> v{0.3, -1.2, 2.0};
    EXPECT_NEAR(cosine_similarity(v, v), 1.0, 1e-15);
    EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 3}), 0.0);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 1}), 0.70711, 1e-5);
    EXPECT_THROW(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 1}), std::invalid_argument);
    EXPECT_THROW(cosine_similarity(std::vector<double>{1}, std::vector<double>{1, 1}), std::invalid_argument);
}

TEST(Roc, HandExample) {
    const std::vector<double> same{0.9, 0.8}, diff{0.4, 0.95};
    const auto r = verification_roc(same, diff, {0.5});
    EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
    ASSERT_EQ(r.tpr_at.size(), 1u);
    EXPECT_DOUBLE_EQ(r.tpr_at[0].tpr, 1.0);
    EXPECT_DOUBLE_EQ(r.tpr_at[0].threshold, 0.8);
}

TEST(Roc, PerfectSeparation) {
    const auto r = verification_roc({0.9, 0.8, 0.7}, {0.1, 0.2}, {0.0, 0.01, 0.5});
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    for (const auto& t : r.tpr_at) EXPECT_DOUBLE_EQ(t.tpr, 1.0);
}

TEST(Roc, MatchesBruteForceAndIsMonotone) {
    Rng r(21);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<double> same, diff;
        const int ns = 1 + trial * 7 % 300, nd = 1 + trial * 13 % 400;
        // Coarse rounding forces ties.
        for (int i = 0; i < ns; ++i) same.push_back(std::round(uniform(r, 0.2, 1.0) * 40) / 40);
        for (int i = 0; i < nd; ++i) diff.push_back(std::round(uniform(r, 0.0, 0.8) * 40) / 40);
        const std::vector<double> fprs{0.0, 0.01, 0.1, 0.5};
        const auto rep = verification_roc(same, diff, fprs);
        const auto bf = brute_force(same, diff, fprs);
        EXPECT_DOUBLE_EQ(rep.accuracy, bf.accuracy);
        for (const auto& t : rep.tpr_at) EXPECT_DOUBLE_EQ(t.tpr, bf.tpr_at(t.target_fpr));
        for (std::size_t i = 1; i < rep.roc.size(); ++i) {
            EXPECT_GE(rep.roc[i].fpr, rep.roc[i - 1].fpr);
            EXPECT_GE(rep.roc[i].tpr, rep.roc[i - 1].tpr);
        }
        EXPECT_DOUBLE_EQ(rep.roc.back().fpr, 1.0);
        EXPECT_DOUBLE_EQ(rep.roc.back().tpr, 1.0);
    }
}

TEST(Roc, RejectsEmptyOrNonFinite) {
    EXPECT_THROW(verification_roc({}, {0.1}), std::invalid_argument);
    EXPECT_THROW(verification_roc({std::nan("")}, {0.1}), std::invalid_argument);
}

TEST(Probe, SeparableClustersAndUnitNorm) {
    Rng r(3);
    Eigen::MatrixXd x(400, 2);
    std::vector<int> y(400);
    for (int i = 0; i < 400; ++i) {
        y[i] = i % 2;
        x(i, 0) = (y[i] ? 2.0 : -2.0) + uniform(r, -1, 1);
        x(i, 1) = uniform(r, -5, 5);
    }
    const ProbeEntry p = train_probe(x, y);
    EXPECT_DOUBLE_EQ(p.accuracy, 1.0);
    double n2 = 0;
    for (double v : p.w) n2 += v * v;
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-6);
    EXPECT_GT(p.w[0], 0.9);
    EXPECT_EQ(p.epochs, 200u);
    EXPECT_DOUBLE_EQ(p.penalty, 1e-3);
}

TEST(Probe, ShuffledLabelsAreChance) {
    const Eigen::MatrixXd x = gaussian_matrix(1000, 4, 5);
    Rng r(6);
    std::vector<int> y(1000);
    for (auto& v : y) v = uniform(r, 0, 1) < 0.5;
    ProbeConfig cfg;
    cfg.holdout = 0.5;
    EXPECT_NEAR(train_probe(x, y, cfg).accuracy, 0.5, 0.05);
}

TEST(Probe, SeededDeterministic) {
    const Eigen::MatrixXd x = gaussian_matrix(200, 3, 7);
    std::vector<int> y(200);
    for (int i = 0; i < 200; ++i) y[i] = x(i, 0) + 0.3 * x(i, 2) > 0;
    const auto a = train_probe(x, y), b = train_probe(x, y);
    EXPECT_EQ(a.w, b.w);
    EXPECT_EQ(a.bias, b.bias);
}

TEST(Probe, RejectsSingleClass) {
    const Eigen::MatrixXd x = gaussian_matrix(20, 2, 8);
    EXPECT_THROW(train_probe(x, std::vector<int>(20, 1)), std::invalid_argument);
    EXPECT_THROW(train_probe(x, std::vector<int>(19, 1)), std::invalid_argument);
}

TEST(Probe, JsonRoundTrip) {
    ProbeModel m;
    ProbeEntry e;
    e.attribute = "smile";
    e.branch = Branch::P;
    e.w = {0.6, 0.8};
    e.bias = -0.25;
    e.accuracy = 0.9;
    m.entries.push_back(e);
    const ProbeModel back = nlohmann::json(m).get<ProbeModel>();
    ASSERT_EQ(back.entries.size(), 1u);
    EXPECT_EQ(back.entries[0].w, e.w);
    EXPECT_NE(back.find("smile", Branch::P), nullptr);
    EXPECT_EQ(back.find("smile", Branch::T), nullptr);
    EXPECT_DOUBLE_EQ(back.entries[0].decision(std::vector<double>{1, 1}), 1.15);
}

TEST(IdentityProbe, LearnsSeparableClasses) {
    Rng r(9);
    Eigen::MatrixXd x(300, 3);
    std::vector<int> y(300);
    for (int i = 0; i < 300; ++i) {
        y[i] = i % 3;
        for (int j = 0; j < 3; ++j) x(i, j) = (j == y[i] ? 3.0 : 0.0) + uniform(r, -0.5, 0.5);
    }
    EXPECT_DOUBLE_EQ(fit_identity_probe(x, y, 3).accuracy(x, y), 1.0);
    y[0] = 5;
    EXPECT_THROW(fit_identity_probe(x, y, 3), std::out_of_range);
}

TEST(Gaussianity, NormalBeatsUniform) {
    const Eigen::MatrixXd g = gaussian_matrix(10000, 1, 10);
    Rng r(11);
    Eigen::VectorXd u(10000);
    for (auto& v : u) v = uniform(r, 0, 1);
    const auto sg = gaussianity_of(g.col(0)), su = gaussianity_of(u);
    EXPECT_EQ(sg.bins, 50u);
    EXPECT_GE(sg.adj_r2, 0.95);
    EXPECT_LT(su.adj_r2, sg.adj_r2);
    EXPECT_LE(sg.adj_r2, 1.0);
}

TEST(Gaussianity, ZeroVarianceIsUndefinedAndSmallSamplesThrow) {
    Eigen::MatrixXd x = gaussian_matrix(200, 2, 12);
    x.col(1).setConstant(3.0);
    const auto g = channel_gaussianity(x);
    EXPECT_TRUE(g[0].defined);
    EXPECT_FALSE(g[1].defined);
    const auto s = gaussianity_summary(g);
    EXPECT_EQ(s["undefined"], 1);
    EXPECT_TRUE(s["adj_r2"][1].is_null());
    EXPECT_THROW(gaussianity_of(Eigen::VectorXd::Zero(99)), std::invalid_argument);
}

TEST(Correlation, IndependentChannelsAndStructure) {
    const Eigen::MatrixXd a = gaussian_matrix(10000, 3, 13), b = gaussian_matrix(10000, 3, 14);
    const auto r = channel_correlation(a, b);
    ASSERT_EQ(r.rho.rows(), 6);
    for (Eigen::Index i = 0; i < 6; ++i)
        for (Eigen::Index j = 0; j < 6; ++j) {
            EXPECT_DOUBLE_EQ(r.rho(i, j), r.rho(j, i));
            if (i == j) EXPECT_EQ(r.rho(i, j), 1.0);
            else EXPECT_LT(std::abs(r.rho(i, j)), 0.05);
        }
    EXPECT_EQ(std::accumulate(r.histogram.begin(), r.histogram.end(), std::size_t{0}), 15u);
    EXPECT_DOUBLE_EQ(r.fraction_below_0_3, 1.0);
}

TEST(Correlation, CopiedChannelAndConstantChannel) {
    Eigen::MatrixXd a = gaussian_matrix(500, 2, 15), b(500, 2);
    b.col(0) = -2.0 * a.col(0);
    b.col(1).setConstant(1.0);
    const auto r = channel_correlation(a, b);
    EXPECT_NEAR(r.rho(0, 2), -1.0, 1e-12);
    EXPECT_FALSE(r.defined[3]);
    EXPECT_TRUE(std::isnan(r.rho(3, 0)));
    EXPECT_EQ(correlation_summary(r)["undefined_channels"], 1);
    EXPECT_THROW(channel_correlation(gaussian_matrix(50, 1, 1), gaussian_matrix(50, 1, 2)), std::invalid_argument);
}

TEST(Embed, RecoversTwoDimensionalData) {
    Rng r(16);
    Eigen::MatrixXd x(50, 2);
    for (Eigen::Index i = 0; i < 50; ++i) {
        x(i, 0) = uniform(r, -10, 10);
        x(i, 1) = uniform(r, -1, 1);
    }
    const Eigen::MatrixXd e = embed_2d(x);
    ASSERT_EQ(e.rows(), 50);
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    for (Eigen::Index i = 0; i < 50; ++i) {
        EXPECT_NEAR(std::abs(e(i, 0)), std::abs(c(i, 0)), 1e-2 * 10);
    }
    // Pairwise distances of 2-D data are preserved exactly.
    for (Eigen::Index i = 1; i < 50; ++i)
        EXPECT_NEAR((e.row(i) - e.row(0)).norm(), (x.row(i) - x.row(0)).norm(), 1e-9);
}

TEST(Embed, PcaBeatsRandomProjections) {
    Eigen::MatrixXd x = gaussian_matrix(40, 5, 17);
    x.col(0) *= 4;
    x.col(3) *= 2;
    auto spread = [](const Eigen::MatrixXd& y) {
        double s = 0;
        for (Eigen::Index i = 0; i < y.rows(); ++i)
            for (Eigen::Index j = i + 1; j < y.rows(); ++j) s += (y.row(i) - y.row(j)).squaredNorm();
        return s;
    };
    const double best = spread(embed_2d(x));
    for (int t = 0; t < 200; ++t) {
        const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(5, 2, 100 + t));
        const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(5, 2);
        EXPECT_LE(spread(x * q), best + 1e-9);
    }
}

TEST(Embed, RankDeficientPadsZeros) {
    Eigen::MatrixXd x(5, 3);
    for (Eigen::Index i = 0; i < 5; ++i) x.row(i) << i, 2.0 * i, -1.0 * i;
    const Eigen::MatrixXd e = embed_2d(x);
    for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(e(i, 1), 0.0);
    EXPECT_THROW(embed_2d(Eigen::MatrixXd::Zero(2, 3)), std::invalid_argument);
}

TEST(Residual, ZeroAlphaAndShape) {
    D2AEModel<float> m(tiny_config());
    const Dataset ds = generate(5, 3, 6, 16);
    const FeatureSet fs = extract_features(m, ds, Split::Train);
    const auto mean = mean_features<float>(fs);
    const std::vector<double> w(3, 1.0 / std::sqrt(3.0));
    const Tensor<float> zero = residual_map(m, mean, Branch::P, w, 0.0);
    EXPECT_EQ(zero.shape(), (Shape{3, 16, 16}));
    for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_THROW(residual_map(m, mean, Branch::T, std::vector<double>(4), 1.0), std::invalid_argument);
}

TEST(Residual, MaskedEnergyFraction) {
    Tensor<float> r(Shape{3, 2, 2});
    r[0] = 1;  // inside
    r[7] = 2;  // channel 1, pixel 3: outside
    Tensor<float> mask(Shape{2, 2});
    mask[0] = 1;
    EXPECT_DOUBLE_EQ(masked_energy_fraction(r, mask), 0.2);
    const Tensor<float> face = face_region_mask(32);
    EXPECT_EQ(face[0], 0.0f);
    EXPECT_EQ(face[16 * 32 + 16], 1.0f);
}

TEST(Features, ExtractMatchesEncode) {
    D2AEModel<float> m(tiny_config());
    const Dataset ds = generate(5, 3, 6, 16);
    const FeatureSet fs = extract_features(m, ds, Split::Test);
    ASSERT_EQ(fs.size(), ds.indices(Split::Test).size());
    const auto fp = encode(m, ds.samples[fs.samples[0]].image);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(fs.T(0, static_cast<Eigen::Index>(j)), fp.f_T[j], 1e-6);
        EXPECT_NEAR(fs.P(0, static_cast<Eigen::Index>(j)), fp.f_P[j], 1e-6);
    }
    EXPECT_EQ(fs.concat().cols(), 6);
}

TEST(Report, EvalReportHasEverySection) {
    D2AEModel<float> m(tiny_config());
    const Dataset ds = generate(5, 3, 200, 16);
    EvalConfig cfg;
    cfg.n_pairs = 200;
    cfg.probe.epochs = 5;
    cfg.identity_probe.epochs = 20;
    const auto j = eval_report(m, ds, cfg);
    for (const char* s : {"f_T", "f_P", "f_C"}) {
        EXPECT_TRUE(j["verification"][s].contains("accuracy")) << s;
        EXPECT_EQ(j["verification"][s]["tpr_at_fpr"].size(), 2u);
    }
    EXPECT_EQ(j["verification"]["n_pairs"], 200);
    EXPECT_EQ(j["probes"]["attributes"].size(), 5u);
    EXPECT_TRUE(j["probes"]["identity"].contains("acc_P"));
    EXPECT_EQ(j["gaussianity"]["f_T"]["adj_r2"].size(), 3u);
    EXPECT_TRUE(j["correlation"].contains("fraction_abs_below_0_3"));
    EXPECT_TRUE(j["test"].contains("psnr"));
}
