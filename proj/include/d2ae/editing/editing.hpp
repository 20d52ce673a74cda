#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "d2ae/analytics/probe.hpp"
#include "d2ae/model/d2ae_model.hpp"

namespace d2ae {

class UnknownAttributeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class BetaRangeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// "smile" and "smile@P" address the f_P probe, "smile@T" the f_T probe.
inline std::pair<std::string, Branch> parse_edit_name(const std::string& name) {
    const auto at = name.rfind('@');
    if (at == std::string::npos) return {name, Branch::P};
    const std::string tag = name.substr(at + 1);
    if (tag == "P") return {name.substr(0, at), Branch::P};
    if (tag == "T") return {name.substr(0, at), Branch::T};
    throw UnknownAttributeError("unknown branch suffix in '" + name + "'");
}

inline std::string edit_name(const ProbeEntry& e) {
    return e.branch == Branch::P ? e.attribute : e.attribute + "@T";
}

/// 3·sqrt(Σ w_i² σ_i²) with the branch's running σ: the ±3σ extent of the learned feature
/// distribution along w.
template <typename T>
double alpha_max(const ProbeEntry& e, const D2AEModel<T>& m) {
    const Tensor<T>& sigma = m.sigma(e.branch);
    if (sigma.size() != e.w.size()) throw std::invalid_argument("alpha_max: probe and model dimensions differ");
    double v = 0;
    for (std::size_t i = 0; i < e.w.size(); ++i) v += e.w[i] * e.w[i] * sigma[i] * sigma[i];
    return 3.0 * std::sqrt(v);
}

struct AttributeEdit {
    std::string attribute;  // edit name, see parse_edit_name
    double alpha = 0;
};

template <typename T>
struct IdentityTarget {
    std::vector<T> f_T;
    double beta = 1.0;
};

template <typename T>
struct EditRequest {
    std::vector<AttributeEdit> edits;
    std::optional<IdentityTarget<T>> identity;

    bool empty() const { return edits.empty() && !identity; }
};

struct AppliedEdit {
    std::string attribute;
    Branch branch = Branch::P;
    double requested = 0;
    double applied = 0;
    double alpha_max = 0;
    bool clamped = false;
};

struct EditProvenance {
    std::vector<AppliedEdit> edits;
    std::optional<double> beta;
    std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const EditProvenance& p) {
    j["edits"] = nlohmann::json::array();
    for (const auto& e : p.edits)
        j["edits"].push_back({{"attribute", e.attribute},
                              {"branch", std::string(branch_name(e.branch))},
                              {"requested_alpha", e.requested},
                              {"alpha", e.applied},
                              {"alpha_max", e.alpha_max},
                              {"clamped", e.clamped}});
    j["beta"] = p.beta ? nlohmann::json(*p.beta) : nlohmann::json(nullptr);
    j["warnings"] = p.warnings;
}

/// Resolves and clamps the requested edits; throws UnknownAttributeError for missing probes.
template <typename T>
std::vector<AppliedEdit> resolve_edits(const D2AEModel<T>& m, const ProbeModel& probes,
                                       const std::vector<AttributeEdit>& edits, std::vector<std::string>* warnings) {
    std::vector<AppliedEdit> out;
    for (const auto& e : edits) {
        if (!std::isfinite(e.alpha)) throw std::invalid_argument("edit '" + e.attribute + "': alpha is not finite");
        auto [attr, branch] = parse_edit_name(e.attribute);
        const ProbeEntry* p = probes.find(attr, branch);
        if (!p) throw UnknownAttributeError("unknown attribute '" + e.attribute + "'");
        AppliedEdit a;
        a.attribute = e.attribute;
        a.branch = branch;
        a.requested = e.alpha;
        a.alpha_max = alpha_max(*p, m);
        a.applied = std::clamp(e.alpha, -a.alpha_max, a.alpha_max);
        a.clamped = a.applied != e.alpha;
        if (a.clamped && warnings)
            warnings->push_back("alpha for '" + e.attribute + "' clamped from " + std::to_string(e.alpha) + " to " +
                                std::to_string(a.applied));
        out.push_back(a);
    }
    return out;
}

/// Σ α_n w_n for one branch, accumulated in double in a canonical (name) order so the result
/// does not depend on the order of the request.
inline std::vector<double> edit_delta(const ProbeModel& probes, std::vector<AppliedEdit> applied, Branch b,
                                      std::size_t dim) {
    std::stable_sort(applied.begin(), applied.end(),
                     [](const AppliedEdit& x, const AppliedEdit& y) { return x.attribute < y.attribute; });
    std::vector<double> d(dim, 0.0);
    for (const auto& a : applied) {
        if (a.branch != b) continue;
        const ProbeEntry* p = probes.find(parse_edit_name(a.attribute).first, b);
        if (!p || p->w.size() != dim) throw std::invalid_argument("edit '" + a.attribute + "': dimension mismatch");
        for (std::size_t i = 0; i < dim; ++i) d[i] += a.applied * p->w[i];
    }
    return d;
}

/// f* = f + Σ α_n w_n on the branch each probe belongs to; the other branch is copied unchanged.
template <typename T>
FeaturePair<T> edit_attribute(const D2AEModel<T>& m, const FeaturePair<T>& fp, const ProbeModel& probes,
                              const std::vector<AttributeEdit>& edits, EditProvenance* prov = nullptr) {
    std::vector<std::string> warnings;
    const auto applied = resolve_edits(m, probes, edits, &warnings);
    FeaturePair<T> out = fp;
    for (Branch b : {Branch::T, Branch::P}) {
        bool any = false;
        for (const auto& a : applied) any = any || a.branch == b;
        if (!any) continue;
        auto& f = out.of(b);
        const auto d = edit_delta(probes, applied, b, f.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(f[i] + d[i]);
    }
    if (prov) {
        prov->edits.insert(prov->edits.end(), applied.begin(), applied.end());
        prov->warnings.insert(prov->warnings.end(), warnings.begin(), warnings.end());
    }
    return out;
}

/// (β f_T^A + (1 − β) f_T^B, f_P^A).
template <typename T>
FeaturePair<T> identity_interpolate(const FeaturePair<T>& a, const std::vector<T>& f_T_b, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw BetaRangeError("beta must lie in [0, 1], got " + std::to_string(beta));
    if (f_T_b.size() != a.f_T.size()) throw std::invalid_argument("identity_interpolate: f_T lengths differ");
    FeaturePair<T> out = a;
    if (beta == 1.0) return out;
    if (beta == 0.0) {
        out.f_T = f_T_b;
        return out;
    }
    for (std::size_t i = 0; i < out.f_T.size(); ++i)
        out.f_T[i] = static_cast<T>(beta * a.f_T[i] + (1.0 - beta) * f_T_b[i]);
    return out;
}

/// (f_T^B, f_P^A).
template <typename T>
FeaturePair<T> identity_swap(const FeaturePair<T>& a, const FeaturePair<T>& b) {
    if (a.f_T.size() != b.f_T.size()) throw std::invalid_argument("identity_swap: f_T lengths differ");
    return {b.f_T, a.f_P};
}

template <typename T>
struct EditResult {
    Tensor<T> image;
    FeaturePair<T> features;
    EditProvenance provenance;
};

/// encode → identity interpolation (if requested) → attribute edits → decode.
template <typename T>
EditResult<T> render_edit(const D2AEModel<T>& m, const ProbeModel& probes, const Tensor<T>& image,
                          const EditRequest<T>& req) {
    EditResult<T> r;
    r.features = encode(m, image);
    if (req.identity) {
        r.features = identity_interpolate(r.features, req.identity->f_T, req.identity->beta);
        r.provenance.beta = req.identity->beta;
    }
    if (!req.edits.empty()) r.features = edit_attribute(m, r.features, probes, req.edits, &r.provenance);
    r.image = decode(m, r.features);
    return r;
}

}  // namespace d2ae
