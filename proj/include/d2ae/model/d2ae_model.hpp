#pragma once

#include <cmath>
#include <deque>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "d2ae/autodiff/graph.hpp"
#include "d2ae/autodiff/ops.hpp"
#include "d2ae/model/config.hpp"
#include "d2ae/rng.hpp"

namespace d2ae {

enum class Branch { T, P };

inline std::string_view branch_name(Branch b) { return b == Branch::T ? "T" : "P"; }

/// Latent split of one image: identity-distilled f_T and identity-dispelled f_P.
template <typename T>
struct FeaturePair {
    std::vector<T> f_T;
    std::vector<T> f_P;

    std::vector<T> concat() const {
        std::vector<T> c = f_T;
        c.insert(c.end(), f_P.begin(), f_P.end());
        return c;
    }
    const std::vector<T>& of(Branch b) const { return b == Branch::T ? f_T : f_P; }
    std::vector<T>& of(Branch b) { return b == Branch::T ? f_T : f_P; }
    bool operator==(const FeaturePair&) const = default;
};

/// Shared conv trunk, identity-distilling and identity-dispelling branches with their identity
/// classifiers, and a conv/upsample decoder over the concatenated features.
template <typename T>
class D2AEModel {
public:
    struct Layer {
        std::size_t w = 0, b = 0;
    };
    struct Layout {
        std::vector<Layer> enc;
        Layer branch_conv[2], branch_fc[2], cls[2];
        Layer dec_fc;
        std::vector<Layer> dec_conv;
        Layer dec_final, dec_out;
    };

    explicit D2AEModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        build(&rng);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const Layout& layout() const noexcept { return layout_; }

    std::deque<Parameter<T>>& params() noexcept { return params_; }
    const std::deque<Parameter<T>>& params() const noexcept { return params_; }

    Parameter<T>& param(std::string_view name) { return params_.at(index_of(name)); }
    const Parameter<T>& param(std::string_view name) const { return params_.at(index_of(name)); }

    std::size_t index_of(std::string_view name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name() == name) return i;
        throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    }

    Tensor<T>& sigma(Branch b) { return b == Branch::T ? sigma_T : sigma_P; }
    const Tensor<T>& sigma(Branch b) const { return b == Branch::T ? sigma_T : sigma_P; }
    std::size_t feat_dim(Branch b) const { return b == Branch::T ? cfg_.feat_dim_T : cfg_.feat_dim_P; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    template <typename U>
    D2AEModel<U> cast() const {
        D2AEModel<U> out(cfg_, nullptr);
        for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i].value = params_[i].value.template cast<U>();
        out.sigma_T = sigma_T.template cast<U>();
        out.sigma_P = sigma_P.template cast<U>();
        return out;
    }

    /// Constructs the parameter table without drawing initial values (all zeros).
    D2AEModel(ModelConfig cfg, std::nullptr_t) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build(nullptr);
    }

    /// Running per-channel standard deviations used by statistical augmentation.
    Tensor<T> sigma_T;
    Tensor<T> sigma_P;

private:
    Layer add_layer(const std::string& name, ParamGroup group, Shape wshape, std::size_t fan_in, bool relu_gain,
                    Rng* rng) {
        const std::size_t out = wshape[0];
        Tensor<T> w(std::move(wshape));
        if (rng) {
            const double bound = std::sqrt((relu_gain ? 6.0 : 3.0) / static_cast<double>(fan_in));
            std::normal_distribution<double> normal(0.0, bound / std::sqrt(3.0));
            for (auto& v : w.data())
                v = static_cast<T>(cfg_.init == InitScheme::Uniform ? uniform(*rng, -bound, bound) : normal(*rng));
        }
        Layer l;
        l.w = params_.size();
        params_.emplace_back(name + ".w", group, std::move(w));
        l.b = params_.size();
        params_.emplace_back(name + ".b", group, Tensor<T>(Shape{out}));
        return l;
    }

    Layer add_conv(const std::string& name, ParamGroup g, std::size_t in, std::size_t out, std::size_t k,
                   bool relu_gain, Rng* rng) {
        return add_layer(name, g, Shape{out, in, k, k}, in * k * k, relu_gain, rng);
    }

    Layer add_fc(const std::string& name, ParamGroup g, std::size_t in, std::size_t out, bool relu_gain, Rng* rng) {
        return add_layer(name, g, Shape{out, in}, in, relu_gain, rng);
    }

    void build(Rng* rng) {
        std::size_t in = 3;
        for (std::size_t i = 0; i < cfg_.enc_channels.size(); ++i) {
            layout_.enc.push_back(
                add_conv("enc.conv" + std::to_string(i), ParamGroup::Enc, in, cfg_.enc_channels[i], 3, true, rng));
            in = cfg_.enc_channels[i];
        }
        const std::size_t trunk = in;
        const ParamGroup bgroups[2] = {ParamGroup::BranchT, ParamGroup::BranchP};
        const ParamGroup cgroups[2] = {ParamGroup::ClsT, ParamGroup::ClsP};
        const char* tags[2] = {"t", "p"};
        for (int b = 0; b < 2; ++b) {
            const std::size_t dim = b == 0 ? cfg_.feat_dim_T : cfg_.feat_dim_P;
            const std::string pre = std::string("branch_") + tags[b];
            layout_.branch_conv[b] = add_conv(pre + ".conv", bgroups[b], trunk, cfg_.branch_channels, 3, true, rng);
            layout_.branch_fc[b] = add_fc(pre + ".fc", bgroups[b], cfg_.branch_channels, dim, false, rng);
        }
        for (int b = 0; b < 2; ++b) {
            const std::size_t dim = b == 0 ? cfg_.feat_dim_T : cfg_.feat_dim_P;
            layout_.cls[b] = add_fc(std::string("cls_") + tags[b], cgroups[b], dim, cfg_.n_id, false, rng);
        }
        const auto& dc = cfg_.dec_channels;
        const std::size_t base = cfg_.decoder_base_size();
        layout_.dec_fc =
            add_fc("dec.fc", ParamGroup::Dec, cfg_.feat_dim_T + cfg_.feat_dim_P, dc[0] * base * base, true, rng);
        for (std::size_t i = 1; i < dc.size(); ++i)
            layout_.dec_conv.push_back(
                add_conv("dec.conv" + std::to_string(i - 1), ParamGroup::Dec, dc[i - 1], dc[i], 3, true, rng));
        layout_.dec_final = add_conv("dec.final", ParamGroup::Dec, dc.back(), dc.back(), 3, true, rng);
        layout_.dec_out = add_conv("dec.out", ParamGroup::Dec, dc.back(), 3, 1, false, rng);
        sigma_T = Tensor<T>(Shape{cfg_.feat_dim_T});
        sigma_P = Tensor<T>(Shape{cfg_.feat_dim_P});
    }

    template <typename U>
    friend class D2AEModel;

    ModelConfig cfg_;
    std::deque<Parameter<T>> params_;
    Layout layout_;
};

/// Model parameters as graph leaves.
template <typename T>
struct BoundParams {
    std::vector<Var<T>> vars;
    Var<T> operator[](std::size_t i) const { return vars[i]; }
};

/// Differentiable binding (when the graph records).
template <typename T>
BoundParams<T> bind(D2AEModel<T>& m, Graph<T>& g) {
    BoundParams<T> b;
    for (auto& p : m.params()) b.vars.push_back(g.param(p));
    return b;
}

/// Read-only binding; the model is never touched by the graph.
template <typename T>
BoundParams<T> bind(const D2AEModel<T>& m, Graph<T>& g) {
    BoundParams<T> b;
    for (const auto& p : m.params()) b.vars.push_back(g.view(p.value));
    return b;
}

namespace detail {

template <typename T>
Var<T> conv_layer(const BoundParams<T>& p, typename D2AEModel<T>::Layer l, Var<T> x, std::size_t stride, bool act) {
    Var<T> y = add_bias(conv2d(x, p[l.w], stride), p[l.b]);
    return act ? relu(y) : y;
}

template <typename T>
Var<T> fc_layer(const BoundParams<T>& p, typename D2AEModel<T>::Layer l, Var<T> x) {
    return add_bias(matmul(x, p[l.w], true), p[l.b]);
}

}  // namespace detail

/// Shared trunk activation for a batch of images (N, 3, S, S).
template <typename T>
Var<T> encode_trunk(const D2AEModel<T>& m, const BoundParams<T>& p, Var<T> x) {
    const auto& c = m.config();
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != c.input_size || s[3] != c.input_size)
        throw ShapeError("encode: expected (N,3," + std::to_string(c.input_size) + "," +
                         std::to_string(c.input_size) + "), got " + shape_str(s));
    Var<T> h = x;
    for (const auto& l : m.layout().enc) h = detail::conv_layer(p, l, h, 2, true);
    return h;
}

template <typename T>
Var<T> branch_features(const D2AEModel<T>& m, const BoundParams<T>& p, Var<T> trunk, Branch b) {
    const int k = b == Branch::T ? 0 : 1;
    Var<T> h = detail::conv_layer(p, m.layout().branch_conv[k], trunk, 1, true);
    return detail::fc_layer(p, m.layout().branch_fc[k], global_avg_pool(h));
}

template <typename T>
Var<T> classifier_logits(const D2AEModel<T>& m, const BoundParams<T>& p, Var<T> f, Branch b) {
    if (f.shape().size() != 2 || f.shape()[1] != m.feat_dim(b))
        throw ShapeError("classify: feature shape " + shape_str(f.shape()) + " does not match branch " +
                         std::string(branch_name(b)));
    return detail::fc_layer(p, m.layout().cls[b == Branch::T ? 0 : 1], f);
}

template <typename T>
Var<T> classifier_probs(const D2AEModel<T>& m, const BoundParams<T>& p, Var<T> f, Branch b) {
    return softmax(classifier_logits(m, p, f, b));
}

/// Image batch (N, 3, S, S) in (0,1) from feature batches (N, N_T) and (N, N_P).
template <typename T>
Var<T> decode_features(const D2AEModel<T>& m, const BoundParams<T>& p, Var<T> f_T, Var<T> f_P) {
    const auto& c = m.config();
    if (f_T.shape().size() != 2 || f_P.shape().size() != 2 || f_T.shape()[1] != c.feat_dim_T ||
        f_P.shape()[1] != c.feat_dim_P || f_T.shape()[0] != f_P.shape()[0])
        throw ShapeError("decode: feature shapes " + shape_str(f_T.shape()) + " and " + shape_str(f_P.shape()) +
                         " do not match the model");
    const auto& L = m.layout();
    const std::size_t n = f_T.shape()[0], base = c.decoder_base_size();
    Var<T> h = relu(detail::fc_layer(p, L.dec_fc, concat(f_T, f_P)));
    h = reshape(h, Shape{n, c.dec_channels[0], base, base});
    for (const auto& l : L.dec_conv) h = upsample_nearest(detail::conv_layer(p, l, h, 1, true), 2);
    h = detail::conv_layer(p, L.dec_final, h, 1, true);
    return sigmoid(detail::conv_layer(p, L.dec_out, h, 1, false));
}

/// Batched encoding on a frozen model: images (N,3,S,S) -> (f_T (N,N_T), f_P (N,N_P)).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> encode_batch(const D2AEModel<T>& m, const Tensor<T>& images) {
    Graph<T> g(false);
    auto p = bind(m, g);
    Var<T> trunk = encode_trunk(m, p, g.view(images));
    return {branch_features(m, p, trunk, Branch::T).value(), branch_features(m, p, trunk, Branch::P).value()};
}

template <typename T>
Tensor<T> decode_batch(const D2AEModel<T>& m, const Tensor<T>& f_T, const Tensor<T>& f_P) {
    Graph<T> g(false);
    auto p = bind(m, g);
    return decode_features(m, p, g.view(f_T), g.view(f_P)).value();
}

/// Encodes one (3, S, S) image.
template <typename T>
FeaturePair<T> encode(const D2AEModel<T>& m, const Tensor<T>& image) {
    if (image.rank() != 3) throw ShapeError("encode: expected (3,S,S), got " + shape_str(image.shape()));
    Shape s = image.shape();
    s.insert(s.begin(), 1);
    auto [ft, fp] = encode_batch(m, image.reshaped(s));
    return {ft.storage(), fp.storage()};
}

/// Decodes one feature pair to a (3, S, S) image.
template <typename T>
Tensor<T> decode(const D2AEModel<T>& m, const FeaturePair<T>& fp) {
    Tensor<T> ft(Shape{1, fp.f_T.size()}, fp.f_T);
    Tensor<T> fpp(Shape{1, fp.f_P.size()}, fp.f_P);
    Tensor<T> img = decode_batch(m, ft, fpp);
    const std::size_t s = m.config().input_size;
    return img.reshaped(Shape{3, s, s});
}

/// Identity distribution softmax(W f + b) of one branch.
template <typename T>
std::vector<T> classify(const D2AEModel<T>& m, std::span<const T> f, Branch b) {
    Graph<T> g(false);
    auto p = bind(m, g);
    Tensor<T> ft(Shape{1, f.size()}, std::vector<T>(f.begin(), f.end()));
    return classifier_probs(m, p, g.constant(std::move(ft)), b).value().storage();
}

enum class AugmentMode { Train, Eval };

/// Additive feature noise ε·σ for one batch, one tensor per branch.
template <typename T>
struct FeatureNoise {
    Tensor<T> t;
    Tensor<T> p;
};

/// Unbiased per-channel standard deviation of a (N, D) batch.
template <typename T>
Tensor<T> batch_std(const Tensor<T>& f) {
    if (f.rank() != 2) throw ShapeError("batch_std: expected (N,D), got " + shape_str(f.shape()));
    const std::size_t n = f.dim(0), d = f.dim(1);
    if (n < 2) throw std::invalid_argument("augment: batch size 1 has no standard deviation");
    Tensor<T> sd(Shape{d});
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0;
        for (std::size_t i = 0; i < n; ++i) mu += f[i * d + j];
        mu /= static_cast<double>(n);
        double ss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = f[i * d + j] - mu;
            ss += e * e;
        }
        sd[j] = static_cast<T>(std::sqrt(ss / static_cast<double>(n - 1)));
    }
    return sd;
}

/// Draws ε ~ N(0,1) per element and scales by σ: the current batch σ in train mode (which also
/// moves the running σ by EMA), the running σ in eval mode.
template <typename T>
FeatureNoise<T> draw_feature_noise(D2AEModel<T>& m, const Tensor<T>& f_T, const Tensor<T>& f_P, AugmentMode mode,
                                   Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    auto make = [&](const Tensor<T>& f, Branch b) {
        Tensor<T> sd = mode == AugmentMode::Train ? batch_std(f) : m.sigma(b);
        if (sd.size() != f.dim(1)) throw ShapeError("augment: sigma length does not match features");
        if (mode == AugmentMode::Train) {
            const double mom = m.config().augment_momentum;
            Tensor<T>& run = m.sigma(b);
            for (std::size_t j = 0; j < sd.size(); ++j)
                run[j] = static_cast<T>(mom * run[j] + (1.0 - mom) * sd[j]);
        }
        Tensor<T> noise(f.shape());
        const std::size_t d = f.dim(1);
        for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = static_cast<T>(normal(rng)) * sd[i % d];
        return noise;
    };
    FeatureNoise<T> out;
    out.t = make(f_T, Branch::T);
    out.p = make(f_P, Branch::P);
    return out;
}

/// f̃ = f + ε·σ on plain tensors.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(D2AEModel<T>& m, const Tensor<T>& f_T, const Tensor<T>& f_P,
                                        AugmentMode mode, Rng& rng) {
    FeatureNoise<T> n = draw_feature_noise(m, f_T, f_P, mode, rng);
    Tensor<T> at = f_T, ap = f_P;
    at += n.t;
    ap += n.p;
    return {std::move(at), std::move(ap)};
}

template <typename T>
struct ForwardOptions {
    AugmentMode mode = AugmentMode::Train;
    Rng* rng = nullptr;
    /// When set, used verbatim instead of drawing noise; running σ is left alone.
    const FeatureNoise<T>* fixed_noise = nullptr;
    /// Whether the confusion head sees augmented (default) or clean f_P.
    bool confusion_on_augmented = true;
    /// Whether the identity heads (y_T and the gated y_P) see augmented (default) or clean features.
    bool classify_on_augmented = true;
};

template <typename T>
struct FullForward {
    Var<T> f_T, f_P;
    Var<T> ft_aug, fp_aug;
    Var<T> y_T;        // from f̃_T
    Var<T> y_P;        // ungated, feeds the confusion loss
    Var<T> y_P_gated;  // from stop_gradient(f̃_P), feeds the adversarial identity loss
    Var<T> x_clean, x_aug;
    FeatureNoise<T> noise;
};

/// Whole training-time forward pass: both feature branches, their augmented versions, the
/// three identity heads and both reconstructions.
template <typename T>
FullForward<T> forward_full(D2AEModel<T>& m, Graph<T>& g, const BoundParams<T>& p, Var<T> x,
                            const ForwardOptions<T>& opt) {
    FullForward<T> out;
    Var<T> trunk = encode_trunk(m, p, x);
    out.f_T = branch_features(m, p, trunk, Branch::T);
    out.f_P = branch_features(m, p, trunk, Branch::P);
    if (opt.fixed_noise) {
        out.noise = *opt.fixed_noise;
    } else {
        if (!opt.rng) throw std::invalid_argument("forward_full: an rng is required unless noise is fixed");
        out.noise = draw_feature_noise(m, out.f_T.value(), out.f_P.value(), opt.mode, *opt.rng);
    }
    out.ft_aug = add(out.f_T, g.constant(out.noise.t));
    out.fp_aug = add(out.f_P, g.constant(out.noise.p));
    out.y_T = classifier_probs(m, p, opt.classify_on_augmented ? out.ft_aug : out.f_T, Branch::T);
    out.y_P = classifier_probs(m, p, opt.confusion_on_augmented ? out.fp_aug : out.f_P, Branch::P);
    out.y_P_gated = classifier_probs(m, p, stop_gradient(opt.classify_on_augmented ? out.fp_aug : out.f_P), Branch::P);
    out.x_clean = decode_features(m, p, out.f_T, out.f_P);
    out.x_aug = decode_features(m, p, out.ft_aug, out.fp_aug);
    return out;
}

}  // namespace d2ae
