#pragma once

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2ae {

enum class InitScheme { Uniform, Gaussian };

struct ModelConfig {
    std::size_t input_size = 32;
    std::size_t n_id = 16;
    std::size_t feat_dim_T = 32;
    std::size_t feat_dim_P = 32;
    /// Stride-2 conv stages of the shared trunk.
    std::vector<std::size_t> enc_channels{16, 32, 64, 64};
    /// Width of the conv inside each branch.
    std::size_t branch_channels = 64;
    /// Decoder widths: the FC reshapes to dec_channels[0]; one upsample between consecutive entries.
    std::vector<std::size_t> dec_channels{64, 64, 32, 16};
    double augment_momentum = 0.9;
    InitScheme init = InitScheme::Uniform;
    std::uint64_t seed = 7;

    std::size_t encoder_output_size() const { return input_size >> enc_channels.size(); }
    std::size_t decoder_base_size() const { return input_size >> (dec_channels.size() - 1); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
        if (feat_dim_T < 1 || feat_dim_P < 1) fail("feature dims must be >= 1");
        if (n_id < 2) fail("n_id must be >= 2");
        if (enc_channels.empty() || dec_channels.size() < 2) fail("need >= 1 encoder stage and >= 2 decoder widths");
        if (input_size % (std::size_t{1} << enc_channels.size()) != 0 || encoder_output_size() < 1)
            fail("input_size must be divisible by 2^(encoder stages)");
        if (input_size % (std::size_t{1} << (dec_channels.size() - 1)) != 0 || decoder_base_size() < 1)
            fail("input_size must be divisible by 2^(decoder upsamples)");
        if (!(augment_momentum >= 0.0 && augment_momentum < 1.0)) fail("augment_momentum must be in [0,1)");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"input_size", c.input_size},
         {"n_id", c.n_id},
         {"feat_dim_T", c.feat_dim_T},
         {"feat_dim_P", c.feat_dim_P},
         {"enc_channels", c.enc_channels},
         {"branch_channels", c.branch_channels},
         {"dec_channels", c.dec_channels},
         {"augment_momentum", c.augment_momentum},
         {"init", c.init == InitScheme::Uniform ? "uniform" : "gaussian"},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.input_size = j.value("input_size", d.input_size);
    c.n_id = j.value("n_id", d.n_id);
    c.feat_dim_T = j.value("feat_dim_T", d.feat_dim_T);
    c.feat_dim_P = j.value("feat_dim_P", d.feat_dim_P);
    c.enc_channels = j.value("enc_channels", d.enc_channels);
    c.branch_channels = j.value("branch_channels", d.branch_channels);
    c.dec_channels = j.value("dec_channels", d.dec_channels);
    c.augment_momentum = j.value("augment_momentum", d.augment_momentum);
    const std::string init = j.value("init", std::string("uniform"));
    if (init != "uniform" && init != "gaussian") throw std::invalid_argument("ModelConfig: unknown init '" + init + "'");
    c.init = init == "uniform" ? InitScheme::Uniform : InitScheme::Gaussian;
    c.seed = j.value("seed", d.seed);
}

}  // namespace d2ae
