#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

#include "test_support.hpp"

using namespace d2ae;
using namespace d2ae::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("d2ae_test_ckpt_" + name);
    fs::remove(p);
    return p;
}

// Parameters perturbed away from init, non-trivial σ and two probes.
struct Saved {
    D2AEModel<float> m{tiny_config(11)};
    ProbeModel probes;
    Saved() {
        jitter_biases(m, 5, 0.3);
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<float> u(0.1f, 2.0f);
        for (float& v : m.sigma_T.data()) v = u(rng);
        for (float& v : m.sigma_P.data()) v = u(rng);
        ProbeEntry a;
        a.attribute = "smile";
        a.branch = Branch::P;
        a.w = {0.125, -0.5, static_cast<float>(0.3)};  // probe weights are stored as f32
        a.bias = -0.25;
        a.accuracy = 0.875;
        a.epochs = 200;
        a.penalty = 1e-3;
        ProbeEntry b = a;
        b.attribute = "hue";
        b.branch = Branch::T;
        b.w = {1.0, 2.0, -3.0};
        probes.entries = {a, b};
    }
};

std::vector<std::uint8_t> slurp(const fs::path& p) { return read_file_bytes(p); }

void spit(const fs::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Offset of the element-count field of a named tensor entry.
std::size_t count_offset(const std::vector<std::uint8_t>& b, const std::string& name, std::size_t rank) {
    const auto it = std::search(b.begin(), b.end(), name.begin(), name.end());
    EXPECT_NE(it, b.end());
    return static_cast<std::size_t>(it - b.begin()) + name.size() + 1 + 4 + 8 * rank;
}

std::string load_error(const fs::path& p) {
    try {
        load_checkpoint(p);
    } catch (const CheckpointError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    Saved s;
    const auto path = temp_path("rt");
    save_checkpoint(path, s.m, s.probes, {{"epoch", 3}, {"seed", 7}});
    const Checkpoint ck = load_checkpoint(path);
    ASSERT_EQ(ck.model.params().size(), s.m.params().size());
    for (std::size_t i = 0; i < s.m.params().size(); ++i) {
        EXPECT_EQ(ck.model.params()[i].name(), s.m.params()[i].name());
        EXPECT_EQ(ck.model.params()[i].group(), s.m.params()[i].group());
        EXPECT_EQ(ck.model.params()[i].value.shape(), s.m.params()[i].value.shape());
        EXPECT_EQ(std::memcmp(ck.model.params()[i].value.ptr(), s.m.params()[i].value.ptr(),
                              s.m.params()[i].value.size() * sizeof(float)),
                  0)
            << s.m.params()[i].name();
    }
    EXPECT_EQ(ck.model.sigma_T.storage(), s.m.sigma_T.storage());
    EXPECT_EQ(ck.model.sigma_P.storage(), s.m.sigma_P.storage());
    ASSERT_EQ(ck.probes.entries.size(), 2u);
    EXPECT_EQ(ck.probes.entries[0].w, s.probes.entries[0].w);
    EXPECT_EQ(ck.probes.entries[1].w, s.probes.entries[1].w);
    EXPECT_EQ(ck.probes.entries[1].branch, Branch::T);
    EXPECT_EQ(ck.probes.entries[0].bias, -0.25);
    EXPECT_EQ(ck.probes.entries[0].accuracy, 0.875);
    EXPECT_EQ(ck.probes.entries[0].epochs, 200u);

    // Saving the reloaded model reproduces the file byte for byte.
    const auto again = temp_path("rt2");
    save_checkpoint(again, ck.model, ck.probes, ck.metadata);
    EXPECT_EQ(slurp(again), slurp(path));
    EXPECT_EQ(file_sha256(again), file_sha256(path));
}

TEST(Checkpoint, ForwardOutputsIdenticalAfterReload) {
    Saved s;
    const auto path = temp_path("fwd");
    save_checkpoint(path, s.m, s.probes);
    const Checkpoint ck = load_checkpoint(path);
    const Tensor<float> x = random_images<float>(20, 16, 21);
    const auto [t0, p0] = encode_batch(s.m, x);
    const auto [t1, p1] = encode_batch(ck.model, x);
    EXPECT_EQ(t0.storage(), t1.storage());
    EXPECT_EQ(p0.storage(), p1.storage());
    EXPECT_EQ(decode_batch(s.m, t0, p0).storage(), decode_batch(ck.model, t1, p1).storage());
}

TEST(Checkpoint, FileLayoutPrefix) {
    Saved s;
    const auto path = temp_path("magic");
    save_checkpoint(path, s.m, s.probes);
    const auto b = slurp(path);
    ASSERT_GT(b.size(), 16u);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "D2AE");
    std::uint32_t version;
    std::memcpy(&version, b.data() + 4, 4);
    EXPECT_EQ(version, 1u);
    std::uint64_t meta_len;
    std::memcpy(&meta_len, b.data() + 8, 8);
    const auto meta = nlohmann::json::parse(std::string(b.begin() + 16, b.begin() + 16 + static_cast<long>(meta_len)));
    EXPECT_TRUE(meta.contains("model_config"));
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST(Checkpoint, MetadataEcho) {
    Saved s;
    const auto path = temp_path("meta");
    TrainConfig tc;
    tc.epochs = 17;
    save_checkpoint(path, s.m, s.probes, {{"train_config", tc}, {"epoch", 17}, {"metrics", {{"psnr", 21.5}}}});
    const Checkpoint ck = load_checkpoint(path);
    EXPECT_EQ(ck.metadata["model_config"], nlohmann::json(s.m.config()));
    EXPECT_EQ(nlohmann::json(ck.model.config()), nlohmann::json(s.m.config()));
    EXPECT_EQ(ck.metadata["train_config"].get<TrainConfig>().epochs, 17u);
    EXPECT_EQ(ck.metadata["epoch"], 17);
    EXPECT_EQ(ck.metadata["metrics"]["psnr"], 21.5);
    EXPECT_THROW(save_checkpoint(path, s.m, s.probes, nlohmann::json::array()), CheckpointError);
}

TEST(Checkpoint, MissingProbesLoadEmpty) {
    Saved s;
    const auto path = temp_path("noprobe");
    save_checkpoint(path, s.m, ProbeModel{});
    const Checkpoint ck = load_checkpoint(path);
    EXPECT_TRUE(ck.probes.entries.empty());
    EXPECT_EQ(ck.model.param("cls_p.w").value.storage(), s.m.param("cls_p.w").value.storage());
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
    Saved s;
    const auto path = temp_path("ver");
    save_checkpoint(path, s.m, s.probes);
    auto b = slurp(path);
    b[4] = 2;
    spit(path, b);
    EXPECT_NE(load_error(path).find("unsupported checkpoint version 2"), std::string::npos);
    b[4] = 1;
    b[0] = 'X';
    spit(path, b);
    EXPECT_NE(load_error(path).find("bad magic"), std::string::npos);
    EXPECT_NE(load_error(temp_path("absent")).find("absent"), std::string::npos);
}

TEST(Checkpoint, CorruptedLengthNamesTheTensor) {
    Saved s;
    const auto path = temp_path("corrupt");
    save_checkpoint(path, s.m, s.probes);
    auto b = slurp(path);
    const std::size_t off = count_offset(b, "enc.conv1.w", 4);
    b[off] ^= 0x01;
    spit(path, b);
    const std::string err = load_error(path);
    EXPECT_NE(err.find("enc.conv1.w"), std::string::npos) << err;
    EXPECT_NE(err.find(path.string()), std::string::npos) << err;
}

TEST(Checkpoint, TruncationNamesTheTensor) {
    Saved s;
    const auto path = temp_path("trunc");
    save_checkpoint(path, s.m, s.probes);
    auto b = slurp(path);
    const std::size_t off = count_offset(b, "dec.fc.w", 2);
    b.resize(off + 8 + 12);
    spit(path, b);
    const std::string err = load_error(path);
    EXPECT_NE(err.find("dec.fc.w"), std::string::npos) << err;
    EXPECT_NE(err.find("truncated"), std::string::npos) << err;
}

TEST(Checkpoint, RejectsTrailingBytesAndArchitectureMismatch) {
    Saved s;
    const auto path = temp_path("trail");
    save_checkpoint(path, s.m, s.probes);
    auto b = slurp(path);
    b.push_back(0);
    spit(path, b);
    EXPECT_NE(load_error(path).find("trailing"), std::string::npos);

    // Metadata claiming a different feature width breaks the shape check on the first branch tensor.
    ModelConfig other = s.m.config();
    other.feat_dim_P = 4;
    save_checkpoint(path, s.m, ProbeModel{});
    b = slurp(path);
    std::uint64_t meta_len;
    std::memcpy(&meta_len, b.data() + 8, 8);
    auto meta = nlohmann::json::parse(std::string(b.begin() + 16, b.begin() + 16 + static_cast<long>(meta_len)));
    meta["model_config"] = other;
    const std::string m2 = meta.dump();
    std::vector<std::uint8_t> out(b.begin(), b.begin() + 8);
    const std::uint64_t len2 = m2.size();
    out.insert(out.end(), reinterpret_cast<const std::uint8_t*>(&len2), reinterpret_cast<const std::uint8_t*>(&len2) + 8);
    out.insert(out.end(), m2.begin(), m2.end());
    out.insert(out.end(), b.begin() + 16 + static_cast<long>(meta_len), b.end());
    spit(path, out);
    const std::string err = load_error(path);
    EXPECT_NE(err.find("branch_p"), std::string::npos) << err;
    EXPECT_NE(err.find("expected"), std::string::npos) << err;
}

TEST(Sha256, KnownDigest) {
    const std::string abc = "abc";
    EXPECT_EQ(sha256_hex(std::vector<std::uint8_t>(abc.begin(), abc.end())),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
