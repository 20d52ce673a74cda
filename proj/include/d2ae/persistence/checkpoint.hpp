#pragma once

#include <fcntl.h>
#include <openssl/evp.h>
#include <unistd.h>

#include <json.hpp>

#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/analytics/probe.hpp"
#include "d2ae/data/png_io.hpp"
#include "d2ae/model/d2ae_model.hpp"

namespace d2ae {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'D', '2', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kProbeTag = 6;
inline constexpr std::uint8_t kSigmaTag = 7;

struct Checkpoint {
    D2AEModel<float> model;
    ProbeModel probes;
    nlohmann::json metadata;
};

namespace detail {

class ByteWriter {
public:
    template <typename U>
    void put(U v) {
        if constexpr (std::endian::native == std::endian::big) v = byteswap_any(v);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf.insert(buf.end(), p, p + sizeof(U));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void str32(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    template <typename U>
    static U byteswap_any(U v) {
        std::uint8_t b[sizeof(U)];
        std::memcpy(b, &v, sizeof(U));
        for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
        std::memcpy(&v, b, sizeof(U));
        return v;
    }

    std::vector<std::uint8_t> buf;
};

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& b, std::string path) : buf_(b), path_(std::move(path)) {}

    template <typename U>
    U get(const std::string& what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        if constexpr (std::endian::native == std::endian::big) v = ByteWriter::byteswap_any(v);
        return v;
    }
    std::string str(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void floats(float* out, std::size_t n, const std::string& what) {
        if (n > (buf_.size() - pos_) / sizeof(float)) fail(what + ": data truncated");
        std::memcpy(out, buf_.data() + pos_, n * sizeof(float));
        if constexpr (std::endian::native == std::endian::big)
            for (std::size_t i = 0; i < n; ++i) out[i] = ByteWriter::byteswap_any(out[i]);
        pos_ += n * sizeof(float);
    }
    bool at_end() const { return pos_ == buf_.size(); }
    [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(path_ + ": " + msg); }

private:
    void need(std::size_t n, const std::string& what) const {
        if (n > buf_.size() - pos_) fail(what + ": unexpected end of file");
    }
    const std::vector<std::uint8_t>& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, std::uint8_t tag, const Tensor<float>& t) {
    w.str32(name);
    w.put(tag);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put(static_cast<std::uint64_t>(t.size()));
    for (float v : t.data()) w.put(v);
}

inline void write_durably(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw CheckpointError(path.string() + ": cannot open for writing: " + std::strerror(errno));
    std::size_t off = 0;
    while (off < bytes.size()) {
        const ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string err = std::strerror(errno);
            ::close(fd);
            throw CheckpointError(path.string() + ": write failed: " + err);
        }
        off += static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        throw CheckpointError(path.string() + ": fsync failed: " + err);
    }
    if (::close(fd) != 0) throw CheckpointError(path.string() + ": close failed: " + std::strerror(errno));
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError(path.string() + ": rename failed: " + ec.message());
    const std::filesystem::path dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    const int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (dfd >= 0) {
        ::fsync(dfd);
        ::close(dfd);
    }
}

inline std::string probe_tensor_name(const ProbeEntry& e) {
    return "probe/" + e.attribute + "@" + std::string(branch_name(e.branch));
}

}  // namespace detail

/// Serializes model parameters, running σ and probes. `metadata` is stored as given, with
/// "model_config" and "probes" filled in.
inline void save_checkpoint(const std::filesystem::path& path, const D2AEModel<float>& m, const ProbeModel& probes,
                            nlohmann::json metadata = nlohmann::json::object()) {
    if (!metadata.is_object()) throw CheckpointError(path.string() + ": metadata must be a JSON object");
    metadata["model_config"] = m.config();
    metadata["probes"] = nlohmann::json::array();
    for (const auto& e : probes.entries)
        metadata["probes"].push_back({{"attribute", e.attribute},
                                      {"branch", std::string(branch_name(e.branch))},
                                      {"bias", e.bias},
                                      {"accuracy", e.accuracy},
                                      {"epochs", e.epochs},
                                      {"penalty", e.penalty}});
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.put(kCheckpointVersion);
    const std::string meta = metadata.dump();
    w.put(static_cast<std::uint64_t>(meta.size()));
    w.bytes(meta.data(), meta.size());
    w.put(static_cast<std::uint32_t>(m.params().size() + 2 + probes.entries.size()));
    for (const auto& p : m.params()) detail::write_tensor(w, p.name(), static_cast<std::uint8_t>(p.group()), p.value);
    detail::write_tensor(w, "sigma_T", kSigmaTag, m.sigma_T);
    detail::write_tensor(w, "sigma_P", kSigmaTag, m.sigma_P);
    for (const auto& e : probes.entries) {
        Tensor<float> t(Shape{e.w.size()});
        for (std::size_t i = 0; i < e.w.size(); ++i) t[i] = static_cast<float>(e.w[i]);
        detail::write_tensor(w, detail::probe_tensor_name(e), kProbeTag, t);
    }
    detail::write_durably(path, w.buf);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file_bytes(path);
    } catch (const ImageIoError& e) {
        throw CheckpointError(e.what());
    }
    detail::ByteReader r(bytes, path.string());
    if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) r.fail("not a D2AE checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    const auto meta_len = r.get<std::uint64_t>("metadata length");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.str(meta_len, "metadata"));
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("metadata is not valid JSON: ") + e.what());
    }
    if (!meta.is_object() || !meta.contains("model_config")) r.fail("metadata lacks model_config");
    ModelConfig cfg;
    try {
        cfg = meta.at("model_config").get<ModelConfig>();
        cfg.validate();
    } catch (const std::exception& e) {
        r.fail(std::string("bad model_config: ") + e.what());
    }
    Checkpoint ck{D2AEModel<float>(cfg, nullptr), {}, meta};
    std::map<std::string, nlohmann::json> probe_meta;
    if (meta.contains("probes") && meta["probes"].is_array())
        for (const auto& p : meta["probes"])
            probe_meta[p.at("attribute").get<std::string>() + "@" + p.at("branch").get<std::string>()] = p;

    std::vector<bool> seen(ck.model.params().size(), false);
    bool seen_sigma[2] = {false, false};
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>("tensor name length");
        const std::string name = r.str(name_len, "tensor name");
        const std::string what = "tensor '" + name + "'";
        const auto tag = r.get<std::uint8_t>(what);
        const auto rank = r.get<std::uint32_t>(what);
        if (rank > 8) r.fail(what + ": implausible rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>(what)));
        const auto n = r.get<std::uint64_t>(what);
        if (n != shape_size(shape))
            r.fail(what + ": element count " + std::to_string(n) + " does not match shape " + shape_str(shape));
        Tensor<float> t(shape);
        r.floats(t.ptr(), t.size(), what);
        if (tag <= 5) {
            std::size_t idx;
            try {
                idx = ck.model.index_of(name);
            } catch (const std::out_of_range&) {
                r.fail(what + ": not a parameter of this architecture");
            }
            auto& p = ck.model.params()[idx];
            if (static_cast<std::uint8_t>(p.group()) != tag) r.fail(what + ": group tag mismatch");
            if (p.value.shape() != shape)
                r.fail(what + ": shape " + shape_str(shape) + ", expected " + shape_str(p.value.shape()));
            p.value = std::move(t);
            seen[idx] = true;
        } else if (tag == kSigmaTag) {
            const bool is_t = name == "sigma_T";
            if (!is_t && name != "sigma_P") r.fail(what + ": unknown statistics tensor");
            Tensor<float>& dst = is_t ? ck.model.sigma_T : ck.model.sigma_P;
            if (dst.shape() != shape) r.fail(what + ": shape " + shape_str(shape) + ", expected " + shape_str(dst.shape()));
            dst = std::move(t);
            seen_sigma[is_t ? 0 : 1] = true;
        } else if (tag == kProbeTag) {
            if (name.rfind("probe/", 0) != 0) r.fail(what + ": bad probe tensor name");
            const std::string key = name.substr(6);
            auto it = probe_meta.find(key);
            if (it == probe_meta.end()) r.fail(what + ": no probe metadata");
            ProbeEntry e;
            e.attribute = it->second.at("attribute").get<std::string>();
            e.branch = it->second.at("branch").get<std::string>() == "T" ? Branch::T : Branch::P;
            e.bias = it->second.at("bias").get<double>();
            e.accuracy = it->second.value("accuracy", 0.0);
            e.epochs = it->second.value("epochs", std::size_t{0});
            e.penalty = it->second.value("penalty", 0.0);
            if (t.size() != ck.model.feat_dim(e.branch)) r.fail(what + ": length does not match the branch");
            e.w.assign(t.data().begin(), t.data().end());
            ck.probes.entries.push_back(std::move(e));
        } else {
            r.fail(what + ": unknown group tag " + std::to_string(tag));
        }
    }
    if (!r.at_end()) r.fail("trailing bytes after the tensor table");
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i]) r.fail("missing tensor '" + ck.model.params()[i].name() + "'");
    if (!seen_sigma[0] || !seen_sigma[1]) r.fail("missing augmentation statistics");
    return ck;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
        s += hex[md[i] >> 4];
        s += hex[md[i] & 15];
    }
    return s;
}

inline std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

}  // namespace d2ae
