#pragma once

#include <openssl/evp.h>

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/analytics/probe.hpp"
#include "d2ae/data/dataset.hpp"
#include "d2ae/data/png_io.hpp"
#include "d2ae/editing/editing.hpp"
#include "d2ae/model/d2ae_model.hpp"

namespace d2ae {

/// A request failure that maps onto an HTTP status.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    std::string s;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) s += c;
    if (s.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
    std::vector<std::uint8_t> out(s.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
    if (n < 0) throw std::invalid_argument("base64: invalid characters");
    std::size_t len = static_cast<std::size_t>(n);
    // EVP_DecodeBlock keeps the zero bytes produced by padding.
    if (!s.empty() && s.back() == '=') --len;
    if (s.size() > 1 && s[s.size() - 2] == '=') --len;
    out.resize(len);
    return out;
}

inline std::string image_to_base64_png(const Tensor<float>& chw) { return base64_encode(encode_png(to_rgb8(chw))); }

struct GalleryItem {
    std::size_t sample = 0;
    int identity = 0;
    Tensor<float> image;
};

/// The request handlers, independent of the transport. Holds an immutable model snapshot;
/// every method is const and safe to call concurrently.
class EditService {
public:
    EditService(D2AEModel<float> model, ProbeModel probes, std::string checkpoint_hash,
                std::vector<GalleryItem> gallery = {})
        : model_(std::move(model)),
          probes_(std::move(probes)),
          hash_(std::move(checkpoint_hash)),
          gallery_(std::move(gallery)) {}

    const std::string& checkpoint_hash() const { return hash_; }
    const D2AEModel<float>& model() const { return model_; }

    nlohmann::json info() const {
        const auto& c = model_.config();
        nlohmann::json attrs = nlohmann::json::array();
        for (const auto& e : probes_.entries)
            attrs.push_back({{"name", edit_name(e)},
                             {"attribute", e.attribute},
                             {"branch", std::string(branch_name(e.branch))},
                             {"alpha_max", alpha_max(e, model_)},
                             {"accuracy", e.accuracy}});
        return stamp({{"dims", {{"f_T", c.feat_dim_T}, {"f_P", c.feat_dim_P}}},
                      {"input_size", c.input_size},
                      {"n_id", c.n_id},
                      {"attributes", attrs}});
    }

    nlohmann::json encode(const nlohmann::json& req) const {
        const auto fp = d2ae::encode(model_, image_field(req, "image"));
        return stamp({{"f_T", fp.f_T}, {"f_P", fp.f_P}});
    }

    nlohmann::json decode(const nlohmann::json& req) const {
        FeaturePair<float> fp{feature_field(req, "f_T", model_.feat_dim(Branch::T)),
                              feature_field(req, "f_P", model_.feat_dim(Branch::P))};
        return stamp({{"image", image_to_base64_png(d2ae::decode(model_, fp))}});
    }

    nlohmann::json edit(const nlohmann::json& req) const {
        EditRequest<float> er;
        if (req.contains("edits")) {
            const auto& edits = req["edits"];
            if (!edits.is_array()) throw ApiError(400, "'edits' must be an array");
            for (const auto& e : edits) {
                if (!e.is_object() || !e.contains("attr") || !e["attr"].is_string() || !e.contains("alpha") ||
                    !e["alpha"].is_number())
                    throw ApiError(400, "each edit needs a string 'attr' and a numeric 'alpha'");
                er.edits.push_back({e["attr"].get<std::string>(), e["alpha"].get<double>()});
            }
        }
        if (req.contains("identity") && !req["identity"].is_null()) {
            const auto& id = req["identity"];
            if (!id.is_object()) throw ApiError(400, "'identity' must be an object");
            er.identity = IdentityTarget<float>{d2ae::encode(model_, image_field(id, "image_b")).f_T,
                                                number_field(id, "beta")};
        }
        const auto image = image_field(req, "image");
        try {
            auto r = render_edit(model_, probes_, image, er);
            return stamp({{"image", image_to_base64_png(r.image)}, {"provenance", r.provenance}});
        } catch (const UnknownAttributeError& e) {
            throw ApiError(422, e.what());
        } catch (const BetaRangeError& e) {
            throw ApiError(422, e.what());
        } catch (const std::invalid_argument& e) {
            throw ApiError(400, e.what());
        }
    }

    nlohmann::json interpolate(const nlohmann::json& req) const {
        const auto a = d2ae::encode(model_, image_field(req, "image_a"));
        const auto b = d2ae::encode(model_, image_field(req, "image_b"));
        const double beta = number_field(req, "beta");
        try {
            const auto mixed = identity_interpolate(a, b.f_T, beta);
            return stamp({{"image", image_to_base64_png(d2ae::decode(model_, mixed))}, {"beta", beta}});
        } catch (const BetaRangeError& e) {
            throw ApiError(422, e.what());
        }
    }

    nlohmann::json gallery() const {
        nlohmann::json items = nlohmann::json::array();
        for (const auto& g : gallery_)
            items.push_back({{"sample", g.sample}, {"identity", g.identity}, {"image", image_to_base64_png(g.image)}});
        return stamp({{"images", items}});
    }

private:
    nlohmann::json stamp(nlohmann::json j) const {
        j["checkpoint_sha256"] = hash_;
        return j;
    }

    Tensor<float> image_field(const nlohmann::json& req, const char* key) const {
        if (!req.is_object() || !req.contains(key) || !req[key].is_string())
            throw ApiError(400, std::string("missing base64 PNG field '") + key + "'");
        Rgb8Image img;
        try {
            img = decode_png(base64_decode(req[key].get<std::string>()));
        } catch (const std::exception& e) {
            throw ApiError(400, std::string("field '") + key + "': " + e.what());
        }
        const std::size_t s = model_.config().input_size;
        if (img.width != s || img.height != s)
            throw ApiError(400, std::string("field '") + key + "': image is " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + ", model expects " + std::to_string(s) + "x" +
                                    std::to_string(s));
        return to_tensor(img);
    }

    static std::vector<float> feature_field(const nlohmann::json& req, const char* key, std::size_t dim) {
        if (!req.is_object() || !req.contains(key) || !req[key].is_array())
            throw ApiError(400, std::string("missing number array '") + key + "'");
        const auto& a = req[key];
        if (a.size() != dim)
            throw ApiError(400, std::string("'") + key + "' has " + std::to_string(a.size()) + " entries, expected " +
                                    std::to_string(dim));
        std::vector<float> out;
        for (const auto& v : a) {
            if (!v.is_number()) throw ApiError(400, std::string("'") + key + "' must contain numbers only");
            const double d = v.get<double>();
            if (!std::isfinite(d)) throw ApiError(400, std::string("'") + key + "' contains a non-finite value");
            out.push_back(static_cast<float>(d));
        }
        return out;
    }

    static double number_field(const nlohmann::json& req, const char* key) {
        if (!req.contains(key) || !req[key].is_number())
            throw ApiError(400, std::string("missing numeric field '") + key + "'");
        return req[key].get<double>();
    }

    const D2AEModel<float> model_;
    const ProbeModel probes_;
    const std::string hash_;
    const std::vector<GalleryItem> gallery_;
};

namespace detail {

inline std::string opaque_id() {
    static std::atomic<std::uint64_t> counter{0};
    static const std::uint64_t salt = std::random_device{}();
    std::ostringstream os;
    os << std::hex << (salt ^ (++counter * 0x9E3779B97F4A7C15ULL));
    return os.str();
}

}  // namespace detail

/// Routes the service onto an httplib server. Handlers share nothing but the const service.
inline void register_routes(httplib::Server& srv, const EditService& svc) {
    using Handler = nlohmann::json (EditService::*)(const nlohmann::json&) const;
    auto respond = [&svc](httplib::Response& res, auto&& fn) {
        nlohmann::json body;
        try {
            body = fn();
            res.status = 200;
        } catch (const ApiError& e) {
            res.status = e.status();
            body = {{"error", e.what()}, {"checkpoint_sha256", svc.checkpoint_hash()}};
        } catch (const std::exception& e) {
            const std::string id = detail::opaque_id();
            std::cerr << "internal error " << id << ": " << e.what() << "\n";
            res.status = 500;
            body = {{"error", "internal error"}, {"id", id}, {"checkpoint_sha256", svc.checkpoint_hash()}};
        }
        res.set_content(body.dump(), "application/json");
    };
    auto post = [&srv, &svc, respond](const char* path, Handler h) {
        srv.Post(path, [&svc, respond, h](const httplib::Request& req, httplib::Response& res) {
            respond(res, [&] {
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::exception& e) {
                    throw ApiError(400, std::string("malformed JSON: ") + e.what());
                }
                if (!j.is_object()) throw ApiError(400, "request body must be a JSON object");
                return (svc.*h)(j);
            });
        });
    };
    srv.Get("/model/info", [&svc, respond](const httplib::Request&, httplib::Response& res) {
        respond(res, [&] { return svc.info(); });
    });
    srv.Get("/gallery", [&svc, respond](const httplib::Request&, httplib::Response& res) {
        respond(res, [&] { return svc.gallery(); });
    });
    post("/encode", &EditService::encode);
    post("/decode", &EditService::decode);
    post("/edit", &EditService::edit);
    post("/interpolate", &EditService::interpolate);
}

}  // namespace d2ae
