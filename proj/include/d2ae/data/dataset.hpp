#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "d2ae/autodiff/tensor.hpp"
#include "d2ae/data/png_io.hpp"
#include "d2ae/rng.hpp"

namespace d2ae {

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-sample nuisance factors of the synthetic generator, in CSV column order.
inline constexpr std::array<std::string_view, 5> kFactorNames = {"hue", "background", "smile", "rotation",
                                                                 "scale"};
using FactorVector = std::array<double, kFactorNames.size()>;

enum class Split : std::uint8_t { Train, Val, Test };

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_name(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw DatasetError("unknown split '" + std::string(s) + "'");
}

struct FactorSample {
    Tensor<float> image;  // (3, S, S) in [0,1]
    int identity = 0;
    int index = 0;        // position within its identity
    std::map<std::string, double> factors;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    int n_id = 0;
    int samples_per_id = 0;  // 0 when identities have differing counts (ingested data)
    int image_size = 32;
    std::string source = "synthetic";
    std::vector<std::string> identity_names;
    std::vector<Split> splits;  // one per sample, in sample order

    nlohmann::json to_json(const std::vector<FactorSample>& samples) const;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<FactorSample> samples;

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (manifest.splits[i] == split) out.push_back(i);
        return out;
    }
};

/// Identity-defining face geometry, in canonical units (image half-width = 1).
struct IdentityGeometry {
    double aspect;       // face height / width
    double eye_spacing;  // half distance between eye centres
    double eye_height;   // vertical eye position (negative = up)
    double eye_radius;
    double nose_length;
};

inline constexpr double kFaceHalfWidth = 0.6;
inline constexpr double kMaxRotationDeg = 20.0;
inline constexpr double kScaleJitter = 0.15;

inline IdentityGeometry identity_geometry(std::uint64_t seed, int identity) {
    Rng rng = derive_rng(seed, {0x1D, static_cast<std::uint64_t>(identity)});
    IdentityGeometry g{};
    g.aspect = uniform(rng, 1.0, 1.35);
    g.eye_spacing = uniform(rng, 0.18, 0.34);
    g.eye_height = uniform(rng, -0.30, -0.08);
    g.eye_radius = uniform(rng, 0.06, 0.11);
    g.nose_length = uniform(rng, 0.10, 0.30);
    return g;
}

namespace detail {

struct Rgb {
    double r, g, b;
};

inline Rgb shade(const IdentityGeometry& geo, double smile, const Rgb& face, const Rgb& bg, double u, double v) {
    const double a = kFaceHalfWidth, b = kFaceHalfWidth * geo.aspect;
    if ((u / a) * (u / a) + (v / b) * (v / b) > 1.0) return bg;
    constexpr Rgb ink{0.12, 0.08, 0.10};
    const double ex = std::abs(u) - geo.eye_spacing, ey = v - geo.eye_height;
    if (ex * ex + ey * ey < geo.eye_radius * geo.eye_radius) return ink;
    const double nose_top = geo.eye_height + 0.04;
    if (std::abs(u) < 0.04 && v > nose_top && v < nose_top + geo.nose_length) return ink;
    constexpr double mouth_half_width = 0.26, mouth_half_thickness = 0.05;
    const double mouth_y = geo.eye_height + geo.nose_length + 0.16;
    if (std::abs(u) < mouth_half_width) {
        const double t = u / mouth_half_width;
        const double curve = mouth_y + 0.12 * smile * (1.0 - t * t);
        if (std::abs(v - curve) < mouth_half_thickness) return ink;
    }
    return face;
}

}  // namespace detail

/// Rasterises one glyph face with 2x2 supersampling, quantised to 8-bit levels.
inline Tensor<float> render_face(const IdentityGeometry& geo, const FactorVector& f, std::size_t size) {
    if (size < 16) throw DatasetError("render_face: image size must be >= 16");
    const double hue = f[0], background = f[1], smile = f[2], rotation = f[3], scale = f[4];
    const double t = (hue + 1.0) / 2.0;
    const detail::Rgb warm{0.96, 0.72, 0.50}, cool{0.55, 0.70, 0.98};
    const detail::Rgb face{warm.r + t * (cool.r - warm.r), warm.g + t * (cool.g - warm.g),
                           warm.b + t * (cool.b - warm.b)};
    const double gray = 0.15 + 0.25 * (background + 1.0) / 2.0;
    const detail::Rgb bg{gray, gray, gray};
    const double theta = rotation * kMaxRotationDeg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta), k = 1.0 + kScaleJitter * scale;

    Tensor<float> img(Shape{3, size, size});
    const std::size_t plane = size * size;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            detail::Rgb acc{0, 0, 0};
            for (double oy : {0.25, 0.75})
                for (double ox : {0.25, 0.75}) {
                    const double px = (x + ox) / size * 2.0 - 1.0;
                    const double py = (y + oy) / size * 2.0 - 1.0;
                    const double u = (c * px + s * py) / k;
                    const double v = (-s * px + c * py) / k;
                    const detail::Rgb col = detail::shade(geo, smile, face, bg, u, v);
                    acc.r += col.r;
                    acc.g += col.g;
                    acc.b += col.b;
                }
            const double ch[3] = {acc.r / 4, acc.g / 4, acc.b / 4};
            for (std::size_t cc = 0; cc < 3; ++cc) {
                const long q = std::lround(std::clamp(ch[cc], 0.0, 1.0) * 255.0);
                img[cc * plane + y * size + x] = static_cast<float>(q) / 255.0f;
            }
        }
    return img;
}

/// Region covered by any canonical (unrotated, unscaled) face, 1 inside and 0 outside.
inline Tensor<float> face_region_mask(std::size_t size) {
    Tensor<float> mask(Shape{size, size});
    const double a = kFaceHalfWidth * (1.0 + kScaleJitter), b = kFaceHalfWidth * 1.35 * (1.0 + kScaleJitter);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double px = (x + 0.5) / size * 2.0 - 1.0, py = (y + 0.5) / size * 2.0 - 1.0;
            mask[y * size + x] = (px / a) * (px / a) + (py / b) * (py / b) <= 1.0 ? 1.0f : 0.0f;
        }
    return mask;
}

/// Per-identity split: ~20% test, ~10% of the remainder validation, the rest training.
inline std::vector<Split> split_identity(std::uint64_t seed, int identity, std::size_t count) {
    std::vector<Split> out(count, Split::Train);
    if (count < 2) return out;
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng = derive_rng(seed, {0x5B, static_cast<std::uint64_t>(identity)});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * count)));
    std::size_t n_val = 0;
    if (count >= 3) n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * (count - n_test))));
    for (std::size_t i = 0; i < n_test; ++i) out[order[i]] = Split::Test;
    for (std::size_t i = n_test; i < n_test + n_val; ++i) out[order[i]] = Split::Val;
    return out;
}

inline Dataset generate(std::uint64_t seed, int n_id, int samples_per_id, std::size_t size) {
    if (n_id < 2) throw DatasetError("generate: n_id must be >= 2");
    if (samples_per_id < 4) throw DatasetError("generate: samples_per_id must be >= 4");
    if (size < 16) throw DatasetError("generate: image size must be >= 16");
    Dataset ds;
    auto& m = ds.manifest;
    m.seed = seed;
    m.n_id = n_id;
    m.samples_per_id = samples_per_id;
    m.image_size = static_cast<int>(size);
    m.source = "synthetic";
    ds.samples.reserve(static_cast<std::size_t>(n_id) * samples_per_id);
    for (int id = 0; id < n_id; ++id) {
        m.identity_names.push_back(std::to_string(id));
        const IdentityGeometry geo = identity_geometry(seed, id);
        const auto splits = split_identity(seed, id, static_cast<std::size_t>(samples_per_id));
        for (int i = 0; i < samples_per_id; ++i) {
            Rng rng = derive_rng(seed, {0xFAC, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(i)});
            FactorVector f{};
            for (auto& v : f) v = uniform(rng, -1.0, 1.0);
            FactorSample s;
            s.image = render_face(geo, f, size);
            s.identity = id;
            s.index = i;
            for (std::size_t k = 0; k < f.size(); ++k) s.factors[std::string(kFactorNames[k])] = f[k];
            ds.samples.push_back(std::move(s));
            m.splits.push_back(splits[static_cast<std::size_t>(i)]);
        }
    }
    return ds;
}

namespace detail {

inline std::string zero_pad(long v, long max_value) {
    const std::size_t width = std::to_string(std::max(max_value, 9L)).size();
    std::string s = std::to_string(v);
    return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

inline std::string format_double(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace detail

inline nlohmann::json DatasetManifest::to_json(const std::vector<FactorSample>& samples) const {
    nlohmann::json j;
    j["format"] = "d2ae-dataset";
    j["version"] = 1;
    j["seed"] = seed;
    j["n_id"] = n_id;
    j["samples_per_id"] = samples_per_id;
    j["image_size"] = image_size;
    j["source"] = source;
    j["identities"] = identity_names;
    j["layout"] = "images/<identity>/<index>.png";
    auto arr = nlohmann::json::array();
    long max_index = 0;
    for (const auto& s : samples) max_index = std::max<long>(max_index, s.index);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        arr.push_back({{"identity", s.identity},
                       {"index", s.index},
                       {"split", std::string(split_name(splits[i]))},
                       {"file", "images/" + detail::zero_pad(s.identity, n_id - 1) + "/" +
                                    detail::zero_pad(s.index, max_index) + ".png"}});
    }
    j["samples"] = std::move(arr);
    return j;
}

/// Writes manifest.json, images/<id>/<index>.png and factors.csv under `dir`.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    const nlohmann::json manifest = ds.manifest.to_json(ds.samples);
    {
        std::ofstream out(dir / "manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw DatasetError("cannot write " + (dir / "manifest.json").string());
    }
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const fs::path file = dir / manifest["samples"][i]["file"].get<std::string>();
        fs::create_directories(file.parent_path());
        write_file_bytes(file, encode_png(to_rgb8(ds.samples[i].image)));
    }
    std::ofstream csv(dir / "factors.csv");
    csv << "identity,index";
    for (auto n : kFactorNames) csv << ',' << n;
    csv << '\n';
    for (const auto& s : ds.samples) {
        if (s.factors.empty()) continue;
        csv << s.identity << ',' << s.index;
        for (auto n : kFactorNames) csv << ',' << detail::format_double(s.factors.at(std::string(n)));
        csv << '\n';
    }
    if (!csv) throw DatasetError("cannot write " + (dir / "factors.csv").string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DatasetError("cannot open " + (dir / "manifest.json").string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("malformed manifest.json: " + std::string(e.what()));
    }
    Dataset ds;
    auto& m = ds.manifest;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_id = j.at("n_id").get<int>();
    m.samples_per_id = j.at("samples_per_id").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.source = j.value("source", "synthetic");
    m.identity_names = j.at("identities").get<std::vector<std::string>>();
    std::map<std::pair<int, int>, std::map<std::string, double>> factors;
    if (std::ifstream csv(dir / "factors.csv"); csv) {
        std::string line;
        std::getline(csv, line);
        while (std::getline(csv, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string cell;
            std::vector<std::string> cells;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            if (cells.size() != 2 + kFactorNames.size()) throw DatasetError("factors.csv: malformed row '" + line + "'");
            std::map<std::string, double> f;
            for (std::size_t k = 0; k < kFactorNames.size(); ++k) f[std::string(kFactorNames[k])] = std::stod(cells[2 + k]);
            factors[{std::stoi(cells[0]), std::stoi(cells[1])}] = std::move(f);
        }
    }
    for (const auto& e : j.at("samples")) {
        FactorSample s;
        s.identity = e.at("identity").get<int>();
        s.index = e.at("index").get<int>();
        const fs::path file = dir / e.at("file").get<std::string>();
        Tensor<float> img = to_tensor(decode_png(read_file_bytes(file)));
        if (img.dim(1) != static_cast<std::size_t>(m.image_size) || img.dim(2) != static_cast<std::size_t>(m.image_size))
            img = resize_bilinear(img, m.image_size, m.image_size);
        s.image = std::move(img);
        if (auto it = factors.find({s.identity, s.index}); it != factors.end()) s.factors = it->second;
        ds.samples.push_back(std::move(s));
        m.splits.push_back(split_from_name(e.at("split").get<std::string>()));
    }
    return ds;
}

/// Reads root/<identity-name>/*.png. Identities are labelled in lexicographic order of their
/// directory names; images are resized to `size` and scaled to [0,1].
inline Dataset ingest_directory(const std::filesystem::path& root, std::size_t size = 32, std::uint64_t seed = 0,
                                std::ostream& warn = std::cerr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DatasetError("ingest: not a directory: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end(), [](const fs::path& a, const fs::path& b) {
        return a.filename().string() < b.filename().string();
    });
    Dataset ds;
    auto& m = ds.manifest;
    m.seed = seed;
    m.image_size = static_cast<int>(size);
    m.source = "directory";
    for (const auto& dir : dirs) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (!e.is_regular_file()) continue;
            std::string ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
            if (ext == ".png") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
            return a.filename().string() < b.filename().string();
        });
        std::vector<Tensor<float>> images;
        for (const auto& f : files) {
            try {
                images.push_back(resize_bilinear(to_tensor(decode_png(read_file_bytes(f))), size, size));
            } catch (const ImageIoError& e) {
                warn << "warning: skipping unreadable image " << f.string() << ": " << e.what() << '\n';
            }
        }
        if (images.empty()) {
            warn << "warning: identity '" << dir.filename().string() << "' has no readable images, skipped\n";
            continue;
        }
        if (images.size() < 2)
            warn << "warning: identity '" << dir.filename().string() << "' has fewer than 2 images\n";
        const int id = m.n_id++;
        m.identity_names.push_back(dir.filename().string());
        const auto splits = split_identity(seed, id, images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            FactorSample s;
            s.image = std::move(images[i]);
            s.identity = id;
            s.index = static_cast<int>(i);
            ds.samples.push_back(std::move(s));
            m.splits.push_back(splits[i]);
        }
    }
    if (m.n_id == 0) throw DatasetError("ingest: no identities with readable images under " + root.string());
    return ds;
}

struct VerificationPair {
    std::size_t a = 0;
    std::size_t b = 0;
    bool same = false;
    bool operator==(const VerificationPair&) const = default;
};

/// Balanced same/different identity pairs over the test split.
inline std::vector<VerificationPair> make_pairs(const Dataset& ds, std::size_t n_pairs, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_id;
    for (auto i : ds.indices(Split::Test)) by_id[ds.samples[i].identity].push_back(i);
    std::size_t eligible = 0;
    for (const auto& [id, v] : by_id) eligible += v.size() >= 2;
    if (eligible < 2) throw DatasetError("make_pairs: need >= 2 test samples for >= 2 identities");

    std::vector<VerificationPair> same, diff;
    for (const auto& [id, v] : by_id)
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = i + 1; j < v.size(); ++j) same.push_back({v[i], v[j], true});
    for (auto ia = by_id.begin(); ia != by_id.end(); ++ia)
        for (auto ib = std::next(ia); ib != by_id.end(); ++ib)
            for (auto a : ia->second)
                for (auto b : ib->second) diff.push_back({a, b, false});
    Rng rng = derive_rng(seed, {0x9A1});
    std::shuffle(same.begin(), same.end(), rng);
    std::shuffle(diff.begin(), diff.end(), rng);
    const std::size_t n_same = n_pairs / 2, n_diff = n_pairs - n_same;
    std::vector<VerificationPair> out;
    out.reserve(n_pairs);
    // Without replacement while the pool lasts, then cycling.
    for (std::size_t i = 0; i < n_same; ++i) out.push_back(same[i % same.size()]);
    for (std::size_t i = 0; i < n_diff; ++i) out.push_back(diff[i % diff.size()]);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

/// Binary attribute labels: 1 when the factor is positive.
struct AttributeLabels {
    std::vector<std::string> names;
    std::vector<std::vector<int>> labels;  // [attribute][sample]
};

inline AttributeLabels binarize_factors(const Dataset& ds, const std::vector<std::size_t>& indices) {
    AttributeLabels out;
    for (auto n : kFactorNames) out.names.emplace_back(n);
    out.labels.assign(kFactorNames.size(), std::vector<int>(indices.size()));
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto& f = ds.samples.at(indices[k]).factors;
        if (f.empty()) throw DatasetError("binarize_factors: sample without factors");
        for (std::size_t a = 0; a < kFactorNames.size(); ++a) {
            auto it = f.find(std::string(kFactorNames[a]));
            if (it == f.end()) throw DatasetError("binarize_factors: missing factor " + std::string(kFactorNames[a]));
            out.labels[a][k] = it->second > 0.0 ? 1 : 0;
        }
    }
    return out;
}

}  // namespace d2ae
