#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <csetjmp>
#include <cstring>
#include <algorithm>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2ae/autodiff/tensor.hpp"

namespace d2ae {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 8-bit RGB raster, interleaved.
struct Rgb8Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};

namespace detail {

struct PngMemReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos;
};

inline void png_mem_read(png_structp png, png_bytep out, png_size_t len) {
    auto* r = static_cast<PngMemReader*>(png_get_io_ptr(png));
    if (r->pos + len > r->size) png_error(png, "truncated PNG data");
    std::memcpy(out, r->data + r->pos, len);
    r->pos += len;
}

inline void png_mem_write(png_structp png, png_bytep in, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), in, in + len);
}

inline void png_mem_flush(png_structp) {}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Decodes any PNG (gray, palette, alpha, 16-bit) to 8-bit RGB.
inline Rgb8Image decode_png(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageIoError("not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_fn);
    if (!png) throw ImageIoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    detail::PngMemReader reader{bytes.data(), bytes.size(), 0};
    Rgb8Image img;
    std::vector<png_bytep> rows;
    bool layout_ok = true;
    // Everything touched after setjmp lives above it; libpng reports errors by longjmp.
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("corrupt PNG data");
    }
    png_set_read_fn(png, &reader, detail::png_mem_read);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    layout_ok = png_get_rowbytes(png, info) == img.width * 3;
    if (layout_ok) {
        img.pixels.resize(img.width * img.height * 3);
        rows.resize(img.height);
        for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * 3;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (!layout_ok) throw ImageIoError("unexpected PNG row layout");
    return img;
}

inline std::vector<std::uint8_t> encode_png(const Rgb8Image& img) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_fn);
    if (!png) throw ImageIoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    std::vector<std::uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("PNG encoding failed");
    }
    png_set_write_fn(png, &out, detail::png_mem_write, detail::png_mem_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!f) throw ImageIoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes;
    std::uint8_t buf[1 << 14];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f.get())) > 0) bytes.insert(bytes.end(), buf, buf + n);
    if (std::ferror(f.get())) throw ImageIoError("read error on " + path.string());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
    if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
        throw ImageIoError("write error on " + path.string());
}

/// (3, H, W) tensor in [0,1] -> 8-bit raster; values are clamped and rounded.
template <typename T>
Rgb8Image to_rgb8(const Tensor<T>& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("to_rgb8: expected (3,H,W), got " + shape_str(chw.shape()));
    Rgb8Image img{chw.dim(2), chw.dim(1), {}};
    const std::size_t plane = img.width * img.height;
    img.pixels.resize(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::clamp(static_cast<double>(chw[c * plane + p]), 0.0, 1.0);
            img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

inline Tensor<float> to_tensor(const Rgb8Image& img) {
    Tensor<float> t(Shape{3, img.height, img.width});
    const std::size_t plane = img.width * img.height;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = static_cast<float>(img.pixels[p * 3 + c]) / 255.0f;
    return t;
}

/// Bilinear resampling with half-pixel centres (edge-clamped).
inline Tensor<float> resize_bilinear(const Tensor<float>& chw, std::size_t out_h, std::size_t out_w) {
    const std::size_t h = chw.dim(1), w = chw.dim(2);
    if (h == out_h && w == out_w) return chw;
    Tensor<float> out(Shape{3, out_h, out_w});
    const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < out_h; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
            const double ty = fy - y0;
            for (std::size_t x = 0; x < out_w; ++x) {
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
                const double tx = fx - x0;
                auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(chw[(c * h + yy) * w + xx]); };
                const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
                                 ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
                out[(c * out_h + y) * out_w + x] = static_cast<float>(v);
            }
        }
    return out;
}

}  // namespace d2ae
