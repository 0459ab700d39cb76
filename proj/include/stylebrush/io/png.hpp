#pragma once

// 8-bit RGB PNG reading/writing. Images are [3,H,W] tensors with values in
// [-1, 1]; a pixel byte p maps to p/255*2-1.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stylebrush/core/error.hpp"
#include "stylebrush/core/tensor.hpp"

namespace stylebrush::io {

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, -1.0, 1.0);
    return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

inline double from_byte(std::uint8_t p) { return double(p) / 255.0 * 2.0 - 1.0; }

template <class T = float>
Tensor<T> read_png(const std::filesystem::path& path) {
    detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
    require(file != nullptr, ErrorKind::io, "cannot open image " + path.string());
    unsigned char sig[8];
    require(std::fread(sig, 1, 8, file.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0, ErrorKind::io,
            "not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    require(png && info, ErrorKind::io, "libpng initialisation failed");
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};

    std::vector<std::uint8_t> pixels;
    int width = 0, height = 0;
    if (setjmp(png_jmpbuf(png))) fail(ErrorKind::io, "corrupt PNG: " + path.string());
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    require(png_get_rowbytes(png, info) == static_cast<png_size_t>(width) * 3, ErrorKind::io,
            "unsupported PNG layout: " + path.string());
    pixels.resize(static_cast<std::size_t>(width) * height * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    Tensor<T> img({3, height, width});
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<T>(from_byte(pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]));
    return img;
}

template <class T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img) {
    require(img.rank() == 3 && img.dim(0) == 3, ErrorKind::shape, "write_png expects a [3,H,W] image");
    const int height = img.dim(1), width = img.dim(2);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    detail::FilePtr file(std::fopen(path.string().c_str(), "wb"));
    require(file != nullptr, ErrorKind::io, "cannot write image " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    require(png && info, ErrorKind::io, "libpng initialisation failed");
    struct Guard {
        png_structp* p;
        png_infop* i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};

    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height * 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c] = to_byte(static_cast<double>(img.at(c, y, x)));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * width * 3;

    if (setjmp(png_jmpbuf(png))) fail(ErrorKind::io, "failed writing PNG: " + path.string());
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
}

/// Places [3,H,W] images side by side, separated by `gap` white columns.
template <class T>
Tensor<T> hstack_images(const std::vector<Tensor<T>>& images, int gap = 2) {
    require(!images.empty(), ErrorKind::shape, "hstack_images of nothing");
    const int h = images.front().dim(1);
    int w = 0;
    for (const auto& im : images) {
        require(im.rank() == 3 && im.dim(0) == 3 && im.dim(1) == h, ErrorKind::shape, "hstack_images: ragged heights");
        w += im.dim(2);
    }
    w += gap * static_cast<int>(images.size() - 1);
    Tensor<T> out({3, h, w}, T(1));
    int x0 = 0;
    for (const auto& im : images) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < im.dim(2); ++x) out.at(c, y, x0 + x) = im.at(c, y, x);
        x0 += im.dim(2) + gap;
    }
    return out;
}

/// Stacks [3,H,W] images of equal width vertically.
template <class T>
Tensor<T> vstack_images(const std::vector<Tensor<T>>& images, int gap = 2) {
    require(!images.empty(), ErrorKind::shape, "vstack_images of nothing");
    const int w = images.front().dim(2);
    int h = 0;
    for (const auto& im : images) {
        require(im.dim(2) == w, ErrorKind::shape, "vstack_images: ragged widths");
        h += im.dim(1);
    }
    h += gap * static_cast<int>(images.size() - 1);
    Tensor<T> out({3, h, w}, T(1));
    int y0 = 0;
    for (const auto& im : images) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < im.dim(1); ++y)
                for (int x = 0; x < w; ++x) out.at(c, y0 + y, x) = im.at(c, y, x);
        y0 += im.dim(1) + gap;
    }
    return out;
}

}  // namespace stylebrush::io
