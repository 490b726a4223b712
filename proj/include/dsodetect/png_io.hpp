#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <png.h>

#include "dsodetect/common.hpp"
#include "dsodetect/image.hpp"

namespace dso {

namespace detail {

struct FileHandle {
    std::FILE* fp = nullptr;
    explicit FileHandle(const std::string& path, const char* mode) {
        fp = std::fopen(path.c_str(), mode);
    }
    ~FileHandle() {
        if (fp) std::fclose(fp);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

}  // namespace detail

// Writes a 16-bit PNG. channels must be 1 (grayscale) or 3 (RGB).
// Output is deterministic: no time chunk, fixed compression settings.
inline void write_png16(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ConfigError("write_png16: channels must be 1 or 3");
    if (img.height <= 0 || img.width <= 0)
        throw ConfigError("write_png16: empty image");

    detail::FileHandle file(path, "wb");
    if (!file.fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write error: " + path);
    }

    png_init_io(png, file.fp);
    const int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, img.width, img.height, 16, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_set_swap(png);  // rows are host little-endian

    std::vector<std::uint16_t> row(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[static_cast<std::size_t>(x) * img.channels + c] = quantize16(img.at(y, x, c));
        png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Reads an 8- or 16-bit PNG (gray, gray+alpha, RGB, RGBA, palette) into a
// float image in [0,1]. Gray stays 1-channel, color becomes 3-channel;
// alpha is dropped.
inline Image read_png(const std::string& path) {
    detail::FileHandle file(path, "rb");
    if (!file.fp) throw IoError("cannot open for reading: " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, file.fp) != 8 || png_sig_cmp(header, 0, 8))
        throw IoError("not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng read error: " + path);
    }

    png_init_io(png, file.fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int nch = png_get_channels(png, info);
    if (nch != 1 && nch != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported channel count after expansion in " + path);
    }

    Image out(height, width, nch);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> row(rowbytes);
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        if (depth == 16) {
            const auto* p = reinterpret_cast<const std::uint16_t*>(row.data());
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < nch; ++c)
                    out.at(y, x, c) = dequantize16(p[static_cast<std::size_t>(x) * nch + c]);
        } else {
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < nch; ++c)
                    out.at(y, x, c) = row[static_cast<std::size_t>(x) * nch + c] / 255.0f;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

// Writes an 8-bit RGB PNG; used for the annotated inspection image.
inline void write_png8(const std::string& path, const Image& img) {
    if (img.channels != 3) throw ConfigError("write_png8: expects RGB");
    detail::FileHandle file(path, "wb");
    if (!file.fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write error: " + path);
    }
    png_init_io(png, file.fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] =
                    static_cast<png_byte>(clamp01(img.at(y, x, c)) * 255.0f + 0.5f);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace dso
