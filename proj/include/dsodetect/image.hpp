#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "dsodetect/common.hpp"

namespace dso {

// Dense float image, HWC interleaved, intensities nominally in [0,1].
// channels is 1 (masks, heatmaps) or 3 (sky images).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

inline float luminance(float r, float g, float b) {
    return 0.2126f * r + 0.7152f * g + 0.0722f * b;
}

inline Image to_luminance(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x) = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    return out;
}

inline void clip01(Image& img) {
    for (float& v : img.data) v = clamp01(v);
}

inline std::pair<float, float> min_max(const Image& img) {
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (float v : img.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (img.data.empty()) return {0.0f, 0.0f};
    return {lo, hi};
}

// Min-max normalization to [0,1]; constant images map to 0.
inline Image normalized(const Image& img) {
    auto [lo, hi] = min_max(img);
    Image out = img;
    const float span = hi - lo;
    if (span <= 0.0f) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    for (float& v : out.data) v = (v - lo) / span;
    return out;
}

// Bilinear resize; used by the optional pre-scale step of detect.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
    Image out(out_h, out_w, img.channels);
    if (img.height == 0 || img.width == 0) return out;
    const float sy = static_cast<float>(img.height) / out_h;
    const float sx = static_cast<float>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const float fy = std::min((y + 0.5f) * sy - 0.5f, img.height - 1.0f);
        const float cy = std::max(fy, 0.0f);
        const int y0 = static_cast<int>(cy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const float wy = cy - y0;
        for (int x = 0; x < out_w; ++x) {
            const float fx = std::min((x + 0.5f) * sx - 0.5f, img.width - 1.0f);
            const float cx = std::max(fx, 0.0f);
            const int x0 = static_cast<int>(cx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const float wx = cx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const float top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                const float bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

// 16-bit quantization used by the PNG interchange format; datasets are
// stored quantized so the in-memory and on-disk pipelines see identical
// pixel values.
inline std::uint16_t quantize16(float v) {
    const float c = clamp01(v);
    return static_cast<std::uint16_t>(c * 65535.0f + 0.5f);
}

inline float dequantize16(std::uint16_t v) {
    return static_cast<float>(v) / 65535.0f;
}

}  // namespace dso
