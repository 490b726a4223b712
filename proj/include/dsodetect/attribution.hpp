#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsodetect/common.hpp"
#include "dsodetect/image.hpp"
#include "dsodetect/nn.hpp"
#include "dsodetect/png_io.hpp"
#include "dsodetect/segmentation.hpp"

namespace dso {

enum class IgBaseline { kBlack, kWhite };

struct XraiConfig {
    int ig_steps = 64;
    // black-only by default: astronomical frames are dark, and an all-white
    // baseline is a far out-of-distribution input whose huge logit swamps
    // the averaged attribution (see README); white stays available.
    std::vector<IgBaseline> baselines = {IgBaseline::kBlack};
    std::vector<double> scales = {0.01, 0.03, 0.1};
    int area_floor = 20;

    void validate() const {
        if (ig_steps < 1) throw ConfigError("xrai: ig_steps must be >= 1");
        if (baselines.empty()) throw ConfigError("xrai: need at least one baseline");
        if (scales.empty()) throw ConfigError("xrai: need at least one segmentation scale");
    }
};

struct AttributionMap {
    Image map;  // 1 channel, signed per-pixel attribution
    std::string baseline;
    int steps = 0;
};

struct Heatmap {
    Image map;  // 1 channel, non-negative densities (signed if fallback)
    bool fallback = false;
    nlohmann::json meta;
    // greedy selection trace: emitted density and newly covered pixel
    // count per step, in selection order
    std::vector<float> step_density;
    std::vector<int> step_new_pixels;
};

inline Image baseline_image(IgBaseline b, int h, int w, int c) {
    return Image(h, w, c, b == IgBaseline::kBlack ? 0.0f : 1.0f);
}

// Integrated gradients with a midpoint Riemann sum:
//   attr_i = (x_i - b_i) * mean_k grad_i(b + (k-0.5)/steps * (x - b))
// attributed to the pre-sigmoid logit of the target class; channels are
// summed to one score per pixel. Step gradients are batched through the
// network and accumulated in a fixed order.
inline AttributionMap integrated_gradients(Network<float>& net, const Image& patch,
                                           const Image& baseline, int steps,
                                           Target target = Target::kPresent, int jobs = 1) {
    if (!patch.same_shape(baseline)) throw DomainError("integrated_gradients: baseline shape mismatch");
    if (steps < 1) throw ConfigError("integrated_gradients: steps must be >= 1");

    const std::size_t per = net.input_count();
    const auto x = image_to_chw(patch);
    const auto b = image_to_chw(baseline);
    std::vector<double> grad_sum(per, 0.0);

    const int chunk = 16;
    std::vector<float> inputs;
    const float sign = target == Target::kPresent ? 1.0f : -1.0f;
    for (int k0 = 0; k0 < steps; k0 += chunk) {
        const int bn = std::min(chunk, steps - k0);
        inputs.resize(static_cast<std::size_t>(bn) * per);
        for (int k = 0; k < bn; ++k) {
            const float alpha = (static_cast<float>(k0 + k) + 0.5f) / static_cast<float>(steps);
            float* dst = inputs.data() + static_cast<std::size_t>(k) * per;
            for (std::size_t i = 0; i < per; ++i) dst[i] = b[i] + alpha * (x[i] - b[i]);
        }
        net.forward(inputs.data(), bn, false, jobs);
        const auto gin = net.backward(std::vector<float>(bn, sign), false, true, jobs);
        for (int k = 0; k < bn; ++k) {
            const float* g = gin.data() + static_cast<std::size_t>(k) * per;
            for (std::size_t i = 0; i < per; ++i) grad_sum[i] += g[i];
        }
    }

    AttributionMap out;
    out.map = Image(patch.height, patch.width, 1);
    out.steps = steps;
    const int hw = patch.height * patch.width;
    for (int c = 0; c < patch.channels; ++c) {
        for (int p = 0; p < hw; ++p) {
            const std::size_t i = static_cast<std::size_t>(c) * hw + p;
            out.map.data[p] +=
                static_cast<float>((x[i] - b[i]) * grad_sum[i] / static_cast<double>(steps));
        }
    }
    return out;
}

inline AttributionMap integrated_gradients(const ModelParams& params, const Image& patch,
                                           const Image& baseline, int steps,
                                           Target target = Target::kPresent, int jobs = 1) {
    check_patch_shape(params, patch);
    Network<float> net(params);
    return integrated_gradients(net, patch, baseline, steps, target, jobs);
}

// Greedy XRAI selection over a precomputed attribution map and segment
// pool. Ranking uses the signed mean attribution over a segment's
// uncovered pixels, the gain of the reference XRAI implementation: over a
// pure-noise segment the signed mean vanishes with segment size while a
// rectified mean would converge to sigma/sqrt(2*pi) and drown faint
// objects. Emitted pixel scores are the selection density clamped to be
// non-negative and non-increasing along the selection order. Exposed
// separately so the degenerate-pool fallback is testable.
inline Heatmap xrai_select(const Image& attribution, const SegmentSet& segments) {
    const int h = attribution.height, w = attribution.width;
    const int n = h * w;
    Heatmap out;
    out.map = Image(h, w, 1);

    if (segments.pool.empty()) {
        out.map = attribution;
        out.fallback = true;
        out.meta["fallback"] = "degenerate segment pool; raw averaged IG emitted";
        return out;
    }

    // per-pool-segment attribution sum and uncovered count
    const std::size_t pool_n = segments.pool.size();
    std::vector<double> sum_attr(pool_n, 0.0);
    std::vector<int> uncovered(pool_n, 0);
    // pixel -> pool index per scale, for incremental updates
    std::vector<std::vector<int>> pixel_pool(segments.scale_labels.size());
    {
        std::vector<int> base(segments.scale_labels.size(), 0);
        for (std::size_t s = 1; s < segments.scale_labels.size(); ++s)
            base[s] = base[s - 1] + segments.scale_counts[s - 1];
        for (std::size_t s = 0; s < segments.scale_labels.size(); ++s) {
            pixel_pool[s].resize(n);
            for (int p = 0; p < n; ++p) pixel_pool[s][p] = base[s] + segments.scale_labels[s][p];
        }
    }
    for (std::size_t k = 0; k < pool_n; ++k) {
        uncovered[k] = static_cast<int>(segments.pool[k].pixels.size());
        for (const int p : segments.pool[k].pixels) sum_attr[k] += attribution.data[p];
    }

    std::vector<std::uint8_t> covered(n, 0);
    int covered_count = 0;
    double floor_density = std::numeric_limits<double>::infinity();
    while (covered_count < n) {
        // highest density; ties: smaller segment id, then lower scale index
        int best = -1;
        double best_density = 0.0;
        for (std::size_t k = 0; k < pool_n; ++k) {
            if (uncovered[k] <= 0) continue;
            const double density = sum_attr[k] / uncovered[k];
            if (best < 0 || density > best_density ||
                (density == best_density &&
                 (segments.pool[k].id < segments.pool[best].id ||
                  (segments.pool[k].id == segments.pool[best].id &&
                   segments.pool[k].scale < segments.pool[best].scale)))) {
                best = static_cast<int>(k);
                best_density = density;
            }
        }
        if (best < 0) break;  // cannot happen: every pixel is in some segment
        // emitted scores are non-negative and never increase along the order
        const double emitted = std::min(std::max(best_density, 0.0), floor_density);
        floor_density = emitted;
        int new_pixels = 0;
        for (const int p : segments.pool[best].pixels) {
            if (covered[p]) continue;
            covered[p] = 1;
            ++covered_count;
            ++new_pixels;
            out.map.data[p] = static_cast<float>(emitted);
            const float v = attribution.data[p];
            for (std::size_t s = 0; s < pixel_pool.size(); ++s) {
                const int k = pixel_pool[s][p];
                --uncovered[k];
                sum_attr[k] -= v;
            }
        }
        out.step_density.push_back(static_cast<float>(emitted));
        out.step_new_pixels.push_back(new_pixels);
    }
    return out;
}

// Full XRAI attribution for one patch: integrated gradients per baseline
// (averaged), multi-scale segmentation of the luminance channel, then
// greedy density selection from the cross-scale segment pool.
inline Heatmap xrai_attribution(Network<float>& net, const ModelParams& params, const Image& patch,
                                const XraiConfig& config, int jobs = 1) {
    config.validate();
    check_patch_shape(params, patch);

    Image attr(patch.height, patch.width, 1);
    for (const IgBaseline b : config.baselines) {
        const Image base = baseline_image(b, patch.height, patch.width, patch.channels);
        const AttributionMap ig =
            integrated_gradients(net, patch, base, config.ig_steps, Target::kPresent, jobs);
        for (std::size_t i = 0; i < attr.data.size(); ++i) attr.data[i] += ig.map.data[i];
    }
    const float inv = 1.0f / static_cast<float>(config.baselines.size());
    for (auto& v : attr.data) v *= inv;

    const SegmentSet segments = segment_multiscale(patch, config.scales, config.area_floor);
    Heatmap heat = xrai_select(attr, segments);
    heat.meta["ig_steps"] = config.ig_steps;
    heat.meta["baselines"] = [&] {
        nlohmann::json a = nlohmann::json::array();
        for (const auto b : config.baselines) a.push_back(b == IgBaseline::kBlack ? "black" : "white");
        return a;
    }();
    heat.meta["scales"] = config.scales;
    heat.meta["area_floor"] = config.area_floor;
    return heat;
}

inline Heatmap xrai_attribution(const ModelParams& params, const Image& patch,
                                const XraiConfig& config, int jobs = 1) {
    Network<float> net(params);
    return xrai_attribution(net, params, patch, config, jobs);
}

// Heatmap PNG export: 16-bit grayscale, min-max normalized, with the
// normalization constants in a JSON sidecar.
inline void save_heatmap(const std::string& png_path, const std::string& sidecar_path,
                         const Image& map) {
    write_png16(png_path, normalized(map));
    auto [lo, hi] = min_max(map);
    nlohmann::json j;
    j["min"] = lo;
    j["max"] = hi;
    j["width"] = map.width;
    j["height"] = map.height;
    std::ofstream out(sidecar_path);
    if (!out) throw IoError("cannot write heatmap sidecar: " + sidecar_path);
    out << j.dump(1) << "\n";
}

}  // namespace dso
