#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsodetect/attribution.hpp"
#include "dsodetect/common.hpp"
#include "dsodetect/evaluation.hpp"
#include "dsodetect/geometry.hpp"
#include "dsodetect/image.hpp"
#include "dsodetect/nn.hpp"
#include "dsodetect/train.hpp"

namespace dso {

inline constexpr int kPatchSize = 224;

struct PatchGrid {
    int orig_h = 0, orig_w = 0;
    int patch = kPatchSize;
    int overlap = 0;
    int stride = kPatchSize;
    int rows = 0, cols = 0;
    int padded_h = 0, padded_w = 0;

    struct Slot {
        int row = 0, col = 0;  // grid position
        int y = 0, x = 0;      // pixel offset in the padded image
    };
    std::vector<Slot> slots;
};

// Row-major tiling with reflective padding up to the grid size. With
// overlap 0 the padded size is the smallest patch multiple covering the
// image.
inline PatchGrid tile(int height, int width, int overlap = 0) {
    if (height < 1 || width < 1) throw DomainError("tile: image must be at least 1x1");
    if (overlap < 0 || overlap >= kPatchSize) throw ConfigError("tile: overlap must be in [0,223]");
    PatchGrid g;
    g.orig_h = height;
    g.orig_w = width;
    g.overlap = overlap;
    g.stride = kPatchSize - overlap;
    auto axis_count = [&](int dim) {
        if (dim <= kPatchSize) return 1;
        return static_cast<int>((dim - kPatchSize + g.stride - 1) / g.stride) + 1;
    };
    g.rows = axis_count(height);
    g.cols = axis_count(width);
    g.padded_h = kPatchSize + (g.rows - 1) * g.stride;
    g.padded_w = kPatchSize + (g.cols - 1) * g.stride;
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c)
            g.slots.push_back({r, c, r * g.stride, c * g.stride});
    return g;
}

inline PatchGrid tile(const Image& image, int overlap = 0) {
    return tile(image.height, image.width, overlap);
}

namespace pipedetail {

// mirror fold including the edge pixel (…cba|abc…|cba…); handles any
// padding amount, including dims smaller than the pad
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

}  // namespace pipedetail

inline Image pad_reflect(const Image& img, int padded_h, int padded_w) {
    Image out(padded_h, padded_w, img.channels);
    for (int y = 0; y < padded_h; ++y) {
        const int sy = pipedetail::reflect_index(y, img.height);
        for (int x = 0; x < padded_w; ++x) {
            const int sx = pipedetail::reflect_index(x, img.width);
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

inline Image extract_slot(const Image& padded, const PatchGrid::Slot& slot) {
    Image out(kPatchSize, kPatchSize, padded.channels);
    for (int y = 0; y < kPatchSize; ++y)
        for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < padded.channels; ++c)
                out.at(y, x, c) = padded.at(slot.y + y, slot.x + x, c);
    return out;
}

struct Selection {
    std::vector<double> probabilities;  // one per slot
    std::vector<int> selected;          // slot indices with prob >= threshold
};

// Classifies every slot and keeps those at or above the threshold; all
// probabilities are recorded for the run report.
inline Selection select_patches(const Image& image, const PatchGrid& grid,
                                const ModelParams& params, double threshold, int jobs = 1) {
    if (threshold < 0.0 || threshold > 1.0)
        throw ConfigError("select_patches: threshold must be in [0,1]");
    const Image padded = pad_reflect(image, grid.padded_h, grid.padded_w);
    Network<float> net(params);
    Selection sel;
    sel.probabilities.resize(grid.slots.size());

    const std::size_t per = net.input_count();
    const int chunk = 16;
    std::vector<float> inputs;
    for (std::size_t s0 = 0; s0 < grid.slots.size(); s0 += chunk) {
        const std::size_t s1 = std::min(grid.slots.size(), s0 + chunk);
        inputs.resize((s1 - s0) * per);
        parallel_for(s1 - s0, jobs, [&](std::size_t k) {
            const Image patch = extract_slot(padded, grid.slots[s0 + k]);
            const auto chw = image_to_chw(patch);
            std::copy(chw.begin(), chw.end(), inputs.begin() + k * per);
        });
        const auto logits = net.forward(inputs.data(), static_cast<int>(s1 - s0), false, jobs);
        for (std::size_t k = 0; k < logits.size(); ++k)
            sel.probabilities[s0 + k] = sigmoid(logits[k]);
    }
    for (std::size_t s = 0; s < grid.slots.size(); ++s)
        if (sel.probabilities[s] >= threshold) sel.selected.push_back(static_cast<int>(s));
    return sel;
}

// Stitches per-slot heatmaps back to the original frame. Pixels covered by
// several selected slots are averaged; pixels covered by none are zero.
// Accumulates sums and counts, divides once, so the result is independent
// of slot order.
inline Image stitch(const std::vector<Image>& heatmaps, const std::vector<int>& selected,
                    const PatchGrid& grid) {
    if (heatmaps.size() != selected.size())
        throw DomainError("stitch: need exactly one heatmap per selected slot");
    Image sums(grid.padded_h, grid.padded_w, 1);
    std::vector<int> counts(static_cast<std::size_t>(grid.padded_h) * grid.padded_w, 0);
    for (std::size_t k = 0; k < selected.size(); ++k) {
        const auto& slot = grid.slots[selected[k]];
        const Image& hm = heatmaps[k];
        if (hm.height != kPatchSize || hm.width != kPatchSize || hm.channels != 1)
            throw DomainError("stitch: heatmap must be 224x224x1");
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x) {
                sums.at(slot.y + y, slot.x + x) += hm.at(y, x);
                ++counts[static_cast<std::size_t>(slot.y + y) * grid.padded_w + slot.x + x];
            }
    }
    Image out(grid.orig_h, grid.orig_w, 1);
    for (int y = 0; y < grid.orig_h; ++y)
        for (int x = 0; x < grid.orig_w; ++x) {
            const int c = counts[static_cast<std::size_t>(y) * grid.padded_w + x];
            out.at(y, x) = c > 0 ? sums.at(y, x) / static_cast<float>(c) : 0.0f;
        }
    return out;
}

struct Contour {
    Polygon polygon;
    double confidence = 0.0;
    std::string label = "dso";
};

struct ContourSet {
    int height = 0;
    int width = 0;
    std::vector<Contour> contours;
};

inline Annotation contourset_to_annotation(const ContourSet& cs, const std::string& image_id) {
    Annotation ann;
    ann.image_id = image_id;
    ann.width = cs.width;
    ann.height = cs.height;
    for (const auto& c : cs.contours) {
        AnnObject obj;
        obj.label = c.label;
        obj.polygon = c.polygon;
        obj.confidence = c.confidence;
        obj.has_confidence = true;
        ann.objects.push_back(std::move(obj));
    }
    return ann;
}

namespace pipedetail {

inline std::vector<std::uint8_t> morph_open3(const std::vector<std::uint8_t>& mask, int h, int w) {
    std::vector<std::uint8_t> eroded(mask.size(), 0), opened(mask.size(), 0);
    auto at = [&](const std::vector<std::uint8_t>& m, int y, int x) -> bool {
        if (y < 0 || y >= h || x < 0 || x >= w) return false;
        return m[static_cast<std::size_t>(y) * w + x] != 0;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool all = true;
            for (int dy = -1; dy <= 1 && all; ++dy)
                for (int dx = -1; dx <= 1 && all; ++dx)
                    if (!at(mask, y + dy, x + dx)) all = false;
            eroded[static_cast<std::size_t>(y) * w + x] = all ? 1 : 0;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool any = false;
            for (int dy = -1; dy <= 1 && !any; ++dy)
                for (int dx = -1; dx <= 1 && !any; ++dx)
                    if (at(eroded, y + dy, x + dx)) any = true;
            opened[static_cast<std::size_t>(y) * w + x] = any ? 1 : 0;
        }
    return opened;
}

// nearest-rank percentile of a value pool (smallest element with at least
// p% of the pool at or below it)
inline float percentile_nearest_rank(std::vector<float>& pool, double p) {
    std::sort(pool.begin(), pool.end());
    const std::size_t m = pool.size();
    std::size_t idx = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(m)));
    if (idx > 0) --idx;
    if (idx >= m) idx = m - 1;
    return pool[idx];
}

}  // namespace pipedetail

// Binarizes the heatmap at the given percentile of its positive values,
// opens with a 3x3 element to drop specks, and traces the outer boundary
// of every component with at least min_area pixels. Confidence is the mean
// min-max-normalized heatmap value inside the component.
inline ContourSet heatmap_to_contours(const Image& heatmap, double percentile,
                                      long long min_area = 50) {
    if (heatmap.channels != 1) throw DomainError("heatmap_to_contours: expects 1 channel");
    if (!(percentile > 0.0 && percentile < 100.0))
        throw ConfigError("heatmap_to_contours: percentile must be in (0,100)");
    ContourSet cs;
    cs.height = heatmap.height;
    cs.width = heatmap.width;

    std::vector<float> positives;
    for (const float v : heatmap.data)
        if (v > 0.0f) positives.push_back(v);
    if (positives.empty()) return cs;

    const float thr = pipedetail::percentile_nearest_rank(positives, percentile);
    std::vector<std::uint8_t> mask(heatmap.data.size(), 0);
    for (std::size_t i = 0; i < heatmap.data.size(); ++i)
        if (heatmap.data[i] >= thr) mask[i] = 1;
    mask = pipedetail::morph_open3(mask, cs.height, cs.width);

    const Image norm = normalized(heatmap);
    const RegionMap rm = trace_regions(mask, cs.height, cs.width, min_area);
    for (const auto& region : rm.regions) {
        double acc = 0.0;
        for (const auto p : region.pixels) acc += norm.data[p];
        Contour c;
        c.polygon = region.polygon;
        c.confidence = region.pixels.empty() ? 0.0 : acc / static_cast<double>(region.pixels.size());
        cs.contours.push_back(std::move(c));
    }
    return cs;
}

namespace pipedetail {

// separable grayscale erosion/dilation with a (2r+1)^2 square element,
// monotonic-deque sliding window
inline void sliding_extreme(const std::vector<float>& src, std::vector<float>& dst, int n,
                            int stride, int count, int r, bool is_min) {
    std::deque<int> dq;
    for (int i = 0; i < count; ++i) {
        const int incoming = i + r;
        if (incoming < count) {
            const float v = src[static_cast<std::size_t>(incoming) * stride];
            while (!dq.empty()) {
                const float back = src[static_cast<std::size_t>(dq.back()) * stride];
                if (is_min ? back >= v : back <= v) dq.pop_back();
                else break;
            }
            dq.push_back(incoming);
        }
        while (!dq.empty() && dq.front() < i - r) dq.pop_front();
        dst[static_cast<std::size_t>(i) * stride] = src[static_cast<std::size_t>(dq.front()) * stride];
    }
    (void)n;
}

inline Image gray_morph(const Image& gray, int radius, bool erode_first) {
    const int h = gray.height, w = gray.width;
    Image a = gray, b(h, w, 1);
    auto pass = [&](const Image& in, Image& out, bool is_min) {
        // rows
        Image tmp(h, w, 1);
        for (int y = 0; y < h; ++y) {
            std::vector<float> row(in.data.begin() + static_cast<std::size_t>(y) * w,
                                   in.data.begin() + static_cast<std::size_t>(y + 1) * w);
            std::vector<float> out_row(w);
            sliding_extreme(row, out_row, w, 1, w, radius, is_min);
            std::copy(out_row.begin(), out_row.end(), tmp.data.begin() + static_cast<std::size_t>(y) * w);
        }
        // columns
        for (int x = 0; x < w; ++x) {
            std::vector<float> col(h), out_col(h);
            for (int y = 0; y < h; ++y) col[y] = tmp.at(y, x);
            sliding_extreme(col, out_col, h, 1, h, radius, is_min);
            for (int y = 0; y < h; ++y) out.at(y, x) = out_col[y];
        }
    };
    pass(a, b, erode_first);
    Image c(h, w, 1);
    pass(b, c, !erode_first);
    return c;
}

// returns {median, 1.4826*MAD}
inline std::pair<float, float> robust_stats(const std::vector<float>& values) {
    if (values.empty()) return {0.0f, 0.0f};
    std::vector<float> buf = values;
    const std::size_t mid = buf.size() / 2;
    std::nth_element(buf.begin(), buf.begin() + mid, buf.end());
    const float med = buf[mid];
    for (auto& v : buf) v = std::fabs(v - med);
    std::nth_element(buf.begin(), buf.begin() + mid, buf.end());
    return {med, 1.4826f * buf[mid]};
}

// block-median sky background with bilinear interpolation between block
// centers (SExtractor-style mesh)
inline Image mesh_background(const Image& gray, int block = 48) {
    const int h = gray.height, w = gray.width;
    const int by = std::max(1, (h + block - 1) / block);
    const int bx = std::max(1, (w + block - 1) / block);
    std::vector<float> med(static_cast<std::size_t>(by) * bx, 0.0f);
    std::vector<float> buf;
    for (int j = 0; j < by; ++j) {
        for (int i = 0; i < bx; ++i) {
            buf.clear();
            const int y0 = j * block, y1 = std::min(h, y0 + block);
            const int x0 = i * block, x1 = std::min(w, x0 + block);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) buf.push_back(gray.at(y, x));
            const std::size_t mid = buf.size() / 2;
            std::nth_element(buf.begin(), buf.begin() + mid, buf.end());
            med[static_cast<std::size_t>(j) * bx + i] = buf[mid];
        }
    }
    Image bg(h, w, 1);
    for (int y = 0; y < h; ++y) {
        const double fy = (y + 0.5) / block - 0.5;
        const int j0 = std::clamp(static_cast<int>(std::floor(fy)), 0, by - 1);
        const int j1 = std::min(j0 + 1, by - 1);
        const double wy = std::clamp(fy - j0, 0.0, 1.0);
        for (int x = 0; x < w; ++x) {
            const double fx = (x + 0.5) / block - 0.5;
            const int i0 = std::clamp(static_cast<int>(std::floor(fx)), 0, bx - 1);
            const int i1 = std::min(i0 + 1, bx - 1);
            const double wx = std::clamp(fx - i0, 0.0, 1.0);
            const double top = med[static_cast<std::size_t>(j0) * bx + i0] * (1 - wx) +
                               med[static_cast<std::size_t>(j0) * bx + i1] * wx;
            const double bot = med[static_cast<std::size_t>(j1) * bx + i0] * (1 - wx) +
                               med[static_cast<std::size_t>(j1) * bx + i1] * wx;
            bg.at(y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
        }
    }
    return bg;
}

}  // namespace pipedetail

// Classical star suppression standing in for a learned starless model:
// stars show up in the top-hat residual (luminance minus its morphological
// opening); residual peaks above k*sigma are masked, dilated, and replaced
// by the local median of unmasked pixels. Structures wider than the
// opening element survive in the background and are left untouched.
inline Image remove_stars(const Image& image, int star_scale_max = 6, float k_sigma = 4.0f) {
    if (image.channels != 3) throw DomainError("remove_stars: expects RGB");
    const int h = image.height, w = image.width;
    const Image lum = to_luminance(image);
    const Image opened = pipedetail::gray_morph(lum, star_scale_max, true);

    std::vector<float> residual(lum.data.size());
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = lum.data[i] - opened.data[i];
    // the top-hat residual of pure noise sits above zero (opening digs
    // below the mean), so stars are outliers relative to median + k*MAD
    const auto [med, sigma] = pipedetail::robust_stats(residual);
    const float cut = med + std::max(k_sigma * sigma, 1e-4f);

    std::vector<std::uint8_t> mask(residual.size(), 0);
    for (std::size_t i = 0; i < residual.size(); ++i)
        if (residual[i] > cut) mask[i] = 1;
    // dilate by 2 to catch halos
    std::vector<std::uint8_t> dilated(mask.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool any = false;
            for (int dy = -2; dy <= 2 && !any; ++dy)
                for (int dx = -2; dx <= 2 && !any; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w &&
                        mask[static_cast<std::size_t>(yy) * w + xx])
                        any = true;
                }
            dilated[static_cast<std::size_t>(y) * w + x] = any ? 1 : 0;
        }

    Image out = image;
    const int mr = star_scale_max + 2;  // median window radius
    std::vector<float> win;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (!dilated[i]) continue;
            for (int c = 0; c < 3; ++c) {
                win.clear();
                for (int dy = -mr; dy <= mr; ++dy)
                    for (int dx = -mr; dx <= mr; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        if (dilated[static_cast<std::size_t>(yy) * w + xx]) continue;
                        win.push_back(image.at(yy, xx, c));
                    }
                if (win.empty()) {
                    out.at(y, x, c) = opened.at(y, x);
                } else {
                    const std::size_t mid = win.size() / 2;
                    std::nth_element(win.begin(), win.begin() + mid, win.end());
                    out.at(y, x, c) = win[mid];
                }
            }
        }
    }
    return out;
}

// The star-removal baseline: suppress stars, subtract the mesh-median
// background, threshold the residual at k*sigma, and trace contours.
inline ContourSet baseline_contours(const Image& image, float k_sigma = 4.0f,
                                    long long min_area = 50) {
    const Image starless = remove_stars(image);
    const Image lum = to_luminance(starless);
    const Image bg = pipedetail::mesh_background(lum);

    Image resid(lum.height, lum.width, 1);
    for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] = lum.data[i] - bg.data[i];
    const auto [med, sigma] = pipedetail::robust_stats(resid.data);
    const float cut = med + std::max(k_sigma * sigma, 1e-4f);

    ContourSet cs;
    cs.height = lum.height;
    cs.width = lum.width;
    std::vector<std::uint8_t> mask(resid.data.size(), 0);
    for (std::size_t i = 0; i < resid.data.size(); ++i)
        if (resid.data[i] > cut) mask[i] = 1;
    mask = pipedetail::morph_open3(mask, cs.height, cs.width);

    const Image norm = normalized(resid);
    const RegionMap rm = trace_regions(mask, cs.height, cs.width, min_area);
    for (const auto& region : rm.regions) {
        double acc = 0.0;
        for (const auto p : region.pixels) acc += norm.data[p];
        Contour c;
        c.polygon = region.polygon;
        c.confidence = region.pixels.empty() ? 0.0 : acc / static_cast<double>(region.pixels.size());
        cs.contours.push_back(std::move(c));
    }
    return cs;
}

struct RunStats {
    long long slot_count = 0;
    long long selected_count = 0;
    long long forward_calls = 0;
    long long attribution_calls = 0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["slot_count"] = slot_count;
        j["selected_count"] = selected_count;
        j["forward_calls"] = forward_calls;
        j["attribution_calls"] = attribution_calls;
        j["wall_ms"] = wall_ms;
        return j;
    }
};

struct DetectConfig {
    double select_threshold = 0.5;
    double percentile = 70.0;  // contour binarization percentile
    long long min_area = 50;
    int overlap = 0;
    double prescale = 1.0;  // optional downscale before tiling
    XraiConfig xrai;
    int jobs = 1;
};

struct DetectResult {
    Image heatmap;  // full-frame stitched XRAI densities, original size
    ContourSet contours;
    RunStats stats;
};

// End-to-end detection: tile, classify every slot, attribute only the
// selected slots, stitch, extract contours.
inline DetectResult detect(const Image& image, const ModelParams& params,
                           const DetectConfig& config) {
    config.xrai.validate();
    const auto t0 = std::chrono::steady_clock::now();

    Image work = image;
    if (config.prescale != 1.0) {
        if (!(config.prescale > 0.0 && config.prescale <= 1.0))
            throw ConfigError("detect: prescale must be in (0,1]");
        const int sh = std::max(1, static_cast<int>(std::lround(image.height * config.prescale)));
        const int sw = std::max(1, static_cast<int>(std::lround(image.width * config.prescale)));
        work = resize_bilinear(image, sh, sw);
    }

    const PatchGrid grid = tile(work, config.overlap);
    const Selection sel = select_patches(work, grid, params, config.select_threshold, config.jobs);

    DetectResult result;
    result.stats.slot_count = static_cast<long long>(grid.slots.size());
    result.stats.selected_count = static_cast<long long>(sel.selected.size());
    result.stats.forward_calls = static_cast<long long>(grid.slots.size());

    const Image padded = pad_reflect(work, grid.padded_h, grid.padded_w);
    Network<float> net(params);
    std::vector<Image> heatmaps;
    heatmaps.reserve(sel.selected.size());
    for (const int s : sel.selected) {
        const Image patch = extract_slot(padded, grid.slots[s]);
        Heatmap hm = xrai_attribution(net, params, patch, config.xrai, config.jobs);
        heatmaps.push_back(std::move(hm.map));
        ++result.stats.attribution_calls;
    }

    Image stitched = stitch(heatmaps, sel.selected, grid);
    if (config.prescale != 1.0)
        stitched = resize_bilinear(stitched, image.height, image.width);

    result.contours = heatmap_to_contours(stitched, config.percentile, config.min_area);
    if (config.prescale != 1.0) {
        // contours were traced on the upscaled heatmap already; nothing to
        // rescale, but drop any polygon degenerated by interpolation
        ContourSet kept;
        kept.height = result.contours.height;
        kept.width = result.contours.width;
        for (auto& c : result.contours.contours)
            if (polygon_area(c.polygon) >= static_cast<double>(config.min_area)) kept.contours.push_back(std::move(c));
        result.contours = std::move(kept);
    }
    result.heatmap = std::move(stitched);

    const auto t1 = std::chrono::steady_clock::now();
    result.stats.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return result;
}

inline nlohmann::json contourset_to_json(const ContourSet& cs, const std::string& image_id) {
    return annotation_to_json(contourset_to_annotation(cs, image_id));
}

}  // namespace dso
