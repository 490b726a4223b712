#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "dsodetect/common.hpp"
#include "dsodetect/image.hpp"

namespace dso {

// Per-scale pixel labelings plus the flattened cross-scale segment pool.
// At every scale the segment ids partition the grid and each segment is
// 4-connected.
struct SegmentSet {
    int height = 0;
    int width = 0;
    std::vector<std::vector<int>> scale_labels;  // [scale][pixel] -> 0-based id
    std::vector<int> scale_counts;

    struct PoolSegment {
        int scale = 0;
        int id = 0;
        std::vector<int> pixels;
    };
    std::vector<PoolSegment> pool;
};

namespace segdetail {

struct DisjointSet {
    std::vector<int> parent, rank_;
    std::vector<int> size;
    std::vector<float> internal;  // max internal edge weight (FH criterion)

    explicit DisjointSet(int n) : parent(n), rank_(n, 0), size(n, 1), internal(n, 0.0f) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    }
    int join(int a, int b, float w) {
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent[b] = a;
        size[a] += size[b];
        internal[a] = w;
        if (rank_[a] == rank_[b]) ++rank_[a];
        return a;
    }
};

struct Edge {
    float w;
    int a, b;
};

inline Image gaussian_smooth(const Image& gray, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> kernel(2 * radius + 1);
    float norm = 0.0f;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = static_cast<float>(std::exp(-(i * i) / (2.0 * sigma * sigma)));
        norm += kernel[i + radius];
    }
    for (auto& k : kernel) k /= norm;
    const int h = gray.height, w = gray.width;
    Image tmp(h, w, 1), out(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * gray.at(y, std::clamp(x + i, 0, w - 1));
            tmp.at(y, x) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp.at(std::clamp(y + i, 0, h - 1), x);
            out.at(y, x) = acc;
        }
    return out;
}

}  // namespace segdetail

// Graph-based segmentation on a single-channel image (Felzenszwalb /
// Huttenlocher criterion on the 4-connected pixel graph, then segments
// below area_floor merged into their most similar neighbor by mean
// intensity). Returns a compact 0-based labeling in raster order of first
// occurrence and the segment count. Larger k_scale yields larger segments.
inline int felzenszwalb_segment(const Image& gray, double k_scale, int area_floor,
                                std::vector<int>& labels, double smooth_sigma = 0.8) {
    if (gray.channels != 1) throw ConfigError("felzenszwalb_segment: expects 1 channel");
    const int h = gray.height, w = gray.width;
    const int n = h * w;
    const Image sm = smooth_sigma > 0.0 ? segdetail::gaussian_smooth(gray, smooth_sigma) : gray;

    std::vector<segdetail::Edge> edges;
    edges.reserve(static_cast<std::size_t>(2) * n);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int i = y * w + x;
            if (x + 1 < w)
                edges.push_back({std::fabs(sm.at(y, x) - sm.at(y, x + 1)), i, i + 1});
            if (y + 1 < h)
                edges.push_back({std::fabs(sm.at(y, x) - sm.at(y + 1, x)), i, i + w});
        }
    }
    std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
        if (a.w != b.w) return a.w < b.w;
        if (a.a != b.a) return a.a < b.a;
        return a.b < b.b;
    });

    segdetail::DisjointSet ds(n);
    const float k = static_cast<float>(k_scale);
    for (const auto& e : edges) {
        const int ra = ds.find(e.a), rb = ds.find(e.b);
        if (ra == rb) continue;
        const float ta = ds.internal[ra] + k / static_cast<float>(ds.size[ra]);
        const float tb = ds.internal[rb] + k / static_cast<float>(ds.size[rb]);
        if (e.w <= ta && e.w <= tb) ds.join(ra, rb, e.w);
    }

    // area-floor cleanup: merge small segments into the most similar
    // 4-adjacent neighbor (mean intensity), smallest segments first
    if (area_floor > 1) {
        while (true) {
            std::vector<double> sum(n, 0.0);
            std::vector<int> cnt(n, 0);
            for (int i = 0; i < n; ++i) {
                const int r = ds.find(i);
                sum[r] += sm.data[i];
                ++cnt[r];
            }
            std::map<std::pair<int, int>, bool> adjacent;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const int r0 = ds.find(y * w + x);
                    if (x + 1 < w) {
                        const int r1 = ds.find(y * w + x + 1);
                        if (r0 != r1) adjacent[{std::min(r0, r1), std::max(r0, r1)}] = true;
                    }
                    if (y + 1 < h) {
                        const int r1 = ds.find((y + 1) * w + x);
                        if (r0 != r1) adjacent[{std::min(r0, r1), std::max(r0, r1)}] = true;
                    }
                }
            }
            std::vector<int> small;
            for (int i = 0; i < n; ++i)
                if (ds.find(i) == i && cnt[i] > 0 && cnt[i] < area_floor) small.push_back(i);
            if (small.empty()) break;
            std::sort(small.begin(), small.end(), [&](int a, int b) {
                if (cnt[a] != cnt[b]) return cnt[a] < cnt[b];
                return a < b;
            });
            bool merged_any = false;
            for (const int s : small) {
                if (ds.find(s) != s) continue;  // already absorbed this pass
                const double mean_s = sum[s] / cnt[s];
                int best = -1;
                double best_diff = 0.0;
                for (const auto& [pair, _] : adjacent) {
                    int other = -1;
                    if (pair.first == s) other = pair.second;
                    else if (pair.second == s) other = pair.first;
                    if (other < 0 || ds.find(other) == s) continue;
                    other = ds.find(other);
                    if (other == s) continue;
                    const double diff = std::fabs(sum[other] / cnt[other] - mean_s);
                    if (best < 0 || diff < best_diff || (diff == best_diff && other < best)) {
                        best = other;
                        best_diff = diff;
                    }
                }
                if (best >= 0) {
                    ds.join(best, s, 0.0f);  // stats refreshed next pass
                    merged_any = true;
                }
            }
            if (!merged_any) break;  // single segment left
        }
    }

    labels.assign(n, -1);
    std::vector<int> remap(n, -1);
    int next = 0;
    for (int i = 0; i < n; ++i) {
        const int r = ds.find(i);
        if (remap[r] < 0) remap[r] = next++;
        labels[i] = remap[r];
    }
    return next;
}

// Runs the graph segmentation once per scale on the luminance channel and
// flattens all segments into the cross-scale pool (scale-major, id-minor).
inline SegmentSet segment_multiscale(const Image& patch, const std::vector<double>& scales,
                                     int area_floor = 20) {
    if (scales.empty()) throw ConfigError("segment_multiscale: need at least one scale");
    const Image lum = to_luminance(patch);
    SegmentSet out;
    out.height = lum.height;
    out.width = lum.width;
    for (std::size_t s = 0; s < scales.size(); ++s) {
        std::vector<int> labels;
        const int count = felzenszwalb_segment(lum, scales[s], area_floor, labels);
        std::vector<SegmentSet::PoolSegment> segs(count);
        for (int id = 0; id < count; ++id) {
            segs[id].scale = static_cast<int>(s);
            segs[id].id = id;
        }
        for (int i = 0; i < lum.height * lum.width; ++i) segs[labels[i]].pixels.push_back(i);
        out.scale_labels.push_back(std::move(labels));
        out.scale_counts.push_back(count);
        for (auto& seg : segs) out.pool.push_back(std::move(seg));
    }
    return out;
}

}  // namespace dso
