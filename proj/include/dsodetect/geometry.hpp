#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "dsodetect/common.hpp"
#include "dsodetect/image.hpp"

namespace dso {

// Polygon in pixel-edge coordinates: pixel (r,c) occupies the unit square
// [c,c+1]x[r,r+1]. Closure is implicit (last vertex connects to first).
using Vertex = std::array<double, 2>;  // {x, y}
using Polygon = std::vector<Vertex>;

inline double polygon_area(const Polygon& poly) {
    if (poly.size() < 3) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto& a = poly[i];
        const auto& b = poly[(i + 1) % poly.size()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    return std::fabs(acc) * 0.5;
}

struct Region {
    int label = 0;
    long long area = 0;  // pixel count
    Polygon polygon;     // outer boundary
    std::vector<std::int64_t> pixels;  // flat indices y*width+x
};

struct RegionMap {
    int height = 0;
    int width = 0;
    std::vector<int> labels;  // 0 = background, 1..n = components
    std::vector<Region> regions;
};

namespace detail {

// 4-connected component labeling, BFS in raster order so labels are
// deterministic.
inline int label_components4(const std::vector<std::uint8_t>& mask, int h, int w,
                             std::vector<int>& labels) {
    labels.assign(static_cast<std::size_t>(h) * w, 0);
    int next = 0;
    std::deque<std::int64_t> queue;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(mask.size()); ++i) {
        if (!mask[i] || labels[i]) continue;
        ++next;
        labels[i] = next;
        queue.push_back(i);
        while (!queue.empty()) {
            const std::int64_t p = queue.front();
            queue.pop_front();
            const int y = static_cast<int>(p / w);
            const int x = static_cast<int>(p % w);
            const std::array<std::array<int, 2>, 4> nbr{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
            for (const auto& n : nbr) {
                if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
                const std::int64_t q = static_cast<std::int64_t>(n[0]) * w + n[1];
                if (mask[q] && !labels[q]) {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    return next;
}

enum Dir { E = 0, S = 1, W = 2, N = 3 };

inline constexpr std::array<std::array<int, 2>, 4> kStep{{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}};

// Cell on the right / left of a directed edge starting at (x,y).
inline std::array<int, 2> right_cell(int x, int y, int d) {
    switch (d) {
        case E: return {y, x};
        case S: return {y, x - 1};
        case W: return {y - 1, x - 1};
        default: return {y - 1, x};
    }
}
inline std::array<int, 2> left_cell(int x, int y, int d) {
    switch (d) {
        case E: return {y - 1, x};
        case S: return {y, x};
        case W: return {y, x - 1};
        default: return {y - 1, x - 1};
    }
}

struct CellTest {
    const std::vector<int>* labels;
    int h, w, id;
    bool operator()(const std::array<int, 2>& rc) const {
        if (rc[0] < 0 || rc[0] >= h || rc[1] < 0 || rc[1] >= w) return false;
        return (*labels)[static_cast<std::size_t>(rc[0]) * w + rc[1]] == id;
    }
};

inline bool edge_valid(int x, int y, int d, const CellTest& in) {
    return in(right_cell(x, y, d)) && !in(left_cell(x, y, d));
}

// Walks the outer boundary of one labeled component along pixel edges,
// keeping the component on the right (clockwise in image coordinates).
// At saddle corners (two diagonal cells of the same component) the walk
// hugs the current cell and the shared corner is chamfered by a quarter
// pixel, which keeps every traced polygon strictly simple.
inline Polygon trace_outer_boundary(const std::vector<int>& labels, int h, int w, int id,
                                    int start_r, int start_c) {
    const CellTest in{&labels, h, w, id};
    Polygon poly;
    int x = start_c, y = start_r, d = E;  // top edge of the raster-first pixel
    const int sx = x, sy = y, sd = d;
    poly.push_back({static_cast<double>(x), static_cast<double>(y)});
    while (true) {
        x += kStep[d][0];
        y += kStep[d][1];
        // candidate directions: right turn, straight, left turn
        const int cand[3] = {(d + 1) & 3, d, (d + 3) & 3};
        int nd = -1;
        for (int k = 0; k < 3; ++k) {
            if (edge_valid(x, y, cand[k], in)) {
                nd = cand[k];
                break;
            }
        }
        if (nd < 0) break;  // single-edge stubs cannot happen on valid masks
        if (x == sx && y == sy && nd == sd) break;
        if (nd != d) {
            const bool diag_a = in({y - 1, x - 1}) && in({y, x}) && !in({y - 1, x}) && !in({y, x - 1});
            const bool diag_b = in({y - 1, x}) && in({y, x - 1}) && !in({y - 1, x - 1}) && !in({y, x});
            if (diag_a || diag_b) {
                poly.push_back({x - 0.25 * kStep[d][0], y - 0.25 * kStep[d][1]});
                poly.push_back({x + 0.25 * kStep[nd][0], y + 0.25 * kStep[nd][1]});
            } else {
                poly.push_back({static_cast<double>(x), static_cast<double>(y)});
            }
        }
        d = nd;
    }
    return poly;
}

}  // namespace detail

// Labels 4-connected components of a binary mask and traces the outer
// boundary polygon of every component with at least min_area pixels.
inline RegionMap trace_regions(const std::vector<std::uint8_t>& mask, int h, int w,
                               long long min_area = 1) {
    RegionMap out;
    out.height = h;
    out.width = w;
    const int n = detail::label_components4(mask, h, w, out.labels);
    std::vector<long long> areas(static_cast<std::size_t>(n) + 1, 0);
    std::vector<int> first_r(static_cast<std::size_t>(n) + 1, -1);
    std::vector<int> first_c(static_cast<std::size_t>(n) + 1, -1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int lbl = out.labels[static_cast<std::size_t>(y) * w + x];
            if (!lbl) continue;
            ++areas[lbl];
            if (first_r[lbl] < 0) {
                first_r[lbl] = y;
                first_c[lbl] = x;
            }
        }
    }
    for (int lbl = 1; lbl <= n; ++lbl) {
        if (areas[lbl] < min_area) continue;
        Region region;
        region.label = lbl;
        region.area = areas[lbl];
        region.polygon = detail::trace_outer_boundary(out.labels, h, w, lbl, first_r[lbl], first_c[lbl]);
        out.regions.push_back(std::move(region));
    }
    std::vector<int> region_of(static_cast<std::size_t>(n) + 1, -1);
    for (std::size_t k = 0; k < out.regions.size(); ++k) region_of[out.regions[k].label] = static_cast<int>(k);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.labels.size()); ++i) {
        const int lbl = out.labels[i];
        if (lbl && region_of[lbl] >= 0) out.regions[region_of[lbl]].pixels.push_back(i);
    }
    return out;
}

// Even-odd scanline rasterization: a pixel is covered when its center
// (c+0.5, r+0.5) lies inside the polygon. Polygons traced from masks by
// trace_regions rasterize back to exactly their source pixels.
inline std::vector<std::uint8_t> rasterize_polygon(const Polygon& poly, int h, int w) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
    if (poly.size() < 3) return mask;
    double ymin = poly[0][1], ymax = poly[0][1];
    for (const auto& v : poly) {
        ymin = std::min(ymin, v[1]);
        ymax = std::max(ymax, v[1]);
    }
    const int r0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int r1 = std::min(h - 1, static_cast<int>(std::ceil(ymax)));
    std::vector<double> xs;
    for (int r = r0; r <= r1; ++r) {
        const double yc = r + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < poly.size(); ++i) {
            const auto& a = poly[i];
            const auto& b = poly[(i + 1) % poly.size()];
            const double y0 = a[1], y1 = b[1];
            if (y0 == y1) continue;
            // half-open rule on the y interval avoids double-counting vertices
            if ((y0 <= yc && yc < y1) || (y1 <= yc && yc < y0)) {
                xs.push_back(a[0] + (yc - y0) * (b[0] - a[0]) / (y1 - y0));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            int c0 = static_cast<int>(std::ceil(xs[k] - 0.5));
            int c1 = static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1;
            c0 = std::max(c0, 0);
            c1 = std::min(c1, w - 1);
            for (int c = c0; c <= c1; ++c) mask[static_cast<std::size_t>(r) * w + c] = 1;
        }
    }
    return mask;
}

// Draws the closed polygon outline onto an RGB image.
inline void draw_polygon(Image& img, const Polygon& poly, float r, float g, float b) {
    if (poly.size() < 2 || img.channels != 3) return;
    auto put = [&](int x, int y) {
        if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
    };
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto& p = poly[i];
        const auto& q = poly[(i + 1) % poly.size()];
        int x0 = static_cast<int>(std::lround(p[0]));
        int y0 = static_cast<int>(std::lround(p[1]));
        const int x1 = static_cast<int>(std::lround(q[0]));
        const int y1 = static_cast<int>(std::lround(q[1]));
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int stepx = x0 < x1 ? 1 : -1, stepy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            put(x0, y0);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += stepx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += stepy;
            }
        }
    }
}

}  // namespace dso
