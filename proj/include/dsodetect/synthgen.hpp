#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsodetect/common.hpp"
#include "dsodetect/evaluation.hpp"
#include "dsodetect/geometry.hpp"
#include "dsodetect/image.hpp"

namespace dso {

// Label rule: a patch is dso_present when its truth mask covers at least
// this fraction of the patch. The source dataset gives no rule for
// edge-straddling patches; this convention is ours and is documented in
// the README.
inline constexpr float kMinVisibleFraction = 0.005f;

// A DSO's truth mask is the region where its overlay exceeds this
// fraction of peak brightness (the "visible extent").
inline constexpr float kMaskThreshold = 0.10f;

inline constexpr float kBaseSkyLevel = 0.06f;

// Stars are placed with a minimum pairwise separation of this many PSF
// FWHMs so point sources stay resolved.
inline constexpr float kStarMinSepFwhm = 3.0f;

struct InstrumentProfile {
    std::string name = "custom";
    int width = 0;
    int height = 0;
    float psf_fwhm = 3.0f;            // pixels
    float read_noise_sigma = 0.008f;  // intensity units
    float sky_gradient_max = 0.05f;   // intensity units

    void validate() const {
        if (width < 224 || height < 224)
            throw ConfigError("instrument profile: frame must be at least 224x224");
        if (!(psf_fwhm > 0.0f)) throw ConfigError("instrument profile: psf_fwhm must be > 0");
        if (read_noise_sigma < 0.0f || sky_gradient_max < 0.0f)
            throw ConfigError("instrument profile: noise/gradient must be >= 0");
    }
};

inline InstrumentProfile stellina_profile() {
    return {"stellina", 3096, 2080, 3.2f, 0.008f, 0.05f};
}

inline InstrumentProfile vespera_profile() {
    return {"vespera", 1920, 1080, 2.8f, 0.009f, 0.05f};
}

// Square test frame; width/height overridable for evaluation scenes.
inline InstrumentProfile square_profile(int side, const std::string& name = "square") {
    InstrumentProfile p;
    p.name = name;
    p.width = side;
    p.height = side;
    return p;
}

enum class DsoKind { kGalaxy, kNebula, kGlobularCluster };

inline const char* dso_kind_name(DsoKind k) {
    switch (k) {
        case DsoKind::kGalaxy: return "galaxy";
        case DsoKind::kNebula: return "nebula";
        default: return "cluster";
    }
}

struct DsoSpec {
    DsoKind kind = DsoKind::kGalaxy;
    float center_x = 0.0f;
    float center_y = 0.0f;
    float scale = 24.0f;       // radius of the 10%-of-peak isophote, pixels
    float brightness = 0.3f;   // peak intensity in (0,1]; 0 renders nothing

    // galaxy
    float sersic_index = 1.5f;
    float ellipticity = 0.0f;  // 0 = round, e -> minor axis shrinks by (1-e)
    float angle = 0.0f;        // radians

    // nebula
    float smooth_radius = 8.0f;  // base wavelength/2 of the blob noise
    int octaves = 3;

    // globular cluster
    int star_count = 80;
    float concentration = 3.0f;

    void validate(const InstrumentProfile& profile) const {
        if (center_x < 0 || center_y < 0 || center_x >= static_cast<float>(profile.width) ||
            center_y >= static_cast<float>(profile.height))
            throw DomainError("dso spec: center outside image bounds");
        if (!(scale > 0.0f)) throw DomainError("dso spec: scale must be > 0");
        if (brightness < 0.0f || brightness > 1.0f)
            throw DomainError("dso spec: brightness must be in [0,1]");
    }
};

struct TruthMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> on;

    long long area() const {
        long long acc = 0;
        for (auto v : on) acc += v ? 1 : 0;
        return acc;
    }
};

struct SkyImage {
    Image pixels;
    std::uint64_t seed = 0;
    std::string profile_name;
};

namespace detail {

inline double lattice_hash(std::uint64_t seed, std::int64_t gx, std::int64_t gy) {
    std::uint64_t s = seed ^ (static_cast<std::uint64_t>(gx) * 0x9e3779b97f4a7c15ULL) ^
                      (static_cast<std::uint64_t>(gy) * 0xc2b2ae3d27d4eb4fULL);
    return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

// Multi-octave value noise in [0,1], deterministic in (seed, x, y).
inline double fbm(std::uint64_t seed, double x, double y, double wavelength, int octaves) {
    double total = 0.0, amp = 1.0, norm = 0.0;
    double fx = x / std::max(2.0, wavelength);
    double fy = y / std::max(2.0, wavelength);
    for (int o = 0; o < std::max(1, octaves); ++o) {
        const auto gx = static_cast<std::int64_t>(std::floor(fx));
        const auto gy = static_cast<std::int64_t>(std::floor(fy));
        const double tx = fade(fx - gx), ty = fade(fy - gy);
        const std::uint64_t os = seed + 0x51ed2701u * static_cast<std::uint64_t>(o + 1);
        const double v00 = lattice_hash(os, gx, gy);
        const double v10 = lattice_hash(os, gx + 1, gy);
        const double v01 = lattice_hash(os, gx, gy + 1);
        const double v11 = lattice_hash(os, gx + 1, gy + 1);
        const double v = (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
        total += amp * v;
        norm += amp;
        amp *= 0.5;
        fx *= 2.0;
        fy *= 2.0;
    }
    return total / norm;
}

// Scalar intensity field of one DSO over a window; peak equals
// spec.brightness by construction.
inline void render_dso_field(const DsoSpec& spec, std::uint64_t seed, int h, int w, Image& field) {
    field = Image(h, w, 1, 0.0f);
    if (spec.brightness <= 0.0f) return;
    const double cx = spec.center_x, cy = spec.center_y, s = spec.scale;

    double rwin = 0.0;
    switch (spec.kind) {
        case DsoKind::kGalaxy:
            rwin = s * std::min(6.0, std::pow(std::log10(500.0), static_cast<double>(spec.sersic_index)));
            break;
        case DsoKind::kNebula:
            rwin = 2.0 * s;
            break;
        case DsoKind::kGlobularCluster:
            rwin = 2.4 * s;
            break;
    }
    rwin = std::max(rwin, 4.0);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rwin)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rwin)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - rwin)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + rwin)));
    if (x0 > x1 || y0 > y1) return;

    const double ln10 = std::log(10.0);
    if (spec.kind == DsoKind::kGalaxy) {
        // Sersic-family radial law, peak-normalized with the 10% isophote
        // pinned at r = scale: I(r) = B * 10^-((r/scale)^(1/n)).
        const double inv_n = 1.0 / std::max(0.2, static_cast<double>(spec.sersic_index));
        const double ca = std::cos(spec.angle), sa = std::sin(spec.angle);
        const double minor = std::max(0.05, 1.0 - static_cast<double>(spec.ellipticity));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double xr = dx * ca + dy * sa;
                const double yr = -dx * sa + dy * ca;
                const double r = std::sqrt(xr * xr + (yr / minor) * (yr / minor)) / s;
                field.at(y, x) = static_cast<float>(spec.brightness * std::exp(-ln10 * std::pow(r, inv_n)));
            }
        }
    } else if (spec.kind == DsoKind::kNebula) {
        // Blob noise modulating a Gaussian falloff whose 10% point sits
        // near r = scale, so mask area tracks pi*scale^2.
        const double wavelength = 2.0 * std::max(2.0f, spec.smooth_radius);
        double raw_max = 0.0;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double u2 = (dx * dx + dy * dy) / (s * s);
                const double fall = std::exp(-ln10 * u2);
                const double m = 0.55 + 0.55 * fbm(seed, x - cx, y - cy, wavelength, spec.octaves);
                const double v = m * fall;
                field.at(y, x) = static_cast<float>(v);
                raw_max = std::max(raw_max, v);
            }
        }
        if (raw_max > 0.0) {
            const float k = static_cast<float>(spec.brightness / raw_max);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) field.at(y, x) *= k;
        }
    } else {
        Rng rng(seed);
        const double sigma_pos = s / std::sqrt(std::max(1.0f, spec.concentration));
        const double psf_sigma = 1.3;  // cluster members; PSF blur applied by the caller's frame
        const double ln5 = std::log(5.0);
        // unresolved halo at half peak; mask cut lands at r = scale
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double u2 = (dx * dx + dy * dy) / (s * s);
                field.at(y, x) = static_cast<float>(0.5 * std::exp(-ln5 * u2));
            }
        }
        for (int i = 0; i < spec.star_count; ++i) {
            double px, py;
            do {
                px = rng.normal(0.0, sigma_pos);
                py = rng.normal(0.0, sigma_pos);
            } while (std::abs(px) > 3 * sigma_pos || std::abs(py) > 3 * sigma_pos);
            const double amp = rng.uniform(0.25, 1.0);
            const double sx = cx + px, sy = cy + py;
            const int wx0 = std::max(x0, static_cast<int>(sx - 5 * psf_sigma));
            const int wx1 = std::min(x1, static_cast<int>(sx + 5 * psf_sigma));
            const int wy0 = std::max(y0, static_cast<int>(sy - 5 * psf_sigma));
            const int wy1 = std::min(y1, static_cast<int>(sy + 5 * psf_sigma));
            for (int y = wy0; y <= wy1; ++y) {
                for (int x = wx0; x <= wx1; ++x) {
                    const double dx = x + 0.5 - sx, dy = y + 0.5 - sy;
                    field.at(y, x) += static_cast<float>(
                        amp * std::exp(-(dx * dx + dy * dy) / (2 * psf_sigma * psf_sigma)));
                }
            }
        }
        float raw_max = 0.0f;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) raw_max = std::max(raw_max, field.at(y, x));
        if (raw_max > 0.0f) {
            const float k = spec.brightness / raw_max;
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) field.at(y, x) *= k;
        }
    }
}

// Fills enclosed holes: the visible extent of an object is its outer
// contour, so the truth mask is taken as the filled region. Background
// connectivity is 8 (the dual of 4-connected regions), so diagonal pinch
// bays are not treated as holes; this keeps masks bit-consistent with the
// polygons traced from them.
inline void fill_mask_holes(std::vector<std::uint8_t>& mask, int h, int w) {
    std::vector<std::uint8_t> outside(mask.size(), 0);
    std::vector<std::int64_t> stack;
    auto push = [&](int y, int x) {
        const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
        if (!mask[i] && !outside[i]) {
            outside[i] = 1;
            stack.push_back(i);
        }
    };
    for (int x = 0; x < w; ++x) {
        push(0, x);
        push(h - 1, x);
    }
    for (int y = 0; y < h; ++y) {
        push(y, 0);
        push(y, w - 1);
    }
    while (!stack.empty()) {
        const std::int64_t i = stack.back();
        stack.pop_back();
        const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < h && xx >= 0 && xx < w) push(yy, xx);
            }
    }
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask[i] && !outside[i]) mask[i] = 1;
}

struct Tint {
    float r, g, b;
};

inline Tint dso_tint(DsoKind kind, Rng& rng) {
    switch (kind) {
        case DsoKind::kGalaxy:
            return {1.0f, 0.93f, static_cast<float>(0.78 + 0.08 * rng.uniform())};
        case DsoKind::kNebula:
            if (rng.uniform() < 0.6) return {1.0f, static_cast<float>(0.55 + 0.15 * rng.uniform()), 0.70f};
            return {static_cast<float>(0.60 + 0.12 * rng.uniform()), 0.78f, 1.0f};
        default:
            return {1.0f, 0.97f, static_cast<float>(0.86 + 0.08 * rng.uniform())};
    }
}

}  // namespace detail

// Renders a star field: point sources on a sky background with a linear
// light-pollution gradient and Gaussian read noise. Deterministic per
// (profile, star_count, seed); all intensities clipped to [0,1].
inline SkyImage render_starfield(const InstrumentProfile& profile, int star_count,
                                 std::uint64_t seed) {
    profile.validate();
    if (star_count < 0) throw ConfigError("render_starfield: star_count must be >= 0");

    const int h = profile.height, w = profile.width;
    Image img(h, w, 3, kBaseSkyLevel);
    Rng rng(derive_seed(seed, 1));

    // sky gradient: linear ramp in a random direction, range [0, magnitude]
    if (profile.sky_gradient_max > 0.0f) {
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        const double mag = rng.uniform(0.25, 1.0) * profile.sky_gradient_max;
        const double gx = std::cos(theta), gy = std::sin(theta);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double t = 0.5 * (gx * (2.0 * x / w - 1.0) + gy * (2.0 * y / h - 1.0) + 1.0);
                const float add = static_cast<float>(mag * t);
                img.at(y, x, 0) += add;
                img.at(y, x, 1) += add;
                img.at(y, x, 2) += add;
            }
        }
    }

    // star placement with minimum separation, rejection-sampled
    const double min_sep = kStarMinSepFwhm * profile.psf_fwhm;
    const double min_sep2 = min_sep * min_sep;
    const double margin = 2.0;
    std::vector<std::array<double, 2>> centers;
    centers.reserve(star_count);
    long long attempts = 0;
    const long long max_attempts = 1000LL + 400LL * star_count;
    while (static_cast<int>(centers.size()) < star_count) {
        if (++attempts > max_attempts)
            throw ConfigError("render_starfield: star_count too dense for frame at minimum separation");
        const double x = rng.uniform(margin, w - margin);
        const double y = rng.uniform(margin, h - margin);
        bool ok = true;
        for (const auto& c : centers) {
            const double dx = c[0] - x, dy = c[1] - y;
            if (dx * dx + dy * dy < min_sep2) {
                ok = false;
                break;
            }
        }
        if (ok) centers.push_back({x, y});
    }

    const double sigma = profile.psf_fwhm / 2.3548200450309493;
    const int rad = std::max(2, static_cast<int>(std::ceil(4.5 * sigma)));
    for (const auto& c : centers) {
        const double amp = std::pow(10.0, rng.uniform(-1.15, 0.0));
        const float tg = static_cast<float>(0.82 + 0.18 * rng.uniform());
        const float tb = static_cast<float>(0.70 + 0.30 * rng.uniform());
        const int x0 = std::max(0, static_cast<int>(c[0]) - rad);
        const int x1 = std::min(w - 1, static_cast<int>(c[0]) + rad);
        const int y0 = std::max(0, static_cast<int>(c[1]) - rad);
        const int y1 = std::min(h - 1, static_cast<int>(c[1]) + rad);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - c[0], dy = y + 0.5 - c[1];
                const float v = static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
                img.at(y, x, 0) += v;
                img.at(y, x, 1) += v * tg;
                img.at(y, x, 2) += v * tb;
            }
        }
    }

    if (profile.read_noise_sigma > 0.0f) {
        for (float& v : img.data) v += static_cast<float>(rng.normal(0.0, profile.read_noise_sigma));
    }
    clip01(img);
    return {std::move(img), seed, profile.name};
}

// Renders one DSO as an additive RGB overlay plus its binary truth mask
// (region above kMaskThreshold of peak, holes filled).
inline std::pair<Image, TruthMask> render_dso(const DsoSpec& spec, const InstrumentProfile& profile,
                                              std::uint64_t seed) {
    profile.validate();
    spec.validate(profile);
    const int h = profile.height, w = profile.width;

    Image field;
    detail::render_dso_field(spec, derive_seed(seed, 2), h, w, field);

    TruthMask mask;
    mask.height = h;
    mask.width = w;
    mask.on.assign(static_cast<std::size_t>(h) * w, 0);
    const float cut = kMaskThreshold * spec.brightness;
    if (spec.brightness > 0.0f) {
        for (std::size_t i = 0; i < field.data.size(); ++i)
            if (field.data[i] > cut) mask.on[i] = 1;
        detail::fill_mask_holes(mask.on, h, w);
    }

    Rng tint_rng(derive_seed(seed, 3));
    const detail::Tint tint = detail::dso_tint(spec.kind, tint_rng);
    Image overlay(h, w, 3, 0.0f);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float v = field.at(y, x);
            if (v <= 0.0f) continue;
            overlay.at(y, x, 0) = v * tint.r;
            overlay.at(y, x, 1) = v * tint.g;
            overlay.at(y, x, 2) = v * tint.b;
        }
    }
    return {std::move(overlay), std::move(mask)};
}

// Random DSO spec suitable for a given frame; used by dataset and scene
// generation.
inline DsoSpec random_dso(Rng& rng, const InstrumentProfile& profile) {
    DsoSpec spec;
    const double roll = rng.uniform();
    spec.kind = roll < 0.4 ? DsoKind::kGalaxy : (roll < 0.75 ? DsoKind::kNebula : DsoKind::kGlobularCluster);
    const int dim = std::min(profile.width, profile.height);
    spec.scale = static_cast<float>(std::clamp(rng.uniform(0.018, 0.055) * dim, 12.0, 80.0));
    spec.brightness = static_cast<float>(rng.uniform(0.10, 0.55));
    spec.center_x = static_cast<float>(rng.uniform(0.12, 0.88) * profile.width);
    spec.center_y = static_cast<float>(rng.uniform(0.12, 0.88) * profile.height);
    spec.sersic_index = static_cast<float>(rng.uniform(0.8, 2.5));
    spec.ellipticity = static_cast<float>(rng.uniform(0.0, 0.6));
    spec.angle = static_cast<float>(rng.uniform(0.0, M_PI));
    spec.smooth_radius = static_cast<float>(rng.uniform(6.0, 14.0));
    spec.octaves = 3;
    spec.star_count = static_cast<int>(rng.uniform_int(40, 150));
    spec.concentration = static_cast<float>(rng.uniform(2.0, 5.0));
    return spec;
}

// Full frame: star field plus all DSO overlays; annotation polygons are
// traced from the union truth mask, one per connected component
// (overlapping objects merge into a single polygon by design).
inline std::pair<SkyImage, Annotation> render_scene(const InstrumentProfile& profile,
                                                    const std::vector<DsoSpec>& specs,
                                                    std::uint64_t seed) {
    profile.validate();
    for (const auto& s : specs) s.validate(profile);
    const int h = profile.height, w = profile.width;

    Rng rng(derive_seed(seed, 7));
    const double mpix = static_cast<double>(h) * w / 1.0e6;
    const int star_count = static_cast<int>(rng.uniform(140.0, 320.0) * mpix);
    SkyImage sky = render_starfield(profile, star_count, derive_seed(seed, 8));

    std::vector<TruthMask> masks;
    masks.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        auto [overlay, mask] = render_dso(specs[i], profile, derive_seed(seed, 16 + i));
        for (std::size_t p = 0; p < overlay.data.size(); ++p) sky.pixels.data[p] += overlay.data[p];
        masks.push_back(std::move(mask));
    }
    clip01(sky.pixels);

    std::vector<std::uint8_t> unions(static_cast<std::size_t>(h) * w, 0);
    for (const auto& m : masks)
        for (std::size_t i = 0; i < unions.size(); ++i)
            if (m.on[i]) unions[i] = 1;

    // annotation keeps the object bodies; speckle components (stray
    // cluster members, nebula noise islands) are not separate objects
    const RegionMap rm = trace_regions(unions, h, w, 50);
    Annotation ann;
    ann.width = w;
    ann.height = h;
    for (const auto& region : rm.regions) {
        // label by the spec whose mask overlaps this component the most
        long long best = -1;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < masks.size(); ++i) {
            long long overlap = 0;
            for (const std::int64_t p : region.pixels)
                if (masks[i].on[p]) ++overlap;
            if (overlap > best) {
                best = overlap;
                best_i = i;
            }
        }
        AnnObject obj;
        obj.label = specs.empty() ? "dso" : dso_kind_name(specs[best_i].kind);
        obj.polygon = region.polygon;
        ann.objects.push_back(std::move(obj));
    }
    return {std::move(sky), std::move(ann)};
}

struct LabeledPatch {
    static constexpr int kSize = 224;
    std::vector<std::uint16_t> pixels;  // 224*224*3 HWC, 16-bit quantized
    bool dso_present = false;
    float coverage = 0.0f;
    std::vector<std::uint8_t> mask_bits;  // packed truth mask, eval only

    Image image() const {
        Image img(kSize, kSize, 3);
        for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = dequantize16(pixels[i]);
        return img;
    }

    bool mask_at(int y, int x) const {
        if (mask_bits.empty()) return false;
        const std::size_t i = static_cast<std::size_t>(y) * kSize + x;
        return (mask_bits[i >> 3] >> (i & 7)) & 1;
    }
};

struct DatasetSplit {
    std::vector<LabeledPatch> train;
    std::vector<LabeledPatch> val;
    std::vector<LabeledPatch> test;
    std::uint64_t seed = 0;
};

namespace detail {

inline LabeledPatch extract_patch(const Image& frame, const std::vector<std::uint8_t>& mask,
                                  int y0, int x0) {
    constexpr int n = LabeledPatch::kSize;
    LabeledPatch patch;
    patch.pixels.resize(static_cast<std::size_t>(n) * n * 3);
    patch.mask_bits.assign((static_cast<std::size_t>(n) * n + 7) / 8, 0);
    long long covered = 0;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            for (int c = 0; c < 3; ++c)
                patch.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] =
                    quantize16(frame.at(y0 + y, x0 + x, c));
            const std::size_t fi = static_cast<std::size_t>(y0 + y) * frame.width + (x0 + x);
            if (!mask.empty() && mask[fi]) {
                const std::size_t pi = static_cast<std::size_t>(y) * n + x;
                patch.mask_bits[pi >> 3] |= static_cast<std::uint8_t>(1u << (pi & 7));
                ++covered;
            }
        }
    }
    patch.coverage = static_cast<float>(covered) / (static_cast<float>(n) * n);
    patch.dso_present = patch.coverage >= kMinVisibleFraction;
    return patch;
}

}  // namespace detail

// Builds the balanced, stratified 80/10/10 patch dataset: frames with and
// without DSOs are rendered, random 224x224 crops are extracted and
// labeled by truth-mask coverage, classes are balanced, and splits are
// interleaved so each stays balanced. Deterministic per seed.
inline DatasetSplit build_dataset(int n_patches, const InstrumentProfile& profile,
                                  std::uint64_t seed) {
    profile.validate();
    if (n_patches < 10) throw ConfigError("build_dataset: n_patches must be >= 10");

    constexpr int n = LabeledPatch::kSize;
    const int want_present = n_patches / 2;
    const int want_absent = n_patches - want_present;

    std::vector<LabeledPatch> present, absent;
    present.reserve(want_present);
    absent.reserve(want_absent);

    Rng rng(derive_seed(seed, 100));
    const double mpix = static_cast<double>(profile.width) * profile.height / 1.0e6;
    const int crops_per_frame =
        std::clamp(static_cast<int>(profile.width / 224) * static_cast<int>(profile.height / 224), 4, 24);

    std::uint64_t frame_idx = 0;
    const std::uint64_t max_frames = 80ULL + 4ULL * static_cast<std::uint64_t>(n_patches);
    while (static_cast<int>(present.size()) < want_present ||
           static_cast<int>(absent.size()) < want_absent) {
        if (frame_idx >= max_frames)
            throw ConfigError("build_dataset: could not fill both classes; frame budget exhausted");
        const std::uint64_t frame_seed = derive_seed(seed, 1000 + frame_idx);
        const bool with_dso = (frame_idx % 2 == 0);
        ++frame_idx;

        Rng frame_rng(derive_seed(frame_seed, 5));
        const int star_count = static_cast<int>(frame_rng.uniform(140.0, 320.0) * mpix);
        SkyImage sky = render_starfield(profile, star_count, derive_seed(frame_seed, 1));

        std::vector<std::uint8_t> mask;
        std::vector<DsoSpec> specs;
        if (with_dso) {
            mask.assign(static_cast<std::size_t>(profile.height) * profile.width, 0);
            const int count = static_cast<int>(frame_rng.uniform_int(1, 3));
            for (int i = 0; i < count; ++i) specs.push_back(random_dso(frame_rng, profile));
            for (int i = 0; i < count; ++i) {
                auto [overlay, m] = render_dso(specs[i], profile, derive_seed(frame_seed, 40 + i));
                for (std::size_t p = 0; p < overlay.data.size(); ++p)
                    sky.pixels.data[p] += overlay.data[p];
                for (std::size_t p = 0; p < mask.size(); ++p)
                    if (m.on[p]) mask[p] = 1;
            }
            clip01(sky.pixels);
        }

        for (int k = 0; k < crops_per_frame; ++k) {
            const bool need_present = static_cast<int>(present.size()) < want_present;
            const bool need_absent = static_cast<int>(absent.size()) < want_absent;
            if (!need_present && !need_absent) break;
            int x0, y0;
            if (with_dso && need_present && !specs.empty() && k % 2 == 0) {
                // bias half the crops toward a DSO so the present class fills
                const DsoSpec& target = specs[static_cast<std::size_t>(k / 2) % specs.size()];
                const double jx = frame_rng.uniform(-0.8, 0.8) * n;
                const double jy = frame_rng.uniform(-0.8, 0.8) * n;
                x0 = std::clamp(static_cast<int>(target.center_x + jx) - n / 2, 0, profile.width - n);
                y0 = std::clamp(static_cast<int>(target.center_y + jy) - n / 2, 0, profile.height - n);
            } else {
                x0 = static_cast<int>(frame_rng.uniform_int(0, profile.width - n));
                y0 = static_cast<int>(frame_rng.uniform_int(0, profile.height - n));
            }
            LabeledPatch patch = detail::extract_patch(sky.pixels, mask, y0, x0);
            if (patch.dso_present && need_present)
                present.push_back(std::move(patch));
            else if (!patch.dso_present && need_absent)
                absent.push_back(std::move(patch));
        }
    }

    rng.shuffle(present);
    rng.shuffle(absent);

    // interleave classes, then cut 80/10/10 so every split stays balanced
    std::vector<LabeledPatch> ordered;
    ordered.reserve(n_patches);
    for (int i = 0; i < std::max(want_present, want_absent); ++i) {
        if (i < want_present) ordered.push_back(std::move(present[i]));
        if (i < want_absent) ordered.push_back(std::move(absent[i]));
    }

    const int n_train = static_cast<int>(std::llround(0.8 * n_patches));
    const int n_val = static_cast<int>(std::llround(0.1 * n_patches));
    const int n_test = n_patches - n_train - n_val;

    DatasetSplit split;
    split.seed = seed;
    split.train.assign(std::make_move_iterator(ordered.begin()),
                       std::make_move_iterator(ordered.begin() + n_train));
    split.val.assign(std::make_move_iterator(ordered.begin() + n_train),
                     std::make_move_iterator(ordered.begin() + n_train + n_val));
    split.test.assign(std::make_move_iterator(ordered.begin() + n_train + n_val),
                      std::make_move_iterator(ordered.begin() + n_train + n_val + n_test));
    return split;
}

}  // namespace dso
