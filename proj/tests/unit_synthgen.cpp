#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dsodetect/dataset_io.hpp"
#include "dsodetect/synthgen.hpp"

using namespace dso;

namespace {

InstrumentProfile quiet_profile(int w = 400, int h = 320) {
    InstrumentProfile p;
    p.name = "test-quiet";
    p.width = w;
    p.height = h;
    p.psf_fwhm = 3.0f;
    p.read_noise_sigma = 0.0f;
    p.sky_gradient_max = 0.0f;
    return p;
}

// brute-force oracle: local maxima above background with minimum pairwise
// separation of 3 FWHM, greedy suppression strongest-first
int count_peaks(const Image& img, float bg, float fwhm) {
    const Image lum = to_luminance(img);
    const int r = static_cast<int>(std::ceil(1.5 * fwhm));
    std::vector<std::pair<float, std::pair<int, int>>> candidates;
    for (int y = 0; y < lum.height; ++y) {
        for (int x = 0; x < lum.width; ++x) {
            const float v = lum.at(y, x);
            if (v <= bg + 0.01f) continue;
            bool is_max = true;
            for (int dy = -r; dy <= r && is_max; ++dy)
                for (int dx = -r; dx <= r && is_max; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= lum.height || xx < 0 || xx >= lum.width) continue;
                    if (dy == 0 && dx == 0) continue;
                    if (lum.at(yy, xx) > v) is_max = false;
                }
            if (is_max) candidates.push_back({v, {y, x}});
        }
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::pair<int, int>> kept;
    const double min_sep2 = 9.0 * fwhm * fwhm;
    for (const auto& [v, yx] : candidates) {
        bool ok = true;
        for (const auto& k : kept) {
            const double dy = k.first - yx.first, dx = k.second - yx.second;
            if (dy * dy + dx * dx < min_sep2) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(yx);
    }
    return static_cast<int>(kept.size());
}

}  // namespace

TEST_CASE("starfield with no stars, noise, or gradient is uniform") {
    const SkyImage sky = render_starfield(quiet_profile(), 0, 7);
    auto [lo, hi] = min_max(sky.pixels);
    CHECK(lo == hi);
    CHECK(lo == Catch::Approx(kBaseSkyLevel));
}

TEST_CASE("starfield is bit-identical for a fixed seed") {
    InstrumentProfile p = quiet_profile();
    p.read_noise_sigma = 0.01f;
    p.sky_gradient_max = 0.04f;
    const SkyImage a = render_starfield(p, 40, 1234);
    const SkyImage b = render_starfield(p, 40, 1234);
    CHECK(a.pixels.data == b.pixels.data);
}

TEST_CASE("starfield renders exactly star_count separated peaks") {
    const InstrumentProfile p = quiet_profile();
    const SkyImage sky = render_starfield(p, 50, 99);
    CHECK(count_peaks(sky.pixels, kBaseSkyLevel, p.psf_fwhm) == 50);
}

TEST_CASE("starfield intensities stay in [0,1]") {
    InstrumentProfile p = quiet_profile();
    p.read_noise_sigma = 0.02f;
    p.sky_gradient_max = 0.08f;
    const SkyImage sky = render_starfield(p, 120, 5);
    auto [lo, hi] = min_max(sky.pixels);
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);
}

TEST_CASE("starfield rejects invalid profiles and counts") {
    InstrumentProfile bad = quiet_profile();
    bad.width = 100;
    CHECK_THROWS_AS(render_starfield(bad, 1, 0), ConfigError);
    InstrumentProfile neg = quiet_profile();
    neg.read_noise_sigma = -1.0f;
    CHECK_THROWS_AS(render_starfield(neg, 1, 0), ConfigError);
    CHECK_THROWS_AS(render_starfield(quiet_profile(), -3, 0), ConfigError);
}

TEST_CASE("dso with zero brightness renders nothing") {
    DsoSpec spec;
    spec.kind = DsoKind::kNebula;
    spec.center_x = 200;
    spec.center_y = 160;
    spec.scale = 30;
    spec.brightness = 0.0f;
    const auto [overlay, mask] = render_dso(spec, quiet_profile(), 11);
    auto [lo, hi] = min_max(overlay);
    CHECK(lo == 0.0f);
    CHECK(hi == 0.0f);
    CHECK(mask.area() == 0);
}

TEST_CASE("round galaxy mask is a disc of radius scale within one pixel") {
    DsoSpec spec;
    spec.kind = DsoKind::kGalaxy;
    spec.center_x = 200.0f;
    spec.center_y = 160.0f;
    spec.scale = 25.0f;
    spec.brightness = 0.5f;
    spec.ellipticity = 0.0f;
    spec.sersic_index = 1.5f;
    const auto [overlay, mask] = render_dso(spec, quiet_profile(), 21);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const double r = std::hypot(x + 0.5 - spec.center_x, y + 0.5 - spec.center_y);
            if (mask.on[static_cast<std::size_t>(y) * mask.width + x]) {
                CHECK(r <= spec.scale + 1.0);
            } else {
                CHECK(r >= spec.scale - 1.0);
            }
        }
    }
}

TEST_CASE("nebula mask area tracks pi*scale^2 within 20 percent") {
    for (const std::uint64_t seed : {3u, 17u, 42u}) {
        DsoSpec spec;
        spec.kind = DsoKind::kNebula;
        spec.center_x = 200.0f;
        spec.center_y = 160.0f;
        spec.scale = 34.0f;
        spec.brightness = 0.4f;
        const auto [overlay, mask] = render_dso(spec, quiet_profile(), seed);
        const double expected = M_PI * spec.scale * spec.scale;
        const double area = static_cast<double>(mask.area());
        CHECK(area > 0.8 * expected);
        CHECK(area < 1.2 * expected);
    }
}

TEST_CASE("cluster mask is nonempty and overlay peaks at brightness") {
    DsoSpec spec;
    spec.kind = DsoKind::kGlobularCluster;
    spec.center_x = 200.0f;
    spec.center_y = 160.0f;
    spec.scale = 28.0f;
    spec.brightness = 0.6f;
    const auto [overlay, mask] = render_dso(spec, quiet_profile(), 33);
    CHECK(mask.area() > 500);
    auto [lo, hi] = min_max(overlay);
    CHECK(hi == Catch::Approx(spec.brightness).margin(1e-5));
}

TEST_CASE("dso center outside bounds is a domain error") {
    DsoSpec spec;
    spec.center_x = -5.0f;
    spec.center_y = 10.0f;
    CHECK_THROWS_AS(render_dso(spec, quiet_profile(), 0), DomainError);
}

TEST_CASE("scene with no specs has an empty annotation") {
    const auto [sky, ann] = render_scene(quiet_profile(), {}, 3);
    CHECK(ann.objects.empty());
    CHECK(ann.width == 400);
    CHECK(ann.height == 320);
}

TEST_CASE("scene with one galaxy yields one polygon containing its center") {
    DsoSpec spec;
    spec.kind = DsoKind::kGalaxy;
    spec.center_x = 180.0f;
    spec.center_y = 150.0f;
    spec.scale = 30.0f;
    spec.brightness = 0.5f;
    const auto [sky, ann] = render_scene(quiet_profile(), {spec}, 5);
    REQUIRE(ann.objects.size() == 1);
    CHECK(ann.objects[0].label == "galaxy");
    const auto mask = rasterize_polygon(ann.objects[0].polygon, 320, 400);
    CHECK(mask[150 * 400 + 180] == 1);
}

TEST_CASE("two disjoint nebulae yield two polygons with matching areas") {
    DsoSpec a;
    a.kind = DsoKind::kNebula;
    a.center_x = 100.0f;
    a.center_y = 100.0f;
    a.scale = 26.0f;
    a.brightness = 0.45f;
    DsoSpec b = a;
    b.center_x = 300.0f;
    b.center_y = 220.0f;
    const auto [sky, ann] = render_scene(quiet_profile(), {a, b}, 8);
    REQUIRE(ann.objects.size() == 2);

    const auto [oa, ma] = render_dso(a, quiet_profile(), derive_seed(8, 16));
    const auto [ob, mb] = render_dso(b, quiet_profile(), derive_seed(8, 17));
    const double total_mask = static_cast<double>(ma.area() + mb.area());
    const double total_poly =
        polygon_area(ann.objects[0].polygon) + polygon_area(ann.objects[1].polygon);
    CHECK(std::fabs(total_poly - total_mask) <= 0.05 * total_mask);
}

TEST_CASE("16-bit quantization round-trips every value") {
    for (int v = 0; v <= 65535; ++v)
        REQUIRE(quantize16(dequantize16(static_cast<std::uint16_t>(v))) == v);
}

TEST_CASE("build_dataset splits 80/10/10 and balances classes") {
    const InstrumentProfile p = vespera_profile();

    const DatasetSplit small = build_dataset(10, p, 4);
    CHECK(small.train.size() == 8);
    CHECK(small.val.size() == 1);
    CHECK(small.test.size() == 1);

    const DatasetSplit split = build_dataset(200, p, 4);
    CHECK(split.train.size() == 160);
    CHECK(split.val.size() == 20);
    CHECK(split.test.size() == 20);

    auto count_present = [](const std::vector<LabeledPatch>& v) {
        long long acc = 0;
        for (const auto& patch : v) acc += patch.dso_present ? 1 : 0;
        return acc;
    };
    const long long present_total =
        count_present(split.train) + count_present(split.val) + count_present(split.test);
    CHECK(std::llabs(present_total - 100) <= 4);  // 2% of 200
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        const long long present = count_present(*part);
        const long long absent = static_cast<long long>(part->size()) - present;
        CHECK(std::llabs(present - absent) <=
              std::max<long long>(1, static_cast<long long>(0.02 * part->size()) + 1));
    }
}

TEST_CASE("build_dataset labels are sound against stored masks") {
    const DatasetSplit split = build_dataset(60, vespera_profile(), 9);
    auto check_patch = [](const LabeledPatch& p) {
        long long covered = 0;
        for (int y = 0; y < LabeledPatch::kSize; ++y)
            for (int x = 0; x < LabeledPatch::kSize; ++x) covered += p.mask_at(y, x) ? 1 : 0;
        const float coverage =
            static_cast<float>(covered) / (LabeledPatch::kSize * LabeledPatch::kSize);
        REQUIRE(coverage == Catch::Approx(p.coverage).margin(1e-6));
        REQUIRE(p.dso_present == (coverage >= kMinVisibleFraction));
    };
    for (const auto& p : split.train) check_patch(p);
    for (const auto& p : split.val) check_patch(p);
    for (const auto& p : split.test) check_patch(p);
}

TEST_CASE("build_dataset is deterministic") {
    const DatasetSplit a = build_dataset(30, vespera_profile(), 77);
    const DatasetSplit b = build_dataset(30, vespera_profile(), 77);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].pixels == b.train[i].pixels);
        CHECK(a.train[i].dso_present == b.train[i].dso_present);
    }
    CHECK_THROWS_AS(build_dataset(5, vespera_profile(), 1), ConfigError);
}

TEST_CASE("dataset writes to disk and loads back identically") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dsodetect_test_dataset";
    fs::remove_all(dir);

    const InstrumentProfile p = vespera_profile();
    const DatasetSplit split = build_dataset(20, p, 123);
    const fs::path manifest = write_dataset(dir, split, p);
    REQUIRE(fs::exists(manifest));

    const DatasetSplit loaded = load_dataset(manifest);
    REQUIRE(loaded.train.size() == split.train.size());
    REQUIRE(loaded.val.size() == split.val.size());
    REQUIRE(loaded.test.size() == split.test.size());
    CHECK(loaded.seed == split.seed);
    for (std::size_t i = 0; i < split.train.size(); ++i) {
        CHECK(loaded.train[i].pixels == split.train[i].pixels);
        CHECK(loaded.train[i].dso_present == split.train[i].dso_present);
    }
    fs::remove_all(dir);
}

TEST_CASE("png io: 16-bit round trip preserves values") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "dsodetect_roundtrip.png";
    Rng rng(5);
    Image img(33, 47, 3);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    write_png16(path.string(), img);
    const Image back = read_png(path.string());
    REQUIRE(back.height == img.height);
    REQUIRE(back.width == img.width);
    REQUIRE(back.channels == 3);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(quantize16(back.data[i]) == quantize16(img.data[i]));
    fs::remove(path);
}
