#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dsodetect/pipeline.hpp"
#include "dsodetect/synthgen.hpp"

using namespace dso;

namespace {

InstrumentProfile quiet_profile(int w = 448, int h = 448) {
    InstrumentProfile p;
    p.name = "test";
    p.width = w;
    p.height = h;
    p.psf_fwhm = 3.0f;
    p.read_noise_sigma = 0.008f;
    p.sky_gradient_max = 0.03f;
    return p;
}

// linear brightness detector: selects patches whose total flux exceeds a
// fixed budget; cheap stand-in for a trained classifier in pipeline tests
ModelParams brightness_model(float weight = 1e-4f, float bias = -1.35f) {
    ArchDescriptor a;
    a.in_c = 3;
    a.in_h = 224;
    a.in_w = 224;
    a.layers = {{"dense", 3 * 224 * 224, 1, 0, 1, 0}};
    ModelParams params = init_params(a, 0);
    std::fill(params.tensors[0].values.begin(), params.tensors[0].values.end(), weight);
    params.tensors[1].values[0] = bias;
    return params;
}

}  // namespace

TEST_CASE("tiling arithmetic") {
    const PatchGrid paper = tile(3584, 3584, 0);
    CHECK(paper.slots.size() == 256);
    CHECK(paper.rows == 16);
    CHECK(paper.cols == 16);
    CHECK(paper.padded_h == 3584);

    const PatchGrid one = tile(224, 224, 0);
    CHECK(one.slots.size() == 1);

    const PatchGrid padded = tile(300, 300, 0);
    CHECK(padded.slots.size() == 4);
    CHECK(padded.padded_h == 448);
    CHECK(padded.padded_w == 448);

    const PatchGrid tiny = tile(1, 1, 0);
    CHECK(tiny.slots.size() == 1);
    CHECK(tiny.padded_h == 224);

    CHECK_THROWS_AS(tile(100, 100, 224), ConfigError);
    CHECK_THROWS_AS(tile(100, 100, -1), ConfigError);
    CHECK_THROWS_AS(tile(0, 10, 0), DomainError);
}

TEST_CASE("tiling covers every pixel exactly once when overlap is zero") {
    for (const auto [h, w, ov] : {std::tuple{500, 700, 0}, {224, 224, 0}, {1120, 1120, 0}}) {
        const PatchGrid g = tile(h, w, ov);
        std::vector<int> cover(static_cast<std::size_t>(g.padded_h) * g.padded_w, 0);
        for (const auto& slot : g.slots)
            for (int y = 0; y < g.patch; ++y)
                for (int x = 0; x < g.patch; ++x)
                    ++cover[static_cast<std::size_t>(slot.y + y) * g.padded_w + slot.x + x];
        for (const int c : cover) REQUIRE(c == 1);
    }
}

TEST_CASE("tiling with overlap covers every pixel at least once") {
    const PatchGrid g = tile(500, 640, 24);
    std::vector<int> cover(static_cast<std::size_t>(g.padded_h) * g.padded_w, 0);
    for (const auto& slot : g.slots)
        for (int y = 0; y < g.patch; ++y)
            for (int x = 0; x < g.patch; ++x)
                ++cover[static_cast<std::size_t>(slot.y + y) * g.padded_w + slot.x + x];
    for (const int c : cover) REQUIRE(c >= 1);
}

TEST_CASE("reflective padding mirrors the image") {
    Image img(2, 3, 1);
    img.at(0, 0) = 1;
    img.at(0, 1) = 2;
    img.at(0, 2) = 3;
    img.at(1, 0) = 4;
    img.at(1, 1) = 5;
    img.at(1, 2) = 6;
    const Image padded = pad_reflect(img, 4, 6);
    CHECK(padded.at(0, 3) == 3);  // mirror with edge: abc|cba
    CHECK(padded.at(0, 4) == 2);
    CHECK(padded.at(0, 5) == 1);
    CHECK(padded.at(2, 0) == 4);
    CHECK(padded.at(3, 0) == 1);
}

TEST_CASE("stitch: single slot is the identity on its footprint") {
    const PatchGrid g = tile(200, 210, 0);
    REQUIRE(g.slots.size() == 1);
    Image hm(224, 224, 1);
    Rng rng(4);
    for (auto& v : hm.data) v = static_cast<float>(rng.uniform());
    const Image out = stitch({hm}, {0}, g);
    REQUIRE(out.height == 200);
    REQUIRE(out.width == 210);
    for (int y = 0; y < 200; ++y)
        for (int x = 0; x < 210; ++x) REQUIRE(out.at(y, x) == hm.at(y, x));
}

TEST_CASE("stitch averages the overlap band") {
    const PatchGrid g = tile(224, 424, 24);  // two columns, 24px overlap
    REQUIRE(g.slots.size() == 2);
    const Image a(224, 224, 1, 0.2f);
    const Image b(224, 224, 1, 0.6f);
    const Image out = stitch({a, b}, {0, 1}, g);
    for (int y = 0; y < 224; ++y) {
        CHECK(out.at(y, 100) == 0.2f);
        CHECK(out.at(y, 210) == Catch::Approx(0.4f));
        CHECK(out.at(y, 300) == 0.6f);
    }
}

TEST_CASE("stitch: unselected slots leave zeros; counts must match") {
    const PatchGrid g = tile(224, 448, 0);
    REQUIRE(g.slots.size() == 2);
    const Image a(224, 224, 1, 0.8f);
    const Image out = stitch({a}, {0}, g);
    CHECK(out.at(10, 10) == 0.8f);
    CHECK(out.at(10, 300) == 0.0f);
    CHECK_THROWS_AS(stitch({a, a}, {0}, g), DomainError);
    CHECK_THROWS_AS(stitch({Image(100, 100, 1)}, {0}, g), DomainError);
}

TEST_CASE("stitch: non-overlapped pixels equal their source exactly") {
    const PatchGrid g = tile(448, 448, 0);
    std::vector<Image> hms;
    std::vector<int> sel;
    Rng rng(9);
    for (int s = 0; s < 4; ++s) {
        Image hm(224, 224, 1);
        for (auto& v : hm.data) v = static_cast<float>(rng.uniform());
        hms.push_back(std::move(hm));
        sel.push_back(s);
    }
    const Image out = stitch(hms, sel, g);
    for (int s = 0; s < 4; ++s) {
        const auto& slot = g.slots[s];
        for (int y = 0; y < 224; y += 17)
            for (int x = 0; x < 224; x += 13)
                REQUIRE(out.at(slot.y + y, slot.x + x) == hms[s].at(y, x));
    }
}

TEST_CASE("contours: all-zero heatmap gives an empty set") {
    const Image zero(300, 300, 1, 0.0f);
    CHECK(heatmap_to_contours(zero, 70.0).contours.empty());
    CHECK_THROWS_AS(heatmap_to_contours(zero, 0.0), ConfigError);
    CHECK_THROWS_AS(heatmap_to_contours(zero, 100.0), ConfigError);
}

TEST_CASE("contours: filled disc comes back with the right area") {
    Image hm(300, 300, 1, 0.0f);
    const double cx = 150, cy = 140, radius = 30;
    long long disc_area = 0;
    for (int y = 0; y < 300; ++y)
        for (int x = 0; x < 300; ++x)
            if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= radius) {
                hm.at(y, x) = 1.0f;
                ++disc_area;
            }
    for (const double pct : {30.0, 70.0, 95.0}) {
        const ContourSet cs = heatmap_to_contours(hm, pct);
        REQUIRE(cs.contours.size() == 1);
        const double area = polygon_area(cs.contours[0].polygon);
        CHECK(std::fabs(area - static_cast<double>(disc_area)) <= 0.05 * disc_area);
        CHECK(cs.contours[0].confidence == Catch::Approx(1.0));
    }
}

TEST_CASE("contours: blobs separated by a zero valley give two polygons") {
    Image hm(300, 300, 1, 0.0f);
    auto blob = [&](double cx, double cy) {
        for (int y = 0; y < 300; ++y)
            for (int x = 0; x < 300; ++x) {
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                hm.at(y, x) += static_cast<float>(std::exp(-r2 / (2 * 15.0 * 15.0)));
            }
    };
    blob(80, 80);
    blob(220, 200);
    const ContourSet cs = heatmap_to_contours(hm, 70.0);
    REQUIRE(cs.contours.size() == 2);
    for (const auto& c : cs.contours) {
        CHECK(c.confidence > 0.0);
        CHECK(c.confidence <= 1.0);
    }
}

TEST_CASE("remove_stars flattens a pure star field") {
    InstrumentProfile p = quiet_profile();
    const SkyImage sky = render_starfield(p, 120, 17);
    const Image cleaned = remove_stars(sky.pixels);
    const Image lum = to_luminance(cleaned);
    auto [lo, hi] = min_max(lum);
    // everything bright got replaced by local background
    CHECK(hi <= kBaseSkyLevel + p.sky_gradient_max + 3.0f * p.read_noise_sigma + 0.02f);
}

TEST_CASE("remove_stars leaves a starless image nearly untouched") {
    InstrumentProfile p = quiet_profile(300, 300);
    const SkyImage sky = render_starfield(p, 0, 3);
    const Image cleaned = remove_stars(sky.pixels);
    double rms = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < sky.pixels.data.size(); ++i) {
        const double d = cleaned.data[i] - sky.pixels.data[i];
        rms += d * d;
        ref += sky.pixels.data[i] * sky.pixels.data[i];
    }
    CHECK(std::sqrt(rms) <= 0.01 * std::sqrt(ref));
}

TEST_CASE("remove_stars preserves a nebula under a star") {
    InstrumentProfile p = quiet_profile();
    DsoSpec neb;
    neb.kind = DsoKind::kNebula;
    neb.center_x = 224;
    neb.center_y = 224;
    neb.scale = 40;
    neb.brightness = 0.35f;
    const auto [overlay, mask] = render_dso(neb, p, 5);

    SkyImage sky = render_starfield(p, 60, 6);
    for (std::size_t i = 0; i < overlay.data.size(); ++i) sky.pixels.data[i] += overlay.data[i];
    clip01(sky.pixels);
    // plant one bright star in the middle of the nebula
    Image with_star = sky.pixels;
    const double sigma = p.psf_fwhm / 2.3548;
    for (int y = 210; y < 238; ++y)
        for (int x = 210; x < 238; ++x) {
            const double r2 = (x + 0.5 - 224.0) * (x + 0.5 - 224.0) + (y + 0.5 - 224.0) * (y + 0.5 - 224.0);
            const float v = static_cast<float>(0.9 * std::exp(-r2 / (2 * sigma * sigma)));
            for (int c = 0; c < 3; ++c)
                with_star.at(y, x, c) = clamp01(with_star.at(y, x, c) + v);
        }

    const Image cleaned = remove_stars(with_star);
    const Image lum_before = to_luminance(sky.pixels);
    const Image lum_after = to_luminance(cleaned);
    double sum_before = 0.0, sum_after = 0.0;
    for (std::size_t i = 0; i < mask.on.size(); ++i) {
        if (!mask.on[i]) continue;
        sum_before += lum_before.data[i];
        sum_after += lum_after.data[i];
    }
    CHECK(std::fabs(sum_after - sum_before) < 0.10 * sum_before);
}

TEST_CASE("baseline contours: star fields stay near-empty, black stays empty") {
    long long spurious = 0;
    double megapixels = 0.0;
    for (int i = 0; i < 5; ++i) {
        const SkyImage sky = render_starfield(quiet_profile(), 150, 100 + i);
        spurious += static_cast<long long>(baseline_contours(sky.pixels).contours.size());
        megapixels += 448.0 * 448.0 / 1e6;
    }
    CHECK(static_cast<double>(spurious) / megapixels <= 2.0);

    const Image black(300, 300, 3, 0.0f);
    CHECK(baseline_contours(black).contours.empty());
}

TEST_CASE("baseline contours find a bright galaxy") {
    InstrumentProfile p = quiet_profile();
    DsoSpec gal;
    gal.kind = DsoKind::kGalaxy;
    gal.center_x = 200;
    gal.center_y = 240;
    gal.scale = 36;
    gal.brightness = 0.5f;
    const auto [sky, ann] = render_scene(p, {gal}, 12);
    const ContourSet cs = baseline_contours(sky.pixels);
    REQUIRE(!cs.contours.empty());
    bool contains = false;
    for (const auto& c : cs.contours) {
        const auto mask = rasterize_polygon(c.polygon, 448, 448);
        if (mask[240 * 448 + 200]) contains = true;
    }
    CHECK(contains);
}

TEST_CASE("select_patches thresholds the per-slot probabilities") {
    const ModelParams model = brightness_model();
    DsoSpec gal;
    gal.kind = DsoKind::kGalaxy;
    gal.center_x = 112;
    gal.center_y = 112;
    gal.scale = 40;
    gal.brightness = 0.6f;
    InstrumentProfile p = quiet_profile();
    const auto [sky, ann] = render_scene(p, {gal}, 31);

    const PatchGrid grid = tile(sky.pixels, 0);
    const Selection all = select_patches(sky.pixels, grid, model, 0.0);
    CHECK(all.selected.size() == grid.slots.size());
    REQUIRE(all.probabilities.size() == 4);

    const Selection some = select_patches(sky.pixels, grid, model, 0.5);
    REQUIRE(some.selected.size() >= 1);
    CHECK(some.selected.size() < grid.slots.size());
    // slot 0 holds the galaxy
    CHECK(std::find(some.selected.begin(), some.selected.end(), 0) != some.selected.end());

    const Selection none = select_patches(sky.pixels, grid, model, 1.0);
    CHECK(none.selected.empty());
    CHECK_THROWS_AS(select_patches(sky.pixels, grid, model, 1.5), ConfigError);
}

TEST_CASE("detect: skip thresholding never changes commonly selected slots") {
    const ModelParams model = brightness_model();
    DsoSpec gal;
    gal.kind = DsoKind::kGalaxy;
    gal.center_x = 112;
    gal.center_y = 112;
    gal.scale = 40;
    gal.brightness = 0.6f;
    const auto [sky, ann] = render_scene(quiet_profile(), {gal}, 41);

    DetectConfig config;
    config.xrai.ig_steps = 8;
    config.select_threshold = 0.0;
    const DetectResult full = detect(sky.pixels, model, config);
    config.select_threshold = 0.5;
    const DetectResult skip = detect(sky.pixels, model, config);

    CHECK(full.stats.attribution_calls == full.stats.slot_count);
    CHECK(skip.stats.attribution_calls < skip.stats.slot_count);
    CHECK(skip.stats.attribution_calls <= skip.stats.slot_count);
    CHECK(full.stats.forward_calls == full.stats.slot_count);

    // identical heatmaps on every slot selected under both runs
    const PatchGrid grid = tile(sky.pixels, 0);
    const Selection sel = select_patches(sky.pixels, grid, model, 0.5);
    for (const int s : sel.selected) {
        const auto& slot = grid.slots[s];
        for (int y = 0; y < 224; y += 11)
            for (int x = 0; x < 224; x += 13) {
                const int yy = slot.y + y, xx = slot.x + x;
                if (yy >= sky.pixels.height || xx >= sky.pixels.width) continue;
                REQUIRE(full.heatmap.at(yy, xx) == skip.heatmap.at(yy, xx));
            }
    }
}

TEST_CASE("detect: empty scene yields an empty contour set") {
    const ModelParams model = brightness_model();
    const SkyImage sky = render_starfield(quiet_profile(), 80, 51);
    DetectConfig config;
    config.xrai.ig_steps = 8;
    const DetectResult r = detect(sky.pixels, model, config);
    CHECK(r.stats.selected_count <= 1);
    if (r.stats.selected_count == 0) CHECK(r.contours.contours.empty());
    CHECK(r.stats.attribution_calls == r.stats.selected_count);
}

TEST_CASE("detect: prescale halves the grid") {
    const ModelParams model = brightness_model();
    const SkyImage sky = render_starfield(quiet_profile(896, 896), 100, 61);
    DetectConfig config;
    config.xrai.ig_steps = 4;
    config.select_threshold = 1.1;  // impossible: no attributions, geometry only
    config.prescale = 0.5;
    // threshold > 1 is rejected, so use 1.0 (sigmoid never reaches it)
    config.select_threshold = 1.0;
    const DetectResult r = detect(sky.pixels, model, config);
    CHECK(r.stats.slot_count == 4);  // 896*0.5 = 448 -> 2x2
    CHECK(r.heatmap.height == 896);
    CHECK(r.heatmap.width == 896);
}

TEST_CASE("contourset converts to the annotation schema") {
    ContourSet cs;
    cs.width = 100;
    cs.height = 80;
    Contour c;
    c.polygon = {{1, 1}, {20, 1}, {20, 15}, {1, 15}};
    c.confidence = 0.7;
    cs.contours.push_back(c);
    const nlohmann::json j = contourset_to_json(cs, "img42");
    CHECK(j["image"] == "img42");
    CHECK(j["objects"][0]["confidence"] == 0.7);
    const Annotation ann = annotation_from_json(j);
    CHECK(ann.objects.size() == 1);
}
