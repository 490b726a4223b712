// dsodetect: deep-sky object detection via a binary patch classifier and
// XRAI-style attribution. Subcommands: generate, train, detect, evaluate,
// bench.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsodetect/attribution.hpp"
#include "dsodetect/dataset_io.hpp"
#include "dsodetect/evaluation.hpp"
#include "dsodetect/nn.hpp"
#include "dsodetect/pipeline.hpp"
#include "dsodetect/png_io.hpp"
#include "dsodetect/synthgen.hpp"
#include "dsodetect/train.hpp"

namespace fs = std::filesystem;

namespace {

// exit codes, documented in the README
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitRuntime = 4;

dso::InstrumentProfile profile_by_name(const std::string& name, int frame_w, int frame_h) {
    dso::InstrumentProfile p;
    if (name == "stellina") p = dso::stellina_profile();
    else if (name == "vespera") p = dso::vespera_profile();
    else if (name == "square") p = dso::square_profile(1120);
    else throw dso::ConfigError("unknown profile '" + name + "' (stellina|vespera|square)");
    if (frame_w > 0) p.width = frame_w;
    if (frame_h > 0) p.height = frame_h;
    p.validate();
    return p;
}

void ensure_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw dso::IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw dso::IoError("cannot write " + path.string());
    out << j.dump(1) << "\n";
}

struct GenerateArgs {
    std::string out;
    int n = 5000;
    int scenes = 4;
    int scene_dsos_max = 3;
    std::string profile = "vespera";
    int frame_w = 0, frame_h = 0;
    int scene_size = 1120;
    std::uint64_t seed = 42;
};

int cmd_generate(const GenerateArgs& a) {
    const fs::path out_dir(a.out);
    ensure_out_dir(out_dir);
    const dso::InstrumentProfile profile = profile_by_name(a.profile, a.frame_w, a.frame_h);

    std::cout << "generating " << a.n << " patches (profile " << profile.name << ", seed "
              << a.seed << ")\n";
    const dso::DatasetSplit split = dso::build_dataset(a.n, profile, a.seed);
    const fs::path manifest = dso::write_dataset(out_dir, split, profile);
    std::cout << "wrote " << manifest.string() << " (" << split.train.size() << "/"
              << split.val.size() << "/" << split.test.size() << " train/val/test)\n";

    if (a.scenes > 0) {
        ensure_out_dir(out_dir / "scenes");
        dso::InstrumentProfile scene_profile = dso::square_profile(a.scene_size);
        for (int i = 0; i < a.scenes; ++i) {
            const std::uint64_t scene_seed = dso::derive_seed(a.seed, 50000 + i);
            dso::Rng rng(dso::derive_seed(scene_seed, 3));
            const int count = static_cast<int>(rng.uniform_int(1, std::max(1, a.scene_dsos_max)));
            std::vector<dso::DsoSpec> specs;
            for (int k = 0; k < count; ++k) specs.push_back(dso::random_dso(rng, scene_profile));
            auto [sky, ann] = dso::render_scene(scene_profile, specs, scene_seed);
            char name[32];
            std::snprintf(name, sizeof(name), "scene_%03d", i);
            ann.image_id = name;
            dso::write_png16((out_dir / "scenes" / (std::string(name) + ".png")).string(), sky.pixels);
            dso::write_annotation_file(out_dir / "scenes" / (std::string(name) + ".truth.json"), ann);
        }
        std::cout << "wrote " << a.scenes << " scenes to " << (out_dir / "scenes").string() << "\n";
    }
    return kExitOk;
}

struct TrainArgs {
    std::string manifest;
    std::string out;
    dso::TrainingConfig config;
    int early_stop = 0;  // 0 = off
    int jobs = 1;
};

int cmd_train(const TrainArgs& a) {
    const fs::path out_dir(a.out);
    ensure_out_dir(out_dir);
    if (!fs::exists(a.manifest)) throw dso::IoError("manifest not found: " + a.manifest);

    dso::TrainingConfig config = a.config;
    if (a.early_stop > 0) config.early_stop = a.early_stop;
    config.validate();

    std::cout << "config: " << config.to_json().dump() << "\n";
    const dso::DatasetSplit split = dso::load_dataset(a.manifest);
    std::cout << "loaded " << split.train.size() << "/" << split.val.size() << "/"
              << split.test.size() << " patches\n";

    const auto [params, history] = dso::train(split, config, a.jobs, &std::cout);

    dso::save_checkpoint((out_dir / "checkpoint.json").string(), params, config);
    {
        std::ofstream hist(out_dir / "history.jsonl");
        if (!hist) throw dso::IoError("cannot write history.jsonl");
        for (const auto& e : history) {
            nlohmann::json j;
            j["epoch"] = e.epoch;
            j["train_loss"] = e.train_loss;
            j["train_accuracy"] = e.train_accuracy;
            j["val_accuracy"] = e.val_accuracy;
            hist << j.dump() << "\n";
        }
    }
    std::cout << "checkpoint: " << (out_dir / "checkpoint.json").string() << " (params "
              << params.param_count() << ")\n";

    if (!split.test.empty()) {
        const dso::ClassifierReport r = dso::classifier_report(params, split.test, a.jobs);
        nlohmann::json j;
        j["test_accuracy"] = r.accuracy;
        j["test_recall_present"] = r.recall_present;
        j["test_recall_absent"] = r.recall_absent;
        j["test_precision_present"] = r.precision_present;
        std::cout << j.dump() << "\n";
    }
    return kExitOk;
}

struct DetectArgs {
    std::string image;
    std::string checkpoint;
    std::string out;
    dso::DetectConfig config;
    bool baseline = false;
    std::uint64_t seed = 42;
};

int cmd_detect(const DetectArgs& a) {
    const fs::path out_dir(a.out);
    ensure_out_dir(out_dir);
    if (!fs::exists(a.image)) throw dso::IoError("input image not found: " + a.image);

    const dso::Image image = dso::read_png(a.image);
    dso::Image rgb = image;
    if (rgb.channels == 1) {
        rgb = dso::Image(image.height, image.width, 3);
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = image.at(y, x);
    }
    if (static_cast<int>(std::lround(rgb.height * a.config.prescale)) < 1 ||
        static_cast<int>(std::lround(rgb.width * a.config.prescale)) < 1)
        throw dso::ConfigError("detect: image smaller than one pixel after --scale");

    const std::string stem = fs::path(a.image).stem().string();
    dso::ContourSet contours;
    dso::RunStats stats;
    std::optional<dso::Image> heatmap;

    if (a.baseline) {
        const auto t0 = std::chrono::steady_clock::now();
        contours = dso::baseline_contours(rgb);
        const auto t1 = std::chrono::steady_clock::now();
        stats.slot_count = static_cast<long long>(dso::tile(rgb, a.config.overlap).slots.size());
        stats.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        // baseline path: no classifier, no attribution
        stats.forward_calls = 0;
        stats.attribution_calls = 0;
    } else {
        if (!fs::exists(a.checkpoint)) throw dso::IoError("checkpoint not found: " + a.checkpoint);
        const auto [params, train_config] = dso::load_checkpoint(a.checkpoint);
        dso::DetectResult result = dso::detect(rgb, params, a.config);
        contours = std::move(result.contours);
        stats = result.stats;
        heatmap = std::move(result.heatmap);
    }

    nlohmann::json cj = dso::contourset_to_json(contours, stem);
    write_json_file(out_dir / (stem + "_contours.json"), cj);

    nlohmann::json sj = stats.to_json();
    sj["seed"] = a.seed;
    sj["mode"] = a.baseline ? "baseline" : "xrai";
    sj["select_threshold"] = a.config.select_threshold;
    sj["percentile"] = a.config.percentile;
    sj["ig_steps"] = a.config.xrai.ig_steps;
    sj["overlap"] = a.config.overlap;
    sj["scale"] = a.config.prescale;
    write_json_file(out_dir / (stem + "_stats.json"), sj);

    if (heatmap) {
        dso::save_heatmap((out_dir / (stem + "_heatmap.png")).string(),
                          (out_dir / (stem + "_heatmap.json")).string(), *heatmap);
    }

    dso::Image annotated = rgb;
    for (const auto& c : contours.contours) dso::draw_polygon(annotated, c.polygon, 0.1f, 1.0f, 0.2f);
    dso::write_png8((out_dir / (stem + "_annotated.png")).string(), annotated);

    std::cout << "detections: " << contours.contours.size() << " (slots " << stats.slot_count
              << ", selected " << stats.selected_count << ", attributions "
              << stats.attribution_calls << ", " << stats.wall_ms << " ms)\n";
    return kExitOk;
}

std::map<std::string, dso::Annotation> load_annotation_set(const std::string& path) {
    std::map<std::string, dso::Annotation> out;
    if (fs::is_directory(path)) {
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.path().extension() != ".json") continue;
            // skip non-annotation sidecars quietly
            try {
                dso::Annotation ann = dso::read_annotation_file(entry.path());
                out[ann.image_id] = std::move(ann);
            } catch (const dso::IoError&) {
                continue;
            }
        }
        if (out.empty()) throw dso::IoError("no annotation JSONs found in " + path);
    } else {
        if (!fs::exists(path)) throw dso::IoError("annotation file not found: " + path);
        dso::Annotation ann = dso::read_annotation_file(path);
        out[ann.image_id] = std::move(ann);
    }
    return out;
}

struct EvaluateArgs {
    std::string pred;
    std::string truth;
    std::string out;
    double iou_threshold = 0.5;
    bool by_class = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
    const fs::path out_dir(a.out);
    ensure_out_dir(out_dir);
    auto preds_map = load_annotation_set(a.pred);
    auto truths_map = load_annotation_set(a.truth);

    std::vector<dso::Annotation> preds, truths;
    for (auto& [id, truth] : truths_map) {
        truths.push_back(truth);
        auto it = preds_map.find(id);
        if (it != preds_map.end()) {
            preds.push_back(it->second);
        } else {
            dso::Annotation empty;
            empty.image_id = id;
            empty.width = truth.width;
            empty.height = truth.height;
            preds.push_back(std::move(empty));
        }
    }

    const dso::EvalReport report = dso::evaluate_detections(preds, truths, a.iou_threshold, a.by_class);
    write_json_file(out_dir / "report.json", dso::eval_report_to_json(report));
    const std::string table = dso::eval_report_table(report);
    {
        std::ofstream txt(out_dir / "report.txt");
        if (!txt) throw dso::IoError("cannot write report.txt");
        txt << table;
    }
    std::cout << table;
    return kExitOk;
}

struct BenchArgs {
    std::string checkpoint;
    std::string scenes;
    std::string out;
    int ig_steps = 64;
    int jobs = 1;
    double iou_threshold = 0.5;
};

int cmd_bench(const BenchArgs& a) {
    const fs::path out_dir(a.out);
    ensure_out_dir(out_dir);
    if (!fs::exists(a.checkpoint)) throw dso::IoError("checkpoint not found: " + a.checkpoint);
    if (!fs::is_directory(a.scenes)) throw dso::IoError("scene directory not found: " + a.scenes);

    const auto [params, train_config] = dso::load_checkpoint(a.checkpoint);

    std::vector<std::pair<dso::Image, dso::Annotation>> scenes;
    for (const auto& entry : fs::directory_iterator(a.scenes)) {
        if (entry.path().extension() != ".png") continue;
        const fs::path truth = entry.path().parent_path() /
                               (entry.path().stem().string() + ".truth.json");
        if (!fs::exists(truth)) continue;
        scenes.emplace_back(dso::read_png(entry.path().string()), dso::read_annotation_file(truth));
    }
    std::sort(scenes.begin(), scenes.end(),
              [](const auto& x, const auto& y) { return x.second.image_id < y.second.image_id; });
    if (scenes.empty()) throw dso::IoError("no scene (.png + .truth.json) pairs in " + a.scenes);
    std::cout << "benchmarking on " << scenes.size() << " scenes\n";

    struct Setting {
        double threshold;
        double scale;
    };
    const Setting settings[] = {{0.0, 1.0}, {0.5, 1.0}, {0.0, 0.5}, {0.5, 0.5}};

    nlohmann::json rows = nlohmann::json::array();
    double base_map = 0.0;
    std::ostringstream table;
    table << "threshold  scale  slots  attrib  wall_ms     mAP    dmAP\n";
    for (const auto& s : settings) {
        dso::DetectConfig config;
        config.select_threshold = s.threshold;
        config.prescale = s.scale;
        config.xrai.ig_steps = a.ig_steps;
        config.jobs = a.jobs;
        long long slots = 0, attribs = 0;
        double wall = 0.0;
        std::vector<dso::Annotation> preds, truths;
        for (const auto& [img, truth] : scenes) {
            dso::DetectResult r = dso::detect(img, params, config);
            slots += r.stats.slot_count;
            attribs += r.stats.attribution_calls;
            wall += r.stats.wall_ms;
            preds.push_back(dso::contourset_to_annotation(r.contours, truth.image_id));
            truths.push_back(truth);
        }
        const dso::MapResult mr = dso::compute_map(preds, truths, a.iou_threshold);
        if (rows.empty()) base_map = mr.map;
        nlohmann::json row;
        row["select_threshold"] = s.threshold;
        row["scale"] = s.scale;
        row["slot_count"] = slots;
        row["attribution_calls"] = attribs;
        row["wall_ms"] = wall;
        row["map"] = mr.map;
        row["map_delta"] = mr.map - base_map;
        rows.push_back(row);
        char line[160];
        std::snprintf(line, sizeof(line), "%9.2f  %5.2f  %5lld  %6lld  %7.0f  %6.3f  %+6.3f\n",
                      s.threshold, s.scale, slots, attribs, wall, mr.map, mr.map - base_map);
        table << line;
    }

    nlohmann::json j;
    j["scenes"] = scenes.size();
    j["ig_steps"] = a.ig_steps;
    j["iou_threshold"] = a.iou_threshold;
    j["rows"] = std::move(rows);
    write_json_file(out_dir / "bench.json", j);
    {
        std::ofstream txt(out_dir / "bench.txt");
        txt << table.str();
    }
    std::cout << table.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deep-sky object detection via patch classifier + XRAI attribution"};
    app.set_config("--config", "", "read options from an INI/TOML file");
    app.require_subcommand(1);

    std::uint64_t seed = 42;
    int jobs = 1;
    app.add_option("--seed", seed, "root seed for all randomness")->capture_default_str();
    app.add_option("--jobs", jobs, "worker threads (1 = deterministic single-thread mode)")
        ->capture_default_str();

    GenerateArgs gen;
    auto* sgen = app.add_subcommand("generate", "render a labeled synthetic dataset + scenes");
    sgen->add_option("--out", gen.out, "output directory")->required();
    sgen->add_option("--n", gen.n, "number of patches")->capture_default_str();
    sgen->add_option("--scenes", gen.scenes, "number of full evaluation scenes")->capture_default_str();
    sgen->add_option("--scene-size", gen.scene_size, "scene side length in pixels")->capture_default_str();
    sgen->add_option("--profile", gen.profile, "instrument profile (stellina|vespera|square)")
        ->capture_default_str();
    sgen->add_option("--frame-width", gen.frame_w, "override profile frame width");
    sgen->add_option("--frame-height", gen.frame_h, "override profile frame height");

    TrainArgs tr;
    auto* strain = app.add_subcommand("train", "train the binary patch classifier");
    strain->add_option("--manifest", tr.manifest, "dataset manifest path")->required();
    strain->add_option("--out", tr.out, "output directory")->required();
    strain->add_option("--epochs", tr.config.epochs, "training epochs")->capture_default_str();
    strain->add_option("--lr", tr.config.learning_rate, "learning rate")->capture_default_str();
    strain->add_option("--batch", tr.config.batch_size, "batch size")->capture_default_str();
    strain->add_option("--early-stop", tr.early_stop, "early-stop patience (0 = off)")
        ->capture_default_str();

    DetectArgs det;
    auto* sdetect = app.add_subcommand("detect", "detect DSOs in one image");
    sdetect->add_option("--image", det.image, "input PNG")->required();
    sdetect->add_option("--checkpoint", det.checkpoint, "model checkpoint");
    sdetect->add_option("--out", det.out, "output directory")->required();
    sdetect->add_option("--select-threshold", det.config.select_threshold,
                        "patch probability threshold; patches below it are skipped")
        ->capture_default_str();
    sdetect->add_option("--percentile", det.config.percentile, "contour binarization percentile")
        ->capture_default_str();
    sdetect->add_option("--min-area", det.config.min_area, "minimum contour area, pixels")
        ->capture_default_str();
    sdetect->add_option("--ig-steps", det.config.xrai.ig_steps, "integrated-gradients steps")
        ->capture_default_str();
    sdetect->add_option("--overlap", det.config.overlap, "tile overlap in pixels")->capture_default_str();
    sdetect->add_option("--scale", det.config.prescale, "pre-scale factor before tiling")
        ->capture_default_str();
    sdetect->add_flag("--baseline", det.baseline, "run the star-removal baseline instead of XRAI");

    EvaluateArgs ev;
    auto* seval = app.add_subcommand("evaluate", "score predictions against truth annotations");
    seval->add_option("--pred", ev.pred, "prediction JSON file or directory")->required();
    seval->add_option("--truth", ev.truth, "truth JSON file or directory")->required();
    seval->add_option("--out", ev.out, "output directory")->required();
    seval->add_option("--iou-threshold", ev.iou_threshold, "match threshold")->capture_default_str();
    seval->add_flag("--by-class", ev.by_class, "per-class matching and AP");

    BenchArgs be;
    auto* sbench = app.add_subcommand("bench", "patch-skip / downscale benchmark over a scene set");
    sbench->add_option("--checkpoint", be.checkpoint, "model checkpoint")->required();
    sbench->add_option("--scenes", be.scenes, "directory of scene PNGs with .truth.json files")
        ->required();
    sbench->add_option("--out", be.out, "output directory")->required();
    sbench->add_option("--ig-steps", be.ig_steps, "integrated-gradients steps")->capture_default_str();
    sbench->add_option("--iou-threshold", be.iou_threshold, "mAP IoU threshold")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (sgen->parsed()) {
            gen.seed = seed;
            return cmd_generate(gen);
        }
        if (strain->parsed()) {
            tr.config.seed = seed;
            tr.jobs = jobs;
            return cmd_train(tr);
        }
        if (sdetect->parsed()) {
            det.seed = seed;
            det.config.jobs = jobs;
            if (!det.baseline && det.checkpoint.empty())
                throw dso::ConfigError("detect: --checkpoint is required unless --baseline is set");
            return cmd_detect(det);
        }
        if (seval->parsed()) return cmd_evaluate(ev);
        if (sbench->parsed()) {
            be.jobs = jobs;
            return cmd_bench(be);
        }
    } catch (const dso::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const dso::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const dso::TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const dso::DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
