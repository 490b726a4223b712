#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsodetect/common.hpp"
#include "dsodetect/evaluation.hpp"
#include "dsodetect/png_io.hpp"
#include "dsodetect/synthgen.hpp"

namespace dso {

inline constexpr const char* kManifestFormat = "dsodetect-dataset";
inline constexpr int kManifestVersion = 1;

namespace datasetio_detail {

inline std::string patch_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "patch_%05zu.png", index);
    return buf;
}

inline void append_split(nlohmann::json& patches, const std::vector<LabeledPatch>& list,
                         const char* split_name, const std::filesystem::path& dir,
                         std::size_t& index) {
    for (const auto& p : list) {
        const std::string name = patch_name(index++);
        Image img(LabeledPatch::kSize, LabeledPatch::kSize, 3);
        for (std::size_t i = 0; i < p.pixels.size(); ++i) img.data[i] = dequantize16(p.pixels[i]);
        write_png16((dir / "patches" / name).string(), img);
        nlohmann::json jp;
        jp["path"] = "patches/" + name;
        jp["label"] = p.dso_present ? "dso_present" : "dso_absent";
        jp["split"] = split_name;
        jp["coverage"] = p.coverage;
        patches.push_back(std::move(jp));
    }
}

}  // namespace datasetio_detail

// Writes patches as 16-bit RGB PNGs plus one manifest JSON listing paths,
// labels, split assignment and the generator seed. Byte-identical for
// identical inputs.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                           const DatasetSplit& split,
                                           const InstrumentProfile& profile) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "patches", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

    nlohmann::json patches = nlohmann::json::array();
    std::size_t index = 0;
    datasetio_detail::append_split(patches, split.train, "train", dir, index);
    datasetio_detail::append_split(patches, split.val, "val", dir, index);
    datasetio_detail::append_split(patches, split.test, "test", dir, index);

    nlohmann::json j;
    j["format"] = kManifestFormat;
    j["version"] = kManifestVersion;
    j["seed"] = split.seed;
    j["patch_size"] = LabeledPatch::kSize;
    j["profile"] = {{"name", profile.name},
                    {"width", profile.width},
                    {"height", profile.height},
                    {"psf_fwhm", profile.psf_fwhm},
                    {"read_noise_sigma", profile.read_noise_sigma},
                    {"sky_gradient_max", profile.sky_gradient_max}};
    j["counts"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
    j["patches"] = std::move(patches);

    const std::filesystem::path manifest = dir / "manifest.json";
    std::ofstream out(manifest);
    if (!out) throw IoError("cannot write manifest: " + manifest.string());
    out << j.dump(1) << "\n";
    return manifest;
}

// Loads a dataset from its manifest. Truth masks are not persisted (they
// are evaluation-side metadata); labels and coverage come from the
// manifest, pixels from the PNGs.
inline DatasetSplit load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot read manifest: " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest parse error in " + manifest_path.string() + ": " + e.what());
    }
    if (j.value("format", "") != kManifestFormat)
        throw IoError("not a dataset manifest: " + manifest_path.string());
    if (j.value("version", 0) != kManifestVersion)
        throw IoError("unsupported manifest version in " + manifest_path.string());

    DatasetSplit split;
    split.seed = j.value("seed", static_cast<std::uint64_t>(0));
    const auto base = manifest_path.parent_path();
    for (const auto& jp : j.at("patches")) {
        const std::string rel = jp.at("path").get<std::string>();
        const Image img = read_png((base / rel).string());
        if (img.height != LabeledPatch::kSize || img.width != LabeledPatch::kSize || img.channels != 3)
            throw IoError("patch " + rel + " is not 224x224 RGB");
        LabeledPatch p;
        p.pixels.resize(img.data.size());
        for (std::size_t i = 0; i < img.data.size(); ++i) p.pixels[i] = quantize16(img.data[i]);
        p.dso_present = jp.at("label").get<std::string>() == "dso_present";
        p.coverage = jp.value("coverage", 0.0f);
        const std::string which = jp.at("split").get<std::string>();
        if (which == "train") split.train.push_back(std::move(p));
        else if (which == "val") split.val.push_back(std::move(p));
        else if (which == "test") split.test.push_back(std::move(p));
        else throw IoError("manifest: unknown split '" + which + "'");
    }
    return split;
}

inline void write_annotation_file(const std::filesystem::path& path, const Annotation& ann) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write annotation: " + path.string());
    out << annotation_to_json(ann).dump(1) << "\n";
}

inline Annotation read_annotation_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read annotation: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("annotation parse error in " + path.string() + ": " + e.what());
    }
    return annotation_from_json(j);
}

}  // namespace dso
