#pragma once

// Weight checkpoints: a directory holding manifest.json plus one STAR tensor
// file per parameter.
//
//   {"format": "star-checkpoint", "version": 1,
//    "config": {...ModelConfig...},
//    "parameters": {"layer.0.q_proj.weight": "layer.0.q_proj.weight.star", ...}}

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "star/model.hpp"
#include "star/tensor_io.hpp"

namespace star {

inline void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& w) {
    audit_shapes(w);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json files = nlohmann::json::object();
    w.params.for_each([&](const std::string& name, ParamKind, const Tensor& t) {
        const std::string file = name + ".star";
        io::save(dir / file, t, io::DType::f64);
        files[name] = file;
    });
    const nlohmann::json manifest{
        {"format", "star-checkpoint"}, {"version", 1}, {"config", w.config}, {"parameters", files}};
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
    f << manifest.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + (dir / "manifest.json").string());
}

inline ModelWeights load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream f(manifest_path);
    if (!f) throw IoError("cannot open " + manifest_path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "star-checkpoint")
        throw ConfigError(manifest_path.string() + ": not a star checkpoint manifest");
    if (!manifest.contains("config") || !manifest.contains("parameters"))
        throw ConfigError(manifest_path.string() + ": manifest lacks config or parameters");
    ModelWeights w;
    w.config = manifest.at("config").get<ModelConfig>();
    const auto shapes = param_shapes(w.config);
    const auto& files = manifest.at("parameters");
    if (files.size() != [&] {
            std::size_t n = 0;
            shapes.for_each([&n](const std::string&, ParamKind, const Shape&) { ++n; });
            return n;
        }())
        throw ConfigError(manifest_path.string() + ": parameter list does not match config");
    w.params = map_params(shapes, [&](const std::string& name, ParamKind, const Shape&) {
        if (!files.contains(name)) throw ConfigError(manifest_path.string() + ": missing parameter " + name);
        return io::load(dir / files.at(name).get<std::string>());
    });
    audit_shapes(w);
    return w;
}

}  // namespace star
