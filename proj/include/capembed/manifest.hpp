#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"
#include "capembed/dataio.hpp"

namespace capembed {

inline constexpr const char* kManifestFormat = "capembed.manifest.v1";

// Every CLI command records the fully resolved configuration it ran with;
// replaying the stored config reproduces the artifacts byte for byte.
struct RunManifest {
  std::string command;
  json config;   // resolved config, seeds included
  json inputs;   // logical name -> path
  json outputs;  // logical name -> file name inside the output directory
  json artifact_versions;
  double wall_clock_sec = 0.0;
};

// Written atomically (temp file + rename) next to the command's artifacts.
inline void write_manifest(const RunManifest& m, const std::filesystem::path& out_dir) {
  ordered_json j;
  j["format"] = kManifestFormat;
  j["command"] = m.command;
  j["config"] = m.config;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["artifact_versions"] = m.artifact_versions;
  j["wall_clock_sec"] = m.wall_clock_sec;
  const auto tmp = out_dir / "manifest.json.tmp";
  const auto final_path = out_dir / "manifest.json";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write manifest: " + tmp.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, final_path);
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != kManifestFormat) {
      throw DataError("unsupported manifest format tag");
    }
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.inputs = j.value("inputs", json::object());
    m.outputs = j.value("outputs", json::object());
    m.artifact_versions = j.value("artifact_versions", json::object());
    m.wall_clock_sec = j.value("wall_clock_sec", 0.0);
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace capembed
