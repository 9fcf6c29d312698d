#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlm/pipeline/config.hpp"

namespace tlm {

inline constexpr const char* kToolkitVersion = "0.1.0";

enum class Stage { Tokenize, Architecture, Model, Train, Eval };
std::string to_string(Stage s);
// Accepts the CLI verbs: tokenize, search-arch, surgery, train, eval.
Stage parse_stage(const std::string& verb);
std::vector<Stage> all_stages();

struct FileRecord {
  std::string path;  // relative to the output directory for artifacts, absolute for inputs
  std::string sha256;
  bool operator==(const FileRecord&) const = default;
};

struct RunManifest {
  nlohmann::json config;
  std::string version = kToolkitVersion;
  std::uint64_t seed = 0;
  bool dry_run = false;
  std::vector<std::string> planned;
  std::vector<std::string> completed;
  std::vector<FileRecord> inputs;
  std::vector<FileRecord> artifacts;
  std::optional<std::string> failed_stage;
  std::optional<std::string> failure;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

std::string sha256_hex(const std::filesystem::path& file);
std::string sha256_hex_of(const std::string& bytes);

inline constexpr const char* kManifestFile = "manifest.json";

// Runs every stage in order. A failing stage is recorded in the manifest and rethrown.
RunManifest run_pipeline(const PipelineConfig& config, bool dry_run = false);

// Runs one stage against artifacts already in the output directory and updates the manifest.
RunManifest run_stage(const PipelineConfig& config, Stage stage);

RunManifest load_manifest(const std::filesystem::path& output_dir);

struct ReportResult {
  std::size_t runs_found = 0;
  std::vector<std::string> gaps;  // missing artifacts, per run
  std::vector<std::filesystem::path> written;
};

// Summarizes one or more output directories into out_dir: summary.csv, report.md and
// plot-ready CSVs concatenated across runs.
ReportResult write_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir);

}  // namespace tlm
