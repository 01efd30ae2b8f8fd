#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "acal/datasets.hpp"
#include "acal/evalsuite.hpp"
#include "acal/trainer.hpp"

namespace acal {

struct OutputConfig {
  std::string dir = "runs/out";
  bool pgm_export = false;
  std::vector<std::string> formats = {"csv", "json", "svg"};
  int dump_count = 8;
};

// Full run configuration. Every field has a documented default; unknown keys
// are rejected with their path; `canonical_text` is the byte-stable
// canonical form echoed by print-config and embedded in run.json.
struct RunConfig {
  GlyphPairConfig data;
  int target_per_class = 10;
  std::string source_idx_images, source_idx_labels;
  std::string target_idx_images, target_idx_labels;
  TrainConfig trainer;
  PretrainConfig pretrain;
  std::vector<std::string> ablation_variants;
  std::vector<std::uint64_t> ablation_seeds;
  int ablation_jobs = 1;
  OutputConfig output;
  std::string canonical_text;
};

// Defaults (empty JSON object input).
RunConfig default_config();

// Parses a JSON config document: defaults applied, overrides win. Throws
// ConfigError naming the offending key path on unknown keys or type
// mismatches.
RunConfig parse_config_text(const std::string& json_text);
RunConfig parse_config_file(const std::filesystem::path& path);

// Applies a dot-path override ("trainer.seed=7"); the value parses as a
// JSON literal, falling back to a string.
std::string apply_override_text(const std::string& json_text, const std::string& assignment);

std::uint64_t config_fingerprint(const RunConfig& cfg);

// Datasets for the run: IDX ingestion when paths are configured, otherwise
// the procedural glyph pair. Applies the low-resource target subsample and
// the supervision-mode label stripping.
DomainPair build_data(const RunConfig& cfg);

AblationSetup ablation_setup(const RunConfig& cfg);

}  // namespace acal
