#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "acal/datasets.hpp"
#include "acal/nets.hpp"
#include "acal/trainer.hpp"

namespace acal {

// Fraction of correct argmax predictions (ties to the lowest class index),
// dropout off. Throws ConfigError on a dataset with unlabeled items.
double accuracy(const Network& classifier, const DomainDataset& ds);

struct AblationSetup {
  GlyphPairConfig data;
  // Per-class labeled subsample of the target pool (0 disables subsampling).
  int target_per_class = 10;
  TrainConfig trainer;
  PretrainConfig pretrain;
  std::vector<VariantSpec> variants;
  std::vector<std::uint64_t> seeds;
  // Parallel (variant, seed) runs; each run stays single-threaded.
  int jobs = 1;
};

struct AblationReport {
  struct Row {
    std::string variant;
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_acc;
    std::vector<double> best_acc;
    std::vector<double> wall_s;
    double mean_final = 0.0, std_final = 0.0;
    double mean_best = 0.0, std_best = 0.0;
  };
  std::vector<Row> rows;
  std::uint64_t config_fingerprint = 0;
  int schema_version = 1;
  bool complete = true;
};

std::uint64_t ablation_fingerprint(const AblationSetup& setup);

// For each (variant, seed): fresh target subsample, fresh source pretraining
// where the variant needs it, one full training run. Rows assemble in
// deterministic (variant, seed) order regardless of scheduling. On a run
// abort the completed rows stay in `out` (complete = false) and the error
// propagates with the variant and seed named.
void run_ablation(const AblationSetup& setup, AblationReport& out);

// One (variant, seed) cell exactly as run_ablation executes it.
AblationRow run_ablation_cell(const AblationSetup& setup, const VariantSpec& variant,
                              std::uint64_t seed);

enum class ReportFormat { csv, json, svg };

// csv: header, one row per (variant, seed), then mean/std summary rows.
// json: the full structure, schema_version tagged.
// svg: self-contained bar chart of mean final accuracy with std whiskers.
void emit_report(const AblationReport& report, ReportFormat format,
                 const std::filesystem::path& path);

std::string report_csv(const AblationReport& report);
std::string report_json(const AblationReport& report);
std::string report_svg(const AblationReport& report);

// Inverse of report_json. Throws ConfigError on malformed input.
AblationReport report_from_json(const std::string& text);

}  // namespace acal
