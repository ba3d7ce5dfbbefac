#pragma once

// Ablation axes and the paired-run harness behind `ragcap ablate`.

#include <filesystem>
#include <string>
#include <vector>

#include "ragcap/config.hpp"
#include "ragcap/evaluation.hpp"
#include "ragcap/training.hpp"

namespace ragcap::training {

/// Declared axes: database, diffusion, text_condition, fused_image_feature,
/// lambda, top_n, db_fraction, decoder_blocks, refresh.
const std::vector<std::string>& ablation_axes();

/// Config keys an axis may change (besides the replicate seeds).
std::vector<std::string> axis_keys(const std::string& axis);

/// `base` with the axis set to `value`, resolved. ConfigError for an
/// undeclared axis or a value outside its domain.
TrainingConfig apply_axis(const TrainingConfig& base, const std::string& axis, const std::string& value);

/// Replicate r shifts seeds.init and seeds.data by r; the corpus seed (and
/// with it every shared artifact) stays fixed.
TrainingConfig replicate(const TrainingConfig& config, int r);

/// Hash of the config with the axis keys and replicate seeds removed.
std::string paired_hash(const TrainingConfig& config, const std::string& axis);

/// Run directory name for a config: identical configs share one run.
std::string run_id_for(const TrainingConfig& config);

struct AblationOptions {
  int replicates = 1;
  Logger log;
};

struct AblationResult {
  std::vector<eval::RunSummary> runs;
  std::vector<std::filesystem::path> report_files;
};

/// Runs every (value, replicate) pair, verifies that paired configs differ
/// only on the axis, and writes the report to <workspace>/reports/<axis>/.
AblationResult run_ablation(const TrainingConfig& base, const std::filesystem::path& workspace,
                            const std::string& axis, const std::vector<std::string>& values,
                            const AblationOptions& options);

}  // namespace ragcap::training
