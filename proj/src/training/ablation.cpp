#include "ragcap/ablation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <set>

namespace ragcap::training {

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"database", "diffusion",    "text_condition", "fused_image_feature",
                                             "lambda",   "top_n",        "db_fraction",    "decoder_blocks",
                                             "refresh"};
  return axes;
}

std::vector<std::string> axis_keys(const std::string& axis) {
  if (axis == "database") return {"ablation.no_retrieval", "ablation.objects_only_db"};
  if (axis == "diffusion") return {"ablation.no_diffusion", "train.lambda"};
  if (axis == "text_condition") return {"ablation.text_condition"};
  if (axis == "fused_image_feature") return {"ablation.fused_image_feature"};
  if (axis == "lambda") return {"train.lambda"};
  if (axis == "top_n") return {"retrieval.top_n"};
  if (axis == "db_fraction") return {"retrieval.db_fraction"};
  if (axis == "decoder_blocks") return {"captioner.decoder_blocks"};
  if (axis == "refresh") return {"retrieval.refresh"};
  throw ConfigError("undeclared ablation axis '" + axis + "'");
}

namespace {

bool switch_value(const std::string& axis, const std::string& value) {
  if (value == "on") return true;
  if (value == "off") return false;
  throw ConfigError("axis " + axis + " takes on/off, got '" + value + "'");
}

}  // namespace

TrainingConfig apply_axis(const TrainingConfig& base, const std::string& axis, const std::string& value) {
  TrainingConfig c = base;
  if (axis == "database") {
    if (value == "none") {
      c.ablation.no_retrieval = true;
      c.ablation.objects_only_db = false;
    } else if (value == "objects_only") {
      c.ablation.no_retrieval = false;
      c.ablation.objects_only_db = true;
    } else if (value == "full") {
      c.ablation.no_retrieval = false;
      c.ablation.objects_only_db = false;
    } else {
      throw ConfigError("axis database takes none/objects_only/full, got '" + value + "'");
    }
  } else if (axis == "diffusion") {
    c.ablation.no_diffusion = !switch_value(axis, value);
  } else if (axis == "text_condition") {
    c.ablation.text_condition = switch_value(axis, value);
  } else if (axis == "fused_image_feature") {
    c.ablation.fused_image_feature = switch_value(axis, value);
  } else {
    const auto keys = axis_keys(axis);
    c.set(keys.front(), value);
  }
  if (axis == "lambda" && c.ablation.no_diffusion) throw ConfigError("lambda sweep with ablation.no_diffusion set");
  c.resolve();
  return c;
}

TrainingConfig replicate(const TrainingConfig& config, int r) {
  TrainingConfig c = config;
  c.seeds.init += static_cast<std::uint64_t>(r);
  c.seeds.data += static_cast<std::uint64_t>(r);
  return c;
}

std::string paired_hash(const TrainingConfig& config, const std::string& axis) {
  auto skip = axis_keys(axis);
  skip.push_back("seeds.init");
  skip.push_back("seeds.data");
  return config.hash(skip);
}

std::string run_id_for(const TrainingConfig& config) { return "run-" + config.hash().substr(0, 12); }

AblationResult run_ablation(const TrainingConfig& base_in, const std::filesystem::path& workspace,
                            const std::string& axis, const std::vector<std::string>& values,
                            const AblationOptions& options) {
  if (values.empty()) throw ConfigError("ablate needs at least one value");
  if (options.replicates < 1) throw ConfigError("replicates must be >= 1");
  TrainingConfig base = base_in;
  base.resolve();
  auto allowed = axis_keys(axis);
  allowed.push_back("seeds.init");
  allowed.push_back("seeds.data");
  const std::set<std::string> allowed_set(allowed.begin(), allowed.end());

  // Build and check every config before any training starts.
  struct Planned {
    std::string value;
    int replicate;
    TrainingConfig config;
  };
  std::vector<Planned> plan;
  for (const auto& v : values) {
    const auto cv = apply_axis(base, axis, v);
    for (int r = 0; r < options.replicates; ++r) {
      auto c = replicate(cv, r);
      for (const auto& key : config_diff(base, c)) {
        if (!allowed_set.count(key)) {
          throw ConfigError("paired run " + axis + "=" + v + " differs from the base on " + key);
        }
      }
      plan.push_back({v, r, c});
    }
  }
  const auto paired = paired_hash(plan.front().config, axis);
  for (const auto& p : plan) {
    if (paired_hash(p.config, axis) != paired) throw ConfigError("paired configs disagree outside axis " + axis);
  }

  AblationResult result;
  for (const auto& p : plan) {
    prepare_all(p.config, workspace, options.log);
    const auto id = run_id_for(p.config);
    if (options.log) options.log(fmt::format("ablate {}={} replicate {} -> {}", axis, p.value, p.replicate, id));
    RunOptions ro;
    ro.log = options.log;
    ro.reuse_complete = true;
    const auto rec = run_training(p.config, workspace, id, ro);
    eval::RunSummary s;
    s.run_id = id;
    s.axis = axis;
    s.value = p.value;
    s.seed = fmt::format("init{}-data{}", p.config.seeds.init, p.config.seeds.data);
    s.paired_hash = paired_hash(p.config, axis);
    s.report = rec.final_metrics;
    result.runs.push_back(s);
  }
  result.report_files = eval::render_report(result.runs, workspace / "reports" / axis);
  return result;
}

}  // namespace ragcap::training
