#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "schedlab/corpus/corpus.hpp"
#include "schedlab/eval/abx.hpp"
#include "schedlab/model/config.hpp"
#include "schedlab/objectives/losses.hpp"
#include "schedlab/trainer/trainer.hpp"

namespace schedlab::runner {

inline constexpr const char* kRunSchema = "schedlab.run/1";
inline constexpr const char* kReportSchema = "schedlab.report/1";

struct EvalOptions {
  /// Empty selects every encoder layer.
  std::vector<std::size_t> layers;
  /// Empty selects every available checkpoint.
  std::vector<std::size_t> epochs;
  std::vector<std::size_t> k{1, 10};
  std::vector<eval::Condition> conditions{eval::Condition::within, eval::Condition::across};
  eval::TripletLimits limits{};
};

struct TrainSettings {
  objectives::LossConfig loss{};
  ad::AdamConfig adam{};
  bool monitor_inactive = true;
};

/// Fully resolved experiment configuration.
struct RunConfig {
  std::uint64_t seed = 0;
  corpus::CorpusSpec corpus{};
  model::ModelConfig model{};
  trainer::ScheduleSpec schedule{};
  TrainSettings train{};
  EvalOptions eval{};
  std::filesystem::path out;
};

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::string> variant;
  std::optional<std::vector<std::size_t>> layers;
  std::optional<std::vector<std::size_t>> epochs;
  std::optional<std::vector<std::size_t>> k;
};

/// Resolves a raw config object. A corpus spec given as a path is read
/// relative to `base_dir`; `out` stays relative to the working directory.
/// Unknown keys, a wrong schema, a missing seed or a missing corpus spec file
/// raise InvalidArgument.
RunConfig resolve_config(const nlohmann::json& raw, const std::filesystem::path& base_dir,
                         const Overrides& overrides = {});
/// Reads and resolves a config file; an empty path means an empty config.
RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

/// Expanded form; resolving it again yields the same config.
nlohmann::json to_json(const RunConfig& config);

/// Lowercase directory name of a variant, e.g. "(VGS+, W2V2)" -> "vgs_plus_w2v2".
std::string variant_slug(const std::string& variant);

struct Layout {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path abx_corpus() const { return root / "corpus" / "abx"; }
  std::filesystem::path run(const std::string& variant) const { return root / "runs" / variant_slug(variant); }
  std::filesystem::path tables() const { return root / "tables"; }
  std::filesystem::path report() const { return root / "report.json"; }
};

struct Artifact {
  std::filesystem::path path;
  std::string sha256;
};

/// SHA-256 over model.json and params.bin of a checkpoint directory.
std::string checkpoint_hash(const std::filesystem::path& dir);

/// Every command first writes <out>/run.json echoing the resolved config and
/// returns the artifacts it produced.
std::vector<Artifact> cmd_generate(const RunConfig& config);
std::vector<Artifact> cmd_train(const RunConfig& config);
std::vector<Artifact> cmd_eval_abx(const RunConfig& config);
std::vector<Artifact> cmd_eval_retrieval(const RunConfig& config);
/// Merges the runs found under <out>/runs into report.json and tables/*.csv.
std::vector<Artifact> cmd_report(const RunConfig& config);

}  // namespace schedlab::runner
