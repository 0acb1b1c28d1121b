#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "schedlab/runner/runner.hpp"
#include "schedlab/util/error.hpp"

namespace fs = std::filesystem;
using namespace schedlab;

namespace {

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string variant;
  std::vector<std::size_t> layers, epochs, k;
};

void add_flags(CLI::App* cmd, Flags& f, bool eval) {
  cmd->add_option("--config", f.config, "Run config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Seed (overrides the config)");
  cmd->add_option("--out", f.out, "Output directory (overrides the config)");
  cmd->add_option("--variant", f.variant, "Training variant, e.g. \"(VGS, W2V2)\"");
  if (!eval) return;
  cmd->add_option("--layers", f.layers, "Comma-separated encoder layers")->delimiter(',');
  cmd->add_option("--epochs", f.epochs, "Comma-separated checkpoint epochs")->delimiter(',');
  cmd->add_option("--k", f.k, "Comma-separated recall cutoffs")->delimiter(',');
}

runner::RunConfig resolve(const CLI::App* cmd, const Flags& f) {
  runner::Overrides ov;
  if (cmd->count("--seed")) ov.seed = f.seed;
  if (cmd->count("--out")) ov.out = f.out;
  if (cmd->count("--variant")) ov.variant = f.variant;
  if (cmd->get_option_no_throw("--layers") && cmd->count("--layers")) ov.layers = f.layers;
  if (cmd->get_option_no_throw("--epochs") && cmd->count("--epochs")) ov.epochs = f.epochs;
  if (cmd->get_option_no_throw("--k") && cmd->count("--k")) ov.k = f.k;
  return runner::load_config(f.config, ov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task speech representation experiments on a synthetic corpus"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  Flags flags;
  using Command = std::vector<runner::Artifact> (*)(const runner::RunConfig&);
  const std::vector<std::tuple<const char*, const char*, Command, bool>> commands{
      {"generate-corpus", "Generate the paired corpus and the ABX corpus", runner::cmd_generate, false},
      {"train", "Train one variant", runner::cmd_train, false},
      {"eval-abx", "Layer-wise ABX error of a trained variant", runner::cmd_eval_abx, true},
      {"eval-retrieval", "Speech/image recall@k of a trained variant", runner::cmd_eval_retrieval, true},
      {"report", "Merge all runs into report.json and table CSVs", runner::cmd_report, false},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn, eval] : commands) {
    auto* cmd = app.add_subcommand(name, help);
    add_flags(cmd, flags, eval);
    subs.emplace_back(cmd, fn);
  }

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    for (const auto& [cmd, fn] : subs) {
      if (!cmd->parsed()) continue;
      auto config = resolve(cmd, flags);
      for (const auto& a : fn(config)) std::printf("%s  %s\n", a.sha256.c_str(), a.path.string().c_str());
    }
  } catch (const InvalidArgument& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
