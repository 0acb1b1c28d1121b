#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "schedlab/runner/runner.hpp"
#include "schedlab/trainer/trainer.hpp"
#include "schedlab/util/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace schedlab;
using runner::Overrides;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("schedlab_runner_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json tiny_config(const fs::path& out) {
  auto j = json::parse(R"cfg({
    "schema": "schedlab.run/1",
    "seed": 5,
    "corpus": {"n_train_images": 8, "n_test_images": 4, "captions_per_image": 2,
               "domain_a": {"n_speakers": 2},
               "abx": {"domain": {"n_speakers": 2, "speaker_id_offset": 100}, "min_tokens_per_phone": 3}},
    "model": {"d_model": 8, "heads": 2, "ffn_dim": 16, "enc_layers": 1, "dec_layers": 1, "d_z": 8,
              "proj_dim": 8, "emb_dim": 8, "codebook": {"groups": 2, "entries": 4, "code_dim": 8}},
    "variant": "(VGS, W2V2)",
    "pretrain_epochs": 1,
    "main_epochs": 2,
    "train": {"batch_size": 4, "lr0": 1e-3, "checkpoint_period": 1},
    "eval": {"k": [1, 2], "max_per_cell": 5}
  })cfg");
  j["out"] = out.string();
  return j;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const InvalidArgument& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(RunConfig, EmptyConfigNeedsSeedAndOut) {
  EXPECT_NE(error_of([] { runner::resolve_config(json::object(), ".", {}); }).find("seed"), std::string::npos);
  Overrides ov;
  ov.seed = 9;
  EXPECT_NE(error_of([&] { runner::resolve_config(json::object(), ".", ov); }).find("out"), std::string::npos);
  ov.out = "x";
  auto c = runner::resolve_config(json::object(), ".", ov);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.schedule.seed, 9u);
  EXPECT_EQ(c.schedule.variant, "VGS");
  EXPECT_EQ(c.schedule.total_epochs(), 70u);
  EXPECT_EQ(c.model.preset, "toy");
  EXPECT_EQ(c.eval.k, (std::vector<std::size_t>{1, 10}));
}

TEST(RunConfig, SchemaIsRequiredAndVersioned) {
  auto j = tiny_config("o");
  j.erase("schema");
  EXPECT_NE(error_of([&] { runner::resolve_config(j, ".", {}); }).find("schema"), std::string::npos);
  j["schema"] = "schedlab.run/0";
  EXPECT_NE(error_of([&] { runner::resolve_config(j, ".", {}); }).find("schedlab.run/1"), std::string::npos);
}

TEST(RunConfig, UnknownKeysAreNamed) {
  auto j = tiny_config("o");
  j["epochz"] = 3;
  EXPECT_NE(error_of([&] { runner::resolve_config(j, ".", {}); }).find("'epochz'"), std::string::npos);
  j = tiny_config("o");
  j["train"]["lr"] = 1.0;
  EXPECT_NE(error_of([&] { runner::resolve_config(j, ".", {}); }).find("train.lr"), std::string::npos);
  j = tiny_config("o");
  j["eval"]["conditions"] = {"sideways"};
  EXPECT_NE(error_of([&] { runner::resolve_config(j, ".", {}); }).find("sideways"), std::string::npos);
}

TEST(RunConfig, UnknownVariantListsAllNine) {
  auto msg = error_of([] {
    Overrides ov;
    ov.variant = "(VGS, VGS)";
    runner::resolve_config(tiny_config("o"), ".", ov);
  });
  ASSERT_FALSE(msg.empty());
  for (const auto& name : trainer::variant_names()) EXPECT_NE(msg.find(name), std::string::npos) << name;
}

TEST(RunConfig, CorpusSpecPathIsRelativeToConfigAndMustExist) {
  auto dir = scratch("corpus_path");
  auto j = tiny_config(dir / "out");
  std::ofstream(dir / "spec.json") << j["corpus"].dump();
  j["corpus"] = "spec.json";
  std::ofstream(dir / "cfg.json") << j.dump();
  auto c = runner::load_config(dir / "cfg.json");
  EXPECT_EQ(c.corpus.n_train_images, 8u);
  j["corpus"] = "missing.json";
  std::ofstream(dir / "cfg.json", std::ios::trunc) << j.dump();
  EXPECT_NE(error_of([&] { runner::load_config(dir / "cfg.json"); }).find("missing.json"), std::string::npos);
}

TEST(RunConfig, OverridesWin) {
  Overrides ov;
  ov.seed = 77;
  ov.out = "elsewhere";
  ov.variant = "VGS+";
  ov.layers = std::vector<std::size_t>{2};
  ov.epochs = std::vector<std::size_t>{0, 3};
  ov.k = std::vector<std::size_t>{5};
  auto c = runner::resolve_config(tiny_config("o"), ".", ov);
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.schedule.seed, 77u);
  EXPECT_EQ(c.out, fs::path("elsewhere"));
  EXPECT_EQ(c.schedule.variant, "VGS+");
  EXPECT_EQ(c.schedule.total_epochs(), 3u);
  EXPECT_EQ(c.eval.layers, (std::vector<std::size_t>{2}));
  EXPECT_EQ(c.eval.epochs, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(c.eval.k, (std::vector<std::size_t>{5}));
  ov.layers = std::vector<std::size_t>{3};
  EXPECT_NE(error_of([&] { runner::resolve_config(tiny_config("o"), ".", ov); }).find("eval.layers"),
            std::string::npos);
}

TEST(RunConfig, ExpandedFormRoundTrips) {
  auto c = runner::resolve_config(tiny_config("o"), ".", {});
  auto j = runner::to_json(c);
  EXPECT_TRUE(j["variant"].is_object());
  EXPECT_TRUE(j["model"].is_object());
  auto again = runner::resolve_config(j, ".", {});
  EXPECT_EQ(runner::to_json(again), j);
}

TEST(RunConfig, VariantSlugsAreDistinct) {
  std::set<std::string> slugs;
  for (const auto& name : trainer::variant_names()) slugs.insert(runner::variant_slug(name));
  EXPECT_EQ(slugs.size(), trainer::variant_names().size());
  EXPECT_EQ(runner::variant_slug("(VGS+, W2V2)"), "vgs_plus_w2v2");
  EXPECT_EQ(runner::variant_slug("VGS"), "vgs");
}

TEST(Commands, RunJsonIsWrittenBeforeCompute) {
  auto dir = scratch("runjson");
  auto c = runner::resolve_config(tiny_config(dir), ".", {});
  EXPECT_THROW(runner::cmd_train(c), InvalidArgument);  // no corpus yet
  auto echoed = json::parse(slurp(dir / "run.json"));
  EXPECT_EQ(echoed["command"], "train");
  EXPECT_EQ(echoed["config"], runner::to_json(c));
}

TEST(Commands, CorpusMismatchIsRejected) {
  auto dir = scratch("mismatch");
  auto c = runner::resolve_config(tiny_config(dir), ".", {});
  runner::cmd_generate(c);
  Overrides ov;
  ov.seed = 6;
  auto other = runner::resolve_config(tiny_config(dir), ".", ov);
  EXPECT_NE(error_of([&] { runner::cmd_train(other); }).find("generate-corpus"), std::string::npos);
}

TEST(Commands, EndToEndReport) {
  auto dir = scratch("e2e");
  auto c = runner::resolve_config(tiny_config(dir), ".", {});
  EXPECT_EQ(runner::cmd_generate(c).size(), 2u);
  auto trained = runner::cmd_train(c);
  EXPECT_EQ(trained.size(), 2u + 4u);  // run.json, log, ckpt_0..3
  runner::cmd_eval_abx(c);
  runner::cmd_eval_retrieval(c);
  auto artifacts = runner::cmd_report(c);
  for (const auto& a : artifacts) {
    EXPECT_TRUE(fs::exists(a.path)) << a.path;
    EXPECT_EQ(a.sha256.size(), 64u);
  }

  auto report = json::parse(slurp(dir / "report.json"));
  ASSERT_EQ(report["variants"].size(), 1u);
  const auto& v = report["variants"][0];
  EXPECT_EQ(v["variant"], "(VGS, W2V2)");
  EXPECT_EQ(v["run_dir"], "runs/vgs_w2v2");
  EXPECT_EQ(v["final_epoch"], 3);
  EXPECT_EQ(v["checkpoints"].size(), 4u);
  EXPECT_EQ(v["corpus_sha256"], report["corpus"]["sha256"]);
  EXPECT_EQ(v["retrieval"]["final"]["epoch"], 3);
  EXPECT_TRUE(v["retrieval"]["final"]["speech_to_image"].contains("2"));
  EXPECT_EQ(v["retrieval"]["final"]["checkpoint_sha256"], v["checkpoints"][3]["sha256"]);
  EXPECT_GE(v["retrieval"]["best"]["speech_to_image"]["2"].get<double>(),
            v["retrieval"]["final"]["speech_to_image"]["2"].get<double>());
  EXPECT_TRUE(v["abx"]["best"].contains("within"));
  EXPECT_TRUE(v["abx"]["best"].contains("across"));

  // Every evaluated layer and checkpoint appears in the sweep.
  auto abx = slurp(dir / "runs" / "vgs_w2v2" / "abx.csv");
  std::size_t rows = 0;
  for (char ch : abx) rows += ch == '\n';
  EXPECT_EQ(rows, 1u + 4u * 2u * 2u);  // header + epochs x layers x conditions

  auto loss = slurp(dir / "tables" / "loss_curves.csv");
  EXPECT_NE(loss.find("\"(VGS, W2V2)\",1,VGS,"), std::string::npos);
  EXPECT_EQ(report["tables"]["loss_curves"]["path"], "tables/loss_curves.csv");
}

TEST(Commands, MissingCheckpointListsAvailable) {
  auto dir = scratch("missing_ckpt");
  auto c = runner::resolve_config(tiny_config(dir), ".", {});
  runner::cmd_generate(c);
  runner::cmd_train(c);
  Overrides ov;
  ov.epochs = std::vector<std::size_t>{9};
  auto bad = runner::resolve_config(tiny_config(dir), ".", ov);
  auto msg = error_of([&] { runner::cmd_eval_retrieval(bad); });
  EXPECT_NE(msg.find("9"), std::string::npos);
  EXPECT_NE(msg.find("{0, 1, 2, 3}"), std::string::npos);
  Overrides other;
  other.variant = "W2V2";
  auto untrained = runner::resolve_config(tiny_config(dir), ".", other);
  EXPECT_NE(error_of([&] { runner::cmd_eval_abx(untrained); }).find("run train first"), std::string::npos);
}

TEST(Commands, ReportWithoutRunsFails) {
  auto dir = scratch("no_runs");
  auto c = runner::resolve_config(tiny_config(dir), ".", {});
  EXPECT_THROW(runner::cmd_report(c), InvalidArgument);
}

TEST(Commands, IdenticalRunsGiveIdenticalReports) {
  std::string reports[2], logs[2];
  for (int i = 0; i < 2; ++i) {
    auto dir = scratch("determinism_" + std::to_string(i));
    auto c = runner::resolve_config(tiny_config(dir), ".", {});
    runner::cmd_generate(c);
    runner::cmd_train(c);
    runner::cmd_eval_abx(c);
    runner::cmd_eval_retrieval(c);
    runner::cmd_report(c);
    reports[i] = slurp(dir / "report.json");
    logs[i] = slurp(dir / "runs" / "vgs_w2v2" / "train_log.csv");
  }
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(logs[0], logs[1]);
}
