// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the cdistill binary on a tiny configuration.
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cdistill/trainer.hpp"
#include "support.hpp"

namespace cdistill {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kTinyConfig = R"({
  "dataset": {"seed": 5, "train": 10, "val": 10, "image_height": 16, "image_width": 32},
  "encoder": {
    "feature_dim": 8,
    "encoder_2d": {"patch_size": 8, "hidden": 16, "blocks": 1},
    "encoder_3d": {"hidden": 16, "blocks": 1, "point_dim": 12, "knn": 4}
  },
  "trainer": {"stage1": {"epochs": 2, "batch_size": 4}, "stage2": {"batch_size": 4}},
  "probe": {"epochs": 2, "batch_size": 4, "finetune_epochs": 1, "depth_pixels_per_sample": 32,
            "corruption_severity": 1},
  "ablation": {"stage2_epochs": [1, 2], "lidar_corruptions": [{"kind": "gaussian_noise", "severity": 1}]},
  "output": {"root": "unused_default_root", "pca_samples": 1}
})";

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<test::TempDir>("cli");
    write_config("tiny.json", kTinyConfig);
  }

  fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path p = dir_->path() / name;
    write_text(p, text);
    return p;
  }

  fs::path cfg(const std::string& name = "tiny.json") const { return dir_->path() / name; }
  fs::path root(const std::string& name = "out") const { return dir_->path() / name; }

  Result run(const std::string& args, const std::string& env = "") const {
    const fs::path out = dir_->path() / "stdout.txt", err = dir_->path() / "stderr.txt";
    const std::string cmd = "cd '" + dir_->path().string() + "' && env -u CD_OUTPUT_ROOT " + env + " '" +
                            CDISTILL_BINARY + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text(out);
    r.err = read_text(err);
    return r;
  }

  Result run_cfg(const std::string& sub, const std::string& rest = "", const std::string& config = "tiny.json",
                 const std::string& root_name = "out") const {
    return run(sub + " -c '" + cfg(config).string() + "' --root '" + root(root_name).string() + "' " + rest);
  }

  static json artifacts(const Result& r) {
    const size_t at = r.out.rfind("ARTIFACTS ");
    EXPECT_NE(at, std::string::npos) << r.out;
    if (at == std::string::npos) return json::object();
    return json::parse(r.out.substr(at + 10, r.out.find('\n', at) - at - 10));
  }

  static fs::path checkpoint_of(const Result& r) { return artifacts(r)["artifacts"]["checkpoint"].get<std::string>(); }

  std::unique_ptr<test::TempDir> dir_;
};

TEST_F(Cli, ConfigDefaultsMatchCanonicalFile) {
  const Result r = run("config-defaults");
  ASSERT_EQ(r.code, 0) << r.err;
  const ExperimentConfig printed = parse_config(r.out);
  const ExperimentConfig file = load_config(std::string(CDISTILL_SOURCE_DIR) + "/configs/reproduce_all.json");
  EXPECT_EQ(printed.hash, file.hash);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train -c x.json --stage 3").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ConfigErrorsExitTwoWithLine) {
  write_config("bad.json", "{\n  \"dataset\": {\n    \"trian\": 3\n  }\n}\n");
  const Result r = run_cfg("generate", "", "bad.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.json:3"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("dataset.trian"), std::string::npos) << r.err;
  EXPECT_EQ(run("generate -c missing.json").code, 2);
}

TEST_F(Cli, MissingPrerequisitesExitThree) {
  Result r = run_cfg("train", "--stage 2");
  EXPECT_EQ(r.code, 3) << r.err;
  r = run_cfg("probe", "--task seg --encoder '" + (dir_->path() / "nope").string() + "'");
  EXPECT_EQ(r.code, 3) << r.err;
  r = run_cfg("diagnose", "--encoder '" + dir_->path().string() + "'");
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(Cli, DivergenceExitsFourAndKeepsLastGoodCheckpoint) {
  std::string text = kTinyConfig;
  text.replace(text.find(R"("stage1": {"epochs": 2, "batch_size": 4})"),
               std::string(R"("stage1": {"epochs": 2, "batch_size": 4})").size(),
               R"("stage1": {"epochs": 2, "batch_size": 4, "peak_lr": 1e300, "floor_lr": 1e299,
                             "warmup_fraction": 0.0, "weight_decay": 0.0})");
  write_config("diverge.json", text);
  const Result r = run_cfg("train", "--stage 1", "diverge.json");
  EXPECT_EQ(r.code, 4) << r.err;
  bool failed_dir = false;
  for (const auto& e : fs::directory_iterator(root() / "checkpoints")) {
    if (e.path().extension() == ".failed") failed_dir = fs::exists(e.path() / "checkpoint.json");
  }
  EXPECT_TRUE(failed_dir);
}

TEST_F(Cli, EmptyDatasetIsValid) {
  std::string text = kTinyConfig;
  text.replace(text.find(R"("train": 10, "val": 10)"), std::string(R"("train": 10, "val": 10)").size(),
               R"("train": 0, "val": 0)");
  write_config("empty.json", text);
  const Result r = run_cfg("generate", "", "empty.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const json a = artifacts(r);
  const json m = json::parse(read_text(a["artifacts"]["dataset/manifest"].get<std::string>()));
  EXPECT_EQ(m["counts"]["total"], 0);
}

TEST_F(Cli, GenerateToExplicitDirectoryIsReproducible) {
  ASSERT_EQ(run_cfg("generate", "--out '" + (dir_->path() / "d1").string() + "'").code, 0);
  ASSERT_EQ(run_cfg("generate", "--out '" + (dir_->path() / "d2").string() + "'").code, 0);
  EXPECT_EQ(test::tree_hash(dir_->path() / "d1"), test::tree_hash(dir_->path() / "d2"));
}

TEST_F(Cli, OutputRootPrecedence) {
  ASSERT_EQ(run("generate -c tiny.json").code, 0);
  EXPECT_TRUE(fs::exists(dir_->path() / "unused_default_root" / "datasets"));
  ASSERT_EQ(run("generate -c tiny.json", "CD_OUTPUT_ROOT=env_root").code, 0);
  EXPECT_TRUE(fs::exists(dir_->path() / "env_root" / "datasets"));
  ASSERT_EQ(run("generate -c tiny.json --root flag_root", "CD_OUTPUT_ROOT=env_root2").code, 0);
  EXPECT_TRUE(fs::exists(dir_->path() / "flag_root" / "datasets"));
  EXPECT_FALSE(fs::exists(dir_->path() / "env_root2"));
}

TEST_F(Cli, StagesRespectStopGradientAndCache) {
  const Result s1 = run_cfg("train", "--stage 1");
  ASSERT_EQ(s1.code, 0) << s1.err;
  const Checkpoint c1 = load_checkpoint(checkpoint_of(s1));
  const Checkpoint init = init_checkpoint(load_config(cfg()).run);
  EXPECT_EQ(c1.stage, "stage1");
  EXPECT_EQ(c1.encoder_2d.hash(), init.encoder_2d.hash());
  EXPECT_NE(c1.encoder_3d.hash(), init.encoder_3d.hash());
  EXPECT_TRUE(fs::exists(checkpoint_of(s1) / "train_log.csv"));

  const Result s2 = run_cfg("train", "--stage 2 --from '" + checkpoint_of(s1).string() + "'");
  ASSERT_EQ(s2.code, 0) << s2.err;
  const Checkpoint c2 = load_checkpoint(checkpoint_of(s2));
  EXPECT_EQ(c2.encoder_3d.hash(), c1.encoder_3d.hash());
  EXPECT_NE(c2.encoder_2d.hash(), c1.encoder_2d.hash());

  const Result again = run_cfg("train", "--stage 1");
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(checkpoint_of(again), checkpoint_of(s1));
  EXPECT_EQ(load_checkpoint(checkpoint_of(again)).encoder_3d.hash(), c1.encoder_3d.hash());

  const Result joint = run_cfg("train", "--stage joint");
  ASSERT_EQ(joint.code, 0) << joint.err;
  const Checkpoint cj = load_checkpoint(checkpoint_of(joint));
  EXPECT_EQ(cj.stage, "joint");
  EXPECT_NE(cj.encoder_2d.hash(), init.encoder_2d.hash());
  EXPECT_NE(cj.encoder_3d.hash(), init.encoder_3d.hash());
}

TEST_F(Cli, StageTwoWithSkipStageOneNeedsNoFrom) {
  std::string text = kTinyConfig;
  text.replace(text.find(R"("trainer": {)"), std::string(R"("trainer": {)").size(),
               R"("trainer": {"skip_stage1": true, )");
  write_config("skip.json", text);
  const Result r = run_cfg("train", "--stage 2", "skip.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint c = load_checkpoint(checkpoint_of(r));
  EXPECT_EQ(c.encoder_3d.hash(), init_checkpoint(load_config(cfg("skip.json")).run).encoder_3d.hash());
}

TEST_F(Cli, ProbeAndDiagnose) {
  const Result s1 = run_cfg("train", "--stage 1");
  ASSERT_EQ(s1.code, 0) << s1.err;
  const std::string enc = checkpoint_of(s1).string();
  for (const char* task : {"seg", "depth"}) {
    const Result p = run_cfg("probe", std::string("--task ") + task + " --encoder '" + enc + "'");
    ASSERT_EQ(p.code, 0) << p.err;
    const json m = json::parse(read_text(artifacts(p)["artifacts"]["probe/metrics_json"].get<std::string>()));
    const json& g = m["metrics"][std::string(task) + "/linear/delivered"];
    for (const char* c : {"day_clear", "day_rain", "night", "full"}) EXPECT_TRUE(g.contains(c)) << task << " " << c;
    EXPECT_TRUE(m["metrics"].contains(std::string(task) + "/linear/gaussian@1"));
  }
  const Result ft = run_cfg("probe", "--task seg --finetune --encoder '" + enc + "'");
  ASSERT_EQ(ft.code, 0) << ft.err;
  EXPECT_NE(ft.out.find("seg/finetune/delivered"), std::string::npos);

  const Result d = run_cfg("diagnose", "--encoder '" + enc + "'");
  ASSERT_EQ(d.code, 0) << d.err;
  const json rep = json::parse(read_text(artifacts(d)["artifacts"]["diagnostics/report"].get<std::string>()));
  EXPECT_TRUE(rep.contains("after"));
  EXPECT_FALSE(rep.contains("before"));
  EXPECT_TRUE(rep["after"]["shift"]["missing"].empty());
  for (const auto& [name, path] : artifacts(d)["artifacts"].items()) EXPECT_TRUE(fs::exists(path.get<std::string>())) << name;
}

TEST_F(Cli, DiagnoseFlagsMissingCondition) {
  std::string text = kTinyConfig;
  text.replace(text.find(R"("seed": 5,)"), std::string(R"("seed": 5,)").size(), R"("seed": 5, "night_fraction": 0.0,)");
  write_config("nonight.json", text);
  const Result s1 = run_cfg("train", "--stage 1", "nonight.json");
  ASSERT_EQ(s1.code, 0) << s1.err;
  const Result d = run_cfg("diagnose", "--encoder '" + checkpoint_of(s1).string() + "'", "nonight.json");
  ASSERT_EQ(d.code, 0) << d.err;
  const json rep = json::parse(read_text(artifacts(d)["artifacts"]["diagnostics/report"].get<std::string>()));
  EXPECT_EQ(rep["after"]["shift"]["missing"], json::array({"night"}));
  EXPECT_FALSE(rep["after"]["shift"]["centroid_distance"].contains("clear_night"));
}

TEST_F(Cli, RunIsDeterministicAcrossRoots) {
  const Result a = run_cfg("run", "", "tiny.json", "a");
  ASSERT_EQ(a.code, 0) << a.err;
  const Result b = run_cfg("run", "", "tiny.json", "b");
  ASSERT_EQ(b.code, 0) << b.err;
  const json ja = artifacts(a), jb = artifacts(b);
  EXPECT_EQ(read_text(ja["artifacts"]["metrics_json"].get<std::string>()),
            read_text(jb["artifacts"]["metrics_json"].get<std::string>()));
  for (const auto& [name, path] : ja["artifacts"].items()) EXPECT_TRUE(fs::exists(path.get<std::string>())) << name;
  const json manifest = json::parse(read_text(ja["manifest"].get<std::string>()));
  EXPECT_EQ(manifest["config_hash"], load_config(cfg()).hash);
  EXPECT_EQ(manifest["config_hash"], json::parse(read_text(jb["manifest"].get<std::string>()))["config_hash"]);
  const json report = json::parse(read_text(ja["artifacts"]["diagnostics/report"].get<std::string>()));
  EXPECT_TRUE(report.contains("before"));
  EXPECT_TRUE(report.contains("relative_change"));

  // Second run in the same root reuses every cached step and gets a new run id.
  const Result c = run_cfg("run", "", "tiny.json", "a");
  ASSERT_EQ(c.code, 0) << c.err;
  const json jc = artifacts(c);
  EXPECT_NE(jc["run_id"], ja["run_id"]);
  EXPECT_EQ(jc["artifacts"]["checkpoint/stage2"], ja["artifacts"]["checkpoint/stage2"]);
  const auto metrics_of = [](const json& j) {
    return json::parse(read_text(j["artifacts"]["metrics_json"].get<std::string>()))["metrics"];
  };
  EXPECT_EQ(metrics_of(jc), metrics_of(ja));
}

TEST_F(Cli, AblationTables) {
  Result r = run_cfg("ablate", "--suite no_stage1");
  ASSERT_EQ(r.code, 0) << r.err;
  json t = json::parse(read_text(artifacts(r)["artifacts"]["ablation/table_json"].get<std::string>()));
  EXPECT_TRUE(t["complete"].get<bool>());
  EXPECT_EQ(t["variants"], json::array({"with_stage1", "without_stage1"}));
  std::map<std::string, int> per_metric;
  for (const auto& row : t["rows"]) ++per_metric[row["metric"].get<std::string>()];
  EXPECT_FALSE(per_metric.empty());
  for (const auto& [m, n] : per_metric) EXPECT_EQ(n, 2) << m;
  for (const auto& row : t["rows"]) {
    if (row["variant"] == "with_stage1") EXPECT_EQ(row["delta"], 0.0);
  }

  r = run_cfg("ablate", "--suite corruption");
  ASSERT_EQ(r.code, 0) << r.err;
  t = json::parse(read_text(artifacts(r)["artifacts"]["ablation/table_json"].get<std::string>()));
  std::set<std::string> views;
  for (const auto& row : t["rows"]) {
    const std::string m = row["metric"];
    for (const char* k : {"night@", "rain@", "fog@", "gaussian@", "motion_blur@"}) {
      if (m.find(k) != std::string::npos) views.insert(m.substr(m.find(k)));
    }
  }
  EXPECT_GE(views.size(), 5u);
  const std::string csv = read_text(artifacts(r)["artifacts"]["ablation/table_csv"].get<std::string>());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "suite,metric,variant,value,delta,sign,direction");
}

TEST_F(Cli, LockHeldByLiveProcessExitsThree) {
  fs::create_directories(root());
  write_text(root() / ".lock", std::to_string(::getpid()) + "\n");
  const Result r = run_cfg("generate");
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_TRUE(fs::exists(root() / ".lock"));
}

TEST_F(Cli, StaleLockIsReclaimed) {
  const pid_t child = fork();
  if (child == 0) _exit(0);
  waitpid(child, nullptr, 0);
  fs::create_directories(root());
  write_text(root() / ".lock", std::to_string(child) + "\n");
  const Result r = run_cfg("generate");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(fs::exists(root() / ".lock"));
}

}  // namespace
}  // namespace cdistill
