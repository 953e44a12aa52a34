// SPDX-License-Identifier: Apache-2.0
#include "cdistill/cli.hpp"

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cdistill/pipeline.hpp"

namespace cdistill {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string root;
  std::string out;
  std::string stage;
  std::string from;
  std::string task;
  std::string encoder;
  std::string before;
  std::string suite;
  bool finetune = false;
};

std::optional<fs::path> existing_checkpoint(const std::string& path, const std::string& flag) {
  if (path.empty()) return std::nullopt;
  if (!fs::exists(fs::path(path) / "checkpoint.json")) {
    fail(ErrorKind::kPrerequisite, flag + " " + path + " is not a checkpoint directory");
  }
  return fs::path(path);
}

void print_records(const std::vector<MetricRecord>& records, const std::string& group) {
  for (const auto& r : records) {
    if (r.group == group && r.metric != "samples") {
      std::cout << "  " << r.group << " " << r.condition << " " << r.metric << " = " << r.value << "\n";
    }
  }
}

void add_checkpoint(RunManifest* m, const std::string& name, const fs::path& dir) {
  m->add(name, dir);
  m->add(name + "/train_log", dir / "train_log.csv");
}

void add_eval(RunManifest* m, const std::string& name, const EvalOutcome& e) {
  m->add(name + "/metrics_json", e.dir / "metrics.json");
  m->add(name + "/metrics_csv", e.dir / "metrics.csv");
}

void add_diagnostics(RunManifest* m, const DiagnoseOutcome& d) {
  m->add("diagnostics/report", d.dir / "report.json");
  m->add("diagnostics/metrics_json", d.dir / "metrics.json");
  for (const auto& image : d.report.at("images")) {
    const std::string name = image.get<std::string>();
    m->add("diagnostics/" + name, d.dir / name);
  }
}

int execute(const std::string& command, const Options& o) {
  const ExperimentConfig config = load_config(o.config);
  const fs::path root = resolve_output_root(config, o.root);
  RootLock lock(root);
  Workspace ws(config, root);
  Timer total;

  RunManifest manifest;
  manifest.run_id = allocate_run_id(root, config.hash);
  manifest.command = command;
  manifest.config_hash = config.hash;
  manifest.provenance = provenance_string();

  if (command == "generate") {
    if (!o.out.empty()) {
      const DatasetManifest dm = build_dataset(config.dataset, o.out);
      manifest.add("dataset/manifest", fs::path(o.out) / "manifest.json");
      std::cout << "dataset " << o.out << ": " << dm.records.size() << " samples\n";
    } else {
      const Dataset& ds = ws.dataset();
      manifest.add("dataset/manifest", ws.dataset_dir() / "manifest.json");
      std::cout << "dataset " << ws.dataset_dir().string() << ": " << ds.manifest.records.size() << " samples\n";
    }
  } else if (command == "train") {
    RunConfig run = config.run;
    TrainKind kind = TrainKind::kStage1;
    if (o.stage == "joint") {
      kind = TrainKind::kJoint;
      run.joint_one_stage = true;
    } else {
      if (run.joint_one_stage) fail(ErrorKind::kConfig, "trainer.joint_one_stage is set; use --stage joint");
      kind = o.stage == "1" ? TrainKind::kStage1 : TrainKind::kStage2;
    }
    const std::optional<fs::path> from = existing_checkpoint(o.from, "--from");
    if (kind == TrainKind::kStage2 && !from && !run.skip_stage1) {
      fail(ErrorKind::kPrerequisite, "stage 2 needs --from <stage-1 checkpoint> unless trainer.skip_stage1 is set");
    }
    const fs::path dir = ws.train(kind, run, from);
    add_checkpoint(&manifest, "checkpoint", dir);
    const Checkpoint c = load_checkpoint(dir);
    std::cout << "checkpoint " << dir.string() << " stage " << c.stage << " step " << c.step << "\n"
              << "  encoder_2d " << c.encoder_2d.hash() << "\n"
              << "  encoder_3d " << c.encoder_3d.hash() << "\n";
  } else if (command == "probe") {
    const fs::path enc = *existing_checkpoint(o.encoder, "--encoder");
    const ProbeTask task = probe_task_from_string(o.task);
    const EvalOutcome e = ws.evaluate(enc, task, o.finetune);
    add_eval(&manifest, "probe", e);
    print_records(e.records, to_string(task) + (o.finetune ? "/finetune" : "/linear") + "/delivered");
  } else if (command == "ablate") {
    const AblationTable t = ws.ablate(o.suite);
    manifest.add("ablation/table_csv", t.csv);
    manifest.add("ablation/table_json", t.json);
    std::cout << "ablation " << t.suite << ": " << t.variants.size() << " variants, " << t.rows.size() << " rows\n";
  } else if (command == "diagnose") {
    const fs::path after = *existing_checkpoint(o.encoder, "--encoder");
    const DiagnoseOutcome d = ws.diagnose(after, existing_checkpoint(o.before, "--before"));
    add_diagnostics(&manifest, d);
    for (const char* side : {"before", "after", "change"}) print_records(d.records, std::string("diagnostics/") + side);
  } else {
    Timer t;
    ws.dataset();
    manifest.add("dataset/manifest", ws.dataset_dir() / "manifest.json");
    manifest.timings.emplace_back("generate", t.seconds());
    t = Timer();
    const fs::path init = ws.init_checkpoint(config.run);
    const fs::path s1 = ws.train(TrainKind::kStage1, config.run, init);
    manifest.timings.emplace_back("stage1", t.seconds());
    t = Timer();
    const fs::path s2 = ws.train(TrainKind::kStage2, config.run, s1);
    manifest.timings.emplace_back("stage2", t.seconds());
    add_checkpoint(&manifest, "checkpoint/init", init);
    add_checkpoint(&manifest, "checkpoint/stage1", s1);
    add_checkpoint(&manifest, "checkpoint/stage2", s2);
    t = Timer();
    const EvalOutcome seg = ws.evaluate(s2, ProbeTask::kSegmentation, false);
    const EvalOutcome depth = ws.evaluate(s2, ProbeTask::kDepth, false);
    manifest.timings.emplace_back("probe", t.seconds());
    add_eval(&manifest, "probe/seg", seg);
    add_eval(&manifest, "probe/depth", depth);
    t = Timer();
    const DiagnoseOutcome diag = ws.diagnose(s2, init);
    manifest.timings.emplace_back("diagnose", t.seconds());
    add_diagnostics(&manifest, diag);

    std::vector<MetricRecord> records = seg.records;
    records.insert(records.end(), depth.records.begin(), depth.records.end());
    records.insert(records.end(), diag.records.begin(), diag.records.end());
    const fs::path run_dir = root / "runs" / manifest.run_id;
    write_metrics(run_dir, manifest.run_id, config.hash, records);
    manifest.add("metrics_json", run_dir / "metrics.json");
    manifest.add("metrics_csv", run_dir / "metrics.csv");
    print_records(records, "seg/linear/delivered");
    print_records(records, "depth/linear/delivered");
    print_records(records, "diagnostics/change");
  }

  manifest.timings.emplace_back("total", total.seconds());
  const fs::path manifest_path = manifest.write(root);
  std::cout << manifest.artifacts_line(manifest_path) << std::endl;
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Two-stage collaborative distillation between a 2D image encoder and a 3D point encoder"};
  app.require_subcommand(1);
  Options o;

  const auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--root", o.root, "output root (overrides CD_OUTPUT_ROOT and output.root)");
  };

  auto* generate = app.add_subcommand("generate", "generate the synthetic dataset");
  with_config(generate);
  generate->add_option("--out", o.out, "write the dataset here instead of the workspace");

  auto* train = app.add_subcommand("train", "run one training stage");
  with_config(train);
  train->add_option("--stage", o.stage, "1, 2 or joint")->required()->check(CLI::IsMember({"1", "2", "joint"}));
  train->add_option("--from", o.from, "checkpoint directory to start from");

  auto* probe = app.add_subcommand("probe", "train and evaluate a downstream probe");
  with_config(probe);
  probe->add_option("--task", o.task, "seg or depth")->required()->check(CLI::IsMember({"seg", "depth"}));
  probe->add_option("--encoder", o.encoder, "checkpoint directory")->required();
  probe->add_flag("--finetune", o.finetune, "train the encoder together with the head");

  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  with_config(ablate);
  ablate->add_option("--suite", o.suite, "ablation suite")->required()->check(CLI::IsMember(kAblationSuites));

  auto* diagnose = app.add_subcommand("diagnose", "feature-space diagnostics");
  with_config(diagnose);
  diagnose->add_option("--encoder", o.encoder, "checkpoint directory")->required();
  diagnose->add_option("--before", o.before, "earlier checkpoint to compare against");

  auto* run = app.add_subcommand("run", "generate, train both stages, probe and diagnose");
  with_config(run);

  app.add_subcommand("config-defaults", "print the fully-resolved default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code_for(ErrorKind::kConfig);
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "config-defaults") {
      std::cout << config_to_json(parse_config("{}")).dump(2) << std::endl;
      return 0;
    }
    return execute(command, o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return exit_code_for(ErrorKind::kIo);
  }
}

}  // namespace cdistill
