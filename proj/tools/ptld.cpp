// ptld: grasp-cache | train | collect | distill | eval | probe | compare
//
// Exit codes: 0 success, 2 config error, 3 stage-input mismatch, 4 numeric failure.

#include "ptld/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace ptld;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kMismatch = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string task;
  std::vector<std::uint64_t> seeds;

  pipeline::RunConfig load() const {
    Config base = config.empty() ? Config{} : Config::parse_file(config);
    Config over;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      over.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!out.empty()) over.set("run.out", out);
    if (!task.empty()) over.set("run.task", task);
    if (!seeds.empty()) {
      std::vector<double> s(seeds.begin(), seeds.end());
      over.set("run.seeds", s);
    }
    return pipeline::RunConfig::load(base, over);
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "Experiment config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override a config key (section.key=value)");
  app->add_option("-o,--out", c.out, "Output directory (default $PTLD_OUT_ROOT or ./runs)");
  app->add_option("--task", c.task, "rotation | reorientation");
  app->add_option("--seeds", c.seeds, "Seed list");
}

int run(int argc, char** argv) {
  CLI::App app{"Privileged tactile latent distillation pipeline"};
  app.require_subcommand(1);
  Common common;

  auto* gc = app.add_subcommand("grasp-cache", "Generate the stable grasp set");
  add_common(gc, common);

  auto* tr = app.add_subcommand("train", "Train policies (aac | rma1 | rma2)");
  add_common(tr, common);
  std::string algo = "aac", obs = "proprio+pose", cache, stage1;
  tr->add_option("algo", algo, "aac | rma1 | rma2")->required();
  tr->add_option("--obs", obs, "proprio | proprio+pose | oracle");
  tr->add_option("--cache", cache, "Grasp cache")->required();
  tr->add_option("--stage1", stage1, "rma1 checkpoint or its directory (rma2)");

  auto* co = app.add_subcommand("collect", "Record teacher demonstrations on the deployment plant");
  add_common(co, common);
  std::string teacher;
  int episodes = 20;
  co->add_option("--cache", cache, "Grasp cache")->required();
  co->add_option("--teacher", teacher, "Teacher checkpoint")->required();
  co->add_option("--episodes", episodes, "Episodes to record");

  auto* di = app.add_subcommand("distill", "Fit a tactile encoder with DAgger and swap it in");
  add_common(di, common);
  bool mask = false;
  di->add_option("--cache", cache, "Grasp cache")->required();
  di->add_option("--teacher", teacher, "Teacher checkpoint")->required();
  di->add_flag("--mask-tactile", mask, "Zero the tactile channel (proprio-only baseline)");

  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints and rank them");
  add_common(ev, common);
  std::vector<std::string> checkpoints;
  std::string plant_choice = "auto";
  ev->add_option("--cache", cache, "Grasp cache")->required();
  ev->add_option("checkpoints", checkpoints, "Checkpoints")->required();
  ev->add_option("--plant", plant_choice, "auto | train | deploy");

  auto* pr = app.add_subcommand("probe", "Pose and slip probes on frozen latents");
  add_common(pr, common);
  std::string checkpoint, dataset;
  pr->add_option("--checkpoint", checkpoint, "Distilled checkpoint")->required();
  pr->add_option("--dataset", dataset, "Demonstration dataset")->required();

  auto* cm = app.add_subcommand("compare", "Rank evaluation reports");
  add_common(cm, common);
  std::vector<std::string> reports;
  cm->add_option("reports", reports, "Report JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const pipeline::RunConfig rc = common.load();
  if (gc->parsed()) {
    std::cout << pipeline::cmd_grasp_cache(rc).string() << '\n';
  } else if (tr->parsed()) {
    pipeline::TrainRequest req;
    req.algo = pipeline::parse_algo(algo);
    req.obs = pipeline::parse_obs(obs);
    req.cache = cache;
    req.stage1 = stage1;
    for (const auto& p : pipeline::cmd_train(rc, req)) std::cout << p.string() << '\n';
  } else if (co->parsed()) {
    std::cout << pipeline::cmd_collect(rc, cache, teacher, episodes).string() << '\n';
  } else if (di->parsed()) {
    const auto o = pipeline::cmd_distill(rc, cache, teacher, mask);
    std::cout << o.checkpoint.string() << '\n' << o.dataset.string() << '\n';
  } else if (ev->parsed()) {
    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    const auto reps = pipeline::cmd_eval(rc, cache, paths, plant_choice);
    if (reps.size() > 1) {
      std::vector<eval::MetricReport> same;
      for (const auto& r : reps)
        if (r.plant_hash == reps.front().plant_hash) same.push_back(r);
      if (same.size() == reps.size()) std::cout << eval::format_rank_table(eval::compare_runs(same));
    } else {
      std::cout << reps.front().to_json().dump(2) << '\n';
    }
  } else if (pr->parsed()) {
    const auto o = pipeline::cmd_probe(rc, checkpoint, dataset);
    std::cout << "relative cumulative error " << o.relative.cumulative_error << "\nabsolute error "
              << o.absolute.step_error << "\nslip balanced accuracy " << o.slip.balanced_accuracy << '\n';
  } else if (cm->parsed()) {
    std::vector<fs::path> paths(reports.begin(), reports.end());
    std::cout << eval::format_rank_table(pipeline::cmd_compare(rc, paths));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const rl::NaNLoss& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const pipeline::ConfigMismatch& e) {
    std::cerr << "stage input mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const policy::IncompatibleCheckpoint& e) {
    std::cerr << "stage input mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const rl::TaskMismatch& e) {
    std::cerr << "stage input mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const distill::LatentDimMismatch& e) {
    std::cerr << "stage input mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const io::CorruptContainer& e) {
    std::cerr << "stage input mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const plant::BudgetExceeded& e) {
    std::cerr << "BudgetExceeded: " << e.what() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
