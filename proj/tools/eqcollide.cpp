// SPDX-License-Identifier: Apache-2.0
//
// eqcollide: generate data, train, evaluate and inspect the collision
// simulator from one JSON config.
//
//   eqcollide datagen --config run.json --out data --workers 4
//   eqcollide train --config run.json --data data --stage 1 --out ckpt/s1
//   eqcollide train --config run.json --data data --stage 2 --init ckpt/s1 --out ckpt/s2
//   eqcollide eval --checkpoint ckpt/s2 --data data --split test --out report.csv
//   eqcollide plot --report report.csv --out figs
//
// Exit codes: 0 success, 2 invalid input or config, 3 numerical abort.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "eqcollide/checkpoint.hpp"
#include "eqcollide/config.hpp"
#include "eqcollide/dataset.hpp"
#include "eqcollide/evaluation.hpp"
#include "eqcollide/plot.hpp"

namespace fs = std::filesystem;
using namespace eqcollide;

namespace {

std::vector<std::size_t> parse_steps(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationError("step list '" + text + "': '" + tok + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ValidationError("step list is empty");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
}

/// Model built from a checkpoint's stored config, with parameters loaded.
struct LoadedModel {
  Checkpoint ckpt;
  std::unique_ptr<Model<float>> model;
};

LoadedModel load_model(const fs::path& dir) {
  LoadedModel m;
  const auto manifest = read_checkpoint_manifest(dir);
  m.model = std::make_unique<Model<float>>(manifest.model);
  m.ckpt = load_checkpoint(dir, *m.model);
  return m;
}

std::string checkpoint_id(const LoadedModel& m) { return m.ckpt.parameters_hash; }

struct Common {
  std::string config;
  std::vector<std::string> sets;
  RunConfig load() const { return load_run_config(config, sets); }
};

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run config JSON (defaults apply when omitted)");
  cmd->add_option("--set", c.sets, "override a config key, e.g. --set train_stage2.epochs=10");
}

int run_datagen(const Common& common, const std::string& out, const std::string& split, std::size_t count,
                std::size_t workers) {
  const RunConfig cfg = common.load();
  const std::vector<std::string> splits =
      split == "all" ? std::vector<std::string>{"train", "val", "test"} : std::vector<std::string>{split};
  for (const auto& s : splits) {
    const std::size_t n = count > 0 ? count : cfg.data.count(s);
    if (n == 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    const Split written = generate_split(cfg, s, n, out, workers);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s: %zu trajectories in %.1fs (config %s)\n", s.c_str(), written.entries.size(), secs,
                written.config_hash.c_str());
  }
  return 0;
}

int run_train(const Common& common, const TrainConfig& tcfg, const std::string& data, const std::string& out,
              const std::string& init, bool resume, bool require_init, const std::string& split) {
  const RunConfig cfg = common.load();
  const Split train_split = load_split(data, split);
  require(!train_split.trajectories.empty(), "split '" + split + "' is empty");
  Model<float> model(cfg.model);
  TrainState state;
  if (resume) {
    const auto c = load_checkpoint(out, model);
    require_resumable(c, tcfg);
    state = c.state;
    std::printf("resuming %s at epoch %zu\n", out.c_str(), state.epoch);
  } else if (!init.empty()) {
    const auto c = load_checkpoint(init, model);
    std::printf("initialized from %s (stage %d, epoch %zu)\n", init.c_str(), c.state.stage, c.state.epoch);
    state.stage = 0;  // fresh optimizer state and epoch counter
    state.history = c.state.history;
  } else if (require_init) {
    throw ValidationError("stage 2 needs a stage-1 checkpoint: pass --init <checkpoint>");
  }
  const nlohmann::json extra = {{"run_config_hash", config_hash(cfg)}, {"data_split_config_hash", train_split.config_hash}};
  save_checkpoint(out, model, tcfg, state, extra);
  state = train(model, train_split.trajectories, tcfg, state, [&](const LossRecord& r, const TrainState& s) {
    std::printf("stage %d epoch %zu  L_dis %.4e  L_recons %.4e  total %.4e  (%.1fs)\n", r.stage, r.epoch, r.l_dis,
                r.l_recons, r.total, r.wall_seconds);
    std::fflush(stdout);
    save_checkpoint(out, model, tcfg, s, extra);
  });
  save_checkpoint(out, model, tcfg, state, extra);
  std::printf("checkpoint written to %s\n", out.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data, const std::string& split,
             const std::string& schedule_text, const std::string& out, const std::string& summary,
             std::size_t workers) {
  const auto m = load_model(checkpoint);
  const Split s = load_split(data, split);
  if (s.trajectories.empty()) throw ValidationError("split '" + split + "' has no samples");
  const auto schedule = schedule_text.empty() ? default_schedule() : parse_steps(schedule_text);
  auto report = evaluate(*m.model, s.samples(), schedule, split, workers);
  report.checkpoint_hash = checkpoint_id(m);
  report.config_hash = s.config_hash;
  write_text(out, report.per_sample_csv());
  const fs::path summary_path = summary.empty() ? fs::path(out).replace_extension(".summary.csv") : fs::path(summary);
  write_text(summary_path, report.summary_csv());
  const auto means = report.means();
  for (std::size_t k = 0; k < schedule.size(); ++k) std::printf("%zu-step MSE %.4e\n", schedule[k], means[k]);
  return 0;
}

int run_rollout(const std::string& checkpoint, const std::string& data, const std::string& split,
                const std::string& sample, std::size_t steps, const std::string& out, const std::string& png) {
  const auto m = load_model(checkpoint);
  const Split s = load_split(data, split);
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    if (s.entries[i].id != sample) continue;
    const Trajectory& gt = s.trajectories[i];
    Trajectory pred = rollout(*m.model, gt.frames[0], steps, gt.dt);
    pred.provenance.config_hash = checkpoint_id(m);
    write_trajectory(pred, out);
    if (!png.empty()) plot::frame_grid(png, pred, {0, 5, 10, 15, 20, 25}, &gt);
    std::printf("rollout of %s/%s written to %s\n", split.c_str(), sample.c_str(), out.c_str());
    return 0;
  }
  throw ValidationError("sample '" + sample + "' not found in split '" + split + "'");
}

int run_verify(const std::string& checkpoint, const std::string& data, const std::string& split,
               const std::vector<std::string>& groups, std::size_t random_count, std::size_t steps,
               std::size_t max_samples, const std::string& out) {
  const auto m = load_model(checkpoint);
  const Split s = load_split(data, split);
  if (s.trajectories.empty()) throw ValidationError("split '" + split + "' has no samples");
  std::vector<GroupElement<float>> elements;
  std::vector<std::string> names;
  for (const auto& g : groups) {
    elements.push_back(parse_group_element(g));
    names.push_back(g);
  }
  for (const auto& e : random_group_elements(m.model->config().group, random_count, 77)) {
    elements.push_back(e);
    char buf[96];
    std::snprintf(buf, sizeof buf, "se2:%.9g,%.9g,%.9g", e.angle, e.translation.x, e.translation.y);
    names.push_back(buf);
  }
  if (elements.empty()) throw ValidationError("verify-equivariance: pass --group or --random");
  const std::size_t n = max_samples == 0 ? s.entries.size() : std::min(max_samples, s.entries.size());
  std::string csv = "sample_id,group,max_relative_deviation\n";
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = s.trajectories[i];
    const auto dev = verify_equivariance(*m.model, t.frames[0], elements, steps, t.dt);
    for (std::size_t k = 0; k < dev.size(); ++k) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%.9e\n", dev[k]);
      csv += s.entries[i].id + "," + names[k] + buf;
      worst = std::max(worst, dev[k]);
    }
  }
  write_text(out, csv);
  std::printf("max relative deviation %.3e over %zu samples x %zu group elements\n", worst, n, elements.size());
  return 0;
}

/// Reads split,sample_id,step,mse and returns per-split mean curves.
std::map<std::string, plot::Series> read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read report " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "split,sample_id,step,mse") throw FormatError(path.string() + ": not a per-sample report CSV");
  std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> acc;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string split, id, step, mse;
    std::getline(ss, split, ',');
    std::getline(ss, id, ',');
    std::getline(ss, step, ',');
    std::getline(ss, mse, ',');
    try {
      auto& slot = acc[split][std::stoul(step)];
      slot.first += std::stod(mse);
      slot.second += 1;
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
  }
  std::map<std::string, plot::Series> out;
  for (const auto& [split, steps] : acc)
    for (const auto& [k, v] : steps) {
      out[split].x.push_back(static_cast<double>(k));
      out[split].y.push_back(v.first / static_cast<double>(v.second));
    }
  return out;
}

int run_plot(const std::string& report, const std::string& trajectory, const std::string& truth,
             const std::string& steps, const std::string& out) {
  if (report.empty() == trajectory.empty()) throw ValidationError("plot: pass exactly one of --report or --trajectory");
  if (!report.empty()) {
    if (!fs::exists(report)) throw ValidationError("plot: missing input " + report);
    fs::create_directories(out);
    for (const auto& [split, series] : read_report(report)) {
      const fs::path png = fs::path(out) / ("mse_" + split + ".png");
      plot::mse_curves(png, {series});
      std::printf("%s\n", png.string().c_str());
    }
    return 0;
  }
  if (!fs::exists(fs::path(trajectory) / "meta.json")) throw ValidationError("plot: missing input " + trajectory);
  const Trajectory t = read_trajectory(trajectory);
  Trajectory gt;
  if (!truth.empty()) gt = read_trajectory(truth);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  plot::frame_grid(out, t, steps.empty() ? std::vector<std::size_t>{5, 10, 15, 20, 25, 30} : parse_steps(steps),
                   truth.empty() ? nullptr : &gt);
  std::printf("%s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned simulator for colliding deformable bodies"};
  app.require_subcommand(1);

  Common dg_common;
  std::string dg_out, dg_split = "all";
  std::size_t dg_count = 0, dg_workers = 1;
  auto* dg = app.add_subcommand("datagen", "simulate training/validation/test trajectories");
  add_config_options(dg, dg_common);
  dg->add_option("--out", dg_out, "dataset root")->required();
  dg->add_option("--split", dg_split, "train, val, test or all");
  dg->add_option("--count", dg_count, "trajectories per split (default from data.*_count)");
  dg->add_option("--workers", dg_workers, "parallel simulations");

  Common tr_common;
  std::string tr_data, tr_out, tr_init, tr_split = "train";
  int tr_stage = 1;
  bool tr_resume = false;
  auto* tr = app.add_subcommand("train", "run training stage 1 or 2");
  add_config_options(tr, tr_common);
  tr->add_option("--data", tr_data, "dataset root")->required();
  tr->add_option("--stage", tr_stage, "1 (reconstruction) or 2 (joint rollout)")->required();
  tr->add_option("--out", tr_out, "checkpoint directory")->required();
  tr->add_option("--init", tr_init, "checkpoint to start from (required for stage 2)");
  tr->add_option("--split", tr_split, "training split");
  tr->add_flag("--resume", tr_resume, "continue the run saved in --out");

  Common ft_common;
  std::string ft_data, ft_out, ft_init, ft_split = "train";
  double ft_fraction = -1;
  long long ft_epochs = -1;
  bool ft_resume = false;
  auto* ft = app.add_subcommand("finetune", "continue joint training on a fraction of a dataset");
  add_config_options(ft, ft_common);
  ft->add_option("--data", ft_data, "dataset root")->required();
  ft->add_option("--init", ft_init, "trained checkpoint")->required();
  ft->add_option("--out", ft_out, "checkpoint directory")->required();
  ft->add_option("--split", ft_split, "training split");
  ft->add_option("--finetune-fraction,--fraction", ft_fraction, "share of the split to train on (0, 1]");
  ft->add_option("--epochs", ft_epochs, "epoch budget");
  ft->add_flag("--resume", ft_resume, "continue the run saved in --out");

  std::string ev_ckpt, ev_data, ev_split = "test", ev_schedule, ev_out, ev_summary;
  std::size_t ev_workers = 1;
  auto* ev = app.add_subcommand("eval", "k-step rollout MSE report");
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--schedule", ev_schedule, "comma separated steps (default 1,5,10,15,20,25)");
  ev->add_option("--out", ev_out, "per-sample CSV")->required();
  ev->add_option("--summary", ev_summary, "summary CSV (default <out>.summary.csv)");
  ev->add_option("--workers", ev_workers, "parallel rollouts");

  std::string ro_ckpt, ro_data, ro_split = "test", ro_sample = "00000", ro_out, ro_png;
  std::size_t ro_steps = 25;
  auto* ro = app.add_subcommand("rollout", "export one predicted trajectory");
  ro->add_option("--checkpoint", ro_ckpt)->required();
  ro->add_option("--data", ro_data)->required();
  ro->add_option("--split", ro_split);
  ro->add_option("--sample", ro_sample);
  ro->add_option("--steps", ro_steps);
  ro->add_option("--out", ro_out, "trajectory directory")->required();
  ro->add_option("--png", ro_png, "also write a frame grid");

  std::string ve_ckpt, ve_data, ve_split = "test", ve_out;
  std::vector<std::string> ve_groups;
  std::size_t ve_random = 0, ve_steps = 5, ve_samples = 0;
  auto* ve = app.add_subcommand("verify-equivariance", "compare rollout(g x) with g rollout(x)");
  ve->add_option("--checkpoint", ve_ckpt)->required();
  ve->add_option("--data", ve_data)->required();
  ve->add_option("--split", ve_split);
  ve->add_option("--group", ve_groups, "identity | translation:x,y | rotation:a | se2:a,x,y (repeatable)");
  ve->add_option("--random", ve_random, "also test this many random elements of the model's group");
  ve->add_option("--steps", ve_steps);
  ve->add_option("--samples", ve_samples, "use the first N samples (default all)");
  ve->add_option("--out", ve_out, "deviation CSV")->required();

  std::string pl_report, pl_traj, pl_truth, pl_steps, pl_out;
  auto* pl = app.add_subcommand("plot", "MSE curves from a report or a frame grid from a trajectory");
  pl->add_option("--report", pl_report, "per-sample report CSV");
  pl->add_option("--trajectory", pl_traj, "trajectory directory");
  pl->add_option("--truth", pl_truth, "ground-truth trajectory drawn underneath");
  pl->add_option("--steps", pl_steps, "frames for the grid (default 5,10,15,20,25,30)");
  pl->add_option("--out", pl_out, "output directory (report) or PNG path (trajectory)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (dg->parsed()) return run_datagen(dg_common, dg_out, dg_split, dg_count, dg_workers);
    if (tr->parsed()) {
      if (tr_stage != 1 && tr_stage != 2) throw ValidationError("--stage must be 1 or 2");
      const RunConfig cfg = tr_common.load();
      return run_train(tr_common, cfg.train(tr_stage), tr_data, tr_out, tr_init, tr_resume, tr_stage == 2, tr_split);
    }
    if (ft->parsed()) {
      if (ft_fraction >= 0) ft_common.sets.push_back("finetune.finetune_fraction=" + std::to_string(ft_fraction));
      if (ft_epochs >= 0) ft_common.sets.push_back("finetune.epochs=" + std::to_string(ft_epochs));
      const RunConfig cfg = ft_common.load();
      return run_train(ft_common, cfg.finetune, ft_data, ft_out, ft_resume ? "" : ft_init, ft_resume, !ft_resume,
                       ft_split);
    }
    if (ev->parsed()) return run_eval(ev_ckpt, ev_data, ev_split, ev_schedule, ev_out, ev_summary, ev_workers);
    if (ro->parsed()) return run_rollout(ro_ckpt, ro_data, ro_split, ro_sample, ro_steps, ro_out, ro_png);
    if (ve->parsed())
      return run_verify(ve_ckpt, ve_data, ve_split, ve_groups, ve_random, ve_steps, ve_samples, ve_out);
    if (pl->parsed()) return run_plot(pl_report, pl_traj, pl_truth, pl_steps, pl_out);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
