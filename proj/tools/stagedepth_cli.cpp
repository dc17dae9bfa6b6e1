#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "stagedepth/analysis.hpp"
#include "stagedepth/errors.hpp"
#include "stagedepth/serialization.hpp"
#include "stagedepth/trainer.hpp"

#ifndef STAGEDEPTH_GIT_REVISION
#define STAGEDEPTH_GIT_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using namespace stagedepth;
using nlohmann::json;

namespace {

struct DataFlags {
  std::string dir;
  std::uint64_t seed = 1;
  int n = 200;
  int clutter = 1;

  void add(CLI::App* app, const std::string& what, std::uint64_t default_seed, int default_n) {
    seed = default_seed;
    n = default_n;
    app->add_option("--data", dir, what + " dataset directory written by gen-data (overrides generation)");
    app->add_option("--data-seed", seed, "seed of the generated " + what + " set")->capture_default_str();
    app->add_option("--data-n", n, "number of generated " + what + " images")->capture_default_str();
    app->add_option("--clutter", clutter, "clutter level 0, 1 or 2 of generated scenes")->capture_default_str();
  }
  std::vector<Scene> load() const {
    if (!dir.empty()) return load_dataset(dir);
    DatasetSpec spec;
    spec.clutter = clutter;
    return generate_dataset(seed, n, spec);
  }
  json describe() const {
    if (!dir.empty()) return {{"dir", dir}};
    return {{"seed", seed}, {"n", n}, {"clutter", clutter}};
  }
};

// Records inputs and outputs of one invocation; written atomically on success.
struct Manifest {
  std::string command;
  json inputs = json::object();
  std::uint64_t seed = 0;
  std::vector<fs::path> artifacts;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& dir) const {
    const std::string resolved = inputs.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : resolved) h = (h ^ c) * 1099511628211ull;
    json paths = json::array();
    for (const auto& a : artifacts) paths.push_back(a.string());
    const json j{{"command", command},
                 {"inputs", inputs},
                 {"config_hash", h},
                 {"seed", seed},
                 {"artifacts", paths},
                 {"wall_clock_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
                 {"git_revision", STAGEDEPTH_GIT_REVISION}};
    write_text_atomic(dir / (command + ".manifest.json"), j.dump(2) + "\n");
  }
};

fs::path output_root() {
  const char* env = std::getenv("STAGEDEPTH_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& flag, const std::string& command) {
  return flag.empty() ? output_root() / command : fs::path(flag);
}

void write_artifact(Manifest& m, const fs::path& path, const std::string& text) {
  write_text_atomic(path, text);
  m.artifacts.push_back(path);
}

json report_json(const APReport& r) {
  json j = json::object();
  for (const auto& [k, v] : r.fields()) j[k] = v;
  return j;
}

HeadKind parse_head(const std::string& s) {
  if (s == "detr") return HeadKind::SetPrediction;
  if (s == "dense") return HeadKind::Dense;
  throw CLI::ValidationError("--head", "expected detr or dense");
}

std::string sweep_artifacts_arch(const fs::path& sweep_csv_path) {
  return (sweep_csv_path.parent_path() / "run_config.json").string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Any-depth detector training, evaluation and analysis"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "intra-op threads; 1 gives bitwise reproducible outputs")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render a synthetic shapes dataset to disk");
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  int gen_n = 2000, gen_clutter = 1, gen_hw = 96;
  gen->add_option("--out", gen_out, "output directory (default $STAGEDEPTH_OUT/gen-data)");
  gen->add_option("--seed", gen_seed, "scene seed")->capture_default_str();
  gen->add_option("--n", gen_n, "number of images")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--clutter", gen_clutter, "0 single object, 1 sparse, 2 occluded")->capture_default_str()->check(CLI::Range(0, 2));
  gen->add_option("--hw", gen_hw, "image side in pixels")->capture_default_str()->check(CLI::PositiveNumber);

  // train
  auto* tr = app.add_subcommand("train", "two-pass self-distillation training");
  std::string tr_arch, tr_hyper, tr_out, tr_head = "dense";
  std::uint64_t tr_seed = 0;
  std::int64_t tr_steps = 2000, tr_eval_every = 0;
  int tr_batch = 16;
  double tr_lr = 1e-3;
  bool tr_naive = false;
  DataFlags tr_data, tr_val;
  tr->add_option("--arch", tr_arch, "run configuration JSON with optional \"arch\" and \"hyper\" keys");
  tr->add_option("--head", tr_head, "detector head used when --arch gives no architecture")
      ->capture_default_str()->check(CLI::IsMember({"detr", "dense"}));
  tr->add_option("--hyper", tr_hyper, "distillation hyperparameter JSON (overrides the run configuration)");
  tr->add_option("--seed", tr_seed, "initialization and batch-order seed")->capture_default_str();
  tr->add_option("--steps", tr_steps, "optimizer steps; 0 writes the initial checkpoint")->capture_default_str()->check(CLI::NonNegativeNumber);
  tr->add_option("--batch", tr_batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--lr", tr_lr, "peak AdamW learning rate (cosine decay)")->capture_default_str();
  tr->add_option("--eval-every", tr_eval_every, "validation interval in steps, 0 evaluates at the end")->capture_default_str();
  tr->add_flag("--naive", tr_naive, "ablation: alpha = 1, no distillation, no switchable components");
  tr->add_option("--out", tr_out, "run directory (default $STAGEDEPTH_OUT/train)");
  tr_data.add(tr, "training", 2024, 2000);
  tr_val.seed = 77;
  tr->add_option("--val-data", tr_val.dir, "validation dataset directory");
  tr->add_option("--val-n", tr_val.n, "number of generated validation images")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate one depth configuration of a checkpoint");
  std::string ev_ckpt, ev_config = "full:all", ev_out;
  int ev_exit = 0, ev_batch = 32;
  DataFlags ev_data;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--config", ev_config, "essential:all, full:all, essential:P2,P3 or a stage-mode bitstring")->capture_default_str();
  ev->add_option("--exit", ev_exit, "decoder exit for set-prediction heads (0: last layer)")->capture_default_str();
  ev->add_option("--batch", ev_batch, "evaluation batch size")->capture_default_str();
  ev->add_option("--out", ev_out, "output directory (default $STAGEDEPTH_OUT/eval)");
  ev_data.add(ev, "evaluation", 77, 200);

  // sweep
  auto* sw = app.add_subcommand("sweep", "evaluate every depth configuration");
  std::string sw_ckpt, sw_out;
  int sw_batch = 50;
  DataFlags sw_data;
  sw->add_option("--checkpoint", sw_ckpt, "checkpoint path")->required();
  sw->add_option("--batch", sw_batch, "evaluation batch size")->capture_default_str();
  sw->add_option("--out", sw_out, "output directory (default $STAGEDEPTH_OUT/sweep)");
  sw_data.add(sw, "evaluation", 77, 200);

  // cka
  auto* ck = app.add_subcommand("cka", "stage-wise CKA between essential and full boundaries");
  std::string ck_ckpt, ck_naive, ck_out;
  int ck_boot = 500, ck_batch = 16, ck_max = 20000;
  DataFlags ck_data;
  ck->add_option("--checkpoint", ck_ckpt, "checkpoint path")->required();
  ck->add_option("--compare-naive", ck_naive, "checkpoint of the naive joint-training ablation to compare against");
  ck->add_option("--bootstrap", ck_boot, "bootstrap resamples")->capture_default_str();
  ck->add_option("--batch", ck_batch, "batch size")->capture_default_str();
  ck->add_option("--max-samples", ck_max, "row cap per stage")->capture_default_str();
  ck->add_option("--out", ck_out, "output directory (default $STAGEDEPTH_OUT/cka)");
  ck_data.add(ck, "evaluation", 77, 200);

  // report
  auto* rp = app.add_subcommand("report", "precision-recall breakdown of super-net versus base-net");
  std::string rp_ckpt, rp_out;
  int rp_batch = 32, rp_exit = 0;
  DataFlags rp_data;
  rp->add_option("--checkpoint", rp_ckpt, "checkpoint path")->required();
  rp->add_option("--exit", rp_exit, "decoder exit of the base-net (0: the architecture's base exit)")->capture_default_str();
  rp->add_option("--batch", rp_batch, "evaluation batch size")->capture_default_str();
  rp->add_option("--out", rp_out, "output directory (default $STAGEDEPTH_OUT/report)");
  rp_data.add(rp, "evaluation", 77, 200);

  // plot-pareto
  auto* pp = app.add_subcommand("plot-pareto", "draw the accuracy versus FLOPs plot of a sweep");
  std::string pp_sweep, pp_out, pp_title = "depth sweep";
  pp->add_option("--sweep", pp_sweep, "sweep.csv written by the sweep command")->required()->check(CLI::ExistingFile);
  pp->add_option("--out", pp_out, "SVG path (default next to the sweep CSV)");
  pp->add_option("--title", pp_title, "plot title")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    torch::set_num_threads(threads);
    Manifest m;
    m.command = app.get_subcommands().front()->get_name();

    if (*gen) {
      const fs::path out = resolve_out(gen_out, "gen-data");
      DatasetSpec spec;
      spec.clutter = gen_clutter;
      spec.hw = gen_hw;
      save_dataset(generate_dataset(gen_seed, gen_n, spec), out, spec, gen_seed);
      m.seed = gen_seed;
      m.inputs = {{"n", gen_n}, {"clutter", gen_clutter}, {"hw", gen_hw}};
      m.artifacts = {out / "annotations.json", out / "images"};
      m.write(out);
      std::cout << "wrote " << gen_n << " scenes to " << out.string() << "\n";
    } else if (*tr) {
      const fs::path out = resolve_out(tr_out, "train");
      const HeadKind head = parse_head(tr_head);
      RunConfig rc{head == HeadKind::Dense ? toy_dense_arch() : toy_set_prediction_arch(), defaults_for(head)};
      if (!tr_arch.empty()) rc = load_run_config(tr_arch, head);
      if (!tr_hyper.empty()) rc.hyper = hyper_from_json(read_json_file(tr_hyper));
      if (tr_naive) {
        rc.arch = non_switchable_twin(rc.arch);
        rc.hyper = naive_joint_hyper(rc.arch.head);
      }
      auto state = make_train_state(rc.arch, rc.hyper, tr_seed, OptimizerSettings{.lr = tr_lr, .total_steps = tr_steps});
      const auto train_set = tr_data.load();
      const auto val_set = tr_steps > 0 ? tr_val.load() : std::vector<Scene>{};
      const auto records = train(state, train_set, val_set,
                                 Schedule{.steps = tr_steps, .batch_size = tr_batch, .eval_every = tr_eval_every, .eval_batch = 50},
                                 TrainOutputs{out});
      save_checkpoint(state, out / "last.pt");
      save_run_config(rc, out / "run_config.json");
      m.seed = tr_seed;
      m.inputs = {{"run_config", json{{"arch", to_json(rc.arch)}, {"hyper", to_json(rc.hyper)}}},
                  {"steps", tr_steps}, {"batch", tr_batch}, {"lr", tr_lr}, {"eval_every", tr_eval_every},
                  {"train_data", tr_data.describe()}, {"val_data", tr_val.describe()}};
      for (const char* name : {"last.pt", "last.pt.json", "run_config.json", "metrics.csv", "best.pt", "best.pt.json"}) {
        if (fs::exists(out / name)) m.artifacts.push_back(out / name);
      }
      m.write(out);
      if (!records.empty()) {
        const auto& r = records.back();
        std::cout << "step " << r.step << " super AP " << r.super_net.ap << " AP50 " << r.super_net.ap50
                  << " | base AP " << r.base_net.ap << " AP50 " << r.base_net.ap50 << "\n";
      }
      std::cout << "checkpoint " << (out / "last.pt").string() << "\n";
    } else if (*ev) {
      const fs::path out = resolve_out(ev_out, "eval");
      auto state = load_checkpoint(ev_ckpt);
      const int exit_layer = ev_exit == 0 ? state.arch.decoder_layers : ev_exit;
      const auto config = parse_config(state.arch, ev_config, exit_layer);
      const auto report = evaluate_model(state.model, ev_data.load(), config, ev_batch);
      const json j{{"config", config_bitstring(state.arch, config)},
                   {"decoder_exit", config.decoder_exit},
                   {"flops", flops_estimate(state.arch, config, {96, 96})},
                   {"report", report_json(report)}};
      write_artifact(m, out / "eval.json", j.dump(2) + "\n");
      m.seed = state.seed;
      m.inputs = {{"checkpoint", ev_ckpt}, {"config", ev_config}, {"exit", ev_exit}, {"data", ev_data.describe()}};
      m.write(out);
      std::cout << j.dump(2) << "\n";
    } else if (*sw) {
      const fs::path out = resolve_out(sw_out, "sweep");
      auto state = load_checkpoint(sw_ckpt);
      const auto rows = depth_sweep(state.model, sw_data.load(), enumerate_configs(state.arch), sw_batch);
      write_artifact(m, out / "sweep.csv", sweep_csv(state.arch, rows));
      save_run_config({state.arch, state.hyper}, out / "run_config.json");
      m.artifacts.push_back(out / "run_config.json");
      m.seed = state.seed;
      m.inputs = {{"checkpoint", sw_ckpt}, {"data", sw_data.describe()}};
      m.write(out);
      std::cout << rows.size() << " configurations written to " << (out / "sweep.csv").string() << "\n";
    } else if (*ck) {
      const fs::path out = resolve_out(ck_out, "cka");
      const auto scenes = ck_data.load();
      auto state = load_checkpoint(ck_ckpt);
      const auto full = cka_report(state.model, scenes, ck_boot, ck_batch, ck_max, 500, state.seed);
      write_artifact(m, out / "cka.csv", cka_csv(full));
      std::vector<std::string> neck;
      for (const auto& s : state.arch.neck) {
        if (s.adaptable()) neck.push_back(s.id);
      }
      std::cout << "mean neck CKA " << full.mean_over(neck) << "\n";
      if (!ck_naive.empty()) {
        auto naive = load_checkpoint(ck_naive);
        const auto other = cka_report(naive.model, scenes, ck_boot, ck_batch, ck_max, 500, state.seed);
        write_artifact(m, out / "cka_naive.csv", cka_csv(other));
        std::string cmp = "stage,cka,cka_naive,delta\n";
        for (const auto& [id, e] : full.stages) {
          const double o = other.stages.at(id).cka;
          cmp += id + "," + std::to_string(e.cka) + "," + std::to_string(o) + "," + std::to_string(e.cka - o) + "\n";
        }
        write_artifact(m, out / "cka_compare.csv", cmp);
        std::cout << "mean neck CKA of the naive run " << other.mean_over(neck) << "\n";
      }
      m.seed = state.seed;
      m.inputs = {{"checkpoint", ck_ckpt}, {"naive", ck_naive}, {"bootstrap", ck_boot}, {"max_samples", ck_max},
                  {"data", ck_data.describe()}};
      m.write(out);
    } else if (*rp) {
      const fs::path out = resolve_out(rp_out, "report");
      auto state = load_checkpoint(rp_ckpt);
      const auto scenes = rp_data.load();
      const auto base = base_config(state.arch);
      auto base_cfg = base;
      if (rp_exit > 0) base_cfg.decoder_exit = rp_exit;
      validate(state.arch, base_cfg);
      const auto b = pr_breakdown(predict(state.model, scenes, super_config(state.arch), rp_batch),
                                  predict(state.model, scenes, base_cfg, rp_batch), ground_truth_of(scenes),
                                  eval_options_for(scenes.empty() ? 96 : scenes.front().width));
      const auto table = pr_breakdown_table(b);
      write_artifact(m, out / "pr_breakdown.md", table);
      m.seed = state.seed;
      m.inputs = {{"checkpoint", rp_ckpt}, {"exit", rp_exit}, {"data", rp_data.describe()}};
      m.write(out);
      std::cout << table;
    } else if (*pp) {
      const fs::path sweep_path = pp_sweep;
      const fs::path svg = pp_out.empty() ? sweep_path.parent_path() / "pareto.svg" : fs::path(pp_out);
      const auto rc_path = sweep_artifacts_arch(sweep_path);
      if (!fs::exists(rc_path)) throw Error("missing " + rc_path + " next to the sweep CSV");
      const auto rc = load_run_config(rc_path, HeadKind::Dense);
      write_artifact(m, svg, pareto_svg(read_sweep_csv(rc.arch, sweep_path), pp_title));
      m.inputs = {{"sweep", pp_sweep}, {"title", pp_title}};
      m.write(svg.parent_path().empty() ? fs::path(".") : svg.parent_path());
      std::cout << "wrote " << svg.string() << "\n";
    }
    return 0;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
