#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "common.hpp"
#include "snaptraj/error.hpp"

namespace {

using snaptraj::cli::EvalOptions;
using snaptraj::cli::GenDataOptions;
using snaptraj::cli::PlotOptions;
using snaptraj::cli::SolveOptions;
using snaptraj::cli::TrainOptions;

// Optional JSON config: values become defaults, explicit flags override.
nlohmann::json load_config(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      std::ifstream in(argv[i + 1]);
      if (!in) {
        std::cerr << "cannot open config file: " << argv[i + 1] << "\n";
        std::exit(1);
      }
      auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) {
        std::cerr << "config file is not valid JSON: " << argv[i + 1] << "\n";
        std::exit(1);
      }
      return j;
    }
  }
  return nlohmann::json::object();
}

template <typename T>
void from_config(const nlohmann::json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minimum-snap trajectories with learned time allocations"};
  app.require_subcommand(1);
  app.fallthrough();  // let --config appear after the subcommand too
  std::string config_path;
  app.add_option("--config", config_path,
                 "JSON config file; explicit flags override its values");

  const nlohmann::json cfg = load_config(argc, argv);

  GenDataOptions gen;
  from_config(cfg, "curves", gen.curves);
  from_config(cfg, "n-min", gen.n_min);
  from_config(cfg, "n-max", gen.n_max);
  from_config(cfg, "n-step", gen.n_step);
  from_config(cfg, "seed", gen.seed);
  from_config(cfg, "v-max", gen.v_max);
  from_config(cfg, "a-max", gen.a_max);
  from_config(cfg, "bgd-max-iters", gen.bgd_max_iters);
  from_config(cfg, "threads", gen.threads);
  auto* gd = app.add_subcommand("gen-data",
                                "label curves with refined time fractions");
  gd->add_flag("--synthetic", gen.synthetic, "use the seeded curve generator");
  gd->add_option("--source", gen.source, "curve JSONL to label instead");
  gd->add_option("--curves", gen.curves, "synthetic curve count");
  gd->add_option("--n-min", gen.n_min, "smallest waypoint count");
  gd->add_option("--n-max", gen.n_max, "largest waypoint count");
  gd->add_option("--n-step", gen.n_step, "waypoint count stride");
  gd->add_option("--seed", gen.seed, "generator seed");
  gd->add_option("--v-max", gen.v_max, "speed limit for the heuristic");
  gd->add_option("--a-max", gen.a_max, "acceleration limit for the heuristic");
  gd->add_option("--bgd-max-iters", gen.bgd_max_iters, "descent iteration cap");
  gd->add_option("--threads", gen.threads, "labeling worker threads");
  gd->add_option("--out", gen.out, "output dataset JSONL")->required();
  gd->add_option("--save-curves", gen.save_curves,
                 "also store the curve set (for later out-of-distribution runs)");

  TrainOptions tr;
  from_config(cfg, "embed-dim", tr.embed_dim);
  from_config(cfg, "heads", tr.heads);
  from_config(cfg, "enc-layers", tr.enc_layers);
  from_config(cfg, "dec-layers", tr.dec_layers);
  from_config(cfg, "ffn-dim", tr.ffn_dim);
  from_config(cfg, "max-seq-len", tr.max_seq_len);
  from_config(cfg, "activation", tr.activation);
  from_config(cfg, "epochs", tr.epochs);
  from_config(cfg, "batch", tr.batch);
  from_config(cfg, "lr", tr.lr);
  from_config(cfg, "schedule", tr.schedule);
  from_config(cfg, "optimizer", tr.optimizer);
  from_config(cfg, "loss", tr.loss);
  from_config(cfg, "seed", tr.seed);
  from_config(cfg, "precision", tr.precision);
  auto* tn = app.add_subcommand("train", "fit an allocation model");
  tn->add_option("--data", tr.data, "training dataset JSONL")->required();
  tn->add_option("--out", tr.out, "checkpoint path (.json)")->required();
  tn->add_option("--arch", tr.arch, "transformer | mlp");
  tn->add_option("--mlp-n", tr.mlp_n, "waypoint count for --arch mlp");
  tn->add_option("--mlp-hidden", tr.mlp_hidden, "hidden sizes for --arch mlp");
  tn->add_option("--embed-dim", tr.embed_dim, "embedding dimension");
  tn->add_option("--heads", tr.heads, "attention heads");
  tn->add_option("--enc-layers", tr.enc_layers, "encoder layers");
  tn->add_option("--dec-layers", tr.dec_layers, "decoder layers");
  tn->add_option("--ffn-dim", tr.ffn_dim, "feedforward hidden dimension");
  tn->add_option("--max-seq-len", tr.max_seq_len, "position table length");
  tn->add_option("--activation", tr.activation, "relu | gelu");
  tn->add_option("--epochs", tr.epochs, "training epochs");
  tn->add_option("--batch", tr.batch, "batch size");
  tn->add_option("--lr", tr.lr, "learning rate");
  tn->add_option("--schedule", tr.schedule, "constant | cosine");
  tn->add_option("--optimizer", tr.optimizer, "adam | sgd");
  tn->add_option("--loss", tr.loss, "per-step | cumulative");
  tn->add_option("--seed", tr.seed, "training seed");
  tn->add_option("--precision", tr.precision, "f32 | f64");
  tn->add_option("--val-parts", tr.val_parts,
                 "train:validation curve ratio (parts:1)");
  tn->add_flag("--include-unconverged", tr.include_unconverged,
               "keep samples whose labels did not converge");
  tn->add_flag("--resume", tr.resume, "continue from the checkpoint at --out");
  tn->add_option("--history", tr.history, "loss history CSV path");

  SolveOptions sv;
  from_config(cfg, "rate", sv.rate);
  from_config(cfg, "v-max", sv.v_max);
  from_config(cfg, "a-max", sv.a_max);
  auto* sl = app.add_subcommand("solve", "plan one trajectory");
  sl->add_option("--waypoints", sv.waypoints, "waypoint JSON file");
  sl->add_option("--inline", sv.inline_points, "inline \"x,y;x,y;...\" waypoints");
  sl->add_option("--method", sv.method, "tvp | bgd | model");
  sl->add_option("--checkpoint", sv.checkpoint, "model checkpoint for --method model");
  sl->add_option("--total-time", sv.total_time,
                 "override the heuristic total time (seconds)");
  sl->add_option("--rate", sv.rate, "CSV sampling rate (Hz)");
  sl->add_option("--v-max", sv.v_max, "speed limit for the heuristic");
  sl->add_option("--a-max", sv.a_max, "acceleration limit for the heuristic");
  sl->add_option("--bgd-max-iters", sv.bgd_max_iters, "descent iteration cap");
  sl->add_option("--out", sv.out, "trajectory CSV path")->required();
  sl->add_option("--plot", sv.plot, "also draw an SVG here");
  sl->add_option("--log", sv.log_csv, "descent iteration log CSV");

  EvalOptions ev;
  from_config(cfg, "bins", ev.bins);
  from_config(cfg, "v-max", ev.v_max);
  from_config(cfg, "a-max", ev.a_max);
  auto* el = app.add_subcommand("eval", "compare methods on a labeled test set");
  el->add_option("--data", ev.data, "test dataset JSONL")->required();
  el->add_option("--checkpoint", ev.checkpoint, "sequence model checkpoint")
      ->required();
  el->add_option("--mlp-bank", ev.mlp_bank,
                 "directory of fixed-size checkpoints");
  el->add_option("--out-dir", ev.out_dir, "report directory");
  el->add_option("--bins", ev.bins, "histogram bins");
  el->add_option("--attention-samples", ev.attention_samples,
                 "samples to capture attention from");
  el->add_option("--ood-n", ev.ood_n,
                 "also evaluate at this out-of-distribution waypoint count");
  el->add_option("--ood-curves", ev.ood_curves, "curve JSONL for --ood-n");
  el->add_option("--v-max", ev.v_max, "speed limit");
  el->add_option("--a-max", ev.a_max, "acceleration limit");
  el->add_option("--bgd-max-iters", ev.bgd_max_iters, "descent iteration cap");

  PlotOptions pl;
  auto* pt = app.add_subcommand("plot", "draw waypoints and a trajectory");
  pt->add_option("--waypoints", pl.waypoints, "waypoint JSON file")->required();
  pt->add_option("--traj", pl.traj, "trajectory CSV to overlay");
  pt->add_option("--out", pl.out, "SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (gd->parsed()) return snaptraj::cli::cmd_gen_data(gen);
    if (tn->parsed()) return snaptraj::cli::cmd_train(tr);
    if (sl->parsed()) return snaptraj::cli::cmd_solve(sv);
    if (el->parsed()) return snaptraj::cli::cmd_eval(ev);
    if (pt->parsed()) return snaptraj::cli::cmd_plot(pl);
  } catch (const snaptraj::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
