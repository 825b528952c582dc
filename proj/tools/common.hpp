#pragma once

#include <map>
#include <string>
#include <vector>

#include "snaptraj/geometry.hpp"
#include "snaptraj/trajopt.hpp"

namespace snaptraj::cli {

struct GenDataOptions {
  bool synthetic = false;
  std::string source;       // curve JSONL; synthetic generation when empty
  int curves = 100;
  int n_min = 3;
  int n_max = 12;
  int n_step = 1;
  std::uint64_t seed = 0;
  double v_max = 5.0;
  double a_max = 2.5;
  int bgd_max_iters = 100;
  double bgd_rel_tol = 1e-6;
  int threads = 1;
  std::string out;
  std::string save_curves;  // optional curve-set copy for later OOD runs
};

struct TrainOptions {
  std::string data;
  std::string out;
  std::string arch = "transformer";  // transformer | mlp
  int mlp_n = 0;                     // waypoint count for the fixed-size net
  std::vector<int> mlp_hidden = {64, 64};
  int embed_dim = 32;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int ffn_dim = 256;
  int max_seq_len = 64;
  std::string activation = "relu";
  int epochs = 50;
  int batch = 32;
  double lr = 1e-3;
  std::string schedule = "cosine";
  std::string optimizer = "adam";
  std::string loss = "per-step";  // per-step | cumulative
  std::uint64_t seed = 0;
  std::string precision = "f32";
  int val_parts = 5;
  bool include_unconverged = false;
  bool resume = false;
  std::string history;  // loss-history CSV path; defaults beside --out
};

struct SolveOptions {
  std::string waypoints;  // JSON file with a "points" array
  std::string inline_points;
  std::string method = "bgd";  // tvp | bgd | model
  std::string checkpoint;
  double total_time = 0.0;  // 0: keep the heuristic total
  double rate = 100.0;
  double v_max = 5.0;
  double a_max = 2.5;
  int bgd_max_iters = 100;
  std::string out;
  std::string plot;     // optional SVG
  std::string log_csv;  // optional descent iteration log
};

struct EvalOptions {
  std::string data;
  std::string checkpoint;
  std::string mlp_bank;  // directory of fixed-size checkpoints
  std::string out_dir = "reports";
  int bins = 30;
  int attention_samples = 8;
  int ood_n = 0;            // 0 disables the out-of-distribution pass
  std::string ood_curves;   // curve JSONL for the OOD pass
  double v_max = 5.0;
  double a_max = 2.5;
  int bgd_max_iters = 100;
};

struct PlotOptions {
  std::string waypoints;
  std::string traj;  // optional trajectory CSV to overlay
  std::string out;
};

int cmd_gen_data(const GenDataOptions& opts);
int cmd_train(const TrainOptions& opts);
int cmd_solve(const SolveOptions& opts);
int cmd_eval(const EvalOptions& opts);
int cmd_plot(const PlotOptions& opts);

/// Waypoints from a JSON file ({"points": [[x,y],...]} or a curve record)
/// or from an inline "x,y;x,y;..." string.
WaypointPath load_waypoints(const std::string& file,
                            const std::string& inline_points);

void plot_path_svg(const WaypointPath& path,
                   const std::vector<Vec2>& trajectory_samples,
                   const std::string& out_path);

}  // namespace snaptraj::cli
