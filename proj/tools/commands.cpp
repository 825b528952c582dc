#include "common.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "snaptraj/dataprep.hpp"
#include "snaptraj/evalkit.hpp"
#include "snaptraj/model.hpp"
#include "snaptraj/svg.hpp"
#include "snaptraj/timealloc.hpp"

namespace snaptraj::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string digest_or_empty(const std::string& path) {
  return path.empty() ? "" : evalkit::file_digest_hex(path);
}

void write_manifest(const std::string& beside,
                    std::map<std::string, std::string> entries) {
  const fs::path p = fs::path(beside).string() + ".manifest.json";
  evalkit::write_run_manifest(p.string(), entries);
}

timealloc::BgdConfig bgd_config(int max_iters, double rel_tol = 1e-6) {
  timealloc::BgdConfig cfg;
  cfg.max_iters = max_iters;
  cfg.rel_tol = rel_tol;
  return cfg;
}

std::vector<int> waypoint_range(int n_min, int n_max, int n_step) {
  if (n_min < 2 || n_max < n_min || n_step < 1)
    raise(ErrorCode::BadInput, "invalid waypoint range");
  std::vector<int> out;
  for (int n = n_min; n <= n_max; n += n_step) out.push_back(n);
  return out;
}

model::TrainConfig train_config(const TrainOptions& o) {
  model::TrainConfig cfg;
  cfg.learning_rate = o.lr;
  cfg.schedule = o.schedule;
  cfg.optimizer = o.optimizer;
  cfg.batch_size = o.batch;
  cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.cumulative_loss = (o.loss == "cumulative");
  cfg.include_unconverged = o.include_unconverged;
  return cfg;
}

void write_history_csv(const model::TrainResult& res, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::Io, "cannot write loss history: " + path);
  out << "epoch,train_loss,validation_loss\n";
  out.precision(17);
  for (size_t i = 0; i < res.history.size(); ++i)
    out << i << ',' << res.history[i].train << ','
        << res.history[i].validation << '\n';
}

template <typename Scalar>
int train_transformer(const TrainOptions& o,
                      const std::vector<dataprep::LabeledSample>& samples,
                      const std::string& dataset_digest) {
  model::ModelConfig arch;
  arch.embed_dim = o.embed_dim;
  arch.num_heads = o.heads;
  arch.enc_layers = o.enc_layers;
  arch.dec_layers = o.dec_layers;
  arch.ffn_dim = o.ffn_dim;
  arch.max_seq_len = o.max_seq_len;
  arch.activation = o.activation;

  model::TransformerModel<Scalar> net(arch);
  if (o.resume) {
    const auto info = model::checkpoint_info(o.out);
    if (info.config_digest != model::config_digest(arch)) {
      std::cerr << "resume refused: checkpoint architecture "
                << info.config_digest << " does not match requested "
                << model::config_digest(arch) << "\n";
      return 2;
    }
    net = model::load_transformer<Scalar>(o.out);
  } else {
    net.init_parameters(o.seed);
  }

  auto split = dataprep::split_by_curve(samples, o.val_parts);
  std::vector<dataprep::LabeledSample> tr, va;
  for (int i : split.train) tr.push_back(samples[i]);
  for (int i : split.validation) va.push_back(samples[i]);

  model::TrainResult res = model::train(net, tr, va, train_config(o));

  model::CheckpointMeta meta;
  meta.seed = o.seed;
  meta.dataset_digest = dataset_digest;
  meta.epochs_trained = static_cast<int>(res.history.size());
  meta.best_validation = res.best_validation;
  meta.extra["diverged"] = res.diverged ? "true" : "false";
  model::save_transformer(net, o.out, meta);

  const std::string history =
      o.history.empty() ? o.out + ".history.csv" : o.history;
  write_history_csv(res, history);

  std::cout << "trained " << res.history.size() << " epochs, best validation "
            << res.best_validation << " at epoch " << res.best_epoch << "\n";
  if (res.diverged) std::cerr << "warning: run diverged, restored last finite epoch\n";

  write_manifest(o.out, {
    {"command", "train"},
    {"arch", "transformer"},
    {"precision", o.precision},
    {"data", o.data},
    {"dataset_digest", dataset_digest},
    {"config_digest", model::config_digest(arch)},
    {"seed", std::to_string(o.seed)},
    {"epochs", std::to_string(o.epochs)},
    {"batch", std::to_string(o.batch)},
    {"lr", std::to_string(o.lr)},
    {"schedule", o.schedule},
    {"optimizer", o.optimizer},
    {"loss", o.loss},
    {"best_validation", std::to_string(res.best_validation)},
    {"checkpoint_digest", digest_or_empty(o.out)},
    {"history", history},
  });
  return 0;
}

template <typename Scalar>
int train_fixed_size(const TrainOptions& o,
                     const std::vector<dataprep::LabeledSample>& samples,
                     const std::string& dataset_digest) {
  if (o.mlp_n < 3)
    raise(ErrorCode::BadInput, "--mlp-n (waypoint count) must be >= 3");
  model::MlpConfig arch;
  arch.waypoint_count = o.mlp_n;
  arch.hidden = o.mlp_hidden;
  arch.activation = o.activation;

  model::MlpModel<Scalar> net(arch);
  net.init_parameters(o.seed);

  auto split = dataprep::split_by_curve(samples, o.val_parts);
  std::vector<dataprep::LabeledSample> tr, va;
  for (int i : split.train) tr.push_back(samples[i]);
  for (int i : split.validation) va.push_back(samples[i]);

  model::TrainResult res = model::train_mlp(net, tr, va, train_config(o));

  model::CheckpointMeta meta;
  meta.seed = o.seed;
  meta.dataset_digest = dataset_digest;
  meta.epochs_trained = static_cast<int>(res.history.size());
  meta.best_validation = res.best_validation;
  model::save_mlp(net, o.out, meta);
  write_history_csv(res, o.history.empty() ? o.out + ".history.csv"
                                           : o.history);

  std::cout << "trained fixed-size net for " << o.mlp_n << " waypoints, best validation "
            << res.best_validation << "\n";
  write_manifest(o.out, {
    {"command", "train"},
    {"arch", "mlp"},
    {"mlp_n", std::to_string(o.mlp_n)},
    {"precision", o.precision},
    {"data", o.data},
    {"dataset_digest", dataset_digest},
    {"seed", std::to_string(o.seed)},
    {"checkpoint_digest", digest_or_empty(o.out)},
  });
  return 0;
}

}  // namespace

WaypointPath load_waypoints(const std::string& file,
                            const std::string& inline_points) {
  std::vector<Vec2> pts;
  if (!inline_points.empty()) {
    std::istringstream in(inline_points);
    std::string pair;
    while (std::getline(in, pair, ';')) {
      const auto comma = pair.find(',');
      if (comma == std::string::npos)
        raise(ErrorCode::BadInput, "inline waypoints must be \"x,y;x,y;...\"");
      pts.push_back(Vec2(std::stod(pair.substr(0, comma)),
                         std::stod(pair.substr(comma + 1))));
    }
  } else {
    std::ifstream in(file);
    if (!in) raise(ErrorCode::Io, "cannot open waypoint file: " + file);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.contains("points"))
      raise(ErrorCode::Io, "waypoint file needs a \"points\" array: " + file);
    for (const auto& p : j["points"])
      pts.push_back(Vec2(p[0].get<double>(), p[1].get<double>()));
  }
  return WaypointPath(std::move(pts));
}

void plot_path_svg(const WaypointPath& path,
                   const std::vector<Vec2>& trajectory_samples,
                   const std::string& out_path) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  auto grow = [&](const Vec2& p) {
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  };
  for (const auto& p : path.points) grow(p);
  for (const auto& p : trajectory_samples) grow(p);
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-9});
  const double W = 560, pad = 30;
  const double scale = (W - 2 * pad) / span;
  auto to_px = [&](const Vec2& p) {
    // SVG y grows downward.
    return std::make_pair(pad + (p.x() - xmin) * scale,
                          W - pad - (p.y() - ymin) * scale);
  };

  svg::Writer w(W, W);
  if (!trajectory_samples.empty()) {
    std::vector<std::pair<double, double>> line;
    line.reserve(trajectory_samples.size());
    for (const auto& p : trajectory_samples) line.push_back(to_px(p));
    w.polyline(line, "#1f77b4", 1.6);
  }
  for (const auto& p : path.points) {
    auto [x, y] = to_px(p);
    w.circle(x, y, 3.4, "#d62728");
  }
  w.save(out_path);
}

int cmd_gen_data(const GenDataOptions& opts) {
  if (opts.out.empty()) raise(ErrorCode::BadInput, "--out is required");
  dataprep::CurveSet curves;
  if (!opts.source.empty()) {
    curves = dataprep::load_curves_jsonl(opts.source);
  } else {
    dataprep::SynthConfig synth;
    synth.seed = opts.seed;
    synth.count = opts.curves;
    synth.check_waypoints = opts.n_max;
    curves = dataprep::synth_curves(synth);
  }
  if (!opts.save_curves.empty())
    dataprep::save_curves_jsonl(curves, opts.save_curves);

  timealloc::TvpLimits limits{opts.v_max, opts.a_max};
  dataprep::DatasetBuildStats stats;
  auto samples = dataprep::build_dataset(
      curves, waypoint_range(opts.n_min, opts.n_max, opts.n_step), limits,
      bgd_config(opts.bgd_max_iters, opts.bgd_rel_tol), opts.threads, &stats);
  dataprep::save_dataset_jsonl(samples, opts.out);

  std::cout << "wrote " << stats.produced << " samples ("
            << stats.rejected << " rejected, " << stats.unconverged
            << " unconverged) to " << opts.out << "\n";

  write_manifest(opts.out, {
    {"command", "gen-data"},
    {"source", opts.source.empty() ? "synthetic" : opts.source},
    {"curves", std::to_string(curves.size())},
    {"n_min", std::to_string(opts.n_min)},
    {"n_max", std::to_string(opts.n_max)},
    {"n_step", std::to_string(opts.n_step)},
    {"seed", std::to_string(opts.seed)},
    {"v_max", std::to_string(opts.v_max)},
    {"a_max", std::to_string(opts.a_max)},
    {"bgd_max_iters", std::to_string(opts.bgd_max_iters)},
    {"threads", std::to_string(opts.threads)},
    {"produced", std::to_string(stats.produced)},
    {"rejected", std::to_string(stats.rejected)},
    {"unconverged", std::to_string(stats.unconverged)},
    {"dataset_digest", digest_or_empty(opts.out)},
    {"curves_digest", digest_or_empty(opts.save_curves)},
  });
  return 0;
}

int cmd_train(const TrainOptions& opts) {
  if (opts.data.empty() || opts.out.empty())
    raise(ErrorCode::BadInput, "--data and --out are required");
  auto samples = dataprep::load_dataset_jsonl(opts.data);
  const std::string digest = evalkit::file_digest_hex(opts.data);

  const bool f64 = (opts.precision == "f64");
  if (opts.arch == "mlp")
    return f64 ? train_fixed_size<double>(opts, samples, digest)
               : train_fixed_size<float>(opts, samples, digest);
  if (opts.arch != "transformer")
    raise(ErrorCode::BadInput, "unknown --arch: " + opts.arch);
  return f64 ? train_transformer<double>(opts, samples, digest)
             : train_transformer<float>(opts, samples, digest);
}

int cmd_solve(const SolveOptions& opts) {
  if (opts.out.empty()) raise(ErrorCode::BadInput, "--out is required");
  WaypointPath path = load_waypoints(opts.waypoints, opts.inline_points);
  timealloc::TvpLimits limits{opts.v_max, opts.a_max};
  TimeAllocation tvp = timealloc::tvp_allocate(path, limits);
  const double total = (opts.total_time > 0.0) ? opts.total_time : tvp.total_time;

  TimeAllocation alloc;
  if (opts.method == "tvp") {
    alloc = TimeAllocation::from_fractions(tvp.fractions(), total);
  } else if (opts.method == "bgd") {
    TimeAllocation init = TimeAllocation::from_fractions(tvp.fractions(), total);
    auto refined =
        timealloc::refine_bgd(path, init, bgd_config(opts.bgd_max_iters));
    alloc = refined.allocation;
    if (!opts.log_csv.empty()) {
      std::ofstream log(opts.log_csv);
      timealloc::export_iteration_log_csv(refined.log, log);
    }
  } else if (opts.method == "model") {
    if (opts.checkpoint.empty())
      raise(ErrorCode::BadInput, "--checkpoint is required with --method model");
    auto predictor = model::load_predictor(opts.checkpoint);
    auto fractions = predictor->predict(dataprep::to_range_angle(path));
    alloc = TimeAllocation::from_fractions(fractions, total);
  } else {
    raise(ErrorCode::BadInput, "unknown --method: " + opts.method);
  }

  auto sol = trajopt::solve_min_snap(path, alloc);
  std::ofstream out(opts.out);
  if (!out) raise(ErrorCode::Io, "cannot write trajectory: " + opts.out);
  trajopt::export_trajectory_csv(sol.trajectory, opts.rate, out);

  if (!opts.plot.empty()) {
    std::vector<Vec2> samples;
    const int count = 400;
    for (int i = 0; i <= count; ++i)
      samples.push_back(
          sol.trajectory.position(sol.trajectory.total_time() * i / count));
    plot_path_svg(path, samples, opts.plot);
  }

  std::cout << "method " << opts.method << ": snap cost " << sol.cost.value
            << " over " << alloc.total_time << " s -> " << opts.out << "\n";

  write_manifest(opts.out, {
    {"command", "solve"},
    {"method", opts.method},
    {"waypoints", opts.waypoints.empty() ? "inline" : opts.waypoints},
    {"checkpoint", opts.checkpoint},
    {"total_time", std::to_string(alloc.total_time)},
    {"rate", std::to_string(opts.rate)},
    {"snap_cost", std::to_string(sol.cost.value)},
    {"trajectory_digest", digest_or_empty(opts.out)},
    {"plot", opts.plot},
  });
  return 0;
}

int cmd_eval(const EvalOptions& opts) {
  if (opts.data.empty() || opts.checkpoint.empty())
    raise(ErrorCode::BadInput, "--data and --checkpoint are required");
  auto samples = dataprep::load_dataset_jsonl(opts.data);
  auto predictor = model::load_predictor(opts.checkpoint);

  model::MlpBank bank;
  bool have_bank = false;
  if (!opts.mlp_bank.empty()) {
    for (const auto& entry : fs::directory_iterator(opts.mlp_bank)) {
      if (entry.path().extension() != ".json") continue;
      if (entry.path().string().ends_with(".manifest.json")) continue;
      std::ifstream in(entry.path());
      json j = json::parse(in, nullptr, false);
      if (j.is_discarded() || j.value("kind", "") != "mlp") continue;
      bank.add(j["config"]["waypoint_count"].get<int>(),
               std::shared_ptr<model::FractionPredictor>(
                   model::load_predictor(entry.path().string())));
      have_bank = true;
    }
  }

  evalkit::EvalConfig cfg;
  cfg.limits = {opts.v_max, opts.a_max};
  cfg.bgd = bgd_config(opts.bgd_max_iters);
  cfg.capture_attention_samples = opts.attention_samples;

  fs::create_directories(opts.out_dir);
  auto out = evalkit::evaluate_methods(samples, predictor.get(),
                                       have_bank ? &bank : nullptr, cfg);

  const fs::path dir(opts.out_dir);
  {
    std::ofstream csv(dir / "cost_report.csv");
    evalkit::export_cost_report_csv(out.report, csv);
  }
  evalkit::histogram_export(out.report, opts.bins,
                            (dir / "error_histogram.csv").string(),
                            (dir / "error_histogram.svg").string());
  if (!out.attention.empty()) {
    auto summary = evalkit::attention_summary(out.attention);
    evalkit::export_attention_summary(summary, (dir / "attention").string());
    model::dump_attention_csv(out.attention.front(),
                              (dir / "attention" / "sample0").string());
  }

  const auto ckpt_info = model::checkpoint_info(opts.checkpoint);
  std::map<std::string, std::string> manifest = {
      {"command", "eval"},
      {"data", opts.data},
      {"dataset_digest", evalkit::file_digest_hex(opts.data)},
      {"checkpoint", opts.checkpoint},
      {"checkpoint_digest", evalkit::file_digest_hex(opts.checkpoint)},
      {"checkpoint_seed", std::to_string(ckpt_info.meta.seed)},
      {"checkpoint_dataset_digest", ckpt_info.meta.dataset_digest},
      {"samples", std::to_string(out.report.samples.size())},
      {"mean_e_transformer", std::to_string(out.report.transformer.mean_error)},
      {"std_e_transformer", std::to_string(out.report.transformer.std_error)},
      {"fraction_e_transformer_negative",
       std::to_string(out.report.transformer.fraction_negative)},
      {"mean_e_tvp", std::to_string(out.report.tvp.mean_error)},
      {"mean_e_mlp",
       have_bank ? std::to_string(out.report.mlp.mean_error) : "absent"},
  };
  for (const auto& [k, v] : out.report.reference)
    manifest["reference_" + k] = std::to_string(v);

  std::cout << "mean error vs descent baseline: model "
            << out.report.transformer.mean_error << "%, heuristic "
            << out.report.tvp.mean_error << "%";
  if (have_bank) std::cout << ", fixed-size " << out.report.mlp.mean_error << "%";
  std::cout << " over " << out.report.samples.size() << " samples\n";

  if (opts.ood_n > 0) {
    if (opts.ood_curves.empty())
      raise(ErrorCode::BadInput, "--ood-curves is required with --ood-n");
    auto curves = dataprep::load_curves_jsonl(opts.ood_curves);
    auto ood = evalkit::ood_eval(curves, opts.ood_n, predictor.get(),
                                 have_bank ? &bank : nullptr, cfg);
    std::ofstream csv(dir / "ood_cost_report.csv");
    evalkit::export_cost_report_csv(ood.report, csv);
    manifest["ood_n"] = std::to_string(opts.ood_n);
    manifest["ood_mean_e_transformer"] =
        std::to_string(ood.report.transformer.mean_error);
    std::cout << "out-of-distribution at " << opts.ood_n
              << " waypoints: mean error "
              << ood.report.transformer.mean_error << "%\n";
  }

  evalkit::write_run_manifest((dir / "eval.manifest.json").string(), manifest);
  return 0;
}

int cmd_plot(const PlotOptions& opts) {
  if (opts.out.empty()) raise(ErrorCode::BadInput, "--out is required");
  WaypointPath path = load_waypoints(opts.waypoints, "");
  std::vector<Vec2> samples;
  if (!opts.traj.empty()) {
    std::ifstream in(opts.traj);
    if (!in) raise(ErrorCode::Io, "cannot open trajectory: " + opts.traj);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string t, x, y;
      std::getline(ls, t, ',');
      std::getline(ls, x, ',');
      std::getline(ls, y, ',');
      samples.push_back(Vec2(std::stod(x), std::stod(y)));
    }
  }
  plot_path_svg(path, samples, opts.out);
  write_manifest(opts.out, {
    {"command", "plot"},
    {"waypoints", opts.waypoints},
    {"traj", opts.traj},
    {"svg_digest", digest_or_empty(opts.out)},
  });
  return 0;
}

}  // namespace snaptraj::cli
