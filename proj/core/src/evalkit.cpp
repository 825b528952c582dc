#include "snaptraj/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "snaptraj/svg.hpp"

namespace snaptraj::evalkit {
namespace {

struct Baseline {
  double total_time = 0.0;
  double j_bgd = 0.0;
  double j_tvp = 0.0;
};

Baseline compute_baseline(const dataprep::LabeledSample& s,
                          const EvalConfig& cfg) {
  WaypointPath wp = dataprep::from_range_angle(s.input);
  TimeAllocation tvp = timealloc::tvp_allocate(wp, cfg.limits);
  Baseline b;
  b.total_time = tvp.total_time;
  b.j_tvp = trajopt::solve_min_snap(wp, tvp, cfg.boundary).cost.value;
  b.j_bgd = timealloc::refine_bgd(wp, tvp, cfg.bgd, cfg.boundary).cost.value;
  return b;
}

double solve_with_fractions(const dataprep::LabeledSample& s,
                            const std::vector<double>& fractions,
                            double total_time, const EvalConfig& cfg) {
  WaypointPath wp = dataprep::from_range_angle(s.input);
  TimeAllocation alloc = TimeAllocation::from_fractions(fractions, total_time);
  return trajopt::solve_min_snap(wp, alloc, cfg.boundary).cost.value;
}

MethodAggregate aggregate(const std::vector<double>& errors) {
  MethodAggregate agg;
  agg.count = static_cast<int>(errors.size());
  if (errors.empty()) return agg;
  double sum = 0.0, sum2 = 0.0;
  int negative = 0;
  for (double e : errors) {
    sum += e;
    sum2 += e * e;
    if (e < 0.0) ++negative;
  }
  agg.mean_error = sum / agg.count;
  agg.std_error =
      std::sqrt(std::max(0.0, sum2 / agg.count - agg.mean_error * agg.mean_error));
  agg.fraction_negative = double(negative) / agg.count;
  return agg;
}

std::map<std::string, double> full_scale_reference() {
  return {
      {"full_scale_mean_e_transformer_pct", 15.7},
      {"full_scale_std_e_transformer_pct", 14.6},
      {"full_scale_mean_e_mlp_pct", 21.4},
      {"full_scale_std_e_mlp_pct", 13.7},
      {"full_scale_mean_e_tvp_pct", 50.7},
      {"full_scale_fraction_e_transformer_negative", 0.107},
      {"full_scale_fraction_e_mlp_negative", 0.031},
      {"full_scale_ood40_mean_e_transformer_pct", 42.7},
      {"full_scale_ten_pct_data_mean_e_transformer_pct", 22.6},
  };
}

EvalOutput evaluate_with_baselines(
    const std::vector<dataprep::LabeledSample>& test_set,
    const model::FractionPredictor* transformer,
    const model::FractionPredictor* mlp_bank, const EvalConfig& cfg,
    const std::vector<Baseline>& baselines) {
  if (!transformer) raise(ErrorCode::BadInput, "a trained model is required");
  EvalOutput out;
  std::vector<double> e_t, e_mlp, e_tvp;

  for (size_t i = 0; i < test_set.size(); ++i) {
    const auto& s = test_set[i];
    const Baseline& base = baselines[i];
    // Cross-check that every method really shares one total time.
    {
      WaypointPath wp = dataprep::from_range_angle(s.input);
      const double recomputed =
          timealloc::tvp_allocate(wp, cfg.limits).total_time;
      if (std::abs(recomputed - base.total_time) >
          1e-12 * std::max(1.0, base.total_time))
        raise(ErrorCode::NumericFailure,
              "per-sample total time drifted between methods");
    }
    SampleCost rec;
    rec.id = s.curve_id;
    rec.waypoint_count = s.waypoint_count;
    rec.total_time = base.total_time;
    rec.j_bgd = base.j_bgd;
    rec.j_tvp = base.j_tvp;

    model::AttentionRecord attention;
    const bool capture =
        static_cast<int>(out.attention.size()) < cfg.capture_attention_samples;
    std::vector<double> fr =
        transformer->predict(s.input, capture ? &attention : nullptr);
    if (capture) out.attention.push_back(std::move(attention));
    rec.j_transformer = solve_with_fractions(s, fr, base.total_time, cfg);

    const double jb = normalized_cost(rec.j_bgd);
    rec.e_transformer =
        relative_error_percent(normalized_cost(rec.j_transformer), jb);
    rec.e_tvp = relative_error_percent(normalized_cost(rec.j_tvp), jb);
    e_t.push_back(rec.e_transformer);
    e_tvp.push_back(rec.e_tvp);

    if (mlp_bank && mlp_bank->accepts_length(s.input.size())) {
      std::vector<double> fm = mlp_bank->predict(s.input);
      rec.j_mlp = solve_with_fractions(s, fm, base.total_time, cfg);
      rec.e_mlp = relative_error_percent(normalized_cost(*rec.j_mlp), jb);
      e_mlp.push_back(*rec.e_mlp);
    }
    out.report.samples.push_back(std::move(rec));
  }

  out.report.transformer = aggregate(e_t);
  out.report.mlp = aggregate(e_mlp);
  out.report.tvp = aggregate(e_tvp);
  out.report.reference = full_scale_reference();
  return out;
}

}  // namespace

double normalized_cost(double snap_cost) {
  if (snap_cost < 0.0)
    raise(ErrorCode::BadInput, "snap cost must be non-negative");
  return std::pow(snap_cost, 1.0 / 7.0);
}

double relative_error_percent(double j_method, double j_baseline) {
  if (!(j_baseline > 0.0))
    raise(ErrorCode::BadInput, "baseline cost must be positive");
  return 100.0 * (j_method - j_baseline) / j_baseline;
}

EvalOutput evaluate_methods(const std::vector<dataprep::LabeledSample>& test_set,
                            const model::FractionPredictor* transformer,
                            const model::FractionPredictor* mlp_bank,
                            const EvalConfig& cfg) {
  std::vector<Baseline> baselines;
  baselines.reserve(test_set.size());
  for (const auto& s : test_set) baselines.push_back(compute_baseline(s, cfg));
  return evaluate_with_baselines(test_set, transformer, mlp_bank, cfg,
                                 baselines);
}

EvalOutput ood_eval(const dataprep::CurveSet& curves, int waypoint_count,
                    const model::FractionPredictor* transformer,
                    const model::FractionPredictor* mlp_bank,
                    const EvalConfig& cfg) {
  std::vector<dataprep::LabeledSample> samples;
  for (const auto& c : curves) {
    try {
      WaypointPath wp = dataprep::collocate(c.points, waypoint_count);
      dataprep::LabeledSample s;
      s.curve_id = c.id;
      s.waypoint_count = waypoint_count;
      s.input = dataprep::to_range_angle(wp);
      s.fractions.assign(s.input.size(), 0.0);  // no label needed for eval
      s.converged = true;
      samples.push_back(std::move(s));
    } catch (const Error&) {
      // curves too coarse for this resolution are skipped
    }
  }
  return evaluate_methods(samples, transformer, mlp_bank, cfg);
}

void export_cost_report_csv(const CostReport& report, std::ostream& out) {
  out << "id,n,total_time,j_bgd,j_transformer,j_mlp,j_tvp,"
         "e_transformer,e_mlp,e_tvp\n";
  out << std::setprecision(17);
  for (const auto& s : report.samples) {
    out << s.id << ',' << s.waypoint_count << ',' << s.total_time << ','
        << s.j_bgd << ',' << s.j_transformer << ',';
    if (s.j_mlp) out << *s.j_mlp;
    out << ',' << s.j_tvp << ',' << s.e_transformer << ',';
    if (s.e_mlp) out << *s.e_mlp;
    out << ',' << s.e_tvp << '\n';
  }
}

Histogram histogram(const std::vector<double>& values, int bins) {
  if (values.empty() || bins < 1)
    raise(ErrorCode::BadInput, "histogram needs values and at least one bin");
  Histogram h;
  h.lo = *std::min_element(values.begin(), values.end());
  h.hi = *std::max_element(values.begin(), values.end());
  h.counts.assign(bins, 0);
  if (h.hi <= h.lo) {
    // Degenerate range: everything lands in one bin.
    h.counts[0] = static_cast<int>(values.size());
    return h;
  }
  const double width = (h.hi - h.lo) / bins;
  for (double v : values) {
    int idx = static_cast<int>((v - h.lo) / width);
    idx = std::clamp(idx, 0, bins - 1);
    ++h.counts[idx];
  }
  return h;
}

void histogram_export(const CostReport& report, int bins,
                      const std::string& csv_path,
                      const std::string& svg_path) {
  if (report.samples.empty())
    raise(ErrorCode::BadInput, "cannot plot an empty report");

  std::vector<double> all, et, em, etvp;
  for (const auto& s : report.samples) {
    et.push_back(s.e_transformer);
    etvp.push_back(s.e_tvp);
    all.push_back(s.e_transformer);
    all.push_back(s.e_tvp);
    if (s.e_mlp) {
      em.push_back(*s.e_mlp);
      all.push_back(*s.e_mlp);
    }
  }
  const double lo = *std::min_element(all.begin(), all.end());
  const double hi = *std::max_element(all.begin(), all.end());
  const double width = (hi > lo) ? (hi - lo) / bins : 1.0;

  auto count = [&](const std::vector<double>& vals) {
    std::vector<int> counts(bins, 0);
    for (double v : vals) {
      int idx = (hi > lo) ? static_cast<int>((v - lo) / width) : 0;
      ++counts[std::clamp(idx, 0, bins - 1)];
    }
    return counts;
  };
  const auto ct = count(et);
  const auto cm = count(em);
  const auto cv = count(etvp);

  std::ofstream csv(csv_path);
  if (!csv) raise(ErrorCode::Io, "cannot write histogram csv: " + csv_path);
  csv << "bin_lo,bin_hi,count_transformer,count_mlp,count_tvp\n";
  csv << std::setprecision(17);
  for (int b = 0; b < bins; ++b) {
    csv << (lo + b * width) << ',' << (lo + (b + 1) * width) << ',' << ct[b]
        << ',' << (em.empty() ? 0 : cm[b]) << ',' << cv[b] << '\n';
  }

  // Grouped bar chart.
  const double W = 640, H = 360, pad = 42;
  int peak = 1;
  for (int b = 0; b < bins; ++b)
    peak = std::max({peak, ct[b], em.empty() ? 0 : cm[b], cv[b]});
  svg::Writer w(W, H);
  w.line(pad, H - pad, W - 10, H - pad);
  w.line(pad, H - pad, pad, 10);
  const double span = (W - pad - 10) / bins;
  const int series = em.empty() ? 2 : 3;
  const double bar = span / (series + 1);
  auto draw = [&](const std::vector<int>& counts, int slot,
                  const std::string& color) {
    for (int b = 0; b < bins; ++b) {
      const double height = (H - pad - 10) * counts[b] / peak;
      w.rect(pad + b * span + slot * bar, H - pad - height, bar, height, color,
             0.85);
    }
  };
  draw(ct, 0, "#1f77b4");
  if (!em.empty()) draw(cm, 1, "#ff7f0e");
  draw(cv, series - 1, "#2ca02c");
  w.text(pad, H - 12, "error vs descent baseline (%)");
  char lbl[64];
  std::snprintf(lbl, sizeof(lbl), "%.1f", lo);
  w.text(pad, H - pad + 14, lbl, 10);
  std::snprintf(lbl, sizeof(lbl), "%.1f", hi);
  w.text(W - 50, H - pad + 14, lbl, 10);
  w.text(W - 190, 20, "model", 11, "#1f77b4");
  if (!em.empty()) w.text(W - 140, 20, "fixed-size", 11, "#ff7f0e");
  w.text(W - 60, 20, "heuristic", 11, "#2ca02c");
  w.save(svg_path);
}

SweepReport sample_efficiency_sweep(
    const std::vector<dataprep::LabeledSample>& pool,
    const std::vector<double>& fractions, const model::ModelConfig& arch,
    const model::TrainConfig& train_cfg,
    const std::vector<dataprep::LabeledSample>& test_set,
    const EvalConfig& eval_cfg) {
  if (fractions.size() < 1)
    raise(ErrorCode::BadInput, "sweep needs at least one fraction");
  for (size_t i = 1; i < fractions.size(); ++i)
    if (fractions[i] < fractions[i - 1])
      raise(ErrorCode::BadInput, "fractions must be sorted ascending");

  // Unique curve ids in pool order, shuffled once with the training seed so
  // smaller fractions are prefixes of larger ones.
  std::vector<std::string> ids;
  for (const auto& s : pool)
    if (std::find(ids.begin(), ids.end(), s.curve_id) == ids.end())
      ids.push_back(s.curve_id);
  std::mt19937_64 rng(train_cfg.seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  std::vector<Baseline> baselines;
  baselines.reserve(test_set.size());
  for (const auto& s : test_set)
    baselines.push_back(compute_baseline(s, eval_cfg));

  SweepReport report;
  report.seed = train_cfg.seed;
  for (double f : fractions) {
    if (!(f > 0.0) || f > 1.0)
      raise(ErrorCode::BadInput, "fractions must lie in (0, 1]");
    const int take = std::clamp<int>(
        static_cast<int>(std::llround(f * double(ids.size()))), 1,
        static_cast<int>(ids.size()));
    std::vector<std::string> chosen(ids.begin(), ids.begin() + take);
    std::vector<dataprep::LabeledSample> subset;
    for (const auto& s : pool)
      if (std::find(chosen.begin(), chosen.end(), s.curve_id) != chosen.end())
        subset.push_back(s);

    auto split = dataprep::split_by_curve(subset, 5);
    std::vector<dataprep::LabeledSample> tr, va;
    for (int i : split.train) tr.push_back(subset[i]);
    for (int i : split.validation) va.push_back(subset[i]);

    model::TransformerModel<float> m(arch);
    m.init_parameters(train_cfg.seed);
    model::train(m, tr, va, train_cfg);

    EvalOutput out =
        evaluate_with_baselines(test_set, &m, nullptr, eval_cfg, baselines);
    report.points.push_back({f, out.report.transformer.mean_error, take});
  }
  return report;
}

void export_sweep_csv(const SweepReport& report, std::ostream& out) {
  out << "fraction,mean_e_transformer,curves_used,seed\n";
  out << std::setprecision(17);
  for (const auto& p : report.points)
    out << p.fraction << ',' << p.mean_error << ',' << p.curves_used << ','
        << report.seed << '\n';
}

AttentionSummary attention_summary(
    const std::vector<model::AttentionRecord>& records,
    const std::vector<int>& band_widths) {
  if (records.empty())
    raise(ErrorCode::BadInput, "attention summary needs at least one record");

  AttentionSummary summary;
  summary.records_used = static_cast<int>(records.size());

  // Band statistics over every head-averaged cross map.
  std::map<int, double> mass, uniform;
  std::map<int, long> rows_total;
  std::vector<std::pair<int, Eigen::MatrixXd>> averaged;  // (layer, map)
  std::map<int, int> length_votes;
  for (const auto& rec : records) {
    for (size_t l = 0; l < rec.cross.size(); ++l) {
      const auto& heads = rec.cross[l];
      if (heads.empty()) continue;
      Eigen::MatrixXd mean =
          Eigen::MatrixXd::Zero(heads[0].rows(), heads[0].cols());
      for (const auto& h : heads) mean += h;
      mean /= double(heads.size());
      ++length_votes[static_cast<int>(mean.rows())];
      averaged.emplace_back(static_cast<int>(l), std::move(mean));
    }
  }
  if (averaged.empty())
    raise(ErrorCode::BadInput, "records carry no cross-attention maps");

  for (int k : band_widths) {
    double trained = 0.0, flat = 0.0;
    long rows = 0;
    for (const auto& [l, map] : averaged) {
      for (Eigen::Index i = 0; i < map.rows(); ++i) {
        double in_band = 0.0;
        int cells = 0;
        for (Eigen::Index j = 0; j < map.cols(); ++j) {
          if (std::abs(long(i) - long(j)) <= k) {
            in_band += map(i, j);
            ++cells;
          }
        }
        trained += in_band / map.row(i).sum();
        flat += double(cells) / double(map.cols());
        ++rows;
      }
    }
    summary.band_mass[k] = trained / rows;
    summary.uniform_band_mass[k] = flat / rows;
  }

  // Mean map per layer at the most common decoder length.
  int best_len = 0, best_votes = -1;
  for (const auto& [len, votes] : length_votes)
    if (votes > best_votes) {
      best_votes = votes;
      best_len = len;
    }
  summary.map_length = best_len;
  std::map<int, std::pair<Eigen::MatrixXd, int>> by_layer;
  for (const auto& [l, map] : averaged) {
    if (map.rows() != best_len) continue;
    auto it = by_layer.find(l);
    if (it == by_layer.end())
      by_layer.emplace(l, std::make_pair(map, 1));
    else {
      it->second.first += map;
      it->second.second += 1;
    }
  }
  for (auto& [l, pair] : by_layer)
    summary.mean_cross_per_layer.push_back(pair.first / double(pair.second));
  return summary;
}

void export_attention_summary(const AttentionSummary& summary,
                              const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream out(fs::path(dir) / "band_mass.csv");
    if (!out) raise(ErrorCode::Io, "cannot write band_mass.csv");
    out << "k,trained,uniform\n" << std::setprecision(17);
    for (const auto& [k, v] : summary.band_mass)
      out << k << ',' << v << ',' << summary.uniform_band_mass.at(k) << '\n';
  }

  for (size_t l = 0; l < summary.mean_cross_per_layer.size(); ++l) {
    const auto& map = summary.mean_cross_per_layer[l];
    {
      std::ofstream out(fs::path(dir) /
                        ("mean_cross_l" + std::to_string(l) + ".csv"));
      out << std::setprecision(17);
      for (Eigen::Index i = 0; i < map.rows(); ++i) {
        for (Eigen::Index j = 0; j < map.cols(); ++j) {
          if (j) out << ',';
          out << map(i, j);
        }
        out << '\n';
      }
    }
    const double cell = 18.0, pad = 30.0;
    svg::Writer w(pad * 2 + cell * map.cols(), pad * 2 + cell * map.rows());
    const double peak = std::max(map.maxCoeff(), 1e-12);
    for (Eigen::Index i = 0; i < map.rows(); ++i) {
      for (Eigen::Index j = 0; j < map.cols(); ++j) {
        const double v = map(i, j) / peak;
        const int shade = static_cast<int>(255.0 * (1.0 - v));
        char color[16];
        std::snprintf(color, sizeof(color), "#%02x%02xff", shade, shade);
        w.rect(pad + j * cell, pad + i * cell, cell, cell, color);
      }
    }
    w.text(pad, pad - 8, "decoder step vs encoder position, layer " +
                             std::to_string(l));
    w.save((fs::path(dir) / ("heatmap_l" + std::to_string(l) + ".svg")).string());
  }
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open for digest: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(h));
  return hex;
}

void write_run_manifest(const std::string& path,
                        const std::map<std::string, std::string>& entries) {
  nlohmann::json j(entries);
  std::ofstream out(path);
  if (!out) raise(ErrorCode::Io, "cannot write manifest: " + path);
  out << j.dump(2) << '\n';
}

}  // namespace snaptraj::evalkit
