#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "snaptraj/dataprep.hpp"
#include "snaptraj/model.hpp"
#include "snaptraj/timealloc.hpp"

namespace snaptraj::evalkit {

/// 7th-root normalisation of a snap cost, matching the time-scaling degree
/// of the objective.
double normalized_cost(double snap_cost);

/// 100 * (J'_method - J'_baseline) / J'_baseline on normalised costs.
/// Negative values mean the method beat the baseline.
double relative_error_percent(double j_method, double j_baseline);

struct SampleCost {
  std::string id;
  int waypoint_count = 0;
  double total_time = 0.0;  // shared T used by every method on this sample
  double j_bgd = 0.0;
  double j_transformer = 0.0;
  double j_tvp = 0.0;
  std::optional<double> j_mlp;
  double e_transformer = 0.0;
  double e_tvp = 0.0;
  std::optional<double> e_mlp;
};

struct MethodAggregate {
  double mean_error = 0.0;
  double std_error = 0.0;
  double fraction_negative = 0.0;  // share of samples beating the baseline
  int count = 0;
};

struct CostReport {
  std::vector<SampleCost> samples;
  MethodAggregate transformer;
  MethodAggregate mlp;
  MethodAggregate tvp;
  /// Full-scale reference results carried as metadata; never
  /// asserted against desk-scale runs.
  std::map<std::string, double> reference;
};

struct EvalConfig {
  timealloc::TvpLimits limits;
  timealloc::BgdConfig bgd;
  trajopt::BoundaryConfig boundary;
  int capture_attention_samples = 0;  // keep attention for the first k samples
};

struct EvalOutput {
  CostReport report;
  std::vector<model::AttentionRecord> attention;
};

/// The comparison protocol: per sample, the total time comes from the TVP
/// heuristic; the baseline allocation is the descent refinement of that TVP
/// start; every method's fractions are stretched to the same total and sent
/// through the same QP solve.
EvalOutput evaluate_methods(const std::vector<dataprep::LabeledSample>& test_set,
                            const model::FractionPredictor* transformer,
                            const model::FractionPredictor* mlp_bank,
                            const EvalConfig& cfg);

/// Same protocol on inputs collocated to a waypoint count the model never saw
/// in training.
EvalOutput ood_eval(const dataprep::CurveSet& curves, int waypoint_count,
                    const model::FractionPredictor* transformer,
                    const model::FractionPredictor* mlp_bank,
                    const EvalConfig& cfg);

void export_cost_report_csv(const CostReport& report, std::ostream& out);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<int> counts;
};

Histogram histogram(const std::vector<double>& values, int bins);

/// Per-method error histograms over one shared range: CSV plus a bar-chart
/// SVG.
void histogram_export(const CostReport& report, int bins,
                      const std::string& csv_path,
                      const std::string& svg_path);

struct SweepPoint {
  double fraction = 0.0;
  double mean_error = 0.0;
  int curves_used = 0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::uint64_t seed = 0;
};

/// Train one model per data fraction on a random-by-curve subset (same seed
/// for every point, so fraction 1.0 reproduces the full run) and record the
/// mean transformer error on the test set.
SweepReport sample_efficiency_sweep(
    const std::vector<dataprep::LabeledSample>& pool,
    const std::vector<double>& fractions, const model::ModelConfig& arch,
    const model::TrainConfig& train_cfg,
    const std::vector<dataprep::LabeledSample>& test_set,
    const EvalConfig& eval_cfg);

void export_sweep_csv(const SweepReport& report, std::ostream& out);

struct AttentionSummary {
  /// Head-averaged cross-attention per layer at the most common sequence
  /// length among the records.
  std::vector<Eigen::MatrixXd> mean_cross_per_layer;
  int map_length = 0;
  /// k -> mean fraction of attention mass within |i-j| <= k.
  std::map<int, double> band_mass;
  /// Same statistic under uniform attention over the same shapes.
  std::map<int, double> uniform_band_mass;
  int records_used = 0;
};

AttentionSummary attention_summary(
    const std::vector<model::AttentionRecord>& records,
    const std::vector<int>& band_widths = {1, 2, 3});

/// bands CSV, per-layer mean-map CSVs, and one heat-map SVG per layer.
void export_attention_summary(const AttentionSummary& summary,
                              const std::string& dir);

/// Streaming FNV-1a digest of a file, as fixed-width hex.
std::string file_digest_hex(const std::string& path);

/// Flat JSON manifest (sorted keys) describing a run.
void write_run_manifest(const std::string& path,
                        const std::map<std::string, std::string>& entries);

}  // namespace snaptraj::evalkit
