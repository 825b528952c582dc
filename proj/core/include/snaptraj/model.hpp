#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "snaptraj/ad.hpp"
#include "snaptraj/dataprep.hpp"

namespace snaptraj::model {

enum class Precision { F32, F64 };

std::string precision_name(Precision p);
Precision precision_from_name(const std::string& name);

struct ModelConfig {
  int embed_dim = 32;
  int num_heads = 16;
  int enc_layers = 3;
  int dec_layers = 3;
  int ffn_dim = 256;
  int max_seq_len = 64;
  double dropout = 0.0;  // fixed at 0; kept for the manifest
  std::string activation = "relu";
};

/// Exact trainable-scalar count for a config: token/target embeddings,
/// per-layer attention projections and feedforward blocks with biases,
/// per-sublayer layer norms, final encoder/decoder norms, and the scalar
/// output head.
std::int64_t param_count(const ModelConfig& config);

/// Stable digest of the architecture fields, used to guard resume.
std::string config_digest(const ModelConfig& config);

/// Sinusoidal position encoding entry vector for one position.
Eigen::VectorXd positional_encoding(int pos, int dim);
/// Rows 0..len-1 of the encoding.
Eigen::MatrixXd positional_encoding_matrix(int len, int dim);

/// Clamp each entry to at least `floor`, then divide by the L1 norm so the
/// result is a strictly positive vector summing to one.
std::vector<double> normalize_output(const std::vector<double>& raw,
                                     double floor = 1e-4);

/// L1 training loss; `cumulative` compares prefix sums instead of entries.
double sequence_loss(const std::vector<double>& pred,
                     const std::vector<double>& target, bool cumulative);

/// Attention probabilities captured during one forward pass,
/// indexed [layer][head]; rows are query positions, columns key positions.
struct AttentionRecord {
  std::vector<std::vector<Eigen::MatrixXd>> encoder_self;
  std::vector<std::vector<Eigen::MatrixXd>> decoder_self;
  std::vector<std::vector<Eigen::MatrixXd>> cross;

  bool empty() const { return cross.empty(); }
};

/// Write one CSV per cross-attention (layer, head) plus the head-averaged
/// map per layer into `dir`.
void dump_attention_csv(const AttentionRecord& record, const std::string& dir);

/// Anything that can map a range-angle sequence to time fractions.
class FractionPredictor {
public:
  virtual ~FractionPredictor() = default;
  virtual std::vector<double> predict(const dataprep::RangeAngleSequence& input,
                                      AttentionRecord* attention = nullptr) const = 0;
  virtual bool accepts_length(int m) const = 0;
};

template <typename Scalar>
struct ParamTensor {
  std::string name;
  ad::Mat<Scalar> value;
  ad::Mat<Scalar> grad;
  ad::Mat<Scalar> adam_m;
  ad::Mat<Scalar> adam_v;
};

/// Ordered, named parameter arrays; the order defines the checkpoint blob
/// layout.
template <typename Scalar>
class ParamStore {
public:
  ParamTensor<Scalar>& add(const std::string& name, int rows, int cols);
  ParamTensor<Scalar>& at(const std::string& name);
  const ParamTensor<Scalar>& at(const std::string& name) const;

  std::vector<ParamTensor<Scalar>>& tensors() { return tensors_; }
  const std::vector<ParamTensor<Scalar>>& tensors() const { return tensors_; }

  std::int64_t total_parameters() const;
  void zero_grad();
  bool all_finite() const;

private:
  std::vector<ParamTensor<Scalar>> tensors_;
  std::unordered_map<std::string, int> index_;
};

/// Parameters mirrored onto a tape as leaves (training) or constants
/// (inference).
template <typename Scalar>
struct BoundParams {
  std::vector<ad::Var<Scalar>> vars;  // store order
  const ParamStore<Scalar>* store = nullptr;

  ad::Var<Scalar> operator[](const std::string& name) const;
};

template <typename Scalar>
BoundParams<Scalar> bind_params(ad::Graph<Scalar>& g,
                                const ParamStore<Scalar>& store,
                                bool track_gradients);

/// Add every bound leaf's adjoint into the store gradients.
template <typename Scalar>
void accumulate_bound_grads(const BoundParams<Scalar>& bound,
                            ParamStore<Scalar>& store);

struct TeacherForcedResult {
  std::vector<double> predictions;  // raw per-step outputs, pre-normalisation
  AttentionRecord attention;
};

/// Encoder-decoder sequence model over range-angle tokens.  The decoder is
/// causally masked and consumes the zero-prepended fraction sequence; the
/// scalar head emits one raw duration per step.
template <typename Scalar>
class TransformerModel : public FractionPredictor {
public:
  explicit TransformerModel(ModelConfig config);

  void init_parameters(std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<Scalar>& params() { return store_; }
  const ParamStore<Scalar>& params() const { return store_; }

  /// Affine token embedding plus position encoding (no attention); exposed
  /// for shape/zero-weight checks.
  ad::Mat<Scalar> embed_inputs(const dataprep::RangeAngleSequence& input) const;

  /// Tape-building forward pass.  `decoder_input` is the zero-prepended
  /// target sequence of length m.
  ad::Var<Scalar> forward(ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
                          const dataprep::RangeAngleSequence& input,
                          const std::vector<double>& decoder_input,
                          AttentionRecord* attention) const;

  TeacherForcedResult forward_teacher_forced(
      const dataprep::RangeAngleSequence& input,
      const std::vector<double>& target_fractions,
      bool capture_attention = false) const;

  /// Greedy autoregressive decode followed by simplex normalisation.
  std::vector<double> predict(const dataprep::RangeAngleSequence& input,
                              AttentionRecord* attention = nullptr) const override;
  bool accepts_length(int m) const override {
    return m >= 1 && m <= config_.max_seq_len;
  }

private:
  ModelConfig config_;
  ParamStore<Scalar> store_;
};

/// Fixed-size feedforward baseline: one network per waypoint count, flat
/// (range, angle) input, same output normalisation as the sequence model.
struct MlpConfig {
  int waypoint_count = 8;               // N; input/output sized for N - 1
  std::vector<int> hidden = {64, 64};
  std::string activation = "relu";
};

template <typename Scalar>
class MlpModel : public FractionPredictor {
public:
  explicit MlpModel(MlpConfig config);

  void init_parameters(std::uint64_t seed);

  const MlpConfig& config() const { return config_; }
  ParamStore<Scalar>& params() { return store_; }
  const ParamStore<Scalar>& params() const { return store_; }

  ad::Var<Scalar> forward(ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
                          const dataprep::RangeAngleSequence& input) const;

  std::vector<double> predict(const dataprep::RangeAngleSequence& input,
                              AttentionRecord* attention = nullptr) const override;
  bool accepts_length(int m) const override {
    return m == config_.waypoint_count - 1;
  }

private:
  MlpConfig config_;
  ParamStore<Scalar> store_;
};

/// Size-dispatching collection of per-N feedforward baselines.
class MlpBank : public FractionPredictor {
public:
  void add(int waypoint_count, std::shared_ptr<FractionPredictor> model);
  bool has_waypoint_count(int n) const;
  std::vector<int> waypoint_counts() const;

  std::vector<double> predict(const dataprep::RangeAngleSequence& input,
                              AttentionRecord* attention = nullptr) const override;
  bool accepts_length(int m) const override;

private:
  std::map<int, std::shared_ptr<FractionPredictor>> models_;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::string schedule = "cosine";  // constant | cosine
  std::string optimizer = "adam";   // adam | sgd
  int batch_size = 32;
  int epochs = 50;
  std::uint64_t seed = 0;
  bool cumulative_loss = false;      // prefix-sum L1 instead of per-step L1
  bool include_unconverged = false;  // keep samples whose labels did not converge
};

struct EpochLoss {
  double train = 0.0;
  double validation = 0.0;
};

struct TrainResult {
  std::vector<EpochLoss> history;
  int best_epoch = -1;
  double best_validation = 0.0;
  bool diverged = false;
  std::int64_t steps = 0;
};

/// Teacher-forced gradient training.  Deterministic given the seed; on NaN
/// divergence the model is rolled back to the last finite epoch.  The model
/// ends at the best-validation parameters.
template <typename Scalar>
TrainResult train(TransformerModel<Scalar>& model,
                  const std::vector<dataprep::LabeledSample>& train_samples,
                  const std::vector<dataprep::LabeledSample>& val_samples,
                  const TrainConfig& cfg);

template <typename Scalar>
TrainResult train_mlp(MlpModel<Scalar>& model,
                      const std::vector<dataprep::LabeledSample>& train_samples,
                      const std::vector<dataprep::LabeledSample>& val_samples,
                      const TrainConfig& cfg);

/// Mean teacher-forced loss without gradient tracking.
template <typename Scalar>
double evaluate_loss(const TransformerModel<Scalar>& model,
                     const std::vector<dataprep::LabeledSample>& samples,
                     bool cumulative_loss = false);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string dataset_digest;
  int epochs_trained = 0;
  double best_validation = 0.0;
  std::map<std::string, std::string> extra;
};

/// Manifest JSON (config, precision, named shapes, metadata) plus a raw
/// little-endian parameter blob referenced from the manifest.
template <typename Scalar>
void save_transformer(const TransformerModel<Scalar>& model,
                      const std::string& json_path,
                      const CheckpointMeta& meta = {});

template <typename Scalar>
TransformerModel<Scalar> load_transformer(const std::string& json_path);

template <typename Scalar>
void save_mlp(const MlpModel<Scalar>& model, const std::string& json_path,
              const CheckpointMeta& meta = {});

template <typename Scalar>
MlpModel<Scalar> load_mlp(const std::string& json_path);

struct CheckpointInfo {
  std::string kind;  // "transformer" | "mlp"
  Precision precision = Precision::F32;
  std::string config_digest;
  CheckpointMeta meta;
};

CheckpointInfo checkpoint_info(const std::string& json_path);

/// Load any checkpoint behind the type-erased predictor interface.
std::unique_ptr<FractionPredictor> load_predictor(const std::string& json_path);

}  // namespace snaptraj::model
