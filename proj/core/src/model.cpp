#include "snaptraj/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

namespace snaptraj::model {
namespace {

using json = nlohmann::ordered_json;

std::vector<double> zero_prepended(const std::vector<double>& fractions) {
  std::vector<double> dec(fractions.size());
  dec[0] = 0.0;
  for (size_t i = 0; i + 1 < fractions.size(); ++i) dec[i + 1] = fractions[i];
  return dec;
}

template <typename Scalar>
void check_finite(const ad::Var<Scalar>& v, const std::string& where) {
  if (!v.value().allFinite())
    raise(ErrorCode::NumericFailure, "non-finite activations in " + where);
}

template <typename Scalar>
ad::Mat<Scalar> causal_mask(int len) {
  ad::Mat<Scalar> mask = ad::Mat<Scalar>::Zero(len, len);
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) mask(i, j) = neg_inf;
  return mask;
}

template <typename Scalar>
ad::Var<Scalar> affine(ad::Var<Scalar> x, const BoundParams<Scalar>& p,
                       const std::string& name) {
  return ad::add_rowvec(ad::matmul(x, p[name + ".weight"]), p[name + ".bias"]);
}

template <typename Scalar>
ad::Var<Scalar> attention_block(const BoundParams<Scalar>& p,
                                const std::string& prefix,
                                ad::Var<Scalar> query_in,
                                ad::Var<Scalar> key_value_in, int num_heads,
                                const ad::Mat<Scalar>* mask,
                                std::vector<Eigen::MatrixXd>* capture) {
  auto q = affine(query_in, p, prefix + ".q");
  auto k = affine(key_value_in, p, prefix + ".k");
  auto v = affine(key_value_in, p, prefix + ".v");
  const int dim = static_cast<int>(q.cols());
  const int head_dim = dim / num_heads;
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(Scalar(head_dim));

  std::vector<ad::Var<Scalar>> heads;
  heads.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    auto qh = ad::slice_cols(q, h * head_dim, head_dim);
    auto kh = ad::slice_cols(k, h * head_dim, head_dim);
    auto vh = ad::slice_cols(v, h * head_dim, head_dim);
    auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
    auto probs = ad::softmax_rows(scores, mask);
    if (capture) capture->push_back(probs.value().template cast<double>());
    heads.push_back(ad::matmul(probs, vh));
  }
  auto merged = ad::concat_cols(heads);
  return affine(merged, p, prefix + ".o");
}

template <typename Scalar>
ad::Var<Scalar> feedforward_block(const BoundParams<Scalar>& p,
                                  const std::string& prefix, ad::Var<Scalar> x,
                                  const std::string& activation) {
  auto h = ad::add_rowvec(ad::matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]);
  h = (activation == "gelu") ? ad::gelu(h) : ad::relu(h);
  return ad::add_rowvec(ad::matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"]);
}

template <typename Scalar>
ad::Var<Scalar> norm(const BoundParams<Scalar>& p, const std::string& prefix,
                     ad::Var<Scalar> x) {
  return ad::layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"]);
}

// Weight initialisation: Glorot-scaled normals for weight matrices, zeros
// for biases, ones for norm gains.
template <typename Scalar>
void init_store(ParamStore<Scalar>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& t : store.tensors()) {
    const bool is_gain = t.name.ends_with(".gain");
    const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".b1") ||
                         t.name.ends_with(".b2");
    if (is_gain) {
      t.value.setOnes();
    } else if (is_bias) {
      t.value.setZero();
    } else {
      const double fan_in = static_cast<double>(t.value.rows());
      const double fan_out = static_cast<double>(t.value.cols());
      const double std_dev = std::sqrt(2.0 / (fan_in + fan_out));
      for (Eigen::Index i = 0; i < t.value.size(); ++i)
        t.value.data()[i] = Scalar(normal(rng) * std_dev);
    }
    t.grad.setZero(t.value.rows(), t.value.cols());
    t.adam_m.setZero(t.value.rows(), t.value.cols());
    t.adam_v.setZero(t.value.rows(), t.value.cols());
  }
}

template <typename Scalar>
ad::Mat<Scalar> tokens_from_input(const dataprep::RangeAngleSequence& input) {
  ad::Mat<Scalar> tokens(input.size(), 2);
  for (int i = 0; i < input.size(); ++i) {
    tokens(i, 0) = Scalar(input.ranges[i]);
    tokens(i, 1) = Scalar(input.angles[i]);
  }
  return tokens;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string precision_name(Precision p) {
  return p == Precision::F32 ? "f32" : "f64";
}

Precision precision_from_name(const std::string& name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  raise(ErrorCode::BadInput, "unknown precision: " + name);
}

std::int64_t param_count(const ModelConfig& c) {
  const std::int64_t e = c.embed_dim, f = c.ffn_dim;
  const std::int64_t attn = 4 * (e * e + e);
  const std::int64_t ln = 2 * e;
  const std::int64_t ffn = e * f + f + f * e + e;
  const std::int64_t enc_layer = attn + ffn + 2 * ln;
  const std::int64_t dec_layer = 2 * attn + ffn + 3 * ln;
  std::int64_t total = 0;
  total += 2 * e + e;  // input embedding
  total += 1 * e + e;  // target embedding
  total += c.enc_layers * enc_layer + c.dec_layers * dec_layer;
  total += 2 * ln;     // final encoder/decoder norms
  total += e + 1;      // scalar head
  return total;
}

std::string config_digest(const ModelConfig& c) {
  std::ostringstream os;
  os << c.embed_dim << '/' << c.num_heads << '/' << c.enc_layers << '/'
     << c.dec_layers << '/' << c.ffn_dim << '/' << c.max_seq_len << '/'
     << c.activation;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(os.str())));
  return buf;
}

Eigen::VectorXd positional_encoding(int pos, int dim) {
  if (pos < 0 || dim < 1) raise(ErrorCode::BadInput, "bad position/dimension");
  Eigen::VectorXd enc(dim);
  for (int i = 0; i < dim; i += 2) {
    const double rate = std::pow(10000.0, double(i) / dim);
    enc(i) = std::sin(pos / rate);
    if (i + 1 < dim) enc(i + 1) = std::cos(pos / rate);
  }
  return enc;
}

Eigen::MatrixXd positional_encoding_matrix(int len, int dim) {
  Eigen::MatrixXd m(len, dim);
  for (int p = 0; p < len; ++p) m.row(p) = positional_encoding(p, dim).transpose();
  return m;
}

std::vector<double> normalize_output(const std::vector<double>& raw,
                                     double floor) {
  if (raw.empty())
    raise(ErrorCode::DegenerateOutput, "cannot normalise an empty output");
  std::vector<double> out(raw.size());
  double sum = 0.0;
  for (size_t i = 0; i < raw.size(); ++i) {
    const double v = std::isfinite(raw[i]) ? raw[i] : 0.0;
    out[i] = std::max(v, floor);
    sum += out[i];
  }
  if (!(sum > 0.0))
    raise(ErrorCode::DegenerateOutput, "output collapsed to zero mass");
  for (double& v : out) v /= sum;
  return out;
}

double sequence_loss(const std::vector<double>& pred,
                     const std::vector<double>& target, bool cumulative) {
  if (pred.size() != target.size())
    raise(ErrorCode::DimensionMismatch, "loss: length mismatch");
  double loss = 0.0;
  double cp = 0.0, ct = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (cumulative) {
      cp += pred[i];
      ct += target[i];
      loss += std::abs(cp - ct);
    } else {
      loss += std::abs(pred[i] - target[i]);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename Scalar>
ParamTensor<Scalar>& ParamStore<Scalar>::add(const std::string& name, int rows,
                                             int cols) {
  if (index_.count(name))
    raise(ErrorCode::BadInput, "duplicate parameter name: " + name);
  ParamTensor<Scalar> t;
  t.name = name;
  t.value.setZero(rows, cols);
  t.grad.setZero(rows, cols);
  t.adam_m.setZero(rows, cols);
  t.adam_v.setZero(rows, cols);
  index_[name] = static_cast<int>(tensors_.size());
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

template <typename Scalar>
ParamTensor<Scalar>& ParamStore<Scalar>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    raise(ErrorCode::BadInput, "unknown parameter: " + name);
  return tensors_[it->second];
}

template <typename Scalar>
const ParamTensor<Scalar>& ParamStore<Scalar>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    raise(ErrorCode::BadInput, "unknown parameter: " + name);
  return tensors_[it->second];
}

template <typename Scalar>
std::int64_t ParamStore<Scalar>::total_parameters() const {
  std::int64_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

template <typename Scalar>
void ParamStore<Scalar>::zero_grad() {
  for (auto& t : tensors_) t.grad.setZero();
}

template <typename Scalar>
bool ParamStore<Scalar>::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.value.allFinite()) return false;
  return true;
}

template <typename Scalar>
ad::Var<Scalar> BoundParams<Scalar>::operator[](const std::string& name) const {
  const auto& tensors = store->tensors();
  for (size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return vars[i];
  raise(ErrorCode::BadInput, "unbound parameter: " + name);
}

template <typename Scalar>
BoundParams<Scalar> bind_params(ad::Graph<Scalar>& g,
                                const ParamStore<Scalar>& store,
                                bool track_gradients) {
  BoundParams<Scalar> bound;
  bound.store = &store;
  bound.vars.reserve(store.tensors().size());
  for (const auto& t : store.tensors())
    bound.vars.push_back(track_gradients ? ad::leaf(g, t.value)
                                         : ad::constant(g, t.value));
  return bound;
}

template <typename Scalar>
void accumulate_bound_grads(const BoundParams<Scalar>& bound,
                            ParamStore<Scalar>& store) {
  auto& tensors = store.tensors();
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& adj = bound.vars[i].grad();
    if (adj.size() > 0) tensors[i].grad += adj;
  }
}

// ---------------------------------------------------------------------------
// TransformerModel

template <typename Scalar>
TransformerModel<Scalar>::TransformerModel(ModelConfig config)
    : config_(std::move(config)) {
  if (config_.embed_dim < 1 || config_.num_heads < 1 ||
      config_.embed_dim % config_.num_heads != 0)
    raise(ErrorCode::BadInput,
          "embed_dim must be a positive multiple of num_heads");
  const int e = config_.embed_dim;
  const int f = config_.ffn_dim;

  store_.add("input_embed.weight", 2, e);
  store_.add("input_embed.bias", 1, e);
  store_.add("target_embed.weight", 1, e);
  store_.add("target_embed.bias", 1, e);
  auto add_attention = [&](const std::string& prefix) {
    for (const char* part : {".q", ".k", ".v", ".o"}) {
      store_.add(prefix + part + ".weight", e, e);
      store_.add(prefix + part + ".bias", 1, e);
    }
  };
  auto add_norm = [&](const std::string& prefix) {
    store_.add(prefix + ".gain", 1, e);
    store_.add(prefix + ".bias", 1, e);
  };
  auto add_ffn = [&](const std::string& prefix) {
    store_.add(prefix + ".w1", e, f);
    store_.add(prefix + ".b1", 1, f);
    store_.add(prefix + ".w2", f, e);
    store_.add(prefix + ".b2", 1, e);
  };
  for (int l = 0; l < config_.enc_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    add_attention(base + ".self");
    add_norm(base + ".norm1");
    add_ffn(base + ".ffn");
    add_norm(base + ".norm2");
  }
  add_norm("encoder.norm");
  for (int l = 0; l < config_.dec_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    add_attention(base + ".self");
    add_norm(base + ".norm1");
    add_attention(base + ".cross");
    add_norm(base + ".norm2");
    add_ffn(base + ".ffn");
    add_norm(base + ".norm3");
  }
  add_norm("decoder.norm");
  store_.add("head.weight", e, 1);
  store_.add("head.bias", 1, 1);
}

template <typename Scalar>
void TransformerModel<Scalar>::init_parameters(std::uint64_t seed) {
  init_store(store_, seed);
}

template <typename Scalar>
ad::Mat<Scalar> TransformerModel<Scalar>::embed_inputs(
    const dataprep::RangeAngleSequence& input) const {
  if (input.size() > config_.max_seq_len)
    raise(ErrorCode::SequenceTooLong,
          "sequence length " + std::to_string(input.size()) +
              " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  ad::Mat<Scalar> tokens = tokens_from_input<Scalar>(input);
  ad::Mat<Scalar> embedded =
      (tokens * store_.at("input_embed.weight").value).rowwise() +
      store_.at("input_embed.bias").value.row(0);
  embedded += positional_encoding_matrix(input.size(), config_.embed_dim)
                  .cast<Scalar>();
  return embedded;
}

template <typename Scalar>
ad::Var<Scalar> TransformerModel<Scalar>::forward(
    ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
    const dataprep::RangeAngleSequence& input,
    const std::vector<double>& decoder_input,
    AttentionRecord* attention) const {
  const int m_enc = input.size();
  const int m_dec = static_cast<int>(decoder_input.size());
  if (m_enc < 1 || m_dec < 1)
    raise(ErrorCode::BadInput, "empty sequence");
  if (m_enc > config_.max_seq_len || m_dec > config_.max_seq_len)
    raise(ErrorCode::SequenceTooLong,
          "sequence exceeds max_seq_len " + std::to_string(config_.max_seq_len));

  const int e = config_.embed_dim;
  const Eigen::MatrixXd pos64 = positional_encoding_matrix(
      std::max(m_enc, m_dec), e);
  const ad::Mat<Scalar> pos = pos64.template cast<Scalar>();
  const ad::Mat<Scalar>* no_mask = nullptr;

  // Encoder stack.
  auto enc_x = ad::add(
      affine(ad::constant(g, tokens_from_input<Scalar>(input)), p,
             "input_embed"),
      ad::constant(g, ad::Mat<Scalar>(pos.topRows(m_enc))));
  for (int l = 0; l < config_.enc_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    std::vector<Eigen::MatrixXd>* cap = nullptr;
    if (attention) {
      attention->encoder_self.emplace_back();
      cap = &attention->encoder_self.back();
    }
    auto attn = attention_block(p, base + ".self", enc_x, enc_x,
                                config_.num_heads, no_mask, cap);
    enc_x = norm(p, base + ".norm1", ad::add(enc_x, attn));
    auto ff = feedforward_block(p, base + ".ffn", enc_x, config_.activation);
    enc_x = norm(p, base + ".norm2", ad::add(enc_x, ff));
    check_finite(enc_x, "encoder layer " + std::to_string(l));
  }
  enc_x = norm(p, "encoder.norm", enc_x);

  // Decoder stack with causal self-attention.
  ad::Mat<Scalar> dec_tokens(m_dec, 1);
  for (int i = 0; i < m_dec; ++i) dec_tokens(i, 0) = Scalar(decoder_input[i]);
  auto dec_x = ad::add(
      affine(ad::constant(g, std::move(dec_tokens)), p, "target_embed"),
      ad::constant(g, ad::Mat<Scalar>(pos.topRows(m_dec))));
  const ad::Mat<Scalar> mask = causal_mask<Scalar>(m_dec);
  for (int l = 0; l < config_.dec_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    std::vector<Eigen::MatrixXd>* cap_self = nullptr;
    std::vector<Eigen::MatrixXd>* cap_cross = nullptr;
    if (attention) {
      attention->decoder_self.emplace_back();
      cap_self = &attention->decoder_self.back();
      attention->cross.emplace_back();
      cap_cross = &attention->cross.back();
    }
    auto self = attention_block(p, base + ".self", dec_x, dec_x,
                                config_.num_heads, &mask, cap_self);
    dec_x = norm(p, base + ".norm1", ad::add(dec_x, self));
    auto cross = attention_block(p, base + ".cross", dec_x, enc_x,
                                 config_.num_heads, no_mask, cap_cross);
    dec_x = norm(p, base + ".norm2", ad::add(dec_x, cross));
    auto ff = feedforward_block(p, base + ".ffn", dec_x, config_.activation);
    dec_x = norm(p, base + ".norm3", ad::add(dec_x, ff));
    check_finite(dec_x, "decoder layer " + std::to_string(l));
  }
  dec_x = norm(p, "decoder.norm", dec_x);
  auto out = affine(dec_x, p, "head");
  check_finite(out, "output head");
  return out;
}

template <typename Scalar>
TeacherForcedResult TransformerModel<Scalar>::forward_teacher_forced(
    const dataprep::RangeAngleSequence& input,
    const std::vector<double>& target_fractions, bool capture_attention) const {
  if (static_cast<int>(target_fractions.size()) != input.size())
    raise(ErrorCode::DimensionMismatch,
          "teacher forcing needs input length == target length");
  ad::Graph<Scalar> g;
  auto bound = bind_params(g, store_, false);
  TeacherForcedResult res;
  AttentionRecord* rec = capture_attention ? &res.attention : nullptr;
  auto out = forward(g, bound, input, zero_prepended(target_fractions), rec);
  res.predictions.resize(out.rows());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    res.predictions[i] = static_cast<double>(out.value()(i, 0));
  return res;
}

template <typename Scalar>
std::vector<double> TransformerModel<Scalar>::predict(
    const dataprep::RangeAngleSequence& input,
    AttentionRecord* attention) const {
  const int m = input.size();
  if (m < 1) raise(ErrorCode::BadInput, "empty input sequence");
  if (m > config_.max_seq_len)
    raise(ErrorCode::SequenceTooLong,
          "sequence length " + std::to_string(m) + " exceeds max_seq_len");

  std::vector<double> decoder_tokens = {0.0};
  std::vector<double> raw;
  raw.reserve(m);
  for (int step = 0; step < m; ++step) {
    ad::Graph<Scalar> g;
    auto bound = bind_params(g, store_, false);
    const bool last = (step == m - 1);
    auto out = forward(g, bound, input, decoder_tokens,
                       last ? attention : nullptr);
    const double y = static_cast<double>(out.value()(step, 0));
    raw.push_back(y);
    decoder_tokens.push_back(y);
  }
  return normalize_output(raw);
}

// ---------------------------------------------------------------------------
// MlpModel

template <typename Scalar>
MlpModel<Scalar>::MlpModel(MlpConfig config) : config_(std::move(config)) {
  if (config_.waypoint_count < 2)
    raise(ErrorCode::BadInput, "waypoint count must be >= 2");
  const int m = config_.waypoint_count - 1;
  int in = 2 * m;
  for (size_t l = 0; l < config_.hidden.size(); ++l) {
    const std::string base = "mlp." + std::to_string(l);
    store_.add(base + ".weight", in, config_.hidden[l]);
    store_.add(base + ".bias", 1, config_.hidden[l]);
    in = config_.hidden[l];
  }
  store_.add("mlp.out.weight", in, m);
  store_.add("mlp.out.bias", 1, m);
}

template <typename Scalar>
void MlpModel<Scalar>::init_parameters(std::uint64_t seed) {
  init_store(store_, seed);
}

template <typename Scalar>
ad::Var<Scalar> MlpModel<Scalar>::forward(
    ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
    const dataprep::RangeAngleSequence& input) const {
  const int m = config_.waypoint_count - 1;
  if (input.size() != m)
    raise(ErrorCode::SizeMismatch,
          "this network is fixed to " + std::to_string(m + 1) +
              " waypoints, got " + std::to_string(input.size() + 1));
  ad::Mat<Scalar> flat(1, 2 * m);
  for (int i = 0; i < m; ++i) {
    flat(0, 2 * i) = Scalar(input.ranges[i]);
    flat(0, 2 * i + 1) = Scalar(input.angles[i]);
  }
  auto x = ad::constant(g, std::move(flat));
  for (size_t l = 0; l < config_.hidden.size(); ++l) {
    x = affine(x, p, "mlp." + std::to_string(l));
    x = (config_.activation == "gelu") ? ad::gelu(x) : ad::relu(x);
  }
  auto out = affine(x, p, "mlp.out");
  check_finite(out, "feedforward output");
  return ad::transpose(out);  // m x 1, matching the sequence model's shape
}

template <typename Scalar>
std::vector<double> MlpModel<Scalar>::predict(
    const dataprep::RangeAngleSequence& input, AttentionRecord*) const {
  ad::Graph<Scalar> g;
  auto bound = bind_params(g, store_, false);
  auto out = forward(g, bound, input);
  std::vector<double> raw(out.rows());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    raw[i] = static_cast<double>(out.value()(i, 0));
  return normalize_output(raw);
}

// ---------------------------------------------------------------------------
// MlpBank

void MlpBank::add(int waypoint_count, std::shared_ptr<FractionPredictor> model) {
  models_[waypoint_count] = std::move(model);
}

bool MlpBank::has_waypoint_count(int n) const { return models_.count(n) > 0; }

std::vector<int> MlpBank::waypoint_counts() const {
  std::vector<int> out;
  for (const auto& [n, _] : models_) out.push_back(n);
  return out;
}

bool MlpBank::accepts_length(int m) const {
  return models_.count(m + 1) > 0;
}

std::vector<double> MlpBank::predict(const dataprep::RangeAngleSequence& input,
                                     AttentionRecord* attention) const {
  auto it = models_.find(input.size() + 1);
  if (it == models_.end())
    raise(ErrorCode::SizeMismatch,
          "no fixed-size network for " + std::to_string(input.size() + 1) +
              " waypoints");
  return it->second->predict(input, attention);
}

// ---------------------------------------------------------------------------
// Training

namespace {

template <typename Scalar>
ad::Var<Scalar> loss_node(ad::Graph<Scalar>& g, ad::Var<Scalar> predictions,
                          const std::vector<double>& target, bool cumulative) {
  ad::Mat<Scalar> t(target.size(), 1);
  for (size_t i = 0; i < target.size(); ++i) t(i, 0) = Scalar(target[i]);
  auto diff = ad::sub(predictions, ad::constant(g, std::move(t)));
  if (cumulative) diff = ad::cumsum_rows(diff);
  return ad::abs_sum(diff);
}

template <typename Scalar>
std::vector<ad::Mat<Scalar>> snapshot_values(const ParamStore<Scalar>& store) {
  std::vector<ad::Mat<Scalar>> values;
  values.reserve(store.tensors().size());
  for (const auto& t : store.tensors()) values.push_back(t.value);
  return values;
}

template <typename Scalar>
void restore_values(ParamStore<Scalar>& store,
                    const std::vector<ad::Mat<Scalar>>& values) {
  auto& tensors = store.tensors();
  for (size_t i = 0; i < tensors.size(); ++i) tensors[i].value = values[i];
}

template <typename Scalar>
void optimizer_step(ParamStore<Scalar>& store, const TrainConfig& cfg,
                    double lr_now, std::int64_t step) {
  const Scalar b1 = Scalar(0.9), b2 = Scalar(0.999), eps = Scalar(1e-8);
  const Scalar lr = Scalar(lr_now);
  if (cfg.optimizer == "adam") {
    const Scalar c1 = Scalar(1) - Scalar(std::pow(0.9, double(step)));
    const Scalar c2 = Scalar(1) - Scalar(std::pow(0.999, double(step)));
    for (auto& t : store.tensors()) {
      t.adam_m = b1 * t.adam_m + (Scalar(1) - b1) * t.grad;
      t.adam_v =
          (b2 * t.adam_v.array() + (Scalar(1) - b2) * t.grad.array().square())
              .matrix();
      auto m_hat = t.adam_m.array() / c1;
      auto v_hat = t.adam_v.array() / c2;
      t.value.array() -= lr * m_hat / (v_hat.sqrt() + eps);
    }
  } else {
    for (auto& t : store.tensors()) t.value -= lr * t.grad;
  }
}

template <typename Scalar, typename ForwardLoss>
TrainResult train_impl(ParamStore<Scalar>& store,
                       const std::vector<dataprep::LabeledSample>& train_in,
                       const std::vector<dataprep::LabeledSample>& val_in,
                       const TrainConfig& cfg, ForwardLoss&& forward_loss) {
  if (cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.learning_rate > 0.0))
    raise(ErrorCode::BadInput, "training needs positive rates and sizes");
  std::vector<const dataprep::LabeledSample*> train_set, val_set;
  for (const auto& s : train_in)
    if (s.converged || cfg.include_unconverged) train_set.push_back(&s);
  for (const auto& s : val_in)
    if (s.converged || cfg.include_unconverged) val_set.push_back(&s);
  if (train_set.empty())
    raise(ErrorCode::BadInput, "no usable training samples");

  auto mean_loss = [&](const std::vector<const dataprep::LabeledSample*>& set) {
    double total = 0.0;
    for (const auto* s : set) {
      ad::Graph<Scalar> g;
      auto bound = bind_params(g, store, false);
      auto loss = forward_loss(g, bound, *s);
      total += static_cast<double>(loss.value()(0, 0));
    }
    return set.empty() ? 0.0 : total / set.size();
  };

  TrainResult res;
  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const std::int64_t total_steps =
      std::max<std::int64_t>(1, std::int64_t(cfg.epochs) *
                                    ((train_set.size() + cfg.batch_size - 1) /
                                     cfg.batch_size));
  std::vector<ad::Mat<Scalar>> last_good = snapshot_values(store);
  std::vector<ad::Mat<Scalar>> best;
  res.best_validation = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const size_t end = std::min(order.size(), at + cfg.batch_size);
      store.zero_grad();
      double batch_loss = 0.0;
      for (size_t i = at; i < end; ++i) {
        ad::Graph<Scalar> g;
        auto bound = bind_params(g, store, true);
        auto loss = forward_loss(g, bound, *train_set[order[i]]);
        g.backward(loss.id);
        accumulate_bound_grads(bound, store);
        batch_loss += static_cast<double>(loss.value()(0, 0));
      }
      const double inv = 1.0 / double(end - at);
      for (auto& t : store.tensors()) t.grad *= Scalar(inv);
      ++res.steps;
      double lr = cfg.learning_rate;
      if (cfg.schedule == "cosine")
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * double(res.steps) /
                                    double(total_steps)));
      optimizer_step(store, cfg, lr, res.steps);
      epoch_loss += batch_loss;
      seen += end - at;
    }
    epoch_loss /= double(seen);

    if (!std::isfinite(epoch_loss) || !store.all_finite()) {
      restore_values(store, last_good);
      res.diverged = true;
      break;
    }
    last_good = snapshot_values(store);

    const double val_loss = val_set.empty() ? epoch_loss : mean_loss(val_set);
    res.history.push_back({epoch_loss, val_loss});
    if (val_loss < res.best_validation) {
      res.best_validation = val_loss;
      res.best_epoch = epoch;
      best = snapshot_values(store);
    }
  }

  if (!best.empty()) restore_values(store, best);
  return res;
}

}  // namespace

template <typename Scalar>
TrainResult train(TransformerModel<Scalar>& model,
                  const std::vector<dataprep::LabeledSample>& train_samples,
                  const std::vector<dataprep::LabeledSample>& val_samples,
                  const TrainConfig& cfg) {
  return train_impl(
      model.params(), train_samples, val_samples, cfg,
      [&](ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
          const dataprep::LabeledSample& s) {
        auto pred = model.forward(g, p, s.input, zero_prepended(s.fractions),
                                  nullptr);
        return loss_node(g, pred, s.fractions, cfg.cumulative_loss);
      });
}

template <typename Scalar>
TrainResult train_mlp(MlpModel<Scalar>& model,
                      const std::vector<dataprep::LabeledSample>& train_samples,
                      const std::vector<dataprep::LabeledSample>& val_samples,
                      const TrainConfig& cfg) {
  const int m = model.config().waypoint_count - 1;
  auto fits = [m](const dataprep::LabeledSample& s) {
    return s.input.size() == m;
  };
  std::vector<dataprep::LabeledSample> tr, va;
  for (const auto& s : train_samples)
    if (fits(s)) tr.push_back(s);
  for (const auto& s : val_samples)
    if (fits(s)) va.push_back(s);
  return train_impl(model.params(), tr, va, cfg,
                    [&](ad::Graph<Scalar>& g, const BoundParams<Scalar>& p,
                        const dataprep::LabeledSample& s) {
                      auto pred = model.forward(g, p, s.input);
                      return loss_node(g, pred, s.fractions,
                                       cfg.cumulative_loss);
                    });
}

template <typename Scalar>
double evaluate_loss(const TransformerModel<Scalar>& model,
                     const std::vector<dataprep::LabeledSample>& samples,
                     bool cumulative_loss) {
  double total = 0.0;
  size_t count = 0;
  for (const auto& s : samples) {
    auto out = model.forward_teacher_forced(s.input, s.fractions, false);
    total += sequence_loss(out.predictions, s.fractions, cumulative_loss);
    ++count;
  }
  return count ? total / count : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["embed_dim"] = c.embed_dim;
  j["num_heads"] = c.num_heads;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["ffn_dim"] = c.ffn_dim;
  j["max_seq_len"] = c.max_seq_len;
  j["dropout"] = c.dropout;
  j["activation"] = c.activation;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.activation = j.at("activation").get<std::string>();
  return c;
}

json meta_to_json(const CheckpointMeta& m) {
  json j;
  j["seed"] = m.seed;
  j["dataset_digest"] = m.dataset_digest;
  j["epochs_trained"] = m.epochs_trained;
  j["best_validation"] = m.best_validation;
  j["extra"] = m.extra;
  return j;
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  if (j.is_null()) return m;
  m.seed = j.value("seed", std::uint64_t{0});
  m.dataset_digest = j.value("dataset_digest", std::string{});
  m.epochs_trained = j.value("epochs_trained", 0);
  m.best_validation = j.value("best_validation", 0.0);
  if (j.contains("extra"))
    m.extra = j.at("extra").get<std::map<std::string, std::string>>();
  return m;
}

template <typename Scalar>
void write_blob(const ParamStore<Scalar>& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot write parameter blob: " + path);
  for (const auto& t : store.tensors())
    out.write(reinterpret_cast<const char*>(t.value.data()),
              std::streamsize(sizeof(Scalar)) * t.value.size());
}

template <typename Scalar>
void read_blob(ParamStore<Scalar>& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot read parameter blob: " + path);
  for (auto& t : store.tensors()) {
    in.read(reinterpret_cast<char*>(t.value.data()),
            std::streamsize(sizeof(Scalar)) * t.value.size());
    if (!in) raise(ErrorCode::Io, "parameter blob truncated: " + path);
  }
  char extra;
  if (in.read(&extra, 1))
    raise(ErrorCode::Io, "parameter blob has trailing bytes: " + path);
}

template <typename Scalar>
json shapes_json(const ParamStore<Scalar>& store) {
  json arr = json::array();
  for (const auto& t : store.tensors()) {
    json e;
    e["name"] = t.name;
    e["rows"] = t.value.rows();
    e["cols"] = t.value.cols();
    arr.push_back(std::move(e));
  }
  return arr;
}

template <typename Scalar>
void check_shapes(const ParamStore<Scalar>& store, const json& shapes,
                  const std::string& path) {
  if (shapes.size() != store.tensors().size())
    raise(ErrorCode::Io, "checkpoint parameter list mismatch: " + path);
  for (size_t i = 0; i < store.tensors().size(); ++i) {
    const auto& t = store.tensors()[i];
    const auto& e = shapes[i];
    if (e.at("name").get<std::string>() != t.name ||
        e.at("rows").get<Eigen::Index>() != t.value.rows() ||
        e.at("cols").get<Eigen::Index>() != t.value.cols())
      raise(ErrorCode::Io, "checkpoint shape mismatch at " + t.name);
  }
}

std::string blob_path_for(const std::string& json_path,
                          const std::string& blob_name) {
  return (std::filesystem::path(json_path).parent_path() / blob_name).string();
}

json load_manifest(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) raise(ErrorCode::Io, "cannot open checkpoint: " + json_path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    raise(ErrorCode::Io, "checkpoint manifest is not valid JSON: " + json_path);
  if (j.value("version", 0) != 1)
    raise(ErrorCode::Io, "unsupported checkpoint version in " + json_path);
  return j;
}

template <typename Scalar>
constexpr Precision precision_of() {
  return sizeof(Scalar) == 4 ? Precision::F32 : Precision::F64;
}

}  // namespace

template <typename Scalar>
void save_transformer(const TransformerModel<Scalar>& model,
                      const std::string& json_path, const CheckpointMeta& meta) {
  const std::string blob_name =
      std::filesystem::path(json_path).stem().string() + ".bin";
  json j;
  j["version"] = 1;
  j["kind"] = "transformer";
  j["precision"] = precision_name(precision_of<Scalar>());
  j["layout"] = "col-major";
  j["config"] = config_to_json(model.config());
  j["config_digest"] = config_digest(model.config());
  j["params"] = shapes_json(model.params());
  j["blob"] = blob_name;
  j["training"] = meta_to_json(meta);
  std::ofstream out(json_path);
  if (!out) raise(ErrorCode::Io, "cannot write checkpoint: " + json_path);
  out << j.dump(2) << '\n';
  write_blob(model.params(), blob_path_for(json_path, blob_name));
}

template <typename Scalar>
TransformerModel<Scalar> load_transformer(const std::string& json_path) {
  json j = load_manifest(json_path);
  if (j.value("kind", "") != "transformer")
    raise(ErrorCode::Io, "checkpoint is not a transformer: " + json_path);
  if (precision_from_name(j.at("precision").get<std::string>()) !=
      precision_of<Scalar>())
    raise(ErrorCode::Io, "checkpoint precision mismatch: " + json_path);
  TransformerModel<Scalar> model(config_from_json(j.at("config")));
  check_shapes(model.params(), j.at("params"), json_path);
  read_blob(model.params(),
            blob_path_for(json_path, j.at("blob").get<std::string>()));
  return model;
}

template <typename Scalar>
void save_mlp(const MlpModel<Scalar>& model, const std::string& json_path,
              const CheckpointMeta& meta) {
  const std::string blob_name =
      std::filesystem::path(json_path).stem().string() + ".bin";
  json j;
  j["version"] = 1;
  j["kind"] = "mlp";
  j["precision"] = precision_name(precision_of<Scalar>());
  j["layout"] = "col-major";
  j["config"]["waypoint_count"] = model.config().waypoint_count;
  j["config"]["hidden"] = model.config().hidden;
  j["config"]["activation"] = model.config().activation;
  j["params"] = shapes_json(model.params());
  j["blob"] = blob_name;
  j["training"] = meta_to_json(meta);
  std::ofstream out(json_path);
  if (!out) raise(ErrorCode::Io, "cannot write checkpoint: " + json_path);
  out << j.dump(2) << '\n';
  write_blob(model.params(), blob_path_for(json_path, blob_name));
}

template <typename Scalar>
MlpModel<Scalar> load_mlp(const std::string& json_path) {
  json j = load_manifest(json_path);
  if (j.value("kind", "") != "mlp")
    raise(ErrorCode::Io, "checkpoint is not an mlp: " + json_path);
  if (precision_from_name(j.at("precision").get<std::string>()) !=
      precision_of<Scalar>())
    raise(ErrorCode::Io, "checkpoint precision mismatch: " + json_path);
  MlpConfig cfg;
  cfg.waypoint_count = j.at("config").at("waypoint_count").get<int>();
  cfg.hidden = j.at("config").at("hidden").get<std::vector<int>>();
  cfg.activation = j.at("config").at("activation").get<std::string>();
  MlpModel<Scalar> model(cfg);
  check_shapes(model.params(), j.at("params"), json_path);
  read_blob(model.params(),
            blob_path_for(json_path, j.at("blob").get<std::string>()));
  return model;
}

CheckpointInfo checkpoint_info(const std::string& json_path) {
  json j = load_manifest(json_path);
  CheckpointInfo info;
  info.kind = j.value("kind", "");
  info.precision = precision_from_name(j.at("precision").get<std::string>());
  info.config_digest = j.value("config_digest", "");
  info.meta = meta_from_json(j.value("training", json{}));
  return info;
}

std::unique_ptr<FractionPredictor> load_predictor(const std::string& json_path) {
  const CheckpointInfo info = checkpoint_info(json_path);
  if (info.kind == "transformer") {
    if (info.precision == Precision::F32)
      return std::make_unique<TransformerModel<float>>(
          load_transformer<float>(json_path));
    return std::make_unique<TransformerModel<double>>(
        load_transformer<double>(json_path));
  }
  if (info.kind == "mlp") {
    if (info.precision == Precision::F32)
      return std::make_unique<MlpModel<float>>(load_mlp<float>(json_path));
    return std::make_unique<MlpModel<double>>(load_mlp<double>(json_path));
  }
  raise(ErrorCode::Io, "unknown checkpoint kind in " + json_path);
}

void dump_attention_csv(const AttentionRecord& record, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto write_map = [&](const std::string& name, const Eigen::MatrixXd& m) {
    std::ofstream out(fs::path(dir) / name);
    if (!out) raise(ErrorCode::Io, "cannot write attention map " + name);
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (j) out << ',';
        out << m(i, j);
      }
      out << '\n';
    }
  };
  for (size_t l = 0; l < record.cross.size(); ++l) {
    const auto& heads = record.cross[l];
    if (heads.empty()) continue;
    Eigen::MatrixXd mean =
        Eigen::MatrixXd::Zero(heads[0].rows(), heads[0].cols());
    for (size_t h = 0; h < heads.size(); ++h) {
      write_map("cross_l" + std::to_string(l) + "_h" + std::to_string(h) +
                    ".csv",
                heads[h]);
      mean += heads[h];
    }
    mean /= double(heads.size());
    write_map("cross_l" + std::to_string(l) + "_mean.csv", mean);
  }
}

// ---------------------------------------------------------------------------
// Explicit instantiations

template class ParamStore<float>;
template class ParamStore<double>;
template struct BoundParams<float>;
template struct BoundParams<double>;
template BoundParams<float> bind_params(ad::Graph<float>&,
                                        const ParamStore<float>&, bool);
template BoundParams<double> bind_params(ad::Graph<double>&,
                                         const ParamStore<double>&, bool);
template void accumulate_bound_grads(const BoundParams<float>&,
                                     ParamStore<float>&);
template void accumulate_bound_grads(const BoundParams<double>&,
                                     ParamStore<double>&);
template class TransformerModel<float>;
template class TransformerModel<double>;
template class MlpModel<float>;
template class MlpModel<double>;
template TrainResult train(TransformerModel<float>&,
                           const std::vector<dataprep::LabeledSample>&,
                           const std::vector<dataprep::LabeledSample>&,
                           const TrainConfig&);
template TrainResult train(TransformerModel<double>&,
                           const std::vector<dataprep::LabeledSample>&,
                           const std::vector<dataprep::LabeledSample>&,
                           const TrainConfig&);
template TrainResult train_mlp(MlpModel<float>&,
                               const std::vector<dataprep::LabeledSample>&,
                               const std::vector<dataprep::LabeledSample>&,
                               const TrainConfig&);
template TrainResult train_mlp(MlpModel<double>&,
                               const std::vector<dataprep::LabeledSample>&,
                               const std::vector<dataprep::LabeledSample>&,
                               const TrainConfig&);
template double evaluate_loss(const TransformerModel<float>&,
                              const std::vector<dataprep::LabeledSample>&,
                              bool);
template double evaluate_loss(const TransformerModel<double>&,
                              const std::vector<dataprep::LabeledSample>&,
                              bool);
template void save_transformer(const TransformerModel<float>&,
                               const std::string&, const CheckpointMeta&);
template void save_transformer(const TransformerModel<double>&,
                               const std::string&, const CheckpointMeta&);
template TransformerModel<float> load_transformer(const std::string&);
template TransformerModel<double> load_transformer(const std::string&);
template void save_mlp(const MlpModel<float>&, const std::string&,
                       const CheckpointMeta&);
template void save_mlp(const MlpModel<double>&, const std::string&,
                       const CheckpointMeta&);
template MlpModel<float> load_mlp(const std::string&);
template MlpModel<double> load_mlp(const std::string&);

}  // namespace snaptraj::model
