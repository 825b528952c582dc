#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "snaptraj/dataprep.hpp"
#include "snaptraj/model.hpp"

using namespace snaptraj;
using namespace snaptraj::model;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.ffn_dim = 16;
  cfg.max_seq_len = 32;
  cfg.activation = "gelu";
  return cfg;
}

dataprep::RangeAngleSequence make_input(int m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.15, 1.0);
  std::uniform_real_distribution<double> a(-2.5, 2.5);
  dataprep::RangeAngleSequence seq;
  seq.ranges.resize(m);
  seq.angles.resize(m);
  double mx = 0.0;
  for (int i = 0; i < m; ++i) {
    seq.ranges[i] = u(rng);
    seq.angles[i] = (i == 0) ? 0.0 : a(rng);
    mx = std::max(mx, seq.ranges[i]);
  }
  for (double& d : seq.ranges) d /= mx;
  return seq;
}

std::vector<double> make_target(int m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::vector<double> t(m);
  double sum = 0.0;
  for (double& v : t) {
    v = u(rng);
    sum += v;
  }
  for (double& v : t) v /= sum;
  return t;
}

std::vector<dataprep::LabeledSample> quick_dataset(int curves,
                                                   std::vector<int> ns,
                                                   std::uint64_t seed) {
  dataprep::SynthConfig synth;
  synth.seed = seed;
  synth.count = curves;
  timealloc::BgdConfig bgd;
  bgd.max_iters = 12;
  return dataprep::build_dataset(dataprep::synth_curves(synth), ns, {}, bgd, 2);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Per-group relative error between reverse-mode gradients and central
// finite differences of the summed teacher-forced loss.  The difference
// quotient is evaluated on a float64 twin carrying the same parameter
// values, so the reference is not drowned in forward-pass rounding; the
// denominator is floored at a small multiple of the largest group norm so
// that structurally zero-gradient groups (key biases cancel inside softmax)
// compare in absolute terms.
template <typename Scalar>
double max_group_gradient_error(TransformerModel<Scalar>& net,
                                double h = 1e-6) {
  std::vector<dataprep::RangeAngleSequence> inputs = {make_input(3, 5),
                                                      make_input(4, 6)};
  std::vector<std::vector<double>> targets = {make_target(3, 7),
                                              make_target(4, 8)};

  TransformerModel<double> twin(net.config());
  auto& twin_tensors = twin.params().tensors();
  const auto& tensors = net.params().tensors();
  for (size_t i = 0; i < tensors.size(); ++i)
    twin_tensors[i].value = tensors[i].value.template cast<double>();

  auto total_loss = [&]() {
    double loss = 0.0;
    for (size_t s = 0; s < inputs.size(); ++s) {
      auto out = twin.forward_teacher_forced(inputs[s], targets[s], false);
      loss += sequence_loss(out.predictions, targets[s], false);
    }
    return loss;
  };

  // Reverse-mode gradients under test, accumulated over both samples.
  net.params().zero_grad();
  for (size_t s = 0; s < inputs.size(); ++s) {
    ad::Graph<Scalar> g;
    auto bound = bind_params(g, net.params(), true);
    std::vector<double> dec(targets[s].size());
    dec[0] = 0.0;
    for (size_t i = 0; i + 1 < targets[s].size(); ++i)
      dec[i + 1] = targets[s][i];
    auto pred = net.forward(g, bound, inputs[s], dec, nullptr);
    ad::Mat<Scalar> t(targets[s].size(), 1);
    for (size_t i = 0; i < targets[s].size(); ++i)
      t(i, 0) = Scalar(targets[s][i]);
    auto loss = ad::abs_sum(ad::sub(pred, ad::constant(g, std::move(t))));
    g.backward(loss.id);
    accumulate_bound_grads(bound, net.params());
  }

  std::vector<Eigen::VectorXd> fd_groups, an_groups;
  double global = 0.0;
  for (size_t gi = 0; gi < tensors.size(); ++gi) {
    auto& values = twin_tensors[gi].value;
    Eigen::VectorXd fd(values.size());
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      const double saved = values.data()[i];
      values.data()[i] = saved + h;
      const double up = total_loss();
      values.data()[i] = saved - h;
      const double down = total_loss();
      values.data()[i] = saved;
      fd(i) = (up - down) / (2.0 * h);
    }
    Eigen::VectorXd an(tensors[gi].grad.size());
    for (Eigen::Index i = 0; i < an.size(); ++i)
      an(i) = double(tensors[gi].grad.data()[i]);
    global = std::max({global, an.norm(), fd.norm()});
    fd_groups.push_back(std::move(fd));
    an_groups.push_back(std::move(an));
  }

  double worst = 0.0;
  for (size_t gi = 0; gi < fd_groups.size(); ++gi) {
    const double denom = std::max(
        {an_groups[gi].norm(), fd_groups[gi].norm(), 1e-4 * global, 1e-12});
    worst = std::max(worst, (an_groups[gi] - fd_groups[gi]).norm() / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("positional encoding basics") {
  Eigen::VectorXd at0 = positional_encoding(0, 32);
  for (int i = 0; i < 32; i += 2) {
    CHECK(at0(i) == 0.0);
    CHECK(at0(i + 1) == 1.0);
  }
  for (int pos : {1, 5, 40}) {
    Eigen::VectorXd enc = positional_encoding(pos, 32);
    CHECK(enc.maxCoeff() <= 1.0);
    CHECK(enc.minCoeff() >= -1.0);
  }
  // Rows 0..63 pairwise distinct.
  Eigen::MatrixXd m = positional_encoding_matrix(64, 32);
  for (int a = 0; a < 64; ++a)
    for (int b = a + 1; b < 64; ++b)
      CHECK((m.row(a) - m.row(b)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("parameter count matches the reference configuration exactly") {
  ModelConfig cfg;  // embed 32, 16 heads, 3+3 layers, ffn 256
  CHECK(param_count(cfg) == 139329);

  ModelConfig bigger = cfg;
  bigger.embed_dim = 64;
  bigger.num_heads = 16;
  CHECK(param_count(bigger) > param_count(cfg));

  // Count equals a direct walk of the parameter store.
  TransformerModel<float> net(cfg);
  CHECK(net.params().total_parameters() == 139329);

  ModelConfig toy = toy_config();
  TransformerModel<double> toy_net(toy);
  CHECK(toy_net.params().total_parameters() == param_count(toy));
}

TEST_CASE("input embedding is the positional table under zero weights") {
  TransformerModel<double> net(toy_config());
  net.init_parameters(1);
  for (auto& t : net.params().tensors())
    if (t.name.starts_with("input_embed")) t.value.setZero();
  auto input = make_input(5, 2);
  ad::Mat<double> embedded = net.embed_inputs(input);
  CHECK(embedded.rows() == 5);
  CHECK(embedded.cols() == 8);
  Eigen::MatrixXd pos = positional_encoding_matrix(5, 8);
  CHECK((embedded - pos).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embeddings differ only at the changed position before attention") {
  TransformerModel<double> net(toy_config());
  net.init_parameters(3);
  auto a = make_input(5, 4);
  auto b = a;
  b.angles[2] += 0.4;
  ad::Mat<double> ea = net.embed_inputs(a);
  ad::Mat<double> eb = net.embed_inputs(b);
  for (int i = 0; i < 5; ++i) {
    const double diff = (ea.row(i) - eb.row(i)).cwiseAbs().maxCoeff();
    if (i == 2)
      CHECK(diff > 1e-9);
    else
      CHECK(diff == 0.0);
  }
}

TEST_CASE("teacher-forced outputs respect the causal mask") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(11);
  auto input = make_input(6, 12);
  auto target = make_target(6, 13);

  auto base = net.forward_teacher_forced(input, target, false);
  for (int k = 1; k < 6; ++k) {
    auto changed = target;
    changed[k - 1] += 0.3;  // decoder input position k carries target k-1
    auto out = net.forward_teacher_forced(input, changed, false);
    for (int step = 0; step < k; ++step)
      CHECK(out.predictions[step] ==
            doctest::Approx(base.predictions[step]).epsilon(1e-12));
    CHECK(out.predictions[k] != base.predictions[k]);
  }
}

TEST_CASE("attention rows are probability distributions") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(17);
  auto input = make_input(5, 18);
  auto target = make_target(5, 19);
  auto out = net.forward_teacher_forced(input, target, true);
  REQUIRE(!out.attention.empty());
  auto check_maps = [](const std::vector<std::vector<Eigen::MatrixXd>>& maps) {
    for (const auto& layer : maps)
      for (const auto& head : layer)
        for (Eigen::Index i = 0; i < head.rows(); ++i) {
          CHECK(head.row(i).sum() == doctest::Approx(1.0).epsilon(1e-5));
          CHECK(head.row(i).minCoeff() >= 0.0);
        }
  };
  check_maps(out.attention.encoder_self);
  check_maps(out.attention.decoder_self);
  check_maps(out.attention.cross);
  // Decoder self-attention must not look ahead.
  for (const auto& layer : out.attention.decoder_self)
    for (const auto& head : layer)
      for (Eigen::Index i = 0; i < head.rows(); ++i)
        for (Eigen::Index j = i + 1; j < head.cols(); ++j)
          CHECK(head(i, j) == 0.0);
}

TEST_CASE("fresh model with a fixed seed is deterministic") {
  auto run = [] {
    TransformerModel<float> net(toy_config());
    net.init_parameters(23);
    return net.forward_teacher_forced(make_input(4, 24), make_target(4, 25),
                                      false)
        .predictions;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("autoregressive decode emits a strictly positive simplex point") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(29);
  for (int m : {1, 2, 5, 9}) {
    auto fractions = net.predict(make_input(m, 100 + m));
    REQUIRE(static_cast<int>(fractions.size()) == m);
    double sum = 0.0;
    for (double f : fractions) {
      CHECK(f > 0.0);
      sum += f;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  // A single segment always gets the whole budget.
  auto one = net.predict(make_input(1, 200));
  CHECK(one[0] == 1.0);
}

TEST_CASE("decoding is causal: later targets cannot leak into predictions") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(31);
  auto input = make_input(5, 300);
  // predict() never sees targets at all; two calls agree bit-for-bit.
  auto a = net.predict(input);
  auto b = net.predict(input);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("sequences beyond max_seq_len are rejected, longer-than-training ok") {
  ModelConfig cfg = toy_config();
  cfg.max_seq_len = 12;
  TransformerModel<float> net(cfg);
  net.init_parameters(37);
  // Longer than anything "trained" on but within the positional table.
  auto ok = net.predict(make_input(12, 400));
  CHECK(ok.size() == 12);
  CHECK_THROWS_AS(net.predict(make_input(13, 401)), Error);
}

TEST_CASE("out-of-distribution length still yields a valid simplex") {
  // Mimics training on sizes <= 12 then decoding size 16.
  TransformerModel<float> net(toy_config());
  net.init_parameters(41);
  auto fractions = net.predict(make_input(16, 500));
  REQUIRE(fractions.size() == 16);
  double sum = 0.0;
  for (double f : fractions) {
    CHECK(f > 0.0);
    sum += f;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("normalize_output arithmetic") {
  auto out = normalize_output({2.0, 2.0, 4.0});
  CHECK(out[0] == doctest::Approx(0.25));
  CHECK(out[1] == doctest::Approx(0.25));
  CHECK(out[2] == doctest::Approx(0.5));

  auto same = normalize_output(out);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(same[i] == doctest::Approx(out[i]).epsilon(1e-12));

  const double eps = 1e-4;
  auto clamped = normalize_output({-1.0, 3.0});
  CHECK(clamped[0] == doctest::Approx(eps / (eps + 3.0)));
  CHECK(clamped[1] == doctest::Approx(3.0 / (eps + 3.0)));

  CHECK_THROWS_AS(normalize_output({}), Error);
}

TEST_CASE("loss variants") {
  CHECK(sequence_loss({0.5, 0.5}, {0.5, 0.5}, false) == 0.0);
  CHECK(sequence_loss({0.6, 0.4}, {0.5, 0.5}, false) ==
        doctest::Approx(0.2));
  CHECK(sequence_loss({0.6, 0.4}, {0.5, 0.5}, true) == doctest::Approx(0.1));
  CHECK_THROWS_AS(sequence_loss({0.5}, {0.5, 0.5}, false), Error);
}

TEST_CASE("reverse-mode gradients match finite differences (f32 and f64)") {
  TransformerModel<float> net32(toy_config());
  net32.init_parameters(43);
  CHECK(max_group_gradient_error(net32) < 1e-3);

  TransformerModel<double> net64(toy_config());
  net64.init_parameters(43);
  CHECK(max_group_gradient_error(net64) < 1e-5);
}

TEST_CASE("training overfits a tiny fixture and keeps the best checkpoint") {
  auto samples = quick_dataset(8, {4, 5, 6, 7}, 77);
  REQUIRE(samples.size() == 32);

  ModelConfig cfg = toy_config();
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.activation = "relu";
  TransformerModel<float> net(cfg);
  net.init_parameters(7);

  TrainConfig tc;
  tc.batch_size = 32;  // full batch: one step per epoch
  tc.epochs = 2000;
  tc.learning_rate = 1e-2;
  tc.seed = 7;
  TrainResult res = train(net, samples, {}, tc);
  REQUIRE(!res.history.empty());
  CHECK(res.steps == 2000);
  CHECK(!res.diverged);
  CHECK(res.history.back().train < 1e-2);
  CHECK(res.best_validation <= res.history.front().validation);
}

TEST_CASE("training is bit-deterministic given a seed") {
  auto samples = quick_dataset(6, {4, 5}, 88);
  auto run = [&] {
    TransformerModel<float> net(toy_config());
    net.init_parameters(3);
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 4;
    tc.seed = 19;
    return train(net, samples, samples, tc);
  };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train == b.history[i].train);
    CHECK(a.history[i].validation == b.history[i].validation);
  }
}

TEST_CASE("checkpoints restore the model bit-for-bit") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(53);
  auto input = make_input(6, 600);
  auto before = net.predict(input);

  const std::string path = temp_path("snaptraj_ckpt_test.json");
  CheckpointMeta meta;
  meta.seed = 53;
  meta.extra["note"] = "fixture";
  save_transformer(net, path, meta);

  auto loaded = load_transformer<float>(path);
  auto after = loaded.predict(input);
  REQUIRE(before.size() == after.size());
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

  CheckpointInfo info = checkpoint_info(path);
  CHECK(info.kind == "transformer");
  CHECK(info.precision == Precision::F32);
  CHECK(info.config_digest == config_digest(net.config()));
  CHECK(info.meta.seed == 53);

  // Wrong precision is refused.
  CHECK_THROWS_AS(load_transformer<double>(path), Error);

  auto erased = load_predictor(path);
  auto again = erased->predict(input);
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == again[i]);

  std::remove(path.c_str());
  std::remove(temp_path("snaptraj_ckpt_test.bin").c_str());
}

TEST_CASE("attention dump writes one csv per layer and head plus the mean") {
  TransformerModel<float> net(toy_config());
  net.init_parameters(59);
  AttentionRecord rec;
  net.predict(make_input(5, 700), &rec);
  REQUIRE(!rec.cross.empty());

  const std::string dir = temp_path("snaptraj_attn_dump");
  dump_attention_csv(rec, dir);
  namespace fs = std::filesystem;
  CHECK(fs::exists(fs::path(dir) / "cross_l0_h0.csv"));
  CHECK(fs::exists(fs::path(dir) / "cross_l0_h1.csv"));
  CHECK(fs::exists(fs::path(dir) / "cross_l0_mean.csv"));
  fs::remove_all(dir);
}

TEST_CASE("fixed-size baseline refuses every other size") {
  MlpConfig cfg;
  cfg.waypoint_count = 8;
  MlpModel<float> mlp(cfg);
  mlp.init_parameters(61);

  auto good = mlp.predict(make_input(7, 800));
  double sum = 0.0;
  for (double f : good) {
    CHECK(f > 0.0);
    sum += f;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_AS(mlp.predict(make_input(6, 801)), Error);
  CHECK_THROWS_AS(mlp.predict(make_input(8, 802)), Error);

  MlpBank bank;
  bank.add(8, std::make_shared<MlpModel<float>>(mlp));
  CHECK(bank.accepts_length(7));
  CHECK(!bank.accepts_length(6));
  CHECK_THROWS_AS(bank.predict(make_input(6, 803)), Error);
}

TEST_CASE("on single-size data the fixed net stays within 2x of the sequence model") {
  auto samples = quick_dataset(150, {6}, 404);
  auto split = dataprep::split_by_curve(samples, 5);
  std::vector<dataprep::LabeledSample> tr, va;
  for (int i : split.train) tr.push_back(samples[i]);
  for (int i : split.validation) va.push_back(samples[i]);

  TrainConfig tc;
  tc.epochs = 300;
  tc.batch_size = 16;
  tc.learning_rate = 3e-3;
  tc.seed = 5;

  ModelConfig arch = toy_config();
  arch.embed_dim = 16;
  arch.ffn_dim = 64;
  arch.activation = "relu";
  TransformerModel<float> net(arch);
  net.init_parameters(5);
  auto seq = train(net, tr, va, tc);

  MlpConfig mcfg;
  mcfg.waypoint_count = 6;
  MlpModel<float> mlp(mcfg);
  mlp.init_parameters(5);
  auto fixed = train_mlp(mlp, tr, va, tc);

  CHECK(fixed.best_validation <= 2.0 * seq.best_validation);
}

TEST_CASE("fixed-size baseline trains with the shared loss") {
  auto samples = quick_dataset(10, {6}, 99);
  REQUIRE(samples.size() == 10);

  MlpConfig cfg;
  cfg.waypoint_count = 6;
  MlpModel<float> mlp(cfg);
  mlp.init_parameters(5);

  TrainConfig tc;
  tc.epochs = 150;
  tc.batch_size = 5;
  tc.learning_rate = 2e-3;
  tc.seed = 5;
  TrainResult res = train_mlp(mlp, samples, samples, tc);
  REQUIRE(!res.history.empty());
  CHECK(res.history.back().train < res.history.front().train);
  CHECK(!res.diverged);

  // Round trip through its checkpoint format.
  const std::string path = temp_path("snaptraj_mlp_ckpt.json");
  save_mlp(mlp, path);
  auto loaded = load_mlp<float>(path);
  auto a = mlp.predict(make_input(5, 900));
  auto b = loaded.predict(make_input(5, 900));
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  std::remove(path.c_str());
  std::remove(temp_path("snaptraj_mlp_ckpt.bin").c_str());
}
