#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "test_util.hpp"
#include "vloop/training.hpp"

using namespace vloop;
using testutil::random_tensor;

namespace {

// Small-but-real configuration for fast smoke training.
TrainConfig smoke_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.total_epochs = 3;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.stf_noise_scale = 0.1;
  cfg.threads = 2;
  cfg.model.d_z = 8;
  cfg.model.d_buf = 12;
  cfg.model.k = 3;
  cfg.model.d_p = 8;
  cfg.model.d_s = 4;
  cfg.model.attention_components = 3;
  cfg.model.attention_hidden = 12;
  cfg.model.update_hidden = 24;
  cfg.model.output_hidden = 24;
  cfg.model.enc_channels = {8, 8, 8, 8, 8};
  cfg.model.enc_fc_width = 12;
  return cfg;
}

Corpus smoke_corpus(std::uint64_t seed, int count = 80) {
  CorpusConfig cc;
  cc.utterance_count = count;
  cc.seed = seed;
  return generate_corpus(cc);
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i)) return false;
    if (!a.tensor(i).same_shape(b.tensor(i))) return false;
    for (int j = 0; j < a.tensor(i).numel(); ++j) {
      if (a.tensor(i).at(j) != b.tensor(i).at(j)) return false;
    }
  }
  return true;
}

bool adam_equal(const AdamState& a, const AdamState& b) {
  if (a.step != b.step || a.m.size() != b.m.size()) return false;
  for (std::size_t i = 0; i < a.m.size(); ++i) {
    for (int j = 0; j < a.m[i].numel(); ++j) {
      if (a.m[i].at(j) != b.m[i].at(j)) return false;
      if (a.v[i].at(j) != b.v[i].at(j)) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("semi_teacher_force algebra") {
  Tensor v({3}, {1.0, -2.0, 0.5});
  Tensor zero({3});
  SUBCASE("identical truth and prediction with no noise pass through") {
    Tensor out = semi_teacher_force(v, v, zero);
    for (int i = 0; i < 3; ++i) CHECK(out.at(i) == v.at(i));
  }
  SUBCASE("midpoint of truth and zero prediction") {
    Tensor two_a({3}, {2.0, 4.0, -6.0});
    Tensor out = semi_teacher_force(two_a, zero, zero);
    CHECK(out.at(0) == 1.0);
    CHECK(out.at(1) == 2.0);
    CHECK(out.at(2) == -3.0);
  }
  SUBCASE("noise mean vanishes over many draws") {
    const int n = 100000;
    Rng rng(31);
    Tensor x({2}, {0.4, -0.9});
    Tensor xp({2}, {0.1, 0.2});
    double mean0 = 0.0, mean1 = 0.0;
    Tensor eta({2});
    for (int s = 0; s < n; ++s) {
      rng.fill_normal(eta.vec(), 1.0);
      Tensor out = semi_teacher_force(x, xp, eta);
      mean0 += out.at(0) - 0.5 * (x.at(0) + xp.at(0));
      mean1 += out.at(1) - 0.5 * (x.at(1) + xp.at(1));
    }
    const double bound = 3.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(mean0 / n) < bound);
    CHECK(std::fabs(mean1 / n) < bound);
  }
}

TEST_CASE("adam basics") {
  ParamSet params;
  const int w = params.add("w", Tensor({3}, {1.0, -2.0, 3.0}));
  AdamState state = AdamState::zeros_like(params);

  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<Tensor> grads = {Tensor({3})};
    adam_step(params, grads, state, 0.1);
    CHECK(params.tensor(w).at(0) == 1.0);
    CHECK(params.tensor(w).at(1) == -2.0);
    CHECK(params.tensor(w).at(2) == 3.0);
  }
  SUBCASE("first step moves each parameter by about lr against the gradient") {
    std::vector<Tensor> grads = {Tensor({3}, {0.5, -0.25, 4.0})};
    adam_step(params, grads, state, 0.01);
    CHECK(params.tensor(w).at(0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(params.tensor(w).at(1) == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    CHECK(params.tensor(w).at(2) == doctest::Approx(3.0 - 0.01).epsilon(1e-6));
  }
  SUBCASE("non-finite gradient aborts naming the parameter") {
    Tensor g({3});
    g.at(1) = std::numeric_limits<double>::quiet_NaN();
    std::vector<Tensor> grads = {g};
    try {
      adam_step(params, grads, state, 0.01);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
  }
}

TEST_CASE("adam minimizes a quadratic") {
  Rng rng(32);
  Tensor target = random_tensor({10}, rng);
  ParamSet params;
  params.add("w", random_tensor({10}, rng, 2.0));
  AdamState state = AdamState::zeros_like(params);
  for (int step = 0; step < 2000; ++step) {
    Tensor g({10});
    for (int i = 0; i < 10; ++i) {
      g.at(i) = 2.0 * (params.tensor(0).at(i) - target.at(i));
    }
    adam_step(params, {g}, state, 1e-2);
  }
  double dist = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double d = params.tensor(0).at(i) - target.at(i);
    dist += d * d;
  }
  CHECK(std::sqrt(dist) < 1e-3);
}

TEST_CASE("full-model gradients match finite differences on a tiny model") {
  // d_x=3, d_buf=4, k=2, d_z=2, d_p=4, K_att=2 and a 4-frame utterance.
  ModelConfig mc = ModelConfig::tiny();
  Model model = build_model(mc, 7);
  Rng rng(33);
  Utterance utt;
  utt.phonemes = {1, 3, 5};
  utt.frames = random_tensor({4, mc.d_x}, rng, 0.5);
  utt.hidden_factor = 0.3;

  const double lambda = 0.7;
  const std::uint64_t stream = 12345;
  std::vector<double> analytic;
  example_loss(model, TrainMode::kVaeLoop, utt, lambda, 0.1, stream, true,
               &analytic);

  auto loss_at = [&]() {
    return example_loss(model, TrainMode::kVaeLoop, utt, lambda, 0.1, stream,
                        true, nullptr)
        .optimized_total;
  };

  const double h = 1e-5;
  std::size_t off = 0;
  int bad = 0;
  std::string first_bad;
  for (int p = 0; p < model.params.size(); ++p) {
    if (!model.params.trainable(p)) continue;
    Tensor& t = model.params.tensor(p);
    for (int e = 0; e < t.numel(); ++e, ++off) {
      const double orig = t.at(e);
      t.at(e) = orig + h;
      const double up = loss_at();
      t.at(e) = orig - h;
      const double dn = loss_at();
      t.at(e) = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = analytic[off];
      const double err = std::fabs(a - fd);
      const double rel = err / std::max({std::fabs(a), std::fabs(fd), 1e-300});
      if (err > 1e-6 && rel > 1e-4) {
        ++bad;
        if (first_bad.empty()) {
          first_bad = model.params.name(p) + "[" + std::to_string(e) +
                      "]: analytic " + std::to_string(a) + " fd " +
                      std::to_string(fd);
        }
      }
    }
  }
  INFO(first_bad);
  CHECK(bad == 0);
  CHECK(off == trainable_size(model.params));
}

TEST_CASE("gradients also match in baseline mode") {
  ModelConfig mc = ModelConfig::tiny();
  Model model = build_model(mc, 8);
  Rng rng(34);
  Utterance utt;
  utt.phonemes = {0, 2};
  utt.frames = random_tensor({4, mc.d_x}, rng, 0.5);

  std::vector<double> analytic;
  example_loss(model, TrainMode::kBaselineNoZ, utt, 1.0, 0.0, 99, true, &analytic);

  const double h = 1e-5;
  std::size_t off = 0;
  int bad = 0;
  for (int p = 0; p < model.params.size(); ++p) {
    if (!model.params.trainable(p)) continue;
    Tensor& t = model.params.tensor(p);
    for (int e = 0; e < t.numel(); ++e, ++off) {
      const double orig = t.at(e);
      t.at(e) = orig + h;
      const double up = example_loss(model, TrainMode::kBaselineNoZ, utt, 1.0,
                                     0.0, 99, true, nullptr)
                            .optimized_total;
      t.at(e) = orig - h;
      const double dn = example_loss(model, TrainMode::kBaselineNoZ, utt, 1.0,
                                     0.0, 99, true, nullptr)
                            .optimized_total;
      t.at(e) = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = analytic[off];
      const double err = std::fabs(a - fd);
      if (err > 1e-6 && err / std::max(std::fabs(a), std::fabs(fd)) > 1e-4) ++bad;
    }
  }
  CHECK(bad == 0);
}

TEST_CASE("train config round-trips through text") {
  TrainConfig cfg = smoke_config(17);
  cfg.anneal_fraction = 0.25;
  cfg.stf_noise_scale = 0.05;
  TrainConfig back = TrainConfig::from_text(cfg.canonical_text());
  CHECK(back.canonical_text() == cfg.canonical_text());

  CHECK_THROWS_AS(TrainConfig::from_text("mode=vae-loop\nbogus_key=1\n"),
                  FormatError);
}

TEST_CASE("training is deterministic and reduces the loss") {
  Corpus corpus = smoke_corpus(41);
  SplitIndices s = split(corpus, 41);
  TrainConfig cfg = smoke_config(42);
  cfg.total_epochs = 4;

  TrainResult a = train(cfg, corpus, s);
  TrainResult b = train(cfg, corpus, s);
  CHECK_FALSE(a.diverged);
  CHECK(params_equal(a.final_state.params, b.final_state.params));
  CHECK(adam_equal(a.final_state.adam, b.final_state.adam));
  CHECK(a.final_state.epoch == 4);

  // First-epoch training loss above last-epoch training loss.
  double first = -1.0, last = -1.0;
  for (const LogRow& row : a.log) {
    if (row.split != "train") continue;
    if (first < 0.0) first = row.loss.total;
    last = row.loss.total;
  }
  CHECK(last < first);
}

TEST_CASE("baseline mode freezes the encoder and reports no KL") {
  Corpus corpus = smoke_corpus(43);
  SplitIndices s = split(corpus, 43);
  TrainConfig cfg = smoke_config(44);
  cfg.mode = TrainMode::kBaselineNoZ;
  cfg.total_epochs = 2;

  Model initial = build_model(cfg.model, Rng::derive(cfg.seed, 0x11AB));
  initial.params.quantize_to_f32();
  TrainResult r = train(cfg, corpus, s);
  CHECK_FALSE(r.diverged);

  for (std::size_t l = 0; l < r.final_state.params.size(); ++l) {
    const int i = static_cast<int>(l);
    const std::string& name = r.final_state.params.name(i);
    if (name.rfind("enc.", 0) == 0) {
      const Tensor& trained = r.final_state.params.tensor(i);
      const Tensor& orig = initial.params.tensor(initial.params.find(name));
      for (int j = 0; j < trained.numel(); ++j) {
        CHECK(trained.at(j) == orig.at(j));
      }
    }
  }

  for (const LogRow& row : r.log) CHECK_FALSE(row.loss.has_kl());

  EvalOptions opts;
  opts.eta_scale = 0.0;
  opts.seed = 5;
  Model m = model_from_checkpoint(r.final_state);
  LossBreakdown eval1 = evaluate(m, cfg.mode, corpus, s.test, opts);
  CHECK_FALSE(eval1.has_kl());
  CHECK(eval1.total == eval1.rec_error);
}

TEST_CASE("evaluate is reproducible under a fixed seed") {
  Corpus corpus = smoke_corpus(45);
  SplitIndices s = split(corpus, 45);
  TrainConfig cfg = smoke_config(46);
  cfg.total_epochs = 1;
  TrainResult r = train(cfg, corpus, s);
  Model m = model_from_checkpoint(r.final_state);

  EvalOptions opts;
  opts.eta_scale = 0.1;
  opts.seed = 77;
  LossBreakdown a = evaluate(m, cfg.mode, corpus, s.test, opts);
  LossBreakdown b = evaluate(m, cfg.mode, corpus, s.test, opts);
  CHECK(a.rec_error == b.rec_error);
  CHECK(a.kl_term == b.kl_term);
  CHECK(a.total == b.total);

  opts.seed = 78;
  LossBreakdown c = evaluate(m, cfg.mode, corpus, s.test, opts);
  CHECK(a.rec_error != c.rec_error);
}

TEST_CASE("checkpoint save/load/resume reproduces training bit-exactly") {
  Corpus corpus = smoke_corpus(47);
  SplitIndices s = split(corpus, 47);

  TrainConfig full_cfg = smoke_config(48);
  full_cfg.total_epochs = 5;
  TrainResult full = train(full_cfg, corpus, s);
  CHECK_FALSE(full.diverged);

  // Same configuration, stopped after three epochs.
  TrainResult part = train(full_cfg, corpus, s, nullptr, nullptr, 3);

  const std::string path = "test_resume.vlck";
  save_checkpoint(path, part.final_state);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(params_equal(loaded.params, part.final_state.params));
  CHECK(adam_equal(loaded.adam, part.final_state.adam));
  CHECK(loaded.epoch == 3);
  CHECK(loaded.config.canonical_text() == full_cfg.canonical_text());

  TrainResult resumed = train(full_cfg, corpus, s, &loaded);
  CHECK(params_equal(resumed.final_state.params, full.final_state.params));
  CHECK(adam_equal(resumed.final_state.adam, full.final_state.adam));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corrupt files") {
  Corpus corpus = smoke_corpus(49, 60);
  SplitIndices s = split(corpus, 49);
  TrainConfig cfg = smoke_config(50);
  cfg.total_epochs = 1;
  TrainResult r = train(cfg, corpus, s);
  const std::string path = "test_ckpt_corrupt.vlck";
  save_checkpoint(path, r.final_state);

  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  f.write("ZZZZ", 4);
  f.close();
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("divergent training aborts and keeps the last good state") {
  Corpus corpus = smoke_corpus(51, 60);
  SplitIndices s = split(corpus, 51);
  TrainConfig cfg = smoke_config(52);
  cfg.total_epochs = 4;
  cfg.learning_rate = 1e18;  // guaranteed blow-up
  TrainResult r = train(cfg, corpus, s);
  CHECK(r.diverged);
  CHECK_FALSE(r.divergence_message.empty());
  // The kept checkpoint is from an epoch boundary and is finite.
  for (int i = 0; i < r.final_state.params.size(); ++i) {
    CHECK(r.final_state.params.tensor(i).all_finite());
  }
}

TEST_CASE("speaker bucketing for the labeled baseline") {
  CHECK(speaker_index(TrainMode::kVaeLoop, 4, 0.9) == 0);
  CHECK(speaker_index(TrainMode::kBaselineLabeled, 2, -0.5) == 0);
  CHECK(speaker_index(TrainMode::kBaselineLabeled, 2, 0.5) == 1);
  CHECK(speaker_index(TrainMode::kBaselineLabeled, 2, 1.0) == 1);
  CHECK(speaker_index(TrainMode::kBaselineLabeled, 4, -1.0) == 0);
}

TEST_CASE("labeled baseline trains") {
  Corpus corpus = smoke_corpus(53, 70);
  SplitIndices s = split(corpus, 53);
  TrainConfig cfg = smoke_config(54);
  cfg.mode = TrainMode::kBaselineLabeled;
  cfg.model.n_speakers = 2;
  cfg.total_epochs = 2;
  TrainResult r = train(cfg, corpus, s);
  CHECK_FALSE(r.diverged);
  CHECK(r.log.size() == 4);
}

TEST_CASE("train log csv format") {
  LogRow row;
  row.epoch = 3;
  row.loss = total_loss(1.5, 0.25, 0.5);
  row.split = "train";
  CHECK(log_csv_header() == "epoch,lambda,rec_error,kl_term,total,split");
  CHECK(log_csv_row(row) == "3,0.5,1.5,0.25,1.625,train");

  LogRow na;
  na.epoch = 0;
  na.loss = total_loss(2.0, kl_not_applicable(), 1.0);
  na.split = "validation";
  CHECK(log_csv_row(na) == "0,1,2,na,2,validation");
}
