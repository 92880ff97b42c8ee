#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "test_util.hpp"
#include "vloop/synthesis.hpp"

using namespace vloop;
using testutil::random_tensor;

namespace {

Model small_model() {
  ModelConfig cfg;
  cfg.d_z = 6;
  cfg.d_buf = 10;
  cfg.k = 3;
  cfg.d_p = 6;
  cfg.d_s = 4;
  cfg.attention_components = 3;
  cfg.attention_hidden = 10;
  cfg.update_hidden = 16;
  cfg.output_hidden = 16;
  cfg.enc_channels = {6, 6, 6, 6, 6};
  cfg.enc_fc_width = 8;
  return build_model(cfg, 77);
}

}  // namespace

TEST_CASE("sample_prior") {
  Rng rng(1);
  SUBCASE("sigma zero is exactly the origin") {
    Tensor z = sample_prior(8, 0.0, rng);
    CHECK(z.numel() == 8);
    for (int i = 0; i < 8; ++i) CHECK(z.at(i) == 0.0);
  }
  SUBCASE("unit sigma has near-unit per-coordinate variance") {
    const int n = 100000;
    const int d = 4;
    std::vector<double> sum(d, 0.0), sumsq(d, 0.0);
    for (int s = 0; s < n; ++s) {
      Tensor z = sample_prior(d, 1.0, rng);
      for (int i = 0; i < d; ++i) {
        sum[static_cast<std::size_t>(i)] += z.at(i);
        sumsq[static_cast<std::size_t>(i)] += z.at(i) * z.at(i);
      }
    }
    for (int i = 0; i < d; ++i) {
      const double mean = sum[static_cast<std::size_t>(i)] / n;
      const double var = sumsq[static_cast<std::size_t>(i)] / n - mean * mean;
      CHECK(std::fabs(var - 1.0) < 0.05);
    }
  }
  SUBCASE("negative sigma is rejected") {
    CHECK_THROWS_AS(sample_prior(4, -0.1, rng), DimensionError);
  }
}

TEST_CASE("interpolate_z") {
  Tensor z1({3}, {1.0, 2.0, 3.0});
  Tensor z2({3}, {-1.0, 0.0, 5.0});
  SUBCASE("endpoints") {
    Tensor a = interpolate_z(z1, z2, 0.0);
    Tensor b = interpolate_z(z1, z2, 1.0);
    for (int i = 0; i < 3; ++i) {
      CHECK(a.at(i) == z1.at(i));
      CHECK(b.at(i) == z2.at(i));
    }
  }
  SUBCASE("midpoint") {
    Tensor m = interpolate_z(z1, z2, 0.5);
    for (int i = 0; i < 3; ++i) {
      CHECK(m.at(i) == doctest::Approx(0.5 * (z1.at(i) + z2.at(i))).epsilon(1e-15));
    }
  }
  SUBCASE("complementary blends sum to the endpoints") {
    Rng rng(2);
    for (int rep = 0; rep < 20; ++rep) {
      const double alpha = rng.uniform();
      Tensor a = interpolate_z(z1, z2, alpha);
      Tensor b = interpolate_z(z1, z2, 1.0 - alpha);
      for (int i = 0; i < 3; ++i) {
        CHECK(a.at(i) + b.at(i) ==
              doctest::Approx(z1.at(i) + z2.at(i)).epsilon(1e-12));
      }
    }
  }
  SUBCASE("alpha outside [0,1] and shape mismatch are errors") {
    CHECK_THROWS_AS(interpolate_z(z1, z2, -0.01), DimensionError);
    CHECK_THROWS_AS(interpolate_z(z1, z2, 1.01), DimensionError);
    CHECK_THROWS_AS(interpolate_z(z1, Tensor({4}), 0.5), DimensionError);
  }
}

TEST_CASE("synthesize") {
  Model m = small_model();
  Rng rng(3);
  const std::vector<int> phonemes = {1, 5, 3, 2};
  Tensor z = random_tensor({m.cfg.d_z}, rng);
  SynthesisConfig cfg;
  cfg.sigma = 0.0;

  SUBCASE("deterministic given phonemes and z") {
    Tensor a = synthesize(m, phonemes, z, cfg);
    Tensor b = synthesize(m, phonemes, z, cfg);
    REQUIRE(a.same_shape(b));
    for (int i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  }
  SUBCASE("respects the frame cap") {
    Tensor out = synthesize(m, phonemes, z, cfg);
    CHECK(out.dim(0) >= 1);
    CHECK(out.dim(0) <= 4 * static_cast<int>(phonemes.size()));
    CHECK(out.dim(1) == m.cfg.d_x);

    SynthesisConfig capped = cfg;
    capped.max_frames = 3;
    CHECK(synthesize(m, phonemes, z, capped).dim(0) <= 3);
  }
  SUBCASE("empty phonemes are rejected") {
    CHECK_THROWS_AS(synthesize(m, {}, z, cfg), DimensionError);
  }
  SUBCASE("wrong latent width is rejected") {
    CHECK_THROWS_AS(synthesize(m, phonemes, Tensor({2}), cfg), DimensionError);
  }
  SUBCASE("attention trace rows match emitted frames") {
    AttentionTrace trace;
    Tensor out = synthesize(m, phonemes, z, cfg, &trace);
    CHECK(static_cast<int>(trace.weights.size()) == out.dim(0));
    for (const auto& row : trace.weights) {
      CHECK(row.size() == phonemes.size());
      for (double w : row) CHECK(w >= 0.0);
    }
  }
}

TEST_CASE("trajectory export") {
  SUBCASE("constant sequence gives a constant column") {
    Tensor frames = Tensor::full({5, 3}, 1.25);
    auto rows = trajectory(frames, 1);
    REQUIRE(rows.size() == 5);
    for (const auto& [t, v] : rows) CHECK(v == 1.25);
  }
  SUBCASE("row count equals frame count and values are exact") {
    Rng rng(4);
    Tensor frames = random_tensor({13, 4}, rng);
    auto rows = trajectory(frames, 2);
    REQUIRE(static_cast<int>(rows.size()) == 13);
    for (int t = 0; t < 13; ++t) {
      CHECK(rows[static_cast<std::size_t>(t)].first == t);
      CHECK(rows[static_cast<std::size_t>(t)].second == frames.at(t, 2));
    }
  }
  SUBCASE("channel out of range") {
    CHECK_THROWS_AS(trajectory(Tensor({4, 2}), 2), DimensionError);
    CHECK_THROWS_AS(trajectory(Tensor({4, 2}), -1), DimensionError);
  }
  SUBCASE("csv header and row shape") {
    Tensor frames({2, 1}, {0.5, -1.5});
    const std::string csv = trajectory_csv(frames, 0);
    CHECK(csv == "t,value\n0,0.5\n1,-1.5\n");
  }
}

TEST_CASE("sequence file round-trip") {
  Rng rng(5);
  Tensor frames = random_tensor({9, 4}, rng);
  frames.quantize_to_f32();
  const std::string path = "test_seq.vlsq";
  save_sequence(path, frames);
  Tensor loaded = load_sequence(path);
  REQUIRE(loaded.same_shape(frames));
  for (int i = 0; i < frames.numel(); ++i) CHECK(loaded.at(i) == frames.at(i));
  std::remove(path.c_str());
}

TEST_CASE("attention csv format") {
  AttentionTrace trace;
  trace.weights = {{0.25, 0.75}, {0.5, 0.5}};
  const std::string csv = attention_csv(trace);
  CHECK(csv ==
        "step,phoneme_index,weight\n"
        "0,0,0.25\n0,1,0.75\n1,0,0.5\n1,1,0.5\n");
}
