#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "vloop/objective.hpp"

using namespace vloop;
using testutil::random_tensor;

namespace {

// Monte-Carlo oracle: E_q[log q(z) - log p(z)] with z ~ q.
double kl_monte_carlo(const PosteriorParams& post, int samples, Rng& rng) {
  const int d = post.mu.numel();
  double acc = 0.0;
  for (int s = 0; s < samples; ++s) {
    double term = 0.0;
    for (int i = 0; i < d; ++i) {
      const double lv = post.log_var.at(i);
      const double sigma = std::exp(0.5 * lv);
      const double z = post.mu.at(i) + sigma * rng.normal();
      const double dq = (z - post.mu.at(i)) / sigma;
      const double log_q = -0.5 * (lv + dq * dq);
      const double log_p = -0.5 * z * z;
      term += log_q - log_p;
    }
    acc += term;
  }
  return acc / samples;
}

}  // namespace

TEST_CASE("kl closed form reference points") {
  PosteriorParams post;
  post.mu = Tensor({4});
  post.log_var = Tensor({4});
  CHECK(kl_gaussian_prior(post) == 0.0);

  post.mu = Tensor({1}, {1.0});
  post.log_var = Tensor({1}, {0.0});
  CHECK(kl_gaussian_prior(post) == 0.5);
}

TEST_CASE("kl closed form matches a 1e6-sample Monte-Carlo estimate") {
  Rng rng(21);
  PosteriorParams post;
  post.mu = random_tensor({4}, rng, 0.8);
  post.log_var = random_tensor({4}, rng, 0.6);
  const double closed = kl_gaussian_prior(post);
  Rng mc(22);
  const double estimate = kl_monte_carlo(post, 1000000, mc);
  CHECK(std::fabs(closed - estimate) / std::fabs(closed) < 0.01);
}

TEST_CASE("kl is non-negative and zero only at the prior") {
  Rng rng(23);
  for (int rep = 0; rep < 200; ++rep) {
    PosteriorParams post;
    post.mu = random_tensor({6}, rng);
    post.log_var = random_tensor({6}, rng);
    CHECK(kl_gaussian_prior(post) >= 0.0);
    CHECK(kl_gaussian_prior(post) > 0.0);  // generic point
  }
}

TEST_CASE("kl graph equals the plain closed form and differentiates") {
  Rng rng(24);
  Tensor mu = random_tensor({5}, rng);
  Tensor lv = random_tensor({5}, rng, 0.5);
  PosteriorParams plain{mu, lv};

  Tape tape;
  PosteriorVars post{tape.leaf(mu, true), tape.leaf(lv, true)};
  Var kl = kl_gaussian_prior_graph(tape, post);
  CHECK(tape.value(kl).value() == doctest::Approx(kl_gaussian_prior(plain)).epsilon(1e-14));

  auto report = testutil::check_gradients(
      {mu, lv}, [](Tape& t, const std::vector<Var>& in) {
        return kl_gaussian_prior_graph(t, PosteriorVars{in[0], in[1]});
      });
  INFO(report.detail);
  CHECK(report.ok);
}

TEST_CASE("reconstruction error") {
  SUBCASE("perfect prediction is zero") {
    Tensor frames({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    std::vector<Tensor> xhat = {Tensor({2}, {1.0, 2.0}), Tensor({2}, {3.0, 4.0}),
                                Tensor({2}, {5.0, 6.0})};
    CHECK(reconstruction_error(xhat, frames) == 0.0);
  }
  SUBCASE("uniform offset of one") {
    Tensor frames({2, 3});
    std::vector<Tensor> xhat = {Tensor::full({3}, 1.0), Tensor::full({3}, 1.0)};
    CHECK(reconstruction_error(xhat, frames) == 3.0);
  }
  SUBCASE("random pair matches a scalar-loop oracle") {
    Rng rng(25);
    Tensor frames = random_tensor({7, 4}, rng);
    std::vector<Tensor> xhat;
    for (int t = 0; t < 7; ++t) xhat.push_back(random_tensor({4}, rng));
    double acc = 0.0;
    for (int t = 0; t < 7; ++t) {
      for (int c = 0; c < 4; ++c) {
        const double d = xhat[static_cast<std::size_t>(t)].at(c) - frames.at(t, c);
        acc += d * d;
      }
    }
    CHECK(reconstruction_error(xhat, frames) == doctest::Approx(acc / 7.0).epsilon(1e-14));
  }
  SUBCASE("length mismatch is an error") {
    Tensor frames({3, 2});
    std::vector<Tensor> xhat = {Tensor({2}), Tensor({2})};
    CHECK_THROWS_AS(reconstruction_error(xhat, frames), DimensionError);
  }
}

TEST_CASE("annealing schedule") {
  AnnealSchedule s{15, 150};
  CHECK(anneal_lambda(0, s) == 0.0);
  CHECK(anneal_lambda(15, s) == 1.0);
  CHECK(anneal_lambda(100, s) == 1.0);
  CHECK(anneal_lambda(7, AnnealSchedule{14, 150}) == 0.5);

  SUBCASE("disabled annealing pins the weight at one") {
    AnnealSchedule off{0, 60};
    CHECK(anneal_lambda(0, off) == 1.0);
    CHECK(anneal_lambda(59, off) == 1.0);
  }
  SUBCASE("epoch out of range") {
    CHECK_THROWS_AS(anneal_lambda(-1, s), DimensionError);
    CHECK_THROWS_AS(anneal_lambda(150, s), DimensionError);
  }
  SUBCASE("non-decreasing and clamped over random schedules") {
    Rng rng(26);
    for (int rep = 0; rep < 100; ++rep) {
      const int total = rng.uniform_int(2, 200);
      AnnealSchedule sched{rng.uniform_int(0, total), total};
      double prev = -1.0;
      for (int e = 0; e < total; ++e) {
        const double lam = anneal_lambda(e, sched);
        CHECK(lam >= prev);
        CHECK(lam >= 0.0);
        CHECK(lam <= 1.0);
        prev = lam;
      }
    }
  }
  SUBCASE("fractional positions interpolate the ramp") {
    AnnealSchedule sched{10, 100};
    CHECK(anneal_lambda_fractional(2.5, sched) == 0.25);
    CHECK(anneal_lambda_fractional(10.0, sched) == 1.0);
  }
  SUBCASE("make_schedule rounds the fraction") {
    CHECK(make_schedule(0.1, 60).anneal_epochs == 6);
    CHECK(make_schedule(0.0, 60).anneal_epochs == 0);
    CHECK_THROWS_AS(make_schedule(-0.1, 60), DimensionError);
  }
}

TEST_CASE("total loss composition") {
  CHECK(total_loss(2.0, 3.0, 0.0).total == 2.0);
  CHECK(total_loss(2.0, 3.0, 1.0).total == 5.0);

  LossBreakdown lb = total_loss(1.5, 0.25, 0.6);
  CHECK(lb.total == doctest::Approx(1.5 + 0.6 * 0.25).epsilon(1e-15));
  CHECK(lb.has_kl());

  SUBCASE("linear in the KL with slope lambda") {
    Rng rng(27);
    for (int rep = 0; rep < 50; ++rep) {
      const double rec = rng.uniform(0.0, 10.0);
      const double kl = rng.uniform(0.0, 10.0);
      const double lam = rng.uniform(0.0, 1.0);
      const double delta = rng.uniform(0.0, 5.0);
      const double slope =
          (total_loss(rec, kl + delta, lam).total - total_loss(rec, kl, lam).total);
      CHECK(slope == doctest::Approx(lam * delta).epsilon(1e-12));
    }
  }
  SUBCASE("missing KL reduces the total to the reconstruction") {
    LossBreakdown nb = total_loss(2.5, kl_not_applicable(), 1.0);
    CHECK_FALSE(nb.has_kl());
    CHECK(nb.total == 2.5);
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(total_loss(1.0, -0.5, 1.0), DimensionError);
    CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.5), DimensionError);
  }
}
