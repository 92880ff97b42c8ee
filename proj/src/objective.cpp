#include "vloop/objective.hpp"

#include <cmath>
#include <limits>

namespace vloop {

bool LossBreakdown::has_kl() const { return std::isfinite(kl_term); }

double kl_not_applicable() {
  return std::numeric_limits<double>::quiet_NaN();
}

AnnealSchedule make_schedule(double anneal_fraction, int total_epochs) {
  if (total_epochs < 1) {
    throw DimensionError("schedule requires total_epochs >= 1");
  }
  if (anneal_fraction < 0.0 || anneal_fraction > 1.0) {
    throw DimensionError("anneal fraction must lie in [0, 1]");
  }
  AnnealSchedule s;
  s.total_epochs = total_epochs;
  s.anneal_epochs = static_cast<int>(std::lround(anneal_fraction * total_epochs));
  return s;
}

double kl_gaussian_prior(const PosteriorParams& post) {
  check_same_shape(post.mu, post.log_var, "kl_gaussian_prior");
  double acc = 0.0;
  for (int i = 0; i < post.mu.numel(); ++i) {
    const double mu = post.mu.at(i);
    const double lv = post.log_var.at(i);
    acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
  }
  return acc;
}

Var kl_gaussian_prior_graph(Tape& tape, const PosteriorVars& post) {
  const Tensor& mu = tape.value(post.mu);
  Var ones = tape.leaf(Tensor::full(mu.shape(), 1.0), false);
  Var terms = tape.sub(
      tape.sub(tape.add(tape.mul(post.mu, post.mu), tape.exp_(post.log_var)),
               ones),
      post.log_var);
  return tape.scale(tape.sum(terms), 0.5);
}

double reconstruction_error(const std::vector<Tensor>& x_hat,
                            const Tensor& frames) {
  const int T = frames.dim(0);
  if (static_cast<int>(x_hat.size()) != T) {
    throw DimensionError("reconstruction_error: " +
                         std::to_string(x_hat.size()) + " estimates vs " +
                         std::to_string(T) + " frames");
  }
  const int d = frames.dim(1);
  double acc = 0.0;
  for (int t = 0; t < T; ++t) {
    if (x_hat[static_cast<std::size_t>(t)].numel() != d) {
      throw DimensionError("reconstruction_error: frame width mismatch at t=" +
                           std::to_string(t));
    }
    for (int c = 0; c < d; ++c) {
      const double diff = x_hat[static_cast<std::size_t>(t)].at(c) - frames.at(t, c);
      acc += diff * diff;
    }
  }
  return acc / T;
}

double anneal_lambda(int epoch, const AnnealSchedule& sched) {
  if (epoch < 0 || epoch >= sched.total_epochs) {
    throw DimensionError("anneal_lambda: epoch " + std::to_string(epoch) +
                         " outside schedule of " +
                         std::to_string(sched.total_epochs) + " epochs");
  }
  return anneal_lambda_fractional(static_cast<double>(epoch), sched);
}

double anneal_lambda_fractional(double epoch_pos, const AnnealSchedule& sched) {
  if (sched.anneal_epochs <= 0) return 1.0;
  if (epoch_pos < 0.0) {
    throw DimensionError("anneal_lambda: negative epoch position");
  }
  const double lambda = epoch_pos / sched.anneal_epochs;
  return lambda > 1.0 ? 1.0 : lambda;
}

LossBreakdown total_loss(double rec_error, double kl_term, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) {
    throw DimensionError("total_loss: lambda outside [0, 1]");
  }
  if (std::isfinite(kl_term) && kl_term < 0.0) {
    throw DimensionError("total_loss: negative KL term");
  }
  LossBreakdown out;
  out.rec_error = rec_error;
  out.kl_term = kl_term;
  out.lambda = lambda;
  out.total = std::isfinite(kl_term) ? rec_error + lambda * kl_term : rec_error;
  return out;
}

}  // namespace vloop
