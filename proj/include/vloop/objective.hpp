#pragma once

#include <vector>

#include "vloop/encoder.hpp"
#include "vloop/tape.hpp"

namespace vloop {

/// One evaluation of the training objective, reported per sequence. Both the
/// reconstruction and KL terms are divided by the sequence length, matching
/// how test errors are tabulated, so `total` mixes the two on one scale.
/// `kl_term` is NaN for models without a latent code (printed as "na").
struct LossBreakdown {
  double rec_error = 0.0;
  double kl_term = 0.0;
  double lambda = 1.0;
  double total = 0.0;

  bool has_kl() const;
};

/// Linear KL-weight ramp measured in epochs.
struct AnnealSchedule {
  int anneal_epochs = 0;  // 0 disables annealing (weight pinned at 1)
  int total_epochs = 1;
};

AnnealSchedule make_schedule(double anneal_fraction, int total_epochs);

/// KL(N(mu, diag(exp(log_var))) || N(0, I)), closed form, summed over
/// dimensions. Non-negative; zero exactly when mu=0 and log_var=0.
double kl_gaussian_prior(const PosteriorParams& post);
Var kl_gaussian_prior_graph(Tape& tape, const PosteriorVars& post);

/// Mean over time of the squared frame residual (summed over channels).
double reconstruction_error(const std::vector<Tensor>& x_hat,
                            const Tensor& frames);

/// Weight on the KL term at an integer epoch: 0 at epoch 0, reaching 1 at
/// `anneal_epochs`, clamped to 1 afterwards. Disabled schedules return 1.
double anneal_lambda(int epoch, const AnnealSchedule& sched);

/// Same ramp at a fractional epoch position, for per-batch updates.
double anneal_lambda_fractional(double epoch_pos, const AnnealSchedule& sched);

LossBreakdown total_loss(double rec_error, double kl_term, double lambda);

double kl_not_applicable();

}  // namespace vloop
