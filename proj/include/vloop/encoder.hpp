#pragma once

#include <vector>

#include "vloop/model.hpp"
#include "vloop/rng.hpp"
#include "vloop/tape.hpp"

namespace vloop {

/// Diagonal-Gaussian posterior over the latent code.
struct PosteriorParams {
  Tensor mu;       // [d_z]
  Tensor log_var;  // [d_z]

  Tensor sigma() const;
};

struct PosteriorVars {
  Var mu;
  Var log_var;
};

/// Per-layer batch statistics collected during a training-mode encode, in
/// layer order. The training loop folds them into the running statistics.
struct BatchNormStats {
  std::vector<Tensor> mean;
  std::vector<Tensor> var;
};

/// Builds the posterior graph for one utterance: five strided conv layers
/// (batchnorm, ReLU, dropout), global max-pool over time, then fully
/// connected layers to the (mu, log-variance) heads. Output shape does not
/// depend on the number of frames.
///
/// `frames` is [T x d_x]. In training mode `dropout_rng` must be provided;
/// batch statistics are reported through `bn_stats` when non-null. In
/// inference mode the running statistics are used and dropout is off.
PosteriorVars encode_graph(Tape& tape, const std::vector<Var>& leaves,
                           const Model& model, const Tensor& frames,
                           bool training, Rng* dropout_rng,
                           BatchNormStats* bn_stats);

/// Inference-mode convenience wrapper returning plain tensors.
PosteriorParams encode(const Model& model, const Tensor& frames);

/// z = mu + exp(0.5 * log_var) * eps.
Var reparameterize_graph(Tape& tape, const PosteriorVars& post, const Tensor& eps);
Tensor reparameterize(const PosteriorParams& post, const Tensor& eps);

}  // namespace vloop
