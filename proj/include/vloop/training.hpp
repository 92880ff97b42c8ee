#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vloop/corpus.hpp"
#include "vloop/model.hpp"
#include "vloop/objective.hpp"

namespace vloop {

enum class TrainMode {
  kVaeLoop,         // latent-conditioned model with encoder
  kBaselineNoZ,     // z pinned to zero, encoder untouched
  kBaselineLabeled  // z pinned to zero, speaker label from the hidden factor
};

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::kVaeLoop;
  double learning_rate = 1e-3;
  int total_epochs = 60;
  double anneal_fraction = 0.1;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double stf_noise_scale = 1.0;
  double grad_clip = 5.0;
  int threads = 0;  // 0 = hardware concurrency
  ModelConfig model;

  void validate() const;
  std::string canonical_text() const;  // key=value block stored in checkpoints
  static TrainConfig from_text(const std::string& text);
};

/// Adam with bias correction. Moments are kept per parameter tensor.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamSet& params);
};

/// One Adam update over all trainable parameters. A non-finite gradient
/// aborts with a diagnostic naming the parameter.
void adam_step(ParamSet& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr);

/// Noisy average of the ground-truth and predicted previous frames used as
/// decoder input during training and matched-protocol evaluation.
Tensor semi_teacher_force(const Tensor& x_true_prev, const Tensor& x_pred_prev,
                          const Tensor& eta);

struct Checkpoint {
  std::uint32_t version = 1;
  TrainConfig config;
  int epoch = 0;                 // completed epochs
  std::uint64_t rng_counter = 0; // next epoch's stream index
  ParamSet params;
  AdamState adam;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Model model_from_checkpoint(const Checkpoint& ckpt);

struct LogRow {
  int epoch = 0;
  LossBreakdown loss;
  std::string split;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

struct TrainResult {
  Checkpoint final_state;
  Checkpoint best_state;  // lowest validation total (weight 1 on KL)
  std::vector<LogRow> log;
  bool diverged = false;
  std::string divergence_message;
};

/// Seeded, semi-teacher-forced optimization. Per epoch: shuffled batches,
/// one posterior sample per example, annealed loss, gradient clipping, Adam.
/// Validation runs each epoch with weight 1 and noise off. Parameters and
/// optimizer moments are rounded to the 32-bit grid at every epoch boundary,
/// which makes saved checkpoints resume bit-exactly.
///
/// `run_until` stops after that many completed epochs without changing the
/// schedule (the annealing ramp is defined by total_epochs); <= 0 runs to
/// total_epochs. A resumed checkpoint must carry an identical configuration.
TrainResult train(const TrainConfig& cfg, const Corpus& corpus,
                  const SplitIndices& split,
                  const Checkpoint* resume_from = nullptr,
                  std::ostream* progress = nullptr, int run_until = -1);

struct EvalOptions {
  double eta_scale = 1.0;  // semi-teacher-forcing noise scale
  std::uint64_t seed = 0;
  int threads = 0;
};

/// Mean per-utterance loss over the given indices under the training
/// protocol (weight 1 on the KL term, seeded semi-teacher-forcing noise).
LossBreakdown evaluate(const Model& model, TrainMode mode, const Corpus& corpus,
                       const std::vector<int>& indices, const EvalOptions& opts);

/// Loss parts for one utterance under the training protocol. `stream_seed`
/// fixes every random draw (dropout masks, posterior sample, input noise),
/// so the result is a deterministic function of the parameters — which is
/// what finite-difference gradient checks differentiate. When `flat_grads`
/// is non-null it receives d(optimized_total)/d(parameter) for the trainable
/// parameters, concatenated in registration order.
struct ExampleLoss {
  double rec = 0.0;
  double kl_raw = 0.0;  // NaN when the mode has no latent code
  double optimized_total = 0.0;
};

ExampleLoss example_loss(const Model& model, TrainMode mode,
                         const Utterance& utt, double lambda, double eta_scale,
                         std::uint64_t stream_seed, bool training,
                         std::vector<double>* flat_grads = nullptr);

/// Element count of the concatenated trainable-parameter vector.
std::size_t trainable_size(const ParamSet& params);

/// Speaker index for an utterance: 0 in unsupervised modes; a bucket of the
/// hidden factor in labeled mode.
int speaker_index(TrainMode mode, int n_speakers, double hidden_factor);

}  // namespace vloop
