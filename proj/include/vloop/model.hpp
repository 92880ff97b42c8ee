#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vloop/tape.hpp"
#include "vloop/tensor.hpp"

namespace vloop {

/// Architecture hyperparameters shared by the encoder, decoder and attention.
struct ModelConfig {
  // Core dimensions.
  int d_x = 8;     // acoustic feature channels
  int d_z = 64;    // latent code
  int d_p = 24;    // phoneme embedding
  int d_buf = 32;  // buffer rows
  int k = 6;       // buffer columns
  int d_s = 16;    // speaker embedding
  int vocab = 20;
  int n_speakers = 1;  // 1 = single shared pseudo-speaker (unsupervised)

  // Attention.
  int attention_components = 5;
  int attention_hidden = 48;

  // Decoder networks.
  int update_hidden = 128;
  int output_hidden = 128;

  // Encoder conv stack (all layers stride `enc_stride`).
  std::vector<int> enc_channels = {32, 32, 64, 64, 128};
  int enc_kernel = 5;
  int enc_stride = 2;
  int enc_padding = 2;
  int enc_fc_width = 128;
  double enc_dropout = 0.2;
  bool enc_batchnorm = true;
  int enc_min_frames = 32;
  double logvar_clamp = 10.0;

  int update_input_width() const { return d_buf * k + d_p + d_x + d_z; }
  int buffer_numel() const { return d_buf * k; }

  /// Miniature configuration used by gradient-check tests.
  static ModelConfig tiny();
};

/// Ordered, named collection of parameter tensors. Order is the canonical
/// serialization and gradient-accumulation order.
class ParamSet {
 public:
  int add(const std::string& name, Tensor t, bool trainable = true);

  int size() const { return static_cast<int>(tensors_.size()); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  Tensor& tensor(int i) { return tensors_[static_cast<std::size_t>(i)]; }
  const Tensor& tensor(int i) const { return tensors_[static_cast<std::size_t>(i)]; }
  bool trainable(int i) const { return trainable_[static_cast<std::size_t>(i)]; }
  int find(const std::string& name) const;  // -1 when absent

  int total_numel() const;
  void quantize_to_f32();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::vector<bool> trainable_;
};

struct LinearParams {
  int w = -1;
  int b = -1;
};

struct ConvLayerParams {
  int w = -1;
  int b = -1;
  int bn_gamma = -1;
  int bn_beta = -1;
  int bn_mean = -1;  // running stats, not trainable
  int bn_var = -1;
};

struct EncoderParams {
  std::vector<ConvLayerParams> convs;
  LinearParams fc;
  LinearParams mu_head;
  LinearParams logvar_head;
};

struct AttentionParams {
  LinearParams query1;
  LinearParams query2;
};

struct DecoderParams {
  int phoneme_embedding = -1;  // [vocab x d_p]
  int speaker_embedding = -1;  // [n_speakers x d_s]
  LinearParams speaker_to_context;  // feeds tanh(.) added to the context
  LinearParams speaker_to_buffer;   // broadcast over buffer columns
  LinearParams update1;
  LinearParams update2;
  LinearParams output1;
  LinearParams output2;
  AttentionParams attention;
};

struct Model {
  ModelConfig cfg;
  ParamSet params;
  EncoderParams enc;
  DecoderParams dec;
};

/// Registers and initializes every parameter tensor. Initialization is a
/// deterministic function of (seed, parameter name).
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Creates one tape leaf per parameter, aligned with ParamSet indices.
/// `trainable_grads` controls whether trainable parameters track gradients.
std::vector<Var> make_param_leaves(Tape& tape, const ParamSet& params,
                                   bool trainable_grads);

}  // namespace vloop
