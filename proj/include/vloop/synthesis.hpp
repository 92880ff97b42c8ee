#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vloop/model.hpp"
#include "vloop/rng.hpp"

namespace vloop {

struct SynthesisConfig {
  double sigma = 1.0;      // prior scale; 0 always yields z = 0
  int max_frames = 0;      // 0 = 4x phoneme count
  double margin = 0.5;     // termination margin past the last phoneme
  std::uint64_t seed = 0;  // used only when z is sampled
};

/// z = sigma * eps with eps standard normal; sigma = 0 returns exactly zero.
Tensor sample_prior(int d_z, double sigma, Rng& rng);

/// Linear blend (1-alpha)*z1 + alpha*z2 for alpha in [0, 1].
Tensor interpolate_z(const Tensor& z1, const Tensor& z2, double alpha);

/// Per-step normalized attention weights, for alignment diagnostics.
struct AttentionTrace {
  std::vector<std::vector<double>> weights;  // [step][phoneme]
};

/// Free-running generation: each step feeds back the model's own previous
/// frame and emits the predicted mean. Runs until the attention has passed
/// the last phoneme (plus margin) or max_frames. Deterministic in
/// (phonemes, z, params).
Tensor synthesize(const Model& model, const std::vector<int>& phonemes,
                  const Tensor& z, const SynthesisConfig& cfg,
                  AttentionTrace* trace = nullptr);

/// One (t, value) row per frame of the selected channel.
std::vector<std::pair<int, double>> trajectory(const Tensor& frames, int channel);

std::string trajectory_csv(const Tensor& frames, int channel);
std::string attention_csv(const AttentionTrace& trace);

// Sequence files: magic "VLSQ", frame count, channel count, 32-bit
// little-endian values.
void save_sequence(const std::string& path, const Tensor& frames);
Tensor load_sequence(const std::string& path);

}  // namespace vloop
