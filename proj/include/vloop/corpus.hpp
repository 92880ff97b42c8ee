#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vloop/tensor.hpp"

namespace vloop {

/// One synthetic utterance. `hidden_factor` is the global style factor the
/// generator used; it is kept for evaluation only and never fed to a model.
struct Utterance {
  std::vector<int> phonemes;
  Tensor frames;  // [T x d_x]
  double hidden_factor = 0.0;

  int num_frames() const { return frames.dim(0); }
};

struct CorpusConfig {
  int utterance_count = 1050;
  int vocab = 20;
  int d_x = 8;
  int frames_per_phoneme_min = 4;
  int frames_per_phoneme_max = 12;
  int phonemes_per_utterance_min = 8;
  int phonemes_per_utterance_max = 12;
  double noise_amplitude = 0.05;
  std::uint64_t seed = 0;
};

using Corpus = std::vector<Utterance>;

/// Deterministically generates the corpus. Channel 0 is the pitch proxy:
/// per-phoneme base level, shifted by 0.5*g, with a sinusoid whose amplitude
/// is 0.2*|g|. Remaining channels carry noisy phoneme-identity encodings.
/// Frame values land on the 32-bit float grid so dataset files round-trip
/// exactly.
Corpus generate_corpus(const CorpusConfig& cfg);

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

/// Sets aside 50 test utterances first (seeded), then splits the remainder
/// 90/10 into train/validation. Requires more than 50 utterances.
SplitIndices split(const Corpus& corpus, std::uint64_t seed);

void save_dataset(const std::string& path, const Corpus& corpus);
Corpus load_dataset(const std::string& path);

/// The pitch-proxy channel index (stands in for an F0 track).
inline constexpr int kPitchChannel = 0;

}  // namespace vloop
