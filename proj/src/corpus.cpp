#include "vloop/corpus.hpp"

#include <cmath>

#include "vloop/rng.hpp"
#include "vloop/serialize.hpp"

namespace vloop {

namespace {

constexpr double kTau = 6.28318530717958647692;
constexpr int kMinFrames = 32;
constexpr int kMaxFrames = 250;
constexpr int kTestCount = 50;

double phoneme_base(int p, int vocab) {
  return 0.3 * std::sin(kTau * p / vocab);
}

double phoneme_code(int p, int channel, int vocab) {
  return 0.4 * std::cos(kTau * p * (channel + 1) / vocab + 0.7 * channel);
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.utterance_count <= 0 || cfg.vocab <= 0 || cfg.d_x <= 0) {
    throw DimensionError("corpus config counts must be positive");
  }
  if (cfg.phonemes_per_utterance_min * cfg.frames_per_phoneme_min < kMinFrames ||
      cfg.phonemes_per_utterance_max * cfg.frames_per_phoneme_max > kMaxFrames) {
    throw DimensionError("corpus config violates the " +
                         std::to_string(kMinFrames) + ".." +
                         std::to_string(kMaxFrames) + " frame bounds");
  }

  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.utterance_count));
  for (int idx = 0; idx < cfg.utterance_count; ++idx) {
    Rng rng(Rng::derive(cfg.seed, 0xC03Bu, static_cast<std::uint64_t>(idx)));
    Utterance u;
    u.hidden_factor = rng.uniform(-1.0, 1.0);

    const int n_phonemes = rng.uniform_int(cfg.phonemes_per_utterance_min,
                                           cfg.phonemes_per_utterance_max);
    u.phonemes.resize(static_cast<std::size_t>(n_phonemes));
    std::vector<int> durations(static_cast<std::size_t>(n_phonemes));
    int total = 0;
    for (int i = 0; i < n_phonemes; ++i) {
      u.phonemes[static_cast<std::size_t>(i)] = rng.uniform_int(0, cfg.vocab - 1);
      durations[static_cast<std::size_t>(i)] = rng.uniform_int(
          cfg.frames_per_phoneme_min, cfg.frames_per_phoneme_max);
      total += durations[static_cast<std::size_t>(i)];
    }

    const double g = u.hidden_factor;
    // Per-utterance global nuisances, analogous to speaker timbre: a random
    // phase for the pitch fluctuation, and a colored-noise drift over the
    // identity channels with a random frequency and phase shared by all
    // channels (alternating signs). Tracking the drift causally would need a
    // frequency-and-phase estimate maintained through the buffer; the
    // whole-utterance encoder reads it off directly, so these globals are
    // what a useful latent code must carry.
    const double pitch_phase = rng.uniform(0.0, kTau);
    const double drift_phase = rng.uniform(0.0, kTau);
    const double drift_period = rng.uniform(4.2, 6.2);
    const double drift_amp = 4.0 * cfg.noise_amplitude;
    Tensor frames({total, cfg.d_x});
    int t = 0;
    for (int i = 0; i < n_phonemes; ++i) {
      const int p = u.phonemes[static_cast<std::size_t>(i)];
      for (int d = 0; d < durations[static_cast<std::size_t>(i)]; ++d, ++t) {
        frames.at(t, kPitchChannel) =
            phoneme_base(p, cfg.vocab) + 0.5 * g +
            0.2 * std::fabs(g) * std::sin(kTau * t / 5.3 + pitch_phase);
        const double drift_t = drift_amp * std::sin(kTau * t / drift_period + drift_phase);
        for (int c = 1; c < cfg.d_x; ++c) {
          frames.at(t, c) = phoneme_code(p, c, cfg.vocab) +
                            (c % 2 == 0 ? drift_t : -drift_t) +
                            cfg.noise_amplitude * rng.normal();
        }
      }
    }
    frames.quantize_to_f32();
    u.frames = std::move(frames);
    corpus.push_back(std::move(u));
  }
  return corpus;
}

SplitIndices split(const Corpus& corpus, std::uint64_t seed) {
  const int n = static_cast<int>(corpus.size());
  if (n <= kTestCount) {
    throw DimensionError("split requires more than " +
                         std::to_string(kTestCount) + " utterances, got " +
                         std::to_string(n));
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(Rng::derive(seed, 0x5917u));
  rng.shuffle(order);

  SplitIndices out;
  out.test.assign(order.begin(), order.begin() + kTestCount);
  const int remainder = n - kTestCount;
  const int n_train = remainder * 9 / 10;
  out.train.assign(order.begin() + kTestCount,
                   order.begin() + kTestCount + n_train);
  out.validation.assign(order.begin() + kTestCount + n_train, order.end());
  return out;
}

void save_dataset(const std::string& path, const Corpus& corpus) {
  AtomicFile file(path);
  BinaryWriter& w = file.writer();
  w.magic("VLD1");
  w.u32(1);  // format version
  w.u64(corpus.size());
  const int d_x = corpus.empty() ? 0 : corpus.front().frames.dim(1);
  w.u32(static_cast<std::uint32_t>(d_x));
  for (const Utterance& u : corpus) {
    w.f64(u.hidden_factor);
    w.u32(static_cast<std::uint32_t>(u.phonemes.size()));
    for (int p : u.phonemes) w.u16(static_cast<std::uint16_t>(p));
    w.u32(static_cast<std::uint32_t>(u.frames.dim(0)));
    w.f32_array(u.frames.vec());
  }
  file.commit();
}

Corpus load_dataset(const std::string& path) {
  BinaryReader r(path);
  r.magic("VLD1");
  const std::uint32_t version = r.u32();
  if (version != 1) r.fail("unsupported dataset version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  if (count > (1ull << 32)) r.fail("unreasonable utterance count");
  const int d_x = static_cast<int>(r.u32());
  Corpus corpus;
  corpus.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Utterance u;
    u.hidden_factor = r.f64();
    const std::uint32_t n_ph = r.u32();
    if (n_ph == 0) r.fail("utterance with no phonemes");
    u.phonemes.resize(n_ph);
    for (std::uint32_t j = 0; j < n_ph; ++j) u.phonemes[j] = r.u16();
    const std::uint32_t T = r.u32();
    if (T == 0 || d_x <= 0) r.fail("utterance with no frames");
    std::vector<double> values;
    r.f32_into(values, static_cast<std::size_t>(T) * d_x);
    u.frames = Tensor({static_cast<int>(T), d_x}, std::move(values));
    corpus.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace vloop
