#include "vloop/synthesis.hpp"

#include <cstdio>
#include <sstream>

#include "vloop/decoder.hpp"
#include "vloop/serialize.hpp"

namespace vloop {

Tensor sample_prior(int d_z, double sigma, Rng& rng) {
  if (sigma < 0.0) {
    throw DimensionError("sample_prior: sigma must be >= 0, got " +
                         std::to_string(sigma));
  }
  Tensor z({d_z});
  if (sigma > 0.0) rng.fill_normal(z.vec(), sigma);
  return z;
}

Tensor interpolate_z(const Tensor& z1, const Tensor& z2, double alpha) {
  check_same_shape(z1, z2, "interpolate_z");
  if (alpha < 0.0 || alpha > 1.0) {
    throw DimensionError("interpolate_z: alpha must lie in [0, 1], got " +
                         std::to_string(alpha));
  }
  Tensor out(z1.shape());
  for (int i = 0; i < out.numel(); ++i) {
    out.at(i) = (1.0 - alpha) * z1.at(i) + alpha * z2.at(i);
  }
  return out;
}

Tensor synthesize(const Model& model, const std::vector<int>& phonemes,
                  const Tensor& z, const SynthesisConfig& cfg,
                  AttentionTrace* trace) {
  if (phonemes.empty()) {
    throw DimensionError("synthesize: empty phoneme sequence");
  }
  const ModelConfig& mc = model.cfg;
  if (z.numel() != mc.d_z) {
    throw DimensionError("synthesize: z has " + std::to_string(z.numel()) +
                         " dims, model expects " + std::to_string(mc.d_z));
  }
  const int phoneme_count = static_cast<int>(phonemes.size());
  const int max_frames =
      cfg.max_frames > 0 ? cfg.max_frames : 4 * phoneme_count;

  Tape tape;
  std::vector<Var> leaves = make_param_leaves(tape, model.params, false);
  Var encoded = embed_phonemes(tape, leaves, model, phonemes);
  Var z_leaf = tape.leaf(z, false);
  Var buffer = initial_buffer(tape, mc);
  AttentionState attention = initial_attention_state(tape, mc.attention_components);
  Var x_prev = tape.leaf(Tensor({mc.d_x}), false);

  std::vector<Tensor> frames;
  for (int t = 0; t < max_frames; ++t) {
    DecodeStep step =
        decode_step(tape, leaves, model, buffer, attention, encoded, x_prev,
                    z_leaf, 0);
    buffer = step.buffer;
    attention = step.attention;
    x_prev = step.x_hat;
    frames.push_back(tape.value(step.x_hat));
    if (trace) trace->weights.push_back(attention.last_weights);
    if (has_terminated(tape.value(attention.locations), phoneme_count,
                       cfg.margin)) {
      break;
    }
  }

  const int T = static_cast<int>(frames.size());
  Tensor out({T, mc.d_x});
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < mc.d_x; ++c) out.at(t, c) = frames[static_cast<std::size_t>(t)].at(c);
  }
  return out;
}

std::vector<std::pair<int, double>> trajectory(const Tensor& frames,
                                               int channel) {
  if (frames.rank() != 2 || channel < 0 || channel >= frames.dim(1)) {
    throw DimensionError("trajectory: channel " + std::to_string(channel) +
                         " out of range for " + frames.shape_str());
  }
  std::vector<std::pair<int, double>> rows;
  rows.reserve(static_cast<std::size_t>(frames.dim(0)));
  for (int t = 0; t < frames.dim(0); ++t) {
    rows.emplace_back(t, frames.at(t, channel));
  }
  return rows;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string trajectory_csv(const Tensor& frames, int channel) {
  std::ostringstream os;
  os << "t,value\n";
  for (const auto& [t, v] : trajectory(frames, channel)) {
    os << t << "," << fmt_double(v) << "\n";
  }
  return os.str();
}

std::string attention_csv(const AttentionTrace& trace) {
  std::ostringstream os;
  os << "step,phoneme_index,weight\n";
  for (std::size_t s = 0; s < trace.weights.size(); ++s) {
    for (std::size_t j = 0; j < trace.weights[s].size(); ++j) {
      os << s << "," << j << "," << fmt_double(trace.weights[s][j]) << "\n";
    }
  }
  return os.str();
}

void save_sequence(const std::string& path, const Tensor& frames) {
  if (frames.rank() != 2) {
    throw DimensionError("save_sequence expects [T x d], got " +
                         frames.shape_str());
  }
  AtomicFile file(path);
  BinaryWriter& w = file.writer();
  w.magic("VLSQ");
  w.u32(static_cast<std::uint32_t>(frames.dim(0)));
  w.u32(static_cast<std::uint32_t>(frames.dim(1)));
  w.f32_array(frames.vec());
  file.commit();
}

Tensor load_sequence(const std::string& path) {
  BinaryReader r(path);
  r.magic("VLSQ");
  const std::uint32_t T = r.u32();
  const std::uint32_t d = r.u32();
  if (T == 0 || d == 0) r.fail("empty sequence file");
  std::vector<double> values;
  r.f32_into(values, static_cast<std::size_t>(T) * d);
  return Tensor({static_cast<int>(T), static_cast<int>(d)}, std::move(values));
}

}  // namespace vloop
