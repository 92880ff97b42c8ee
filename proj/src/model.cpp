#include "vloop/model.hpp"

#include <cmath>

#include "vloop/rng.hpp"

namespace vloop {

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_x = 3;
  c.d_z = 2;
  c.d_p = 4;
  c.d_buf = 4;
  c.k = 2;
  c.d_s = 3;
  c.vocab = 6;
  c.attention_components = 2;
  c.attention_hidden = 5;
  c.update_hidden = 6;
  c.output_hidden = 6;
  c.enc_channels = {4, 4, 4, 4, 4};
  c.enc_fc_width = 8;
  c.enc_min_frames = 1;
  return c;
}

int ParamSet::add(const std::string& name, Tensor t, bool trainable) {
  if (find(name) >= 0) {
    throw DimensionError("duplicate parameter name: " + name);
  }
  names_.push_back(name);
  tensors_.push_back(std::move(t));
  trainable_.push_back(trainable);
  return static_cast<int>(tensors_.size()) - 1;
}

int ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return static_cast<int>(i);
  }
  return -1;
}

int ParamSet::total_numel() const {
  int n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

void ParamSet::quantize_to_f32() {
  for (Tensor& t : tensors_) t.quantize_to_f32();
}

namespace {

Tensor glorot(std::vector<int> shape, int fan_in, int fan_out,
              std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-limit, limit);
  return t;
}

struct Builder {
  ParamSet& p;
  std::uint64_t seed;

  std::uint64_t seed_for(const std::string& name) const {
    return Rng::derive(seed, 0x1717u, Rng::hash_name(name));
  }

  LinearParams linear(const std::string& name, int out, int in,
                      double bias_init = 0.0) {
    LinearParams lp;
    lp.w = p.add(name + ".w", glorot({out, in}, in, out, seed_for(name + ".w")));
    lp.b = p.add(name + ".b", Tensor::full({out}, bias_init));
    return lp;
  }
};

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.cfg = cfg;
  Builder b{m.params, seed};

  // Encoder conv stack.
  int cin = cfg.d_x;
  for (std::size_t i = 0; i < cfg.enc_channels.size(); ++i) {
    const int cout = cfg.enc_channels[i];
    const std::string base = "enc.conv" + std::to_string(i);
    ConvLayerParams cp;
    cp.w = m.params.add(base + ".w",
                        glorot({cout, cin, cfg.enc_kernel},
                               cin * cfg.enc_kernel, cout * cfg.enc_kernel,
                               b.seed_for(base + ".w")));
    cp.b = m.params.add(base + ".b", Tensor({cout}));
    if (cfg.enc_batchnorm) {
      // Beta starts slightly positive: a normalized single-frame map equals
      // beta exactly, and the following ReLU must not sit on its kink.
      cp.bn_gamma = m.params.add(base + ".bn_gamma", Tensor::full({cout}, 1.0));
      cp.bn_beta = m.params.add(base + ".bn_beta", Tensor::full({cout}, 0.01));
      cp.bn_mean = m.params.add(base + ".bn_mean", Tensor({cout}), false);
      cp.bn_var = m.params.add(base + ".bn_var", Tensor::full({cout}, 1.0), false);
    }
    m.enc.convs.push_back(cp);
    cin = cout;
  }
  m.enc.fc = b.linear("enc.fc", cfg.enc_fc_width, cin);
  m.enc.mu_head = b.linear("enc.mu", cfg.d_z, cfg.enc_fc_width);
  m.enc.logvar_head = b.linear("enc.logvar", cfg.d_z, cfg.enc_fc_width);

  // Decoder.
  m.dec.phoneme_embedding = m.params.add(
      "dec.phoneme_embedding",
      glorot({cfg.vocab, cfg.d_p}, cfg.d_p, cfg.d_p,
             b.seed_for("dec.phoneme_embedding")));
  m.dec.speaker_embedding = m.params.add(
      "dec.speaker_embedding",
      glorot({cfg.n_speakers, cfg.d_s}, cfg.d_s, cfg.d_s,
             b.seed_for("dec.speaker_embedding")));
  m.dec.speaker_to_context = b.linear("dec.speaker_to_context", cfg.d_p, cfg.d_s);
  m.dec.speaker_to_buffer = b.linear("dec.speaker_to_buffer", cfg.d_buf, cfg.d_s);
  m.dec.update1 = b.linear("dec.update1", cfg.update_hidden, cfg.update_input_width());
  {
    // The latent inputs arrive near unit variance while the other inputs are
    // much smaller early in training; damp the latent slice so an untrained
    // posterior does not drown the update network in noise.
    Tensor& w = m.params.tensor(m.dec.update1.w);
    const int in_w = cfg.update_input_width();
    for (int r = 0; r < cfg.update_hidden; ++r) {
      for (int c = in_w - cfg.d_z; c < in_w; ++c) w.at(r, c) *= 0.25;
    }
  }
  m.dec.update2 = b.linear("dec.update2", cfg.d_buf, cfg.update_hidden);
  m.dec.output1 = b.linear("dec.output1", cfg.output_hidden, cfg.buffer_numel());
  m.dec.output2 = b.linear("dec.output2", cfg.d_x, cfg.output_hidden);

  // Attention query network. The raw output packs [increment | log-width |
  // component-weight] logits, one triple slot per mixture component. The
  // increment bias starts near softplus^-1(1/8) so alignment advances about
  // one phoneme per typical phoneme duration at initialization.
  // The query is the flattened buffer, which starts at zero; a small bias
  // keeps the hidden units off the ReLU kink on the first step.
  const int ka = cfg.attention_components;
  m.dec.attention.query1 =
      b.linear("dec.attn.query1", cfg.attention_hidden, cfg.buffer_numel(), 0.01);
  m.dec.attention.query2 = b.linear("dec.attn.query2", 3 * ka, cfg.attention_hidden);
  Tensor& q2b = m.params.tensor(m.dec.attention.query2.b);
  for (int i = 0; i < ka; ++i) q2b.at(i) = -2.0;  // softplus(-2) ~ 0.127

  return m;
}

std::vector<Var> make_param_leaves(Tape& tape, const ParamSet& params,
                                   bool trainable_grads) {
  std::vector<Var> leaves;
  leaves.reserve(static_cast<std::size_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    leaves.push_back(
        tape.leaf(params.tensor(i), trainable_grads && params.trainable(i)));
  }
  return leaves;
}

}  // namespace vloop
