#include "vloop/encoder.hpp"

#include <cmath>

namespace vloop {

Tensor PosteriorParams::sigma() const {
  Tensor s(log_var.shape());
  for (int i = 0; i < s.numel(); ++i) s.at(i) = std::exp(0.5 * log_var.at(i));
  return s;
}

PosteriorVars encode_graph(Tape& tape, const std::vector<Var>& leaves,
                           const Model& model, const Tensor& frames,
                           bool training, Rng* dropout_rng,
                           BatchNormStats* bn_stats) {
  const ModelConfig& cfg = model.cfg;
  if (frames.rank() != 2 || frames.dim(1) != cfg.d_x) {
    throw DimensionError("encode: expected [T x " + std::to_string(cfg.d_x) +
                         "] frames, got " + frames.shape_str());
  }
  const int T = frames.dim(0);
  if (T < cfg.enc_min_frames) {
    throw DimensionError("encode: input too short, " + std::to_string(T) +
                         " frames < minimum " +
                         std::to_string(cfg.enc_min_frames));
  }
  if (training && !dropout_rng) {
    throw DimensionError("encode: training mode requires a dropout RNG");
  }

  // Channels-first for the conv stack.
  Tensor channels({cfg.d_x, T});
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < cfg.d_x; ++c) channels.at(c, t) = frames.at(t, c);
  }
  Var x = tape.leaf(std::move(channels), false);

  for (std::size_t i = 0; i < model.enc.convs.size(); ++i) {
    const ConvLayerParams& cp = model.enc.convs[i];
    x = tape.conv1d(x, leaves[cp.w], cfg.enc_stride, cfg.enc_padding);
    x = tape.add_channel_bias(x, leaves[cp.b]);
    if (cfg.enc_batchnorm) {
      if (training) {
        Tensor bm, bv;
        x = tape.batchnorm_time(x, leaves[cp.bn_gamma], leaves[cp.bn_beta],
                                1e-5, &bm, &bv);
        if (bn_stats) {
          bn_stats->mean.push_back(std::move(bm));
          bn_stats->var.push_back(std::move(bv));
        }
      } else {
        x = tape.batchnorm_time_eval(x, leaves[cp.bn_gamma], leaves[cp.bn_beta],
                                     model.params.tensor(cp.bn_mean),
                                     model.params.tensor(cp.bn_var), 1e-5);
      }
    }
    x = tape.relu(x);
    if (training && cfg.enc_dropout > 0.0) {
      const Tensor& xv = tape.value(x);
      Tensor mask(xv.shape());
      const double keep = 1.0 - cfg.enc_dropout;
      for (int j = 0; j < mask.numel(); ++j) {
        mask.at(j) = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      }
      x = tape.dropout_mul(x, std::move(mask));
    }
  }

  Var pooled = tape.global_max_pool_time(x);
  Var hidden = tape.relu(
      tape.linear(leaves[model.enc.fc.w], pooled, leaves[model.enc.fc.b]));

  PosteriorVars out;
  out.mu = tape.linear(leaves[model.enc.mu_head.w], hidden,
                       leaves[model.enc.mu_head.b]);
  out.log_var = tape.clamp(tape.linear(leaves[model.enc.logvar_head.w], hidden,
                                       leaves[model.enc.logvar_head.b]),
                           -cfg.logvar_clamp, cfg.logvar_clamp);
  return out;
}

PosteriorParams encode(const Model& model, const Tensor& frames) {
  Tape tape;
  std::vector<Var> leaves = make_param_leaves(tape, model.params, false);
  PosteriorVars post =
      encode_graph(tape, leaves, model, frames, false, nullptr, nullptr);
  PosteriorParams out;
  out.mu = tape.value(post.mu);
  out.log_var = tape.value(post.log_var);
  return out;
}

Var reparameterize_graph(Tape& tape, const PosteriorVars& post,
                         const Tensor& eps) {
  check_same_shape(tape.value(post.mu), eps, "reparameterize");
  Var eps_leaf = tape.leaf(eps, false);
  Var sigma = tape.exp_(tape.scale(post.log_var, 0.5));
  return tape.add(post.mu, tape.mul(sigma, eps_leaf));
}

Tensor reparameterize(const PosteriorParams& post, const Tensor& eps) {
  check_same_shape(post.mu, eps, "reparameterize");
  Tensor z(post.mu.shape());
  for (int i = 0; i < z.numel(); ++i) {
    z.at(i) = post.mu.at(i) + std::exp(0.5 * post.log_var.at(i)) * eps.at(i);
  }
  return z;
}

}  // namespace vloop
