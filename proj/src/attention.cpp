#include "vloop/attention.hpp"

namespace vloop {

AttentionState initial_attention_state(Tape& tape, int components) {
  AttentionState st;
  st.locations = tape.leaf(Tensor({components}), false);
  return st;
}

AttendResult attend_with_mixture(Tape& tape, const AttentionState& state,
                                 Var encoded, Var increments, Var widths,
                                 Var component_weights) {
  const Tensor& enc = tape.value(encoded);
  if (enc.rank() != 2 || enc.dim(0) < 1) {
    throw DimensionError("attend: empty phoneme sequence");
  }
  const int phonemes = enc.dim(0);

  Var locations = tape.add(state.locations, increments);
  Var scores = tape.gmm_scores(locations, widths, component_weights, phonemes);
  Var weights = tape.div_vec_scalar(scores, tape.sum(scores), 1e-12);
  Var context = tape.weighted_rowsum(encoded, weights);

  AttendResult out;
  out.context = context;
  out.next.locations = locations;
  const Tensor& wv = tape.value(weights);
  out.next.last_weights.assign(wv.data(), wv.data() + wv.numel());
  return out;
}

AttendResult attend(Tape& tape, const std::vector<Var>& leaves,
                    const Model& model, const AttentionState& state,
                    Var encoded, Var query) {
  const AttentionParams& ap = model.dec.attention;
  const int ka = model.cfg.attention_components;

  Var hidden = tape.relu(
      tape.linear(leaves[ap.query1.w], query, leaves[ap.query1.b]));
  Var raw = tape.linear(leaves[ap.query2.w], hidden, leaves[ap.query2.b]);

  Var increments = tape.softplus(tape.slice1d(raw, 0, ka));
  Var widths = tape.clamp(tape.exp_(tape.slice1d(raw, ka, ka)), 1e-3, 1e3);
  Var component_weights = tape.softmax(tape.slice1d(raw, 2 * ka, ka));

  return attend_with_mixture(tape, state, encoded, increments, widths,
                             component_weights);
}

bool has_terminated(const Tensor& locations, int phoneme_count, double margin) {
  double mean = 0.0;
  for (int i = 0; i < locations.numel(); ++i) mean += locations.at(i);
  mean /= locations.numel();
  return mean >= static_cast<double>(phoneme_count) - 1.0 + margin;
}

}  // namespace vloop
