#include "vloop/decoder.hpp"

namespace vloop {

Var embed_phonemes(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, const std::vector<int>& phonemes) {
  if (phonemes.empty()) {
    throw DimensionError("embed_phonemes: empty phoneme sequence");
  }
  return tape.rows_gather(leaves[model.dec.phoneme_embedding], phonemes);
}

Var speaker_vector(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, int speaker) {
  Var row = tape.rows_gather(leaves[model.dec.speaker_embedding], {speaker});
  return tape.reshape(row, {model.cfg.d_s});
}

Var initial_buffer(Tape& tape, const ModelConfig& cfg) {
  return tape.leaf(Tensor({cfg.d_buf, cfg.k}), false);
}

Var shift_buffer(Tape& tape, Var buffer, Var update) {
  return tape.buffer_shift(buffer, update);
}

Var compose_context_input(Tape& tape, const std::vector<Var>& leaves,
                          const Model& model, Var context, Var speaker_emb,
                          Var x_prev) {
  const LinearParams& fc = model.dec.speaker_to_context;
  Var spk = tape.tanh_(tape.linear(leaves[fc.w], speaker_emb, leaves[fc.b]));
  return tape.concat({tape.add(context, spk), x_prev});
}

Var compute_update(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, Var buffer, Var context_input, Var z) {
  const ModelConfig& cfg = model.cfg;
  Var flat = tape.reshape(buffer, {cfg.buffer_numel()});
  Var input = tape.concat({flat, context_input, z});
  if (tape.value(input).numel() != cfg.update_input_width()) {
    throw DimensionError("compute_update: input width " +
                         tape.value(input).shape_str() + " != expected [" +
                         std::to_string(cfg.update_input_width()) + "]");
  }
  Var hidden = tape.relu(tape.linear(leaves[model.dec.update1.w], input,
                                     leaves[model.dec.update1.b]));
  return tape.linear(leaves[model.dec.update2.w], hidden,
                     leaves[model.dec.update2.b]);
}

Var predict_frame(Tape& tape, const std::vector<Var>& leaves,
                  const Model& model, Var buffer, Var speaker_emb) {
  const ModelConfig& cfg = model.cfg;
  const LinearParams& fb = model.dec.speaker_to_buffer;
  Var spk = tape.linear(leaves[fb.w], speaker_emb, leaves[fb.b]);
  Var biased = tape.add_col_broadcast(buffer, spk);
  Var flat = tape.reshape(biased, {cfg.buffer_numel()});
  Var hidden = tape.relu(tape.linear(leaves[model.dec.output1.w], flat,
                                     leaves[model.dec.output1.b]));
  return tape.linear(leaves[model.dec.output2.w], hidden,
                     leaves[model.dec.output2.b]);
}

DecodeStep decode_step(Tape& tape, const std::vector<Var>& leaves,
                       const Model& model, Var buffer,
                       const AttentionState& attention, Var encoded,
                       Var x_prev, Var z, int speaker) {
  Var query = tape.reshape(buffer, {model.cfg.buffer_numel()});
  AttendResult att = attend(tape, leaves, model, attention, encoded, query);
  Var spk = speaker_vector(tape, leaves, model, speaker);
  Var context_input =
      compose_context_input(tape, leaves, model, att.context, spk, x_prev);
  Var update = compute_update(tape, leaves, model, buffer, context_input, z);
  DecodeStep out;
  out.buffer = shift_buffer(tape, buffer, update);
  out.x_hat = predict_frame(tape, leaves, model, out.buffer, spk);
  out.attention = att.next;
  return out;
}

}  // namespace vloop
