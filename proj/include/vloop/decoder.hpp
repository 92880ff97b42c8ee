#pragma once

#include <vector>

#include "vloop/attention.hpp"
#include "vloop/model.hpp"
#include "vloop/tape.hpp"

namespace vloop {

/// Gathers the phoneme embedding rows for an id sequence: [L_p x d_p].
Var embed_phonemes(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, const std::vector<int>& phonemes);

/// Row of the speaker embedding table as a [d_s] vector.
Var speaker_vector(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, int speaker);

Var initial_buffer(Tape& tape, const ModelConfig& cfg);

/// New buffer with `update` as the newest column; every other column moves
/// one slot toward the oldest end, whose previous content is dropped.
Var shift_buffer(Tape& tape, Var buffer, Var update);

/// [context + tanh(speaker projection), previous frame] as one vector.
Var compose_context_input(Tape& tape, const std::vector<Var>& leaves,
                          const Model& model, Var context, Var speaker_emb,
                          Var x_prev);

/// Update column u from [flattened buffer, context input, latent code].
Var compute_update(Tape& tape, const std::vector<Var>& leaves,
                   const Model& model, Var buffer, Var context_input, Var z);

/// Frame estimate from the shifted buffer plus the per-column speaker
/// projection.
Var predict_frame(Tape& tape, const std::vector<Var>& leaves,
                  const Model& model, Var buffer, Var speaker_emb);

struct DecodeStep {
  Var x_hat;
  Var buffer;
  AttentionState attention;
};

/// One generation step: attend, compose the context input, compute the
/// update column, shift the buffer, predict the frame.
DecodeStep decode_step(Tape& tape, const std::vector<Var>& leaves,
                       const Model& model, Var buffer,
                       const AttentionState& attention, Var encoded,
                       Var x_prev, Var z, int speaker);

}  // namespace vloop
