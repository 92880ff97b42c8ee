#pragma once

#include <vector>

#include "vloop/model.hpp"
#include "vloop/tape.hpp"

namespace vloop {

/// State of the monotonic Gaussian-mixture attention. Component locations
/// (in phoneme-index units, 0-based) only ever advance; each step adds a
/// softplus-positive increment predicted from the query.
struct AttentionState {
  Var locations;              // [K] on the tape, carried across steps
  std::vector<double> last_weights;  // normalized per-phoneme weights, diagnostics
};

AttentionState initial_attention_state(Tape& tape, int components);

struct AttendResult {
  Var context;  // [d_p]
  AttentionState next;
};

/// One attention read: predicts per-component (increment, log-width, weight)
/// from the query, advances the locations, evaluates the mixture over
/// phoneme positions, normalizes, and mixes the encoded rows.
AttendResult attend(Tape& tape, const std::vector<Var>& leaves,
                    const Model& model, const AttentionState& state,
                    Var encoded, Var query);

/// Mixture evaluation with explicit parameters. attend() lowers onto this;
/// tests drive it directly (e.g. zero increments => stationary alignment).
AttendResult attend_with_mixture(Tape& tape, const AttentionState& state,
                                 Var encoded, Var increments, Var widths,
                                 Var component_weights);

/// True once the mean component location has advanced past the last phoneme
/// (plus margin). The generation loop uses this as its stop criterion.
bool has_terminated(const Tensor& locations, int phoneme_count, double margin);

}  // namespace vloop
