#include "vloop/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "vloop/decoder.hpp"
#include "vloop/rng.hpp"
#include "vloop/serialize.hpp"

namespace vloop {

namespace {

constexpr std::uint64_t kInitTag = 0x11AB;
constexpr std::uint64_t kShuffleTag = 0x52F1;
constexpr std::uint64_t kExampleTag = 0xE6A3;
constexpr std::uint64_t kValTag = 0x7A1D;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kVaeLoop: return "vae-loop";
    case TrainMode::kBaselineNoZ: return "baseline-no-z";
    case TrainMode::kBaselineLabeled: return "baseline-labeled";
  }
  return "vae-loop";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "vae-loop") return TrainMode::kVaeLoop;
  if (s == "baseline-no-z") return TrainMode::kBaselineNoZ;
  if (s == "baseline-labeled") return TrainMode::kBaselineLabeled;
  throw DimensionError("unknown training mode: " + s);
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw DimensionError("learning_rate must be > 0");
  if (total_epochs < 1) throw DimensionError("total_epochs must be >= 1");
  if (anneal_fraction < 0.0 || anneal_fraction > 1.0) {
    throw DimensionError("anneal_fraction must lie in [0, 1]");
  }
  if (batch_size < 1) throw DimensionError("batch_size must be >= 1");
  if (stf_noise_scale < 0.0) throw DimensionError("stf_noise_scale must be >= 0");
  if (grad_clip <= 0.0) throw DimensionError("grad_clip must be > 0");
  if (mode == TrainMode::kBaselineLabeled && model.n_speakers < 2) {
    throw DimensionError("labeled mode needs n_speakers >= 2");
  }
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  os << "mode=" << to_string(mode) << "\n";
  os << "learning_rate=" << fmt_double(learning_rate) << "\n";
  os << "total_epochs=" << total_epochs << "\n";
  os << "anneal_fraction=" << fmt_double(anneal_fraction) << "\n";
  os << "batch_size=" << batch_size << "\n";
  os << "seed=" << seed << "\n";
  os << "stf_noise_scale=" << fmt_double(stf_noise_scale) << "\n";
  os << "grad_clip=" << fmt_double(grad_clip) << "\n";
  os << "d_x=" << model.d_x << "\n";
  os << "d_z=" << model.d_z << "\n";
  os << "d_p=" << model.d_p << "\n";
  os << "d_buf=" << model.d_buf << "\n";
  os << "k=" << model.k << "\n";
  os << "d_s=" << model.d_s << "\n";
  os << "vocab=" << model.vocab << "\n";
  os << "n_speakers=" << model.n_speakers << "\n";
  os << "attention_components=" << model.attention_components << "\n";
  os << "attention_hidden=" << model.attention_hidden << "\n";
  os << "update_hidden=" << model.update_hidden << "\n";
  os << "output_hidden=" << model.output_hidden << "\n";
  os << "enc_channels=";
  for (std::size_t i = 0; i < model.enc_channels.size(); ++i) {
    if (i) os << ",";
    os << model.enc_channels[i];
  }
  os << "\n";
  os << "enc_kernel=" << model.enc_kernel << "\n";
  os << "enc_stride=" << model.enc_stride << "\n";
  os << "enc_padding=" << model.enc_padding << "\n";
  os << "enc_fc_width=" << model.enc_fc_width << "\n";
  os << "enc_dropout=" << fmt_double(model.enc_dropout) << "\n";
  os << "enc_batchnorm=" << (model.enc_batchnorm ? 1 : 0) << "\n";
  os << "enc_min_frames=" << model.enc_min_frames << "\n";
  os << "logvar_clamp=" << fmt_double(model.logvar_clamp) << "\n";
  return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line without '=': " + line, 0);
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&kv](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw FormatError(std::string("config missing key: ") + key, 0);
    }
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  TrainConfig c;
  c.mode = train_mode_from_string(take("mode"));
  c.learning_rate = std::stod(take("learning_rate"));
  c.total_epochs = std::stoi(take("total_epochs"));
  c.anneal_fraction = std::stod(take("anneal_fraction"));
  c.batch_size = std::stoi(take("batch_size"));
  c.seed = std::stoull(take("seed"));
  c.stf_noise_scale = std::stod(take("stf_noise_scale"));
  c.grad_clip = std::stod(take("grad_clip"));
  c.model.d_x = std::stoi(take("d_x"));
  c.model.d_z = std::stoi(take("d_z"));
  c.model.d_p = std::stoi(take("d_p"));
  c.model.d_buf = std::stoi(take("d_buf"));
  c.model.k = std::stoi(take("k"));
  c.model.d_s = std::stoi(take("d_s"));
  c.model.vocab = std::stoi(take("vocab"));
  c.model.n_speakers = std::stoi(take("n_speakers"));
  c.model.attention_components = std::stoi(take("attention_components"));
  c.model.attention_hidden = std::stoi(take("attention_hidden"));
  c.model.update_hidden = std::stoi(take("update_hidden"));
  c.model.output_hidden = std::stoi(take("output_hidden"));
  c.model.enc_channels.clear();
  {
    std::istringstream cs(take("enc_channels"));
    std::string tok;
    while (std::getline(cs, tok, ',')) {
      if (!tok.empty()) c.model.enc_channels.push_back(std::stoi(tok));
    }
  }
  c.model.enc_kernel = std::stoi(take("enc_kernel"));
  c.model.enc_stride = std::stoi(take("enc_stride"));
  c.model.enc_padding = std::stoi(take("enc_padding"));
  c.model.enc_fc_width = std::stoi(take("enc_fc_width"));
  c.model.enc_dropout = std::stod(take("enc_dropout"));
  c.model.enc_batchnorm = std::stoi(take("enc_batchnorm")) != 0;
  c.model.enc_min_frames = std::stoi(take("enc_min_frames"));
  c.model.logvar_clamp = std::stod(take("logvar_clamp"));
  if (!kv.empty()) {
    throw FormatError("config has unknown key: " + kv.begin()->first, 0);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::zeros_like(const ParamSet& params) {
  AdamState s;
  s.m.reserve(static_cast<std::size_t>(params.size()));
  s.v.reserve(static_cast<std::size_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.tensor(i).shape());
    s.v.emplace_back(params.tensor(i).shape());
  }
  return s;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_update_tensor(Tensor& p, const double* g, Tensor& m, Tensor& v,
                        double lr, double bias1, double bias2,
                        const std::string& name) {
  const int n = p.numel();
  for (int i = 0; i < n; ++i) {
    const double gi = g[i];
    if (!std::isfinite(gi)) {
      throw DivergenceError("non-finite gradient for parameter '" + name +
                            "' at element " + std::to_string(i));
    }
    m.at(i) = kBeta1 * m.at(i) + (1.0 - kBeta1) * gi;
    v.at(i) = kBeta2 * v.at(i) + (1.0 - kBeta2) * gi * gi;
    const double mhat = m.at(i) / bias1;
    const double vhat = v.at(i) / bias2;
    p.at(i) -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
  }
}

}  // namespace

void adam_step(ParamSet& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr) {
  if (static_cast<int>(grads.size()) != params.size()) {
    throw DimensionError("adam_step: gradient count mismatch");
  }
  state.step += 1;
  const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (int i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    const Tensor& g = grads[static_cast<std::size_t>(i)];
    check_same_shape(params.tensor(i), g, "adam_step");
    adam_update_tensor(params.tensor(i), g.data(),
                       state.m[static_cast<std::size_t>(i)],
                       state.v[static_cast<std::size_t>(i)], lr, bias1, bias2,
                       params.name(i));
  }
}

namespace {

void adam_step_flat(ParamSet& params, const std::vector<double>& flat,
                    AdamState& state, double lr) {
  state.step += 1;
  const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  std::size_t off = 0;
  for (int i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    Tensor& p = params.tensor(i);
    adam_update_tensor(p, flat.data() + off,
                       state.m[static_cast<std::size_t>(i)],
                       state.v[static_cast<std::size_t>(i)], lr, bias1, bias2,
                       params.name(i));
    off += static_cast<std::size_t>(p.numel());
  }
}

std::size_t trainable_numel(const ParamSet& params) {
  std::size_t n = 0;
  for (int i = 0; i < params.size(); ++i) {
    if (params.trainable(i)) n += static_cast<std::size_t>(params.tensor(i).numel());
  }
  return n;
}

void clip_global_norm(std::vector<double>& flat, double max_norm) {
  double sq = 0.0;
  for (double g : flat) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (double& g : flat) g *= s;
  }
}

}  // namespace

Tensor semi_teacher_force(const Tensor& x_true_prev, const Tensor& x_pred_prev,
                          const Tensor& eta) {
  check_same_shape(x_true_prev, x_pred_prev, "semi_teacher_force");
  check_same_shape(x_true_prev, eta, "semi_teacher_force");
  Tensor out(x_true_prev.shape());
  for (int i = 0; i < out.numel(); ++i) {
    out.at(i) = 0.5 * (x_true_prev.at(i) + x_pred_prev.at(i)) + eta.at(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-example forward/backward
// ---------------------------------------------------------------------------

namespace {

struct ExampleResult {
  double rec = 0.0;
  double kl_raw = 0.0;  // NaN when the mode has no latent code
  double optimized_total = 0.0;
};

// Builds the teacher-forced graph for one utterance, returns the loss parts
// and (optionally) backpropagates into `flat_grads`.
ExampleResult run_example(Tape& tape, const Model& model, TrainMode mode,
                          const Utterance& utt, double lambda, double eta_scale,
                          std::uint64_t stream_seed, bool training,
                          BatchNormStats* bn_stats,
                          std::vector<double>* flat_grads) {
  const ModelConfig& cfg = model.cfg;
  const int T = utt.num_frames();
  Rng rng(stream_seed);

  tape.clear();
  // Gradients are tracked only when the caller wants them; `training` alone
  // selects dropout and batch-statistics behaviour.
  std::vector<Var> leaves = make_param_leaves(tape, model.params, flat_grads != nullptr);

  Var z;
  Var kl_var;
  const bool use_latent = mode == TrainMode::kVaeLoop;
  if (use_latent) {
    PosteriorVars post = encode_graph(tape, leaves, model, utt.frames, training,
                                      &rng, bn_stats);
    Tensor eps({cfg.d_z});
    rng.fill_normal(eps.vec(), 1.0);
    z = reparameterize_graph(tape, post, eps);
    kl_var = kl_gaussian_prior_graph(tape, post);
  } else {
    z = tape.leaf(Tensor({cfg.d_z}), false);
  }

  Var encoded = embed_phonemes(tape, leaves, model, utt.phonemes);
  const int speaker =
      speaker_index(mode, cfg.n_speakers, utt.hidden_factor);

  Var buffer = initial_buffer(tape, cfg);
  AttentionState attention =
      initial_attention_state(tape, cfg.attention_components);
  Var x_hat_prev = tape.leaf(Tensor({cfg.d_x}), false);
  Var rec_acc;

  for (int t = 0; t < T; ++t) {
    Tensor x_prev_true({cfg.d_x});
    if (t > 0) {
      for (int c = 0; c < cfg.d_x; ++c) x_prev_true.at(c) = utt.frames.at(t - 1, c);
    }
    Tensor eta({cfg.d_x});
    rng.fill_normal(eta.vec(), eta_scale);

    Var x_in = tape.add(
        tape.scale(tape.add(tape.leaf(std::move(x_prev_true), false), x_hat_prev), 0.5),
        tape.leaf(std::move(eta), false));

    DecodeStep step = decode_step(tape, leaves, model, buffer, attention,
                                  encoded, x_in, z, speaker);
    buffer = step.buffer;
    attention = step.attention;
    x_hat_prev = step.x_hat;

    Tensor x_true({cfg.d_x});
    for (int c = 0; c < cfg.d_x; ++c) x_true.at(c) = utt.frames.at(t, c);
    Var diff = tape.sub(step.x_hat, tape.leaf(std::move(x_true), false));
    Var sq = tape.dot(diff, diff);
    rec_acc = rec_acc.valid() ? tape.add(rec_acc, sq) : sq;
  }

  Var rec = tape.scale(rec_acc, 1.0 / T);
  Var loss = rec;
  if (use_latent && lambda > 0.0) {
    loss = tape.add(rec, tape.scale(kl_var, lambda / T));
  }

  ExampleResult out;
  out.rec = tape.value(rec).value();
  out.kl_raw = use_latent ? tape.value(kl_var).value() : kl_not_applicable();
  out.optimized_total = use_latent && lambda > 0.0
                            ? tape.value(loss).value()
                            : out.rec;

  if (flat_grads) {
    tape.backward(loss);
    std::size_t off = 0;
    for (int i = 0; i < model.params.size(); ++i) {
      if (!model.params.trainable(i)) continue;
      const Tensor& g = tape.grad(leaves[static_cast<std::size_t>(i)]);
      const int n = model.params.tensor(i).numel();
      for (int j = 0; j < n; ++j) (*flat_grads)[off + static_cast<std::size_t>(j)] = g.at(j);
      off += static_cast<std::size_t>(n);
    }
  }
  return out;
}

struct PerExampleEval {
  ExampleResult result;
  BatchNormStats bn;
};

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(slot, item) for every item, striped across `threads` workers. Each
// worker owns its slots, so results can be reduced in item order afterwards.
// The first worker exception (if any) is rethrown on the calling thread.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([w, count, threads, &fn, &error, &error_mutex]() {
      try {
        for (int i = w; i < count; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

ExampleLoss example_loss(const Model& model, TrainMode mode,
                         const Utterance& utt, double lambda, double eta_scale,
                         std::uint64_t stream_seed, bool training,
                         std::vector<double>* flat_grads) {
  if (flat_grads) flat_grads->assign(trainable_numel(model.params), 0.0);
  Tape tape;
  const ExampleResult r = run_example(tape, model, mode, utt, lambda, eta_scale,
                                      stream_seed, training, nullptr, flat_grads);
  return ExampleLoss{r.rec, r.kl_raw, r.optimized_total};
}

std::size_t trainable_size(const ParamSet& params) {
  return trainable_numel(params);
}

int speaker_index(TrainMode mode, int n_speakers, double hidden_factor) {
  if (mode != TrainMode::kBaselineLabeled || n_speakers <= 1) return 0;
  const double pos = (hidden_factor + 1.0) / 2.0;  // [0, 1]
  int idx = static_cast<int>(pos * n_speakers);
  if (idx >= n_speakers) idx = n_speakers - 1;
  if (idx < 0) idx = 0;
  return idx;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

LossBreakdown evaluate(const Model& model, TrainMode mode, const Corpus& corpus,
                       const std::vector<int>& indices,
                       const EvalOptions& opts) {
  if (indices.empty()) {
    throw DimensionError("evaluate: empty index set");
  }
  const int n = static_cast<int>(indices.size());
  const int threads = resolve_threads(opts.threads);
  std::vector<ExampleResult> results(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](int i) {
    thread_local Tape tape;
    const int idx = indices[static_cast<std::size_t>(i)];
    const std::uint64_t stream = Rng::derive(opts.seed, kValTag,
                                             static_cast<std::uint64_t>(idx));
    results[static_cast<std::size_t>(i)] =
        run_example(tape, model, mode, corpus[static_cast<std::size_t>(idx)],
                    1.0, opts.eta_scale, stream, false, nullptr, nullptr);
  });

  const bool has_kl = mode == TrainMode::kVaeLoop;
  double rec = 0.0;
  double kl_term = has_kl ? 0.0 : kl_not_applicable();
  for (std::size_t i = 0; i < results.size(); ++i) {
    rec += results[i].rec;
    if (has_kl) {
      // Like the reconstruction term, the KL is reported per frame.
      kl_term += results[i].kl_raw /
                 corpus[static_cast<std::size_t>(indices[i])].num_frames();
    }
  }
  rec /= n;
  if (has_kl) kl_term /= n;
  return total_loss(rec, kl_term, 1.0);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_record(BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.text(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32_array(t.vec());
}

Tensor read_record(BinaryReader& r, std::string& name) {
  name = r.text();
  const std::uint32_t rank = r.u32();
  if (rank > 8) r.fail("unreasonable tensor rank");
  std::vector<int> shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int>(r.u32());
    if (shape[i] <= 0) r.fail("non-positive tensor extent");
    numel *= static_cast<std::size_t>(shape[i]);
  }
  std::vector<double> values;
  r.f32_into(values, numel);
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  AtomicFile file(path);
  BinaryWriter& w = file.writer();
  w.magic("VLCK");
  w.u32(ckpt.version);
  w.text(ckpt.config.canonical_text());
  w.u32(static_cast<std::uint32_t>(ckpt.epoch));
  w.u64(ckpt.rng_counter);
  w.u64(static_cast<std::uint64_t>(ckpt.adam.step));
  const int p = ckpt.params.size();
  w.u32(static_cast<std::uint32_t>(3 * p));
  for (int i = 0; i < p; ++i) {
    write_record(w, ckpt.params.name(i), ckpt.params.tensor(i));
  }
  for (int i = 0; i < p; ++i) {
    write_record(w, "adam_m." + ckpt.params.name(i),
                 ckpt.adam.m[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < p; ++i) {
    write_record(w, "adam_v." + ckpt.params.name(i),
                 ckpt.adam.v[static_cast<std::size_t>(i)]);
  }
  file.commit();
}

Checkpoint load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  r.magic("VLCK");
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != 1) r.fail("unsupported checkpoint version");
  ckpt.config = TrainConfig::from_text(r.text());
  ckpt.epoch = static_cast<int>(r.u32());
  ckpt.rng_counter = r.u64();
  const std::uint64_t adam_t = r.u64();
  const std::uint32_t n_records = r.u32();

  // Rebuild the parameter skeleton so ordering and trainability flags match,
  // then overwrite every tensor from the file.
  Model skeleton = build_model(ckpt.config.model, ckpt.config.seed);
  ckpt.params = skeleton.params;
  ckpt.adam = AdamState::zeros_like(ckpt.params);
  ckpt.adam.step = static_cast<std::int64_t>(adam_t);

  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < n_records; ++i) {
    std::string name;
    Tensor t = read_record(r, name);
    std::vector<Tensor>* moment = nullptr;
    if (name.rfind("adam_m.", 0) == 0) {
      moment = &ckpt.adam.m;
      name = name.substr(7);
    } else if (name.rfind("adam_v.", 0) == 0) {
      moment = &ckpt.adam.v;
      name = name.substr(7);
    }
    const int idx = ckpt.params.find(name);
    if (idx < 0) r.fail("unknown parameter record: " + name);
    if (!ckpt.params.tensor(idx).same_shape(t)) {
      r.fail("shape mismatch for parameter " + name);
    }
    if (moment) {
      (*moment)[static_cast<std::size_t>(idx)] = std::move(t);
    } else {
      ckpt.params.tensor(idx) = std::move(t);
    }
    ++filled;
  }
  if (filled != static_cast<std::size_t>(3 * ckpt.params.size())) {
    r.fail("checkpoint record count mismatch");
  }
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m = build_model(ckpt.config.model, ckpt.config.seed);
  m.params = ckpt.params;
  return m;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string log_csv_header() { return "epoch,lambda,rec_error,kl_term,total,split"; }

std::string log_csv_row(const LogRow& row) {
  std::ostringstream os;
  os << row.epoch << "," << fmt_double(row.loss.lambda) << ","
     << fmt_double(row.loss.rec_error) << ",";
  if (row.loss.has_kl()) {
    os << fmt_double(row.loss.kl_term);
  } else {
    os << "na";
  }
  os << "," << fmt_double(row.loss.total) << "," << row.split;
  return os.str();
}

TrainResult train(const TrainConfig& cfg, const Corpus& corpus,
                  const SplitIndices& split, const Checkpoint* resume_from,
                  std::ostream* progress, int run_until) {
  cfg.validate();
  if (split.train.empty() || split.validation.empty()) {
    throw DimensionError("train: empty train or validation split");
  }
  const int stop_epoch = run_until > 0 ? std::min(run_until, cfg.total_epochs)
                                       : cfg.total_epochs;

  Model model = build_model(cfg.model, Rng::derive(cfg.seed, kInitTag));
  AdamState adam = AdamState::zeros_like(model.params);
  int start_epoch = 0;

  if (resume_from) {
    if (resume_from->config.canonical_text() != cfg.canonical_text()) {
      throw DimensionError(
          "resume: configuration differs from the checkpoint");
    }
    model.params = resume_from->params;
    adam = resume_from->adam;
    start_epoch = resume_from->epoch;
  } else {
    // Fresh parameters start on the 32-bit grid, like every epoch boundary.
    model.params.quantize_to_f32();
  }

  const AnnealSchedule sched = make_schedule(cfg.anneal_fraction, cfg.total_epochs);
  const int threads = resolve_threads(cfg.threads);
  const int n_train = static_cast<int>(split.train.size());
  const std::size_t flat_size = trainable_numel(model.params);

  auto snapshot = [&](int completed_epochs) {
    Checkpoint c;
    c.config = cfg;
    c.epoch = completed_epochs;
    c.rng_counter = static_cast<std::uint64_t>(completed_epochs);
    c.params = model.params;
    c.adam = adam;
    return c;
  };

  TrainResult result;
  result.best_state = snapshot(start_epoch);
  result.final_state = result.best_state;
  double best_val = std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> example_grads(
      static_cast<std::size_t>(cfg.batch_size));
  for (auto& g : example_grads) g.assign(flat_size, 0.0);
  std::vector<ExampleResult> example_results(
      static_cast<std::size_t>(cfg.batch_size));
  std::vector<BatchNormStats> example_bn(static_cast<std::size_t>(cfg.batch_size));
  std::vector<double> batch_grads(flat_size, 0.0);

  const bool track_bn = cfg.mode == TrainMode::kVaeLoop && cfg.model.enc_batchnorm;

  for (int epoch = start_epoch; epoch < stop_epoch; ++epoch) {
    std::vector<int> order = split.train;
    Rng shuffle_rng(Rng::derive(cfg.seed, kShuffleTag,
                                static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_rec = 0.0, epoch_kl = 0.0, epoch_total = 0.0;
    double lambda = 1.0;
    bool diverged = false;

    for (int start = 0; start < n_train && !diverged; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n_train - start);
      lambda = anneal_lambda_fractional(
          epoch + static_cast<double>(start) / n_train, sched);

      parallel_for(bsz, threads, [&](int i) {
        thread_local Tape tape;
        const int idx = order[static_cast<std::size_t>(start + i)];
        const std::uint64_t stream =
            Rng::derive(cfg.seed, kExampleTag, static_cast<std::uint64_t>(epoch),
                        static_cast<std::uint64_t>(idx));
        example_bn[static_cast<std::size_t>(i)] = BatchNormStats{};
        example_results[static_cast<std::size_t>(i)] = run_example(
            tape, model, cfg.mode, corpus[static_cast<std::size_t>(idx)], lambda,
            cfg.stf_noise_scale, stream, true,
            track_bn ? &example_bn[static_cast<std::size_t>(i)] : nullptr,
            &example_grads[static_cast<std::size_t>(i)]);
      });

      // Ordered reduction keeps results independent of thread scheduling.
      std::fill(batch_grads.begin(), batch_grads.end(), 0.0);
      for (int i = 0; i < bsz; ++i) {
        const std::vector<double>& g = example_grads[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < flat_size; ++j) batch_grads[j] += g[j];
        const ExampleResult& r = example_results[static_cast<std::size_t>(i)];
        if (!std::isfinite(r.rec) || !std::isfinite(r.optimized_total)) {
          diverged = true;
        }
        epoch_rec += r.rec;
        if (std::isfinite(r.kl_raw)) {
          epoch_kl +=
              r.kl_raw /
              corpus[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])]
                  .num_frames();
        }
        epoch_total += r.optimized_total;
      }
      if (diverged) {
        result.diverged = true;
        result.divergence_message =
            "non-finite loss at epoch " + std::to_string(epoch);
        break;
      }
      for (std::size_t j = 0; j < flat_size; ++j) batch_grads[j] /= bsz;
      clip_global_norm(batch_grads, cfg.grad_clip);

      try {
        adam_step_flat(model.params, batch_grads, adam, cfg.learning_rate);
      } catch (const DivergenceError& e) {
        result.diverged = true;
        result.divergence_message = e.what();
        break;
      }

      if (track_bn) {
        for (int i = 0; i < bsz; ++i) {
          const BatchNormStats& bn = example_bn[static_cast<std::size_t>(i)];
          for (std::size_t layer = 0; layer < bn.mean.size(); ++layer) {
            const ConvLayerParams& cp = model.enc.convs[layer];
            Tensor& rm = model.params.tensor(cp.bn_mean);
            Tensor& rv = model.params.tensor(cp.bn_var);
            for (int c = 0; c < rm.numel(); ++c) {
              rm.at(c) = 0.9 * rm.at(c) + 0.1 * bn.mean[layer].at(c);
              rv.at(c) = 0.9 * rv.at(c) + 0.1 * bn.var[layer].at(c);
            }
          }
        }
      }

      for (int i = 0; i < model.params.size(); ++i) {
        if (!model.params.tensor(i).all_finite()) {
          result.diverged = true;
          result.divergence_message =
              "non-finite parameter '" + model.params.name(i) +
              "' after update at epoch " + std::to_string(epoch);
          break;
        }
      }
      if (result.diverged) break;
    }

    if (result.diverged) {
      // Keep the last epoch-boundary state.
      break;
    }

    // Epoch boundary: land the state on the 32-bit grid so checkpoints are
    // exact, then validate and log.
    model.params.quantize_to_f32();
    for (Tensor& t : adam.m) t.quantize_to_f32();
    for (Tensor& t : adam.v) t.quantize_to_f32();

    LogRow train_row;
    train_row.epoch = epoch;
    train_row.split = "train";
    const double inv = 1.0 / n_train;
    train_row.loss.rec_error = epoch_rec * inv;
    train_row.loss.kl_term = cfg.mode == TrainMode::kVaeLoop
                                 ? epoch_kl * inv
                                 : kl_not_applicable();
    train_row.loss.lambda = lambda;
    train_row.loss.total = epoch_total * inv;
    result.log.push_back(train_row);

    EvalOptions val_opts;
    val_opts.eta_scale = 0.0;
    val_opts.seed = Rng::derive(cfg.seed, kValTag);
    val_opts.threads = threads;
    const LossBreakdown val =
        evaluate(model, cfg.mode, corpus, split.validation, val_opts);
    LogRow val_row;
    val_row.epoch = epoch;
    val_row.split = "validation";
    val_row.loss = val;
    result.log.push_back(val_row);

    result.final_state = snapshot(epoch + 1);
    if (val.total < best_val) {
      best_val = val.total;
      result.best_state = result.final_state;
    }

    if (progress) {
      (*progress) << "epoch " << epoch << " lambda " << lambda << " train "
                  << train_row.loss.total << " val " << val.total << "\n";
    }
  }

  return result;
}

}  // namespace vloop
