// Command-line front end: data generation, training, evaluation, encoding,
// synthesis, latent interpolation and trajectory export.

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vloop/corpus.hpp"
#include "vloop/synthesis.hpp"
#include "vloop/training.hpp"

namespace {

using namespace vloop;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path, 0);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// "1,2,3" inline, or "@file" holding comma/whitespace separated ids.
std::vector<int> parse_phonemes(const std::string& arg) {
  std::string text = arg;
  if (!arg.empty() && arg[0] == '@') {
    text = read_text_file(arg.substr(1));
    for (char& c : text) {
      if (c == '\n' || c == '\t' || c == ' ') c = ',';
    }
  }
  std::vector<int> ids = parse_int_list(text);
  if (ids.empty()) throw DimensionError("no phoneme ids in: " + arg);
  return ids;
}

Tensor read_z_file(const std::string& arg, int d_z) {
  // Accept both "--z file" and "--z @file".
  const std::string path = !arg.empty() && arg[0] == '@' ? arg.substr(1) : arg;
  std::string text = read_text_file(path);
  for (char& c : text) {
    if (c == '\n' || c == '\t' || c == ' ') c = ',';
  }
  std::vector<double> values = parse_double_list(text);
  if (static_cast<int>(values.size()) != d_z) {
    throw DimensionError("z file " + path + " holds " +
                         std::to_string(values.size()) + " values, model needs " +
                         std::to_string(d_z));
  }
  return Tensor({d_z}, std::move(values));
}

void write_text(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open for writing: " + path, 0);
  out << content;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const std::vector<int>& pick_split(const SplitIndices& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  if (name == "test") return s.test;
  throw DimensionError("unknown split: " + name);
}

struct ModelFlags {
  void attach(CLI::App* cmd, ModelConfig& mc) {
    cmd->add_option("--d-z", mc.d_z, "Latent dimensions");
    cmd->add_option("--d-buf", mc.d_buf, "Buffer rows");
    cmd->add_option("--buf-cols", mc.k, "Buffer columns");
    cmd->add_option("--d-p", mc.d_p, "Phoneme embedding dimensions");
    cmd->add_option("--d-s", mc.d_s, "Speaker embedding dimensions");
    cmd->add_option("--attn-components", mc.attention_components,
                    "Attention mixture components");
    cmd->add_option("--attn-hidden", mc.attention_hidden,
                    "Attention query hidden width");
    cmd->add_option("--update-hidden", mc.update_hidden,
                    "Update network hidden width");
    cmd->add_option("--output-hidden", mc.output_hidden,
                    "Output network hidden width");
    cmd->add_option("--enc-channels", enc_channels,
                    "Encoder conv channels, comma separated");
    cmd->add_option("--enc-dropout", mc.enc_dropout, "Encoder dropout rate");
    cmd->add_flag("--no-batchnorm", no_batchnorm, "Disable encoder batchnorm");
    cmd->add_option("--n-speakers", mc.n_speakers,
                    "Speaker buckets (labeled baseline)");
  }
  void apply(ModelConfig& mc) const {
    if (!enc_channels.empty()) mc.enc_channels = parse_int_list(enc_channels);
    if (no_batchnorm) mc.enc_batchnorm = false;
  }
  std::string enc_channels;
  bool no_batchnorm = false;
};

int run(int argc, char** argv) {
  CLI::App app{"VAE-conditioned buffer-loop sequence synthesizer"};
  app.require_subcommand(1);
  // Usage: vloop --config file <subcommand> ...; the file holds plain
  // key=value lines under a [subcommand] section. Command-line flags
  // override file entries; unknown keys are rejected.
  app.set_config("--config", "", "Read flags from a key=value file");
  app.allow_config_extras(CLI::config_extras_mode::error);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->footer("Dataset file format: magic \"VLD1\", version u32, counts, then "
              "per utterance the hidden factor (f64), phoneme ids (u16) and "
              "frames (f32 little-endian).");
  std::string gen_out;
  CorpusConfig cc;
  gen->add_option("--out", gen_out, "Output dataset path")->required();
  gen->add_option("--count", cc.utterance_count, "Utterance count");
  gen->add_option("--seed", cc.seed, "Generator seed");
  gen->add_option("--vocab", cc.vocab, "Phoneme vocabulary size");
  gen->add_option("--dx", cc.d_x, "Feature channels");
  gen->add_option("--fpp-min", cc.frames_per_phoneme_min, "Min frames per phoneme");
  gen->add_option("--fpp-max", cc.frames_per_phoneme_max, "Max frames per phoneme");
  gen->add_option("--phonemes-min", cc.phonemes_per_utterance_min,
                  "Min phonemes per utterance");
  gen->add_option("--phonemes-max", cc.phonemes_per_utterance_max,
                  "Max phonemes per utterance");
  gen->add_option("--noise", cc.noise_amplitude, "Channel noise amplitude");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_data, tr_out, tr_final_out, tr_log, tr_resume, tr_mode = "vae-loop";
  std::uint64_t tr_split_seed = 0;
  bool tr_split_seed_set = false;
  int tr_run_until = 0;
  TrainConfig tc;
  ModelFlags tr_mf;
  tr->add_option("--data", tr_data, "Dataset path")->required();
  tr->add_option("--out", tr_out, "Best-validation checkpoint path")->required();
  tr->add_option("--final-out", tr_final_out, "Also write the final-epoch state");
  tr->add_option("--log", tr_log, "Training log CSV path");
  tr->add_option("--epochs", tc.total_epochs, "Total epochs (defines the ramp)");
  tr->add_option("--anneal-frac", tc.anneal_fraction,
                 "Fraction of epochs to ramp the KL weight");
  tr->add_option("--lr", tc.learning_rate, "Adam learning rate");
  tr->add_option("--seed", tc.seed, "Training seed");
  tr->add_option("--batch", tc.batch_size, "Batch size");
  tr->add_option("--stf-noise", tc.stf_noise_scale,
                 "Semi-teacher-forcing noise scale");
  tr->add_option("--grad-clip", tc.grad_clip, "Gradient norm clip");
  tr->add_option("--threads", tc.threads, "Worker threads (0 = auto)");
  tr->add_option("--mode", tr_mode, "vae-loop | baseline-no-z | baseline-labeled");
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  tr->add_option("--run-until", tr_run_until,
                 "Stop after this many epochs without changing the schedule");
  tr->add_option("--split-seed", tr_split_seed, "Dataset split seed")
      ->each([&](const std::string&) { tr_split_seed_set = true; });
  tr_mf.attach(tr, tc.model);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_csv = "-";
  std::uint64_t ev_seed = 0, ev_split_seed = 0;
  bool ev_split_seed_set = false;
  double ev_stf = -1.0;
  int ev_threads = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset path")->required();
  ev->add_option("--split", ev_split, "train | validation | test | all");
  ev->add_option("--seed", ev_seed, "Evaluation noise seed");
  ev->add_option("--stf-noise", ev_stf,
                 "Noise scale (default: the checkpoint's training value)");
  ev->add_option("--threads", ev_threads, "Worker threads (0 = auto)");
  ev->add_option("--csv", ev_csv, "Output CSV path ('-' = stdout)");
  ev->add_option("--split-seed", ev_split_seed, "Dataset split seed")
      ->each([&](const std::string&) { ev_split_seed_set = true; });

  // ---- encode ----
  auto* en = app.add_subcommand("encode", "Posterior mu/sigma for utterances");
  std::string en_ckpt, en_data, en_split = "test", en_out = "-", en_indices;
  std::uint64_t en_split_seed = 0;
  bool en_split_seed_set = false;
  en->add_option("--checkpoint", en_ckpt, "Checkpoint path")->required();
  en->add_option("--data", en_data, "Dataset path")->required();
  en->add_option("--split", en_split, "train | validation | test");
  en->add_option("--indices", en_indices,
                 "Explicit utterance indices (overrides --split)");
  en->add_option("--out", en_out, "Output CSV path ('-' = stdout)");
  en->add_option("--split-seed", en_split_seed, "Dataset split seed")
      ->each([&](const std::string&) { en_split_seed_set = true; });

  // ---- synthesize ----
  auto* sy = app.add_subcommand("synthesize", "Free-running generation");
  std::string sy_ckpt, sy_phonemes, sy_z, sy_out, sy_csv_out = "-", sy_attn_csv;
  SynthesisConfig sy_cfg;
  sy_cfg.sigma = 1.0;
  int sy_csv_channel = -1;
  sy->add_option("--checkpoint", sy_ckpt, "Checkpoint path")->required();
  sy->add_option("--phonemes", sy_phonemes, "Comma-separated ids or @file")
      ->required();
  sy->add_option("--sigma", sy_cfg.sigma, "Prior scale (0 = deterministic z=0)");
  sy->add_option("--seed", sy_cfg.seed, "Sampling seed");
  sy->add_option("--z", sy_z, "Text file of z values (overrides sampling)");
  sy->add_option("--out", sy_out, "Output sequence file")->required();
  sy->add_option("--max-frames", sy_cfg.max_frames,
                 "Frame cap (0 = 4x phoneme count)");
  sy->add_option("--margin", sy_cfg.margin, "Attention termination margin");
  sy->add_option("--csv", sy_csv_channel, "Also export this channel as CSV");
  sy->add_option("--csv-out", sy_csv_out, "Channel CSV path ('-' = stdout)");
  sy->add_option("--attn-csv", sy_attn_csv, "Attention weights CSV path");

  // ---- interpolate ----
  auto* ip = app.add_subcommand(
      "interpolate", "Encode two utterances and synthesize along the blend");
  std::string ip_ckpt, ip_utt_a, ip_utt_b, ip_data, ip_phonemes, ip_prefix;
  std::string ip_alphas = "0,0.5,1";
  int ip_index_a = -1, ip_index_b = -1, ip_csv_channel = -1;
  SynthesisConfig ip_cfg;
  ip->add_option("--checkpoint", ip_ckpt, "Checkpoint path")->required();
  ip->add_option("--utt-a", ip_utt_a, "First utterance (sequence file)");
  ip->add_option("--utt-b", ip_utt_b, "Second utterance (sequence file)");
  ip->add_option("--data", ip_data, "Dataset path (with --index-a/--index-b)");
  ip->add_option("--index-a", ip_index_a, "First utterance index");
  ip->add_option("--index-b", ip_index_b, "Second utterance index");
  ip->add_option("--phonemes", ip_phonemes,
                 "Target phonemes (default: first utterance's, needs --data)");
  ip->add_option("--alphas", ip_alphas, "Blend positions in [0,1]");
  ip->add_option("--out-prefix", ip_prefix, "Output path prefix")->required();
  ip->add_option("--max-frames", ip_cfg.max_frames, "Frame cap (0 = 4x phonemes)");
  ip->add_option("--margin", ip_cfg.margin, "Attention termination margin");
  ip->add_option("--csv", ip_csv_channel, "Also export this channel as CSV");

  // ---- export-traj ----
  auto* ex = app.add_subcommand("export-traj", "Channel trajectory of a sequence");
  std::string ex_in, ex_out = "-";
  int ex_channel = 0;
  ex->add_option("--in", ex_in, "Sequence file")->required();
  ex->add_option("--channel", ex_channel, "Channel index");
  ex->add_option("--out", ex_out, "Output CSV path ('-' = stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion") {
      return app.exit(e);
    }
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  if (gen->parsed()) {
    Corpus corpus = generate_corpus(cc);
    save_dataset(gen_out, corpus);
    std::cerr << "wrote " << corpus.size() << " utterances to " << gen_out << "\n";
    return kExitOk;
  }

  if (tr->parsed()) {
    tc.mode = train_mode_from_string(tr_mode);
    tr_mf.apply(tc.model);
    tc.validate();
    Corpus corpus = load_dataset(tr_data);
    SplitIndices s = split(corpus, tr_split_seed_set ? tr_split_seed : tc.seed);

    std::optional<Checkpoint> resume;
    if (!tr_resume.empty()) resume = load_checkpoint(tr_resume);

    TrainResult result = train(tc, corpus, s, resume ? &*resume : nullptr,
                               &std::cerr, tr_run_until);

    save_checkpoint(tr_out, result.best_state);
    if (!tr_final_out.empty()) save_checkpoint(tr_final_out, result.final_state);
    if (!tr_log.empty()) {
      std::ostringstream os;
      os << log_csv_header() << "\n";
      for (const LogRow& row : result.log) os << log_csv_row(row) << "\n";
      write_text(tr_log, os.str());
    }
    if (result.diverged) {
      std::cerr << "training diverged: " << result.divergence_message
                << " (kept the last finite checkpoint)\n";
      return kExitDiverged;
    }
    std::cerr << "best validation at epoch " << (result.best_state.epoch - 1)
              << ", checkpoint written to " << tr_out << "\n";
    return kExitOk;
  }

  if (ev->parsed()) {
    Checkpoint ckpt = load_checkpoint(ev_ckpt);
    Model model = model_from_checkpoint(ckpt);
    Corpus corpus = load_dataset(ev_data);
    SplitIndices s =
        split(corpus, ev_split_seed_set ? ev_split_seed : ckpt.config.seed);
    EvalOptions opts;
    opts.eta_scale = ev_stf >= 0.0 ? ev_stf : ckpt.config.stf_noise_scale;
    opts.seed = ev_seed;
    opts.threads = ev_threads;

    std::ostringstream os;
    os << log_csv_header() << "\n";
    std::vector<std::string> names;
    if (ev_split == "all") {
      names = {"train", "validation", "test"};
    } else {
      names = {ev_split};
    }
    for (const std::string& name : names) {
      LossBreakdown lb =
          evaluate(model, ckpt.config.mode, corpus, pick_split(s, name), opts);
      LogRow row;
      row.epoch = ckpt.epoch;
      row.loss = lb;
      row.split = name;
      os << log_csv_row(row) << "\n";
    }
    write_text(ev_csv, os.str());
    return kExitOk;
  }

  if (en->parsed()) {
    Checkpoint ckpt = load_checkpoint(en_ckpt);
    Model model = model_from_checkpoint(ckpt);
    Corpus corpus = load_dataset(en_data);
    std::vector<int> indices;
    if (!en_indices.empty()) {
      indices = parse_int_list(en_indices);
    } else {
      SplitIndices s =
          split(corpus, en_split_seed_set ? en_split_seed : ckpt.config.seed);
      indices = pick_split(s, en_split);
    }
    std::ostringstream os;
    os << "index";
    for (int i = 0; i < model.cfg.d_z; ++i) os << ",mu_" << i;
    for (int i = 0; i < model.cfg.d_z; ++i) os << ",sigma_" << i;
    os << "\n";
    for (int idx : indices) {
      if (idx < 0 || idx >= static_cast<int>(corpus.size())) {
        throw DimensionError("utterance index out of range: " + std::to_string(idx));
      }
      PosteriorParams post = encode(model, corpus[static_cast<std::size_t>(idx)].frames);
      os << idx;
      for (int i = 0; i < post.mu.numel(); ++i) os << "," << fmt(post.mu.at(i));
      Tensor sigma = post.sigma();
      for (int i = 0; i < sigma.numel(); ++i) os << "," << fmt(sigma.at(i));
      os << "\n";
    }
    write_text(en_out, os.str());
    return kExitOk;
  }

  if (sy->parsed()) {
    Checkpoint ckpt = load_checkpoint(sy_ckpt);
    Model model = model_from_checkpoint(ckpt);
    std::vector<int> phonemes = parse_phonemes(sy_phonemes);
    Tensor z;
    if (!sy_z.empty()) {
      z = read_z_file(sy_z, model.cfg.d_z);
    } else {
      Rng rng(Rng::derive(sy_cfg.seed, 0x5A3Du));
      z = sample_prior(model.cfg.d_z, sy_cfg.sigma, rng);
    }
    AttentionTrace trace;
    Tensor frames = synthesize(model, phonemes, z, sy_cfg,
                               sy_attn_csv.empty() ? nullptr : &trace);
    frames.quantize_to_f32();
    save_sequence(sy_out, frames);
    if (sy_csv_channel >= 0) {
      write_text(sy_csv_out, trajectory_csv(frames, sy_csv_channel));
    }
    if (!sy_attn_csv.empty()) {
      write_text(sy_attn_csv, attention_csv(trace));
    }
    std::cerr << "synthesized " << frames.dim(0) << " frames to " << sy_out << "\n";
    return kExitOk;
  }

  if (ip->parsed()) {
    Checkpoint ckpt = load_checkpoint(ip_ckpt);
    Model model = model_from_checkpoint(ckpt);
    Tensor frames_a, frames_b;
    std::vector<int> phonemes;
    if (!ip_utt_a.empty() || !ip_utt_b.empty()) {
      if (ip_utt_a.empty() || ip_utt_b.empty()) {
        throw DimensionError("interpolate needs both --utt-a and --utt-b");
      }
      frames_a = load_sequence(ip_utt_a);
      frames_b = load_sequence(ip_utt_b);
    } else {
      if (ip_data.empty() || ip_index_a < 0 || ip_index_b < 0) {
        throw DimensionError(
            "interpolate needs --utt-a/--utt-b or --data with --index-a/--index-b");
      }
      Corpus corpus = load_dataset(ip_data);
      if (ip_index_a >= static_cast<int>(corpus.size()) ||
          ip_index_b >= static_cast<int>(corpus.size())) {
        throw DimensionError("utterance index out of range");
      }
      frames_a = corpus[static_cast<std::size_t>(ip_index_a)].frames;
      frames_b = corpus[static_cast<std::size_t>(ip_index_b)].frames;
      phonemes = corpus[static_cast<std::size_t>(ip_index_a)].phonemes;
    }
    if (!ip_phonemes.empty()) phonemes = parse_phonemes(ip_phonemes);
    if (phonemes.empty()) {
      throw DimensionError("no target phonemes: pass --phonemes");
    }
    PosteriorParams post_a = encode(model, frames_a);
    PosteriorParams post_b = encode(model, frames_b);
    for (double alpha : parse_double_list(ip_alphas)) {
      Tensor z = interpolate_z(post_a.mu, post_b.mu, alpha);
      Tensor frames = synthesize(model, phonemes, z, ip_cfg);
      frames.quantize_to_f32();
      char tag[32];
      std::snprintf(tag, sizeof(tag), "a%.3f", alpha);
      const std::string path = ip_prefix + tag + ".vlsq";
      save_sequence(path, frames);
      if (ip_csv_channel >= 0) {
        write_text(ip_prefix + tag + ".csv",
                   trajectory_csv(frames, ip_csv_channel));
      }
      std::cerr << "alpha " << alpha << ": " << frames.dim(0) << " frames -> "
                << path << "\n";
    }
    return kExitOk;
  }

  if (ex->parsed()) {
    Tensor frames = load_sequence(ex_in);
    write_text(ex_out, trajectory_csv(frames, ex_channel));
    return kExitOk;
  }

  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
