#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "vloop/corpus.hpp"
#include "vloop/synthesis.hpp"
#include "vloop/training.hpp"

using namespace vloop;
namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* bin = std::getenv("VLOOP_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "VLOOP_BIN not set (run through ctest)");
  return bin;
}

int run_cli(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = binary() + " " + args + " 2>" + log;
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

struct TempDir {
  TempDir() {
    path = fs::temp_directory_path() / "vloop_cli_test";
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const {
    return (path / name).string();
  }
  fs::path path;
};

// Small model flags shared by the pipeline tests.
const char* kSmallModel =
    " --d-z 6 --d-buf 10 --buf-cols 3 --d-p 6 --d-s 4 --attn-components 3"
    " --attn-hidden 10 --update-hidden 16 --output-hidden 16"
    " --enc-channels 6,6,6,6,6";

}  // namespace

TEST_CASE("end-to-end pipeline through the executable") {
  TempDir tmp;
  const std::string data = tmp / "d.vld";
  const std::string ckpt = tmp / "m.vlck";
  const std::string log = tmp / "log.csv";

  REQUIRE(run_cli("gen-data --out " + data + " --count 80 --seed 7") == 0);
  Corpus corpus = load_dataset(data);
  CHECK(corpus.size() == 80);

  REQUIRE(run_cli("train --data " + data + " --out " + ckpt + " --log " + log +
                  " --epochs 2 --anneal-frac 0.1 --lr 1e-4 --seed 7 --batch 8" +
                  " --stf-noise 0.1 --threads 2" + kSmallModel) == 0);
  Checkpoint loaded = load_checkpoint(ckpt);
  CHECK(loaded.config.model.d_z == 6);
  CHECK(loaded.config.learning_rate == 1e-4);

  const std::string log_text = slurp(log);
  CHECK(log_text.rfind("epoch,lambda,rec_error,kl_term,total,split", 0) == 0);
  CHECK(count_lines(log_text) == 1 + 2 * 2);  // header + (train+validation) x 2

  SUBCASE("eval emits one row per split") {
    const std::string csv = tmp / "eval.csv";
    REQUIRE(run_cli("eval --checkpoint " + ckpt + " --data " + data +
                    " --split all --seed 3 --csv " + csv) == 0);
    const std::string text = slurp(csv);
    CHECK(count_lines(text) == 4);
    CHECK(text.find(",train") != std::string::npos);
    CHECK(text.find(",validation") != std::string::npos);
    CHECK(text.find(",test") != std::string::npos);
  }

  SUBCASE("encode writes mu and sigma columns") {
    const std::string csv = tmp / "enc.csv";
    REQUIRE(run_cli("encode --checkpoint " + ckpt + " --data " + data +
                    " --indices 0,3,5 --out " + csv) == 0);
    const std::string text = slurp(csv);
    CHECK(count_lines(text) == 4);
    CHECK(text.find("mu_5") != std::string::npos);
    CHECK(text.find("sigma_5") != std::string::npos);
    CHECK(text.find("mu_6") == std::string::npos);
  }

  SUBCASE("sigma-zero synthesis is byte-identical across runs") {
    const std::string a = tmp / "a.vlsq";
    const std::string b = tmp / "b.vlsq";
    REQUIRE(run_cli("synthesize --checkpoint " + ckpt +
                    " --phonemes 1,2,3,4 --sigma 0 --out " + a) == 0);
    REQUIRE(run_cli("synthesize --checkpoint " + ckpt +
                    " --phonemes 1,2,3,4 --sigma 0 --out " + b) == 0);
    CHECK(slurp(a) == slurp(b));
  }

  SUBCASE("synthesize accepts @file phonemes and exports CSVs") {
    const std::string phf = tmp / "ph.txt";
    std::ofstream(phf) << "1, 2\n3 4\n";
    const std::string out = tmp / "s.vlsq";
    const std::string traj = tmp / "traj.csv";
    const std::string attn = tmp / "attn.csv";
    REQUIRE(run_cli("synthesize --checkpoint " + ckpt + " --phonemes @" + phf +
                    " --sigma 0 --out " + out + " --csv 0 --csv-out " + traj +
                    " --attn-csv " + attn) == 0);
    Tensor frames = load_sequence(out);
    CHECK(count_lines(slurp(traj)) == frames.dim(0) + 1);
    CHECK(count_lines(slurp(attn)) == frames.dim(0) * 4 + 1);
  }

  SUBCASE("export-traj matches the stored channel") {
    const std::string out = tmp / "s2.vlsq";
    REQUIRE(run_cli("synthesize --checkpoint " + ckpt +
                    " --phonemes 2,3 --sigma 0 --out " + out) == 0);
    const std::string csv = tmp / "t2.csv";
    REQUIRE(run_cli("export-traj --in " + out + " --channel 1 --out " + csv) == 0);
    Tensor frames = load_sequence(out);
    const std::string text = slurp(csv);
    CHECK(count_lines(text) == frames.dim(0) + 1);
    CHECK(run_cli("export-traj --in " + out + " --channel 99 --out " + csv) == 1);
  }

  SUBCASE("interpolate sweeps alphas from dataset utterances") {
    REQUIRE(run_cli("interpolate --checkpoint " + ckpt + " --data " + data +
                    " --index-a 0 --index-b 1 --alphas 0,0.5,1 --out-prefix " +
                    (tmp / "ip_")) == 0);
    CHECK(fs::exists(tmp / "ip_a0.000.vlsq"));
    CHECK(fs::exists(tmp / "ip_a0.500.vlsq"));
    CHECK(fs::exists(tmp / "ip_a1.000.vlsq"));
  }

  SUBCASE("resume continues from a checkpoint") {
    const std::string part = tmp / "part.vlck";
    const std::string full = tmp / "full.vlck";
    const std::string final_a = tmp / "final_a.vlck";
    const std::string final_b = tmp / "final_b.vlck";
    const std::string base = "train --data " + data +
                             " --epochs 3 --anneal-frac 0.1 --lr 1e-4 --seed 9"
                             " --batch 8 --stf-noise 0.1 --threads 2" +
                             std::string(kSmallModel);
    REQUIRE(run_cli(base + " --out " + full + " --final-out " + final_a) == 0);
    REQUIRE(run_cli(base + " --out " + part + " --final-out " + part +
                    " --run-until 2") == 0);
    REQUIRE(run_cli(base + " --out " + tmp / "resumed.vlck" + " --final-out " +
                    final_b + " --resume " + part) == 0);
    CHECK(slurp(final_a) == slurp(final_b));
  }
}

TEST_CASE("usage and data errors map to exit codes") {
  TempDir tmp;
  SUBCASE("invalid learning rate is a usage error") {
    const std::string err = tmp / "err.txt";
    CHECK(run_cli("train --data x.vld --out y.vlck --lr 0", err) == 1);
    const std::string text = slurp(err);
    CHECK(text.find("learning_rate") != std::string::npos);
  }
  SUBCASE("missing required flag is a usage error") {
    CHECK(run_cli("gen-data --count 10") == 1);
  }
  SUBCASE("unknown subcommand is a usage error") {
    CHECK(run_cli("frobnicate") == 1);
  }
  SUBCASE("missing dataset file is a data error") {
    CHECK(run_cli("train --data " + (tmp / "nope.vld") + " --out " +
                  (tmp / "m.vlck")) == 2);
  }
  SUBCASE("corrupt dataset magic is a data error") {
    const std::string bad = tmp / "bad.vld";
    std::ofstream(bad, std::ios::binary) << "NOPEnope";
    CHECK(run_cli("train --data " + bad + " --out " + (tmp / "m.vlck")) == 2);
  }
  SUBCASE("help exits zero") {
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("train --help") == 0);
  }
}

TEST_CASE("config file fallback with flag override") {
  TempDir tmp;
  const std::string data = tmp / "d.vld";
  REQUIRE(run_cli("gen-data --out " + data + " --count 60 --seed 3") == 0);

  const std::string cfg = tmp / "train.cfg";
  {
    std::ofstream out(cfg);
    out << "[train]\n"
        << "data=" << data << "\n"
        << "out=" << (tmp / "m.vlck") << "\n"
        << "epochs=1\n"
        << "lr=1e-4\n"
        << "seed=3\n"
        << "batch=8\n"
        << "threads=2\n"
        << "d-z=6\nd-buf=10\nbuf-cols=3\nd-p=6\nd-s=4\n"
        << "attn-components=3\nattn-hidden=10\n"
        << "update-hidden=16\noutput-hidden=16\n"
        << "enc-channels=\"6,6,6,6,6\"\n";
  }
  REQUIRE(run_cli("--config " + cfg + " train") == 0);
  Checkpoint a = load_checkpoint(tmp / "m.vlck");
  CHECK(a.config.learning_rate == 1e-4);

  // A flag on the command line overrides the config file.
  REQUIRE(run_cli("--config " + cfg + " train --lr 5e-5 --out " +
                  (tmp / "m2.vlck")) == 0);
  Checkpoint b = load_checkpoint(tmp / "m2.vlck");
  CHECK(b.config.learning_rate == 5e-5);

  SUBCASE("unknown config keys are rejected") {
    const std::string bad = tmp / "bad.cfg";
    std::ofstream(bad) << "[train]\nnot_a_real_key=1\n";
    CHECK(run_cli("--config " + bad + " train --data " + data + " --out " +
                  (tmp / "m3.vlck")) == 1);
  }
}
