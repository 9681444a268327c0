// End-to-end tests that drive the installed CLI binary (path injected via
// LORAFUSE_CLI_PATH) through full workflows in a scratch directory.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lorafuse/config.hpp"
#include "lorafuse/image.hpp"
#include "lorafuse/sampler.hpp"
#include "lorafuse/weights.hpp"

namespace fs = std::filesystem;
using namespace lorafuse;

namespace {

int g_failures = 0;

#define CHECK(cond)                                                          \
    do {                                                                     \
        if (!(cond)) {                                                       \
            std::printf("FAIL %s:%d  %s\n", __FILE__, __LINE__, #cond);      \
            ++g_failures;                                                    \
        }                                                                    \
    } while (0)

const std::string kCli = LORAFUSE_CLI_PATH;
fs::path g_dir;

int run(const std::string& args) {
    const std::string cmd =
        kCli + " " + args + " >>" + (g_dir / "cli.log").string() + " 2>&1";
    const int ret = std::system(cmd.c_str());
    return (ret >= 0) ? ((ret >> 8) & 0xff) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) return "<missing:" + p.string() + ">";
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s)
        if (c == '\n') ++n;
    return n;
}

std::string p(const char* name) { return (g_dir / name).string(); }

void write_config(const fs::path& path, std::size_t adapter_steps) {
    std::ofstream f(path);
    f << "[model]\nhidden_dim = 32\n"
      << "[sampler]\nsteps = 12\n"
      << "[train]\nbase_steps = 40\nadapter_steps = " << adapter_steps
      << "\nbatch = 4\n"
      << "[data]\nn_per_cell = 2\n";
}

void test_gen_data() {
    CHECK(run("gen-data --out " + p("data_a") + " --seed 3 --n 24") == 0);
    CHECK(run("gen-data --out " + p("data_b") + " --seed 3 --n 24") == 0);
    std::size_t pgms = 0;
    for (const auto& e : fs::directory_iterator(g_dir / "data_a"))
        if (e.path().extension() == ".pgm") ++pgms;
    CHECK(pgms == 24);
    CHECK(count_lines(slurp(g_dir / "data_a" / "manifest.csv")) == 25);
    // identical seed -> identical dataset digest and manifest
    CHECK(slurp(g_dir / "data_a" / "digest.txt") == slurp(g_dir / "data_b" / "digest.txt"));
    CHECK(slurp(g_dir / "data_a" / "manifest.csv") ==
          slurp(g_dir / "data_b" / "manifest.csv"));
    // a different seed changes the pixels
    CHECK(run("gen-data --out " + p("data_c") + " --seed 4 --n 24") == 0);
    CHECK(slurp(g_dir / "data_a" / "digest.txt") != slurp(g_dir / "data_c" / "digest.txt"));
    // n = 0: only the bookkeeping files
    CHECK(run("gen-data --out " + p("data_0") + " --seed 3 --n 0") == 0);
    CHECK(count_lines(slurp(g_dir / "data_0" / "manifest.csv")) == 1);
}

void test_training() {
    write_config(g_dir / "run.ini", 30);
    CHECK(run("train-base --config " + p("run.ini") + " --out " + p("base.bin")) == 0);
    CHECK(fs::exists(g_dir / "base.bin"));
    // header + one row per training step
    CHECK(count_lines(slurp(g_dir / "base.bin.loss.csv")) == 41);
    CHECK(fs::exists(g_dir / "base.bin.config"));
    CHECK(fs::exists(g_dir / "base.bin.meta.json"));

    CHECK(run("train-lora --which content --config " + p("run.ini") + " --base " +
              p("base.bin") + " --out " + p("content.bin")) == 0);
    CHECK(run("train-lora --which style --config " + p("run.ini") + " --base " +
              p("base.bin") + " --out " + p("style.bin")) == 0);
    CHECK(count_lines(slurp(g_dir / "content.bin.loss.csv")) == 31);

    // a trained adapter must carry nonzero up-projections...
    LoRAAdapter trained = load_adapter(p("content.bin"));
    CHECK(!trained.is_zero());
    // ...while a zero-step run leaves the fresh adapter an exact no-op
    write_config(g_dir / "zero.ini", 0);
    CHECK(run("train-lora --which content --config " + p("zero.ini") + " --base " +
              p("base.bin") + " --out " + p("zero.bin")) == 0);
    CHECK(load_adapter(p("zero.bin")).is_zero());
    CHECK(count_lines(slurp(g_dir / "zero.bin.loss.csv")) == 1);
}

void test_generate() {
    const std::string adapters =
        " --base " + p("base.bin") + " --content " + p("content.bin") + " --style " +
        p("style.bin") + " --config " + p("run.ini");

    // identical invocations are byte-identical
    CHECK(run("generate" + adapters + " --fusion kl --seed 11 --out " + p("a.pgm") +
              " --trace " + p("a.csv")) == 0);
    CHECK(run("generate" + adapters + " --fusion kl --seed 11 --out " + p("b.pgm") +
              " --trace " + p("b.csv")) == 0);
    CHECK(slurp(g_dir / "a.pgm") == slurp(g_dir / "b.pgm"));
    CHECK(slurp(g_dir / "a.csv") == slurp(g_dir / "b.csv"));

    // guidance with m = 0 equals no guidance
    CHECK(run("generate" + adapters + " --fusion kl --guide on --m 0 --seed 11 --out " +
              p("m0.pgm")) == 0);
    CHECK(slurp(g_dir / "m0.pgm") == slurp(g_dir / "a.pgm"));

    // guidance with the default m changes the image and reports a residual
    CHECK(run("generate" + adapters + " --fusion kl --guide on --m 10 --seed 11 --out " +
              p("g.pgm")) == 0);
    CHECK(slurp(g_dir / "g.pgm") != slurp(g_dir / "a.pgm"));
    CHECK(slurp(g_dir / "g.pgm.meta.json").find("final_residual") != std::string::npos);

    // --fusion merge reproduces the library path bit-for-bit
    CHECK(run("generate" + adapters + " --fusion merge --seed 11 --out " + p("m.pgm")) == 0);
    DenoiserModel model = load_model(p("base.bin"));
    LoRAAdapter content = load_adapter(p("content.bin"));
    LoRAAdapter style = load_adapter(p("style.bin"));
    SampleResult lib = sample(model, &content, &style, FusionPolicy::direct_merge(1.0, 1.0),
                              nullptr, NoiseSchedule::linear(), SamplerConfig{12, 11});
    std::ostringstream pgm;
    write_pgm(pgm, lib.image, 16, 16);
    CHECK(slurp(g_dir / "m.pgm") == pgm.str());
}

void test_inspect_trace() {
    // content adapter only: d_s = 0 at every layer, so KlSelect must always
    // pick the content branch
    CHECK(run("generate --base " + p("base.bin") + " --content " + p("content.bin") +
              " --config " + p("run.ini") + " --fusion kl --seed 5 --out " + p("c.pgm") +
              " --trace " + p("c.csv")) == 0);
    CHECK(run("inspect-trace --in " + p("c.csv") + " --out " + p("c_summary.csv")) == 0);

    std::istringstream in(slurp(g_dir / "c_summary.csv"));
    std::string line;
    CHECK(std::getline(in, line) &&
          line == "layer,count_content,count_style,freq_content,freq_style");
    std::size_t layers = 0, matrix_rows = 0;
    bool freqs_ok = true;
    while (std::getline(in, line) && !line.empty()) {
        ++layers;
        std::istringstream ss(line);
        std::string f[5];
        for (auto& x : f) std::getline(ss, x, ',');
        freqs_ok = freqs_ok && f[3] == "1" && f[4] == "0" && f[2] == "0";
    }
    CHECK(layers == 4);  // 256-dim model with 3 hidden layers
    CHECK(freqs_ok);
    CHECK(std::getline(in, line) && line.rfind("step,layer", 0) == 0);
    while (std::getline(in, line) && !line.empty()) ++matrix_rows;
    CHECK(matrix_rows == 12);  // one row per sampling step
}

void test_evaluate() {
    const std::string args = " --config " + p("run.ini") + " --base " + p("base.bin") +
                             " --content " + p("content.bin") + " --style " +
                             p("style.bin") + " --seeds 2";
    CHECK(run("evaluate" + args + " --out " + p("r1.csv")) == 0);
    CHECK(run("evaluate" + args + " --out " + p("r2.csv")) == 0);
    CHECK(slurp(g_dir / "r1.csv") == slurp(g_dir / "r2.csv"));
    const std::string report = slurp(g_dir / "r1.csv");
    CHECK(report.rfind("# config_hash=", 0) == 0);
    for (const char* pol : {"kl_guided", "kl", "merge", "topk", "content", "style", "base"})
        CHECK(report.find(std::string(pol) + ",mean,") != std::string::npos);
    // 2 header lines + 7 policies x (2 seeds + mean + std)
    CHECK(count_lines(report) == 2 + 7 * 4);

    CHECK(run("evaluate" + args + " --out " + p("r3.csv") + " --ablation") == 0);
    CHECK(slurp(g_dir / "r3.csv.criterion.csv")
              .rfind("criterion,style_sim,content_sim,combined", 0) == 0);
    CHECK(count_lines(slurp(g_dir / "r3.csv.scaling.csv")) == 6);
}

void test_exit_codes() {
    CHECK(run("no-such-command") == 2);
    CHECK(run("generate --out " + p("x.pgm")) == 2);  // missing required --base
    CHECK(run("generate --base " + p("nope.bin") + " --out " + p("x.pgm")) == 2);
    CHECK(run("train-lora --which neither --base " + p("base.bin") + " --out " +
              p("x.bin")) == 2);
    // config validation failure
    std::ofstream(g_dir / "bad.ini") << "[sampler]\nsteps = 0\n";
    CHECK(run("train-base --config " + p("bad.ini") + " --out " + p("x.bin")) == 2);
    std::ofstream(g_dir / "unknown.ini") << "[sampler]\nstep = 5\n";
    CHECK(run("train-base --config " + p("unknown.ini") + " --out " + p("x.bin")) == 2);
    // numeric blow-up: an absurd guidance scale overflows the latent
    CHECK(run("generate --base " + p("base.bin") + " --content " + p("content.bin") +
              " --style " + p("style.bin") + " --config " + p("run.ini") +
              " --fusion kl --guide on --m 1e300 --seed 11 --out " + p("x.pgm")) == 3);
}

}  // namespace

int main() {
    g_dir = fs::temp_directory_path() / "lorafuse_cli_test";
    fs::remove_all(g_dir);
    fs::create_directories(g_dir);

    test_gen_data();
    test_training();
    test_generate();
    test_inspect_trace();
    test_evaluate();
    test_exit_codes();

    if (g_failures == 0) {
        std::printf("cli integration: all checks passed\n");
        fs::remove_all(g_dir);
        return 0;
    }
    std::printf("cli integration: %d check(s) failed (artifacts kept in %s)\n", g_failures,
                g_dir.string().c_str());
    return 1;
}
