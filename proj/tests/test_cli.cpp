#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <string>
#include <sys/wait.h>
#include <vector>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = "/tmp/sfms_cli_test";

struct CmdResult {
    int code = -1;
    std::string out;
};

CmdResult run(const std::string& args, const std::string& env = "") {
    std::string cmd = env + (env.empty() ? "" : " ") + SFMS_CLI_PATH + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    CmdResult r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    int st = pclose(p);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string path(const std::string& rel) {
    fs::create_directories(kRoot);
    return kRoot + "/" + rel;
}

std::string slurp(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_config(const std::string& file, const std::vector<std::string>& lines) {
    std::ofstream f(file, std::ios::trunc);
    f << "# test configuration\n";
    for (const std::string& l : lines) f << l << "\n";
}

std::vector<std::string> recon_base(const std::string& data_dir) {
    return {"data = " + data_dir,
            "d = 3",
            "K = 2",
            "window = 8",
            "model_dim = 8",
            "heads = 2",
            "layers = 1",
            "ffn = 16",
            "conv_kernel = 3",
            "conv_out = 6",
            "quant = fsq",
            "fsq_levels = 3,3",
            "batch = 2",
            "samples_per_seq = 2",
            "seed = 5"};
}

bool same_dir_bytes(const std::string& a, const std::string& b) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename());
    std::sort(names.begin(), names.end());
    for (const std::string& n : names) {
        if (!fs::exists(b + "/" + n)) return false;
        if (slurp(a + "/" + n) != slurp(b + "/" + n)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("").code == 2);
    CHECK(run("synth --no-such-flag 1").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("--help").code == 0);
}

TEST_CASE("synthesis is deterministic and honors count") {
    fs::remove_all(kRoot + "/synth_a");
    fs::remove_all(kRoot + "/synth_b");
    CmdResult a = run("synth --out " + path("synth_a") +
                      " --count 3 --frames 16 --dims 3 --seed 11");
    CHECK(a.code == 0);
    CmdResult b = run("synth --out " + path("synth_b") +
                      " --count 3 --frames 16 --dims 3 --seed 11");
    CHECK(b.code == 0);
    CHECK(same_dir_bytes(path("synth_a"), path("synth_b")));

    std::vector<std::string> manifest;
    std::ifstream mf(path("synth_a") + "/manifest.txt");
    std::string line;
    while (std::getline(mf, line))
        if (!line.empty()) manifest.push_back(line);
    CHECK(manifest.size() == 3);
    CHECK(manifest[0] == "seq_0000.sfmc");

    fs::remove_all(kRoot + "/synth_empty");
    CmdResult e = run("synth --out " + path("synth_empty") + " --count 0");
    CHECK(e.code == 0);
    std::ifstream ef(path("synth_empty") + "/manifest.txt");
    CHECK(ef.good());
    CHECK(ef.peek() == std::ifstream::traits_type::eof());
}

TEST_CASE("training configs fail loudly") {
    std::string cfg = path("bad1.cfg");
    write_config(cfg, {"steps = 1"});  // no data key
    CmdResult r = run("train-recon --config " + cfg);
    CHECK(r.code == 2);
    CHECK(r.out.find("data") != std::string::npos);

    write_config(cfg, recon_base(path("synth_a")));
    std::ofstream(cfg, std::ios::app) << "tau_shape = bogus\n";
    CHECK(run("train-recon --config " + cfg).code == 2);

    write_config(cfg, recon_base(path("synth_a")));
    std::ofstream(cfg, std::ios::app) << "no_such_knob = 1\n";
    CmdResult unknown = run("train-recon --config " + cfg);
    CHECK(unknown.code == 4);
    CHECK(unknown.out.find("no_such_knob") != std::string::npos);

    CHECK(run("train-recon --config " + path("missing.cfg")).code == 4);

    write_config(cfg, recon_base(path("no_such_dir")));
    CHECK(run("train-recon --config " + cfg).code == 4);
}

TEST_CASE("zero-step training emits a fresh checkpoint") {
    std::string cfg = path("zero.cfg");
    std::vector<std::string> lines = recon_base(path("synth_a"));
    lines.push_back("steps = 0");
    lines.push_back("checkpoint_out = " + path("zero.ckpt"));
    write_config(cfg, lines);
    CmdResult r = run("train-recon --config " + cfg);
    CHECK(r.code == 0);
    CHECK(r.out.find("steps_run=0") != std::string::npos);
    CHECK(fs::exists(path("zero.ckpt")));
}

TEST_CASE("interrupted command-line training resumes bitwise") {
    auto lines = [&](long steps, const std::string& tag) {
        std::vector<std::string> l = recon_base(path("synth_a"));
        l.push_back("steps = " + std::to_string(steps));
        l.push_back("schedule_steps = 6");
        l.push_back("log_csv = " + path(tag + ".csv"));
        l.push_back("checkpoint_out = " + path(tag + ".ckpt"));
        return l;
    };
    fs::remove(path("full.csv"));
    fs::remove(path("half.csv"));
    write_config(path("full.cfg"), lines(6, "full"));
    CHECK(run("train-recon --config " + path("full.cfg")).code == 0);

    write_config(path("half.cfg"), lines(3, "half"));
    CHECK(run("train-recon --config " + path("half.cfg")).code == 0);
    write_config(path("rest.cfg"), lines(6, "half"));
    CHECK(run("train-recon --config " + path("rest.cfg") + " --resume").code == 0);

    CHECK(slurp(path("full.csv")) == slurp(path("half.csv")));
    CHECK(slurp(path("full.ckpt")) == slurp(path("half.ckpt")));

    write_config(path("nockpt.cfg"), recon_base(path("synth_a")));
    CHECK(run("train-recon --config " + path("nockpt.cfg") + " --resume").code == 2);
}

TEST_CASE("tokenize and reconstruct agree on the token stream") {
    std::string in = path("synth_a") + "/seq_0000.sfmc";
    CmdResult tk = run("tokenize --recon-ckpt " + path("zero.ckpt") + " --in " + in +
                       " --out " + path("tok_a.json"));
    CHECK(tk.code == 0);

    CmdResult rc = run("reconstruct --recon-ckpt " + path("zero.ckpt") + " --in " + in +
                       " --out " + path("recon.sfmc") + " --tokens " + path("tok_b.json") +
                       " --report " + path("recon_report.json"));
    CHECK(rc.code == 0);
    CHECK(fs::exists(path("recon.sfmc")));
    CHECK(slurp(path("tok_a.json")) == slurp(path("tok_b.json")));

    json tokens = json::parse(slurp(path("tok_a.json")));
    CHECK(tokens["length"] == 16);
    CHECK(tokens["classes"].size() == 16);
    CHECK(tokens["codebook_kind"] == "fsq");
    int keyframes = 0;
    for (const auto& cls : tokens["classes"]) {
        int c = cls.get<int>();
        CHECK(c >= 0);
        CHECK(c <= tokens["codebook_size"].get<int>());
        if (c > 0) ++keyframes;
    }
    CHECK(keyframes == 4);  // K per window, two windows

    json report = json::parse(slurp(path("recon_report.json")));
    for (const char* key : {"motion_l2", "quant_codebook", "quant_commit", "mask_loss",
                            "alpha", "total"})
        CHECK(report.contains(key));

    CHECK(run("tokenize --recon-ckpt " + path("zero.ckpt") + " --in " + path("nope.sfmc") +
              " --out " + path("t.json"))
              .code == 4);
}

TEST_CASE("self-comparison scores the identity on both metric suites") {
    std::string common = " --gen " + path("synth_a") + " --gt " + path("synth_a") +
                         " --speaker " + path("synth_a");
    CmdResult l2l = run("eval" + common + " --suite l2l --out " + path("l2l.json") + " --plots");
    CHECK(l2l.code == 0);
    json rep = json::parse(slurp(path("l2l.json")));
    CHECK(rep["suite"] == "l2l");
    CHECK(rep["count"] == 3);
    std::map<std::string, json> byname;
    for (const auto& m : rep["metrics"]) byname[m["name"].get<std::string>()] = m;
    CHECK(byname["L2"]["value"].get<double>() == 0.0);
    CHECK(std::abs(byname["FD"]["value"].get<double>()) < 1e-6);
    CHECK(byname["RPCC"]["value"].get<double>() == 0.0);
    CHECK(byname["RPCC"]["degenerate"] == true);
    CHECK(fs::exists(path("l2l.csv")));
    CHECK(fs::exists(path("l2l.svg")));
    std::string csv = slurp(path("l2l.csv"));
    CHECK(csv.rfind("name,value,degenerate\n", 0) == 0);
    CHECK(csv.find("L2,0,") != std::string::npos);

    CmdResult react = run("eval" + common + " --suite react --out " + path("react.json"));
    CHECK(react.code == 0);
    json rrep = json::parse(slurp(path("react.json")));
    byname.clear();
    for (const auto& m : rrep["metrics"]) byname[m["name"].get<std::string>()] = m;
    CHECK(byname["FRDist"]["value"].get<double>() == 0.0);
    CHECK(byname["FRCorr"]["value"].get<double>() == 1.0);
    CHECK(byname["FRDiv"]["value"].get<double>() == 0.0);

    CHECK(run("eval" + common + " --suite nope --out " + path("x.json")).code == 2);
    CHECK(run("eval --gen " + path("no_dir") + " --gt " + path("no_dir") + " --speaker " +
              path("no_dir") + " --out " + path("x.json"))
              .code == 4);
}

TEST_CASE("mismatched evaluation inputs name the offending files") {
    fs::remove_all(kRoot + "/synth_short");
    CHECK(run("synth --out " + path("synth_short") +
              " --count 3 --frames 8 --dims 3 --seed 11")
              .code == 0);
    CmdResult r = run("eval --gen " + path("synth_a") + " --gt " + path("synth_short") +
                      " --speaker " + path("synth_a") + " --out " + path("x.json"));
    CHECK(r.code == 2);
    CHECK(r.out.find("seq_0000.sfmc") != std::string::npos);
}

TEST_CASE("dyad pipeline trains and rolls out through the CLI") {
    fs::remove_all(kRoot + "/dyads");
    CmdResult sd = run("synth-dyads --out " + path("dyads") +
                       " --count 2 --frames 32 --dims 3 --rule copy_lag --lag 4 --seed 13");
    CHECK(sd.code == 0);
    CHECK(fs::exists(path("dyads") + "/dyad_0000.speaker.sfmc"));
    CHECK(fs::exists(path("dyads") + "/dyad_0000.listener.sfmc"));
    CHECK(fs::exists(path("dyads") + "/dyad_0000.mel.sfmc"));

    std::string pcfg = path("pred.cfg");
    write_config(pcfg, {"data = " + path("dyads"),
                        "past = 8",
                        "future = 4",
                        "model_dim = 16",
                        "heads = 2",
                        "layers = 1",
                        "ffn = 32",
                        "steps = 2",
                        "batch = 2",
                        "seed = 7",
                        "eval_stride = 8",
                        "checkpoint_out = " + path("pred.ckpt")});
    CmdResult tp = run("train-pred --config " + pcfg + " --recon-ckpt " + path("zero.ckpt"));
    CHECK(tp.code == 0);
    CHECK(tp.out.find("steps_run=2") != std::string::npos);
    CHECK(tp.out.find("train_accuracy=") != std::string::npos);
    CHECK(fs::exists(path("pred.ckpt")));

    CmdResult ro = run("rollout --pred-ckpt " + path("pred.ckpt") + " --recon-ckpt " +
                       path("zero.ckpt") + " --speaker " + path("dyads") +
                       "/dyad_0000.speaker.sfmc --prefix " + path("synth_short") +
                       "/seq_0000.sfmc --horizon 16 --mode greedy --out-motion " +
                       path("gen.sfmc") + " --out-tokens " + path("gen_tokens.json"));
    CHECK(ro.code == 0);
    CHECK(ro.out.find("generated 16 frame(s)") != std::string::npos);
    CHECK(fs::exists(path("gen.sfmc")));
    json gen = json::parse(slurp(path("gen_tokens.json")));
    CHECK(gen["length"] == 16);

    CHECK(run("rollout --pred-ckpt " + path("pred.ckpt") + " --recon-ckpt " + path("zero.ckpt") +
              " --speaker " + path("dyads") + "/dyad_0000.speaker.sfmc --prefix " +
              path("synth_short") + "/seq_0000.sfmc --horizon 16 --mode nope")
              .code == 2);
}

TEST_CASE("log verbosity follows the environment variable") {
    std::string cfg = path("zero.cfg");
    CmdResult quiet = run("train-recon --config " + cfg);
    CHECK(quiet.code == 0);
    CHECK(quiet.out.find("[sfms:info]") == std::string::npos);

    CmdResult chatty = run("train-recon --config " + cfg, "SFMS_LOG_LEVEL=info");
    CHECK(chatty.code == 0);
    CHECK(chatty.out.find("[sfms:info]") != std::string::npos);
}
