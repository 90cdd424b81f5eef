#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "helpers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(MCLOKD_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string out;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

json tiny_doc() {
    return {{"dataset", "synthetic"},
            {"epochs", 1},
            {"seed", 3},
            {"peers", 2},
            {"synthetic_train_size", 120},
            {"synthetic_test_size", 60},
            {"synthetic_classes", 4},
            {"synthetic_channels", 2},
            {"synthetic_height", 6},
            {"synthetic_width", 6},
            {"stage_widths", {4, 6, 8}},
            {"embedding_dim", 8},
            {"negatives", 16},
            {"batch_size", 32},
            {"fewshot_classes", 6},
            {"fewshot_per_class", 20}};
}

fs::path write_config(const fs::path& dir, const json& doc) {
    fs::create_directories(dir);
    const auto p = dir / "config_in.json";
    std::ofstream(p) << doc.dump(2);
    return p;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in);
    return json::parse(in);
}

std::string train_args(const fs::path& cfg, const fs::path& out) {
    return "train --config " + cfg.string() + " --out-dir " + out.string();
}

json last_json_line(const std::string& out) {
    std::istringstream in(out);
    std::string line, last;
    while (std::getline(in, line))
        if (!line.empty() && line.front() == '{') last = line;
    REQUIRE_FALSE(last.empty());
    return json::parse(last);
}

}  // namespace

TEST_CASE("missing required field exits 2 and names it") {
    const auto dir = testutil::temp_dir("cli_missing");
    auto doc = tiny_doc();
    doc.erase("epochs");
    const auto r = run(train_args(write_config(dir, doc), dir / "run"));
    CHECK(r.code == 2);
    CHECK(r.out.find("epochs") != std::string::npos);
}

TEST_CASE("invalid values and unknown keys exit 2") {
    const auto dir = testutil::temp_dir("cli_invalid");
    auto doc = tiny_doc();
    doc["tau"] = -1.0;
    auto r = run(train_args(write_config(dir, doc), dir / "run"));
    CHECK(r.code == 2);
    CHECK(r.out.find("tau") != std::string::npos);
    r = run(train_args(write_config(dir, tiny_doc()), dir / "run") + " --override no_such_key=1");
    CHECK(r.code == 2);
    CHECK(r.out.find("no_such_key") != std::string::npos);
    CHECK(run("train").code == 2);
    CHECK(run("bogus").code == 2);
}

TEST_CASE("seed precedence: file < --override < --seed") {
    const auto dir = testutil::temp_dir("cli_seed");
    const auto cfg = write_config(dir, tiny_doc());

    REQUIRE(run(train_args(cfg, dir / "a") + " --seed 1").code == 0);
    auto m = read_json(dir / "a" / "manifest.json");
    CHECK(m["seed"] == 1);
    CHECK(m["config"]["seed"] == 1);
    CHECK(m["versions"].contains("mclokd"));
    CHECK(m["versions"].contains("kernels"));

    REQUIRE(run(train_args(cfg, dir / "b") + " --override seed=9 --override lr=0.02").code == 0);
    m = read_json(dir / "b" / "manifest.json");
    CHECK(m["seed"] == 9);
    CHECK(m["config"]["lr"] == 0.02);

    REQUIRE(run(train_args(cfg, dir / "c") + " --override seed=9 --seed 5").code == 0);
    CHECK(read_json(dir / "c" / "manifest.json")["seed"] == 5);

    REQUIRE(run(train_args(cfg, dir / "d")).code == 0);
    CHECK(read_json(dir / "d" / "config.json")["seed"] == 3);
}

TEST_CASE("smoke train writes every artifact") {
    const auto dir = testutil::temp_dir("cli_smoke");
    auto doc = tiny_doc();
    doc["epochs"] = 2;
    const auto r = run(train_args(write_config(dir, doc), dir / "run"));
    INFO(r.out);
    REQUIRE(r.code == 0);
    for (const char* f : {"config.json", "manifest.json", "metrics.jsonl", "checkpoint_best.bin", "checkpoint_final.bin",
                          "deploy.bin"})
        CHECK(fs::exists(dir / "run" / f));
    std::ifstream in(dir / "run" / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        const auto rec = json::parse(line);
        CHECK(rec.contains("eval_error"));
        CHECK(rec.contains("wall_time"));
        ++lines;
    }
    CHECK(lines == 2);
}

TEST_CASE("multi-seed train writes a summary") {
    const auto dir = testutil::temp_dir("cli_seeds");
    auto doc = tiny_doc();
    doc["num_seeds"] = 2;
    REQUIRE(run(train_args(write_config(dir, doc), dir / "run")).code == 0);
    const auto s = read_json(dir / "run" / "summary.json");
    CHECK(s["runs"].size() == 2);
    CHECK(fs::exists(dir / "run" / "seed_3" / "deploy.bin"));
    CHECK(fs::exists(dir / "run" / "seed_4" / "deploy.bin"));
}

TEST_CASE("eval: a single peer's ensemble equals deploy") {
    const auto dir = testutil::temp_dir("cli_eval1");
    auto doc = tiny_doc();
    doc["peers"] = 1;
    REQUIRE(run(train_args(write_config(dir, doc), dir / "run")).code == 0);
    const auto ck = (dir / "run" / "checkpoint_final.bin").string();
    const auto d = run("eval --checkpoint " + ck + " --mode deploy");
    const auto e = run("eval --checkpoint " + ck + " --mode ensemble");
    REQUIRE(d.code == 0);
    REQUIRE(e.code == 0);
    CHECK(last_json_line(d.out)["top1_error"] == last_json_line(e.out)["top1_error"]);
}

TEST_CASE("eval: ensemble over four peers emits one record") {
    const auto dir = testutil::temp_dir("cli_eval4");
    auto doc = tiny_doc();
    doc["peers"] = 4;
    REQUIRE(run(train_args(write_config(dir, doc), dir / "run")).code == 0);
    const auto ck = dir / "run" / "checkpoint_final.bin";
    const auto r = run("eval --checkpoint " + ck.string() + " --mode ensemble --split test");
    REQUIRE(r.code == 0);
    const auto rec = last_json_line(r.out);
    CHECK(rec["peers"] == 4);
    CHECK(rec["mode"] == "ensemble");
    std::ifstream in(dir / "run" / "eval.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 1);

    // the deployment artifact holds one network
    const auto dep = run("eval --checkpoint " + (dir / "run" / "deploy.bin").string() + " --mode deploy");
    REQUIRE(dep.code == 0);
    CHECK(last_json_line(dep.out)["peers"] == 1);
}

TEST_CASE("eval: missing or corrupt checkpoints fail") {
    const auto dir = testutil::temp_dir("cli_corrupt");
    REQUIRE(run(train_args(write_config(dir, tiny_doc()), dir / "run")).code == 0);
    CHECK(run("eval --checkpoint " + (dir / "nope.bin").string()).code == 3);

    const auto bad = dir / "bad.bin";
    fs::copy_file(dir / "run" / "checkpoint_final.bin", bad);
    {
        std::fstream f(bad, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(fs::file_size(bad) / 2));
        char c = 0;
        f.read(&c, 1);
        f.seekp(static_cast<std::streamoff>(fs::file_size(bad) / 2));
        c = static_cast<char>(c ^ 0x5a);
        f.write(&c, 1);
    }
    const auto r = run("eval --checkpoint " + bad.string());
    CHECK(r.code == 3);
    CHECK(r.out.find("error") != std::string::npos);

    const auto cut = dir / "cut.bin";
    fs::copy_file(dir / "run" / "deploy.bin", cut);
    fs::resize_file(cut, fs::file_size(cut) / 3);
    CHECK(run("eval --checkpoint " + cut.string()).code == 3);
}

TEST_CASE("fewshot: noiseless identical instances give 100 +- 0") {
    const auto dir = testutil::temp_dir("cli_fs_sep");
    auto doc = tiny_doc();
    doc["fewshot_noise"] = 0.0;
    doc["synthetic_modes"] = 1;
    doc["synthetic_max_shift"] = 0;
    doc["synthetic_contrast"] = 0.0;
    REQUIRE(run(train_args(write_config(dir, doc), dir / "run")).code == 0);
    const auto r = run("fewshot --checkpoint " + (dir / "run" / "deploy.bin").string() + " --episodes 600");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("5-way 1-shot: 100.00 ± 0.00 (600 episodes)") != std::string::npos);
    const auto rec = last_json_line(r.out);
    CHECK(rec["mean"] == 100.0);
    CHECK(rec["ci"] == 0.0);
}

TEST_CASE("fewshot: pure-noise images sit near chance and are seed-deterministic") {
    const auto dir = testutil::temp_dir("cli_fs_noise");
    auto doc = tiny_doc();
    doc["fewshot_noise"] = 1e6;
    REQUIRE(run(train_args(write_config(dir, doc), dir / "run")).code == 0);
    const auto ck = (dir / "run" / "deploy.bin").string();
    const auto a = run("fewshot --checkpoint " + ck + " --episodes 300 --seed 11");
    const auto b = run("fewshot --checkpoint " + ck + " --episodes 300 --seed 11");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    const auto ra = last_json_line(a.out);
    const auto rb = last_json_line(b.out);
    CHECK(ra["mean"] == rb["mean"]);
    CHECK(ra["ci"] == rb["ci"]);
    const double mean = ra["mean"], ci = ra["ci"];
    // 3 * ci is a loose band; the exact 95% check lives in the acceptance binary
    CHECK(std::abs(mean - 20.0) <= 3.0 * ci);
    CHECK(run("fewshot --checkpoint " + ck + " --way 50").code == 1);
}

TEST_CASE("verify passes and catches the sign-flip mutation") {
    const auto ok = run("verify");
    CHECK(ok.code == 0);
    CHECK(ok.out.find("checks passed") != std::string::npos);
    const auto flip = run("verify --inject-sign-flip");
    CHECK(flip.code == 1);
    CHECK(flip.out.find("FAIL") != std::string::npos);
    CHECK(run("verify --tolerance 1e-9").code == 1);
}
