// Command-line front end: train, eval, fewshot, verify.
//
// Exit codes: 0 success, 1 failed checks or runtime error, 2 invalid config or
// usage, 3 unreadable/corrupt/incompatible checkpoint or missing data.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mclokd/checkpoint.hpp"
#include "mclokd/config.hpp"
#include "mclokd/error.hpp"
#include "mclokd/eval.hpp"
#include "mclokd/fewshot.hpp"
#include "mclokd/kernels.hpp"
#include "mclokd/trainer.hpp"
#include "mclokd/verification.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

json versions() {
    return {{"mclokd", kVersion},
            {"checkpoint_format", mclokd::kCheckpointVersion},
            {"compiler", __VERSION__},
            {"cxx_standard", static_cast<long>(__cplusplus)},
            {"kernels", mclokd::kernels::active().name}};
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw mclokd::IoError("cannot write " + path.string());
}

void append_jsonl(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::app);
    out << j.dump() << '\n';
    if (!out) throw mclokd::IoError("cannot write " + path.string());
}

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "run";
};

// Precedence, lowest to highest: config file, --override, --seed.
mclokd::TrainConfig resolve_config(const TrainArgs& a, json& doc) {
    std::ifstream in(a.config);
    if (!in) throw mclokd::IoError("cannot read config " + a.config);
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw mclokd::ConfigError("<root>", std::string("invalid JSON in ") + a.config + ": " + e.what());
    }
    for (const auto& o : a.overrides) mclokd::apply_override(doc, o);
    if (a.seed) doc["seed"] = *a.seed;
    auto cfg = mclokd::config_from_json(doc);
    cfg.validate();
    return cfg;
}

int cmd_train(const TrainArgs& a) {
    json doc;
    const auto cfg = resolve_config(a, doc);
    const fs::path out = a.out_dir;
    fs::create_directories(out);
    const json snapshot = mclokd::config_to_json(cfg);
    write_json(out / "config.json", snapshot);
    write_json(out / "manifest.json", {{"command", "train"},
                                       {"seed", cfg.seed},
                                       {"num_seeds", cfg.num_seeds},
                                       {"config", snapshot},
                                       {"versions", versions()}});

    mclokd::FitOptions opts;
    opts.out_dir = out;
    opts.on_epoch = [](const mclokd::EpochRecord& r) {
        std::cout << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.total << "  deploy "
                  << std::setprecision(2) << r.eval_error << "%  ens " << r.ensemble_error << "%\n"
                  << std::flush;
    };
    if (cfg.num_seeds > 1) {
        const auto res = mclokd::fit_seeds(cfg, opts);
        std::cout << res.summary.dump(2) << '\n';
    } else {
        const auto res = mclokd::fit(cfg, opts);
        std::cout << "best epoch " << res.best_epoch << ", artifacts in " << out.string() << '\n';
    }
    return 0;
}

struct Loaded {
    mclokd::TrainConfig config;
    mclokd::PeerGraph graph;
};

Loaded load_any(const fs::path& path) {
    if (!fs::exists(path)) throw mclokd::IoError("checkpoint not found: " + path.string());
    if (mclokd::checkpoint_kind(path) == mclokd::CheckpointKind::kDeployment) {
        auto art = mclokd::load_deployment(path);
        return {std::move(art.config), std::move(art.graph)};
    }
    auto st = mclokd::restore_checkpoint(path);
    return {std::move(st.config), std::move(st.graph)};
}

mclokd::data::Dataset dataset_for(const mclokd::TrainConfig& cfg, const std::string& name, mclokd::data::Split split,
                                  const std::string& root) {
    return mclokd::data::load_dataset(name.empty() ? cfg.dataset : name, split, root.empty() ? cfg.data_root : root,
                                      cfg.synthetic);
}

struct EvalArgs {
    std::string checkpoint;
    std::string mode = "deploy";
    std::string split = "test";
    std::string dataset;
    std::string data_root;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    const auto split = mclokd::data::parse_split(a.split);
    const Loaded m = load_any(a.checkpoint);
    const auto ds = dataset_for(m.config, a.dataset, split, a.data_root);
    const double err = a.mode == "ensemble" ? mclokd::eval::ensemble_top1_error(m.graph, ds)
                                            : mclokd::eval::top1_error(m.graph, ds);
    const json rec = {{"checkpoint", a.checkpoint}, {"dataset", ds.name},    {"split", a.split},
                      {"mode", a.mode},             {"peers", m.graph.peers()}, {"top1_error", err}};
    std::cout << rec.dump() << '\n';
    const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "eval.jsonl" : fs::path(a.out);
    append_jsonl(out, rec);
    return 0;
}

struct FewshotArgs {
    std::string checkpoint;
    std::size_t way = 5, shot = 1, query = 15, episodes = 600;
    std::uint64_t seed = 1;
    std::string embedding;
    std::string data_root;
    std::string out;
};

int cmd_fewshot(const FewshotArgs& a) {
    const Loaded m = load_any(a.checkpoint);
    const auto ds = dataset_for(m.config, "", mclokd::data::Split::kFewShot, a.data_root);
    const auto rep = mclokd::fewshot::parse_representation(a.embedding.empty() ? m.config.fewshot_embedding : a.embedding);
    mclokd::Rng rng(a.seed);
    const auto r = mclokd::fewshot::episodic_accuracy(m.graph, ds, rep, a.way, a.shot, a.query, a.episodes, rng);
    json rec = r.to_json();
    rec["checkpoint"] = a.checkpoint;
    rec["seed"] = a.seed;
    std::cout << std::fixed << std::setprecision(2) << a.way << "-way " << a.shot << "-shot: " << r.mean << " ± " << r.ci
              << " (" << r.episodes << " episodes)\n"
              << rec.dump() << '\n';
    const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "fewshot.jsonl" : fs::path(a.out);
    append_jsonl(out, rec);
    return 0;
}

struct VerifyArgs {
    std::optional<double> tolerance;
    bool sign_flip = false;
    std::uint64_t seed = 7;
};

int cmd_verify(const VerifyArgs& a) {
    mclokd::verification::SuiteOptions o;
    if (a.tolerance) o.grad_tolerance = *a.tolerance;
    o.flip_negative_term = a.sign_flip;
    o.seed = a.seed;
    const auto results = mclokd::verification::run_suite(o);
    std::vector<const mclokd::verification::CheckResult*> failed;
    for (const auto& r : results) {
        std::cout << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  (" << std::scientific << std::setprecision(3)
                  << r.value << " < " << r.threshold << ")\n";
        if (!r.passed) failed.push_back(&r);
    }
    if (failed.empty()) {
        std::cout << "all " << results.size() << " checks passed\n";
        return 0;
    }
    std::cerr << failed.size() << " check(s) failed:\n";
    for (const auto* r : failed) std::cerr << "  " << r->name << '\n';
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Online distillation among peer networks with a cross-peer contrastive loss"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train peers and export the deployment network");
    train->add_option("--config", ta.config, "JSON config file")->required();
    train->add_option("--override", ta.overrides, "key=value, repeatable; beats the config file");
    train->add_option("--seed", ta.seed, "beats both the config file and --override");
    train->add_option("--out-dir", ta.out_dir, "run directory")->capture_default_str();

    EvalArgs ea;
    auto* evalc = app.add_subcommand("eval", "top-1 error of a checkpoint");
    evalc->add_option("--checkpoint", ea.checkpoint)->required();
    evalc->add_option("--mode", ea.mode)->check(CLI::IsMember({"deploy", "ensemble"}))->capture_default_str();
    evalc->add_option("--split", ea.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    evalc->add_option("--dataset", ea.dataset, "defaults to the checkpoint's dataset");
    evalc->add_option("--data-root", ea.data_root);
    evalc->add_option("--out", ea.out, "JSONL file to append to (default: next to the checkpoint)");

    FewshotArgs fa;
    auto* fs_cmd = app.add_subcommand("fewshot", "episodic nearest-prototype evaluation");
    fs_cmd->add_option("--checkpoint", fa.checkpoint)->required();
    fs_cmd->add_option("--way", fa.way)->capture_default_str();
    fs_cmd->add_option("--shot", fa.shot)->capture_default_str();
    fs_cmd->add_option("--query", fa.query)->capture_default_str();
    fs_cmd->add_option("--episodes", fa.episodes)->capture_default_str();
    fs_cmd->add_option("--seed", fa.seed)->capture_default_str();
    fs_cmd->add_option("--embedding", fa.embedding, "gap | head (default from the config)");
    fs_cmd->add_option("--data-root", fa.data_root);
    fs_cmd->add_option("--out", fa.out);

    VerifyArgs va;
    auto* verify = app.add_subcommand("verify", "oracle-equivalence and gradient-check suites");
    verify->add_option("--tolerance", va.tolerance, "max relative gradient error");
    verify->add_flag("--inject-sign-flip", va.sign_flip, "mutation: flip the sign of the negative-pair term");
    verify->add_option("--seed", va.seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*train) return cmd_train(ta);
        if (*evalc) return cmd_eval(ea);
        if (*fs_cmd) return cmd_fewshot(fa);
        if (*verify) return cmd_verify(va);
    } catch (const mclokd::ConfigError& e) {
        std::cerr << "config error in field '" << e.field() << "': " << e.what() << '\n';
        return 2;
    } catch (const mclokd::IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << '\n';
        return 3;
    } catch (const mclokd::IncompatibleCheckpoint& e) {
        std::cerr << "incompatible checkpoint: " << e.what() << '\n';
        return 3;
    } catch (const mclokd::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
