#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "helpers.hpp"
#include "mclokd/checkpoint.hpp"
#include "mclokd/error.hpp"
#include "mclokd/trainer.hpp"

using namespace mclokd;
namespace fs = std::filesystem;

namespace {

Batch batch_at(const data::Dataset& ds, std::size_t start, std::size_t size, Rng& rng) {
    std::vector<std::size_t> idx(size);
    std::iota(idx.begin(), idx.end(), start);
    return make_batch(ds, idx, data::AugmentPolicy::kStandard, 1, rng);
}

std::vector<double> flat(PeerGraph& g) {
    std::vector<double> out;
    for (const Param* p : g.parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
    return out;
}

std::vector<char> read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("save, restore, step: bitwise equal to the uninterrupted run") {
    auto c = testutil::tiny_config();
    c.augment = "standard";
    const auto data = load_datasets(c);
    const auto dir = testutil::temp_dir("ckpt_resume");

    TrainState live = init_state(c, data.train);
    for (std::size_t s = 0; s < 3; ++s) train_step(live, batch_at(data.train, s * 24, 24, live.augment_rng), 0.05);
    save_checkpoint(live, dir / "mid.bin");
    TrainState resumed = restore_checkpoint(dir / "mid.bin", &c);

    CHECK(resumed.step == live.step);
    CHECK(resumed.epoch == live.epoch);
    CHECK(resumed.shuffle_rng == live.shuffle_rng);
    CHECK(resumed.negative_rng == live.negative_rng);
    CHECK(testutil::bitwise_equal(flat(resumed.graph), flat(live.graph)));

    for (std::size_t s = 3; s < 6; ++s) {
        const auto a = train_step(live, batch_at(data.train, s * 24, 24, live.augment_rng), 0.05);
        const auto b = train_step(resumed, batch_at(data.train, s * 24, 24, resumed.augment_rng), 0.05);
        CHECK(a.bundle.total == b.bundle.total);
        CHECK(a.bundle.contrastive == b.bundle.contrastive);
    }
    CHECK(testutil::bitwise_equal(flat(resumed.graph), flat(live.graph)));
    for (std::size_t m = 0; m < live.banks.size(); ++m) {
        CHECK(testutil::bitwise_equal(live.banks[m].slots(), resumed.banks[m].slots()));
        CHECK(live.banks[m].z() == resumed.banks[m].z());
    }
    REQUIRE(live.optimizer.velocity().size() == resumed.optimizer.velocity().size());
    for (std::size_t i = 0; i < live.optimizer.velocity().size(); ++i) {
        CHECK(testutil::bitwise_equal(live.optimizer.velocity()[i], resumed.optimizer.velocity()[i]));
    }
}

TEST_CASE("mismatched config is rejected explicitly") {
    const auto c = testutil::tiny_config();
    const auto data = load_datasets(c);
    const auto dir = testutil::temp_dir("ckpt_mismatch");
    save_checkpoint(init_state(c, data.train), dir / "a.bin");

    auto other = c;
    other.peers = c.peers + 1;
    CHECK_THROWS_AS(restore_checkpoint(dir / "a.bin", &other), IncompatibleCheckpoint);
    other = c;
    other.embedding_dim = 16;
    CHECK_THROWS_AS(restore_checkpoint(dir / "a.bin", &other), IncompatibleCheckpoint);
    // Non-structural differences are allowed (e.g. continuing with a new lr).
    other = c;
    other.lr = 0.01;
    CHECK_NOTHROW(restore_checkpoint(dir / "a.bin", &other));
}

TEST_CASE("corrupt or truncated files are integrity errors") {
    const auto c = testutil::tiny_config();
    const auto data = load_datasets(c);
    const auto dir = testutil::temp_dir("ckpt_corrupt");
    const auto good = dir / "good.bin";
    save_checkpoint(init_state(c, data.train), good);
    const auto bytes = read_all(good);
    CHECK(checkpoint_kind(good) == CheckpointKind::kTrainState);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x20;
    write_all(dir / "flip.bin", flipped);
    CHECK_THROWS_AS(restore_checkpoint(dir / "flip.bin"), IntegrityError);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 100);
    write_all(dir / "trunc.bin", truncated);
    CHECK_THROWS_AS(restore_checkpoint(dir / "trunc.bin"), IntegrityError);

    auto magic = bytes;
    magic[0] = 'X';
    write_all(dir / "magic.bin", magic);
    CHECK_THROWS_AS(restore_checkpoint(dir / "magic.bin"), IntegrityError);

    auto version = bytes;
    version[8] = 99;
    write_all(dir / "version.bin", version);
    CHECK_THROWS_AS(restore_checkpoint(dir / "version.bin"), IntegrityError);

    write_all(dir / "empty.bin", {});
    CHECK_THROWS_AS(restore_checkpoint(dir / "empty.bin"), IntegrityError);
    CHECK_THROWS_AS(restore_checkpoint(dir / "missing.bin"), IoError);

    CHECK_THROWS_AS(load_deployment(good), IncompatibleCheckpoint);
}

TEST_CASE("deployment artifact round trip") {
    const auto c = testutil::tiny_config();
    const auto data = load_datasets(c);
    const auto dir = testutil::temp_dir("ckpt_deploy");
    auto state = init_state(c, data.train);
    const auto dep = state.graph.export_deployment();
    save_deployment(dep, c, dir / "deploy.bin");
    CHECK(fs::exists(dir / "deploy.json"));
    CHECK(checkpoint_kind(dir / "deploy.bin") == CheckpointKind::kDeployment);
    auto art = load_deployment(dir / "deploy.bin");
    CHECK(art.graph.peers() == 1);
    CHECK(art.config.peers == c.peers);

    const auto x = gather(data.test, std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(testutil::bitwise_equal(dep.forward(x)[0].logits, art.graph.forward(x)[0].logits));

    const auto desc = describe_structure(art.graph);
    CHECK(desc.contains("stages"));
    CHECK(desc["peers"] == 1);

    // Saving twice produces identical bytes.
    save_deployment(dep, c, dir / "again.bin");
    CHECK(read_all(dir / "deploy.bin") == read_all(dir / "again.bin"));
}
