#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "mclokd/data.hpp"
#include "mclokd/error.hpp"

using namespace mclokd;
using namespace mclokd::data;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.train_size = 300;
    s.test_size = 120;
    s.classes = 6;
    s.channels = 2;
    s.height = 5;
    s.width = 7;
    s.fewshot_classes = 8;
    s.fewshot_per_class = 20;
    return s;
}

Dataset toy_balanced(std::size_t classes, std::size_t per_class) {
    Dataset d;
    d.name = "toy";
    d.channels = d.height = d.width = 1;
    d.classes = classes;
    for (std::size_t i = 0; i < classes * per_class; ++i) {
        d.labels.push_back(static_cast<std::int64_t>(i % classes));
        d.pixels.push_back(static_cast<double>(i));
    }
    return d;
}

}  // namespace

TEST_CASE("synthetic dataset has the configured shape") {
    const auto s = small_spec();
    const auto train = make_synthetic(s, Split::kTrain);
    const auto test = make_synthetic(s, Split::kTest);
    const auto few = make_synthetic(s, Split::kFewShot);
    CHECK(train.size() == 300);
    CHECK(test.size() == 120);
    CHECK(few.size() == 8 * 20);
    CHECK(train.classes == 6);
    CHECK(few.classes == 8);
    CHECK(train.image_size() == 2 * 5 * 7);
    CHECK(train.pixels.size() == 300 * 70);
    std::set<std::int64_t> seen(train.labels.begin(), train.labels.end());
    CHECK(seen.size() == 6);
    for (auto y : train.labels) CHECK((y >= 0 && y < 6));
    for (double v : train.pixels) REQUIRE(std::isfinite(v));
}

TEST_CASE("synthetic splits are deterministic and index-stable") {
    const auto s = small_spec();
    const auto a = make_synthetic(s, Split::kTrain);
    const auto b = make_synthetic(s, Split::kTrain);
    CHECK(a.labels == b.labels);
    CHECK(testutil::bitwise_equal(a.pixels, b.pixels));
    const auto t = make_synthetic(s, Split::kTest);
    CHECK_FALSE(testutil::bitwise_equal(std::span<const double>(a.pixels).first(t.pixels.size()), t.pixels));
    auto other = s;
    other.seed += 1;
    CHECK_FALSE(testutil::bitwise_equal(a.pixels, make_synthetic(other, Split::kTrain).pixels));
}

TEST_CASE("label noise flips roughly the requested fraction of training labels only") {
    auto s = small_spec();
    s.train_size = 3000;
    const auto clean = make_synthetic(s, Split::kTrain);
    s.label_noise = 0.3;
    const auto noisy = make_synthetic(s, Split::kTrain);
    std::size_t flipped = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) flipped += clean.labels[i] != noisy.labels[i];
    CHECK(std::abs(static_cast<double>(flipped) / 3000.0 - 0.3) < 0.04);
    CHECK(make_synthetic(s, Split::kTest).labels == make_synthetic(small_spec(), Split::kTest).labels);
}

TEST_CASE("load_dataset dispatch and errors") {
    CHECK(load_dataset("synthetic", Split::kTest, "", small_spec()).size() == 120);
    CHECK_THROWS_AS(load_dataset("imagenet", Split::kTrain, ""), InvalidInput);
    const auto empty = testutil::temp_dir("no_cifar");
    CHECK_THROWS_AS(load_dataset("cifar100", Split::kTrain, empty), IoError);
    CHECK(parse_split("train") == Split::kTrain);
    CHECK(parse_split("fewshot") == Split::kFewShot);
    CHECK_THROWS_AS(parse_split("validation"), InvalidInput);
}

TEST_CASE("cifar-100 binary reader on a fabricated file") {
    const auto root = testutil::temp_dir("fake_cifar");
    std::filesystem::create_directories(root / "cifar-100-binary");
    const std::size_t rec = 2 + 3072;
    std::vector<unsigned char> bytes(3 * rec, 0);
    for (std::size_t i = 0; i < 3; ++i) {
        bytes[i * rec] = 7;                                // coarse
        bytes[i * rec + 1] = static_cast<unsigned char>(10 * i + 3);  // fine
        bytes[i * rec + 2] = 255;                          // first red pixel
        bytes[i * rec + 2 + 1024] = 0;                     // first green pixel
    }
    std::ofstream(root / "cifar-100-binary" / "test.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    const auto ds = load_cifar100(root, Split::kTest);
    CHECK(ds.size() == 3);
    CHECK(ds.classes == 100);
    CHECK(ds.labels == std::vector<std::int64_t>{3, 13, 23});
    CHECK(ds.image(0)[0] == doctest::Approx((1.0 - 0.5071) / 0.2673));
    CHECK(ds.image(0)[1024] == doctest::Approx((0.0 - 0.4865) / 0.2564));

    // truncated record
    bytes.pop_back();
    std::ofstream(root / "cifar-100-binary" / "train.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_cifar100(root, Split::kTrain), IoError);
    CHECK_THROWS_AS(load_cifar100(root, Split::kFewShot), InvalidInput);
}

TEST_CASE("cifar-100 split sizes when the real data is present") {
    const auto root = default_data_root();
    if (!std::filesystem::exists(root / "cifar-100-binary" / "train.bin")) {
        MESSAGE("CIFAR-100 not found under " << root.string() << "; skipping");
        return;
    }
    const auto train = load_dataset("cifar100", Split::kTrain, root);
    CHECK(train.size() == 50000);
    CHECK(train.classes == 100);
    CHECK(load_dataset("cifar100", Split::kTest, root).size() == 10000);
}

TEST_CASE("validation split partitions the training set") {
    const auto full = toy_balanced(5, 20);
    const auto [tr, val] = split_validation(full, 0.2, 3);
    CHECK(tr.size() == 80);
    CHECK(val.size() == 20);
    std::multiset<double> all(tr.pixels.begin(), tr.pixels.end());
    all.insert(val.pixels.begin(), val.pixels.end());
    CHECK(all == std::multiset<double>(full.pixels.begin(), full.pixels.end()));
    CHECK_THROWS_AS(split_validation(full, 1.0, 3), InvalidInput);
}

TEST_CASE("augmentation") {
    Rng rng(1);
    const auto img = testutil::random_vector(3 * 6 * 6, rng);
    SUBCASE("none is the identity") {
        CHECK(testutil::bitwise_equal(augment(img, 3, 6, 6, AugmentPolicy::kNone, 2, rng), img));
    }
    SUBCASE("standard keeps the shape and is reproducible") {
        Rng a(5), b(5);
        for (int i = 0; i < 20; ++i) {
            const auto x = augment(img, 3, 6, 6, AugmentPolicy::kStandard, 2, a);
            const auto y = augment(img, 3, 6, 6, AugmentPolicy::kStandard, 2, b);
            CHECK(x.size() == img.size());
            CHECK(testutil::bitwise_equal(x, y));
        }
    }
    SUBCASE("standard with zero padding only flips") {
        Rng r(6);
        for (int i = 0; i < 10; ++i) {
            const auto x = augment(img, 3, 6, 6, AugmentPolicy::kStandard, 0, r);
            bool same = testutil::bitwise_equal(x, img);
            bool flipped = true;
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t h = 0; h < 6; ++h)
                    for (std::size_t w = 0; w < 6; ++w)
                        flipped = flipped && x[(c * 6 + h) * 6 + w] == img[(c * 6 + h) * 6 + (5 - w)];
            CHECK((same || flipped));
        }
    }
    CHECK(parse_augment("none") == AugmentPolicy::kNone);
    CHECK(parse_augment("standard") == AugmentPolicy::kStandard);
    CHECK_THROWS_AS(parse_augment("mixup"), InvalidInput);
}

TEST_CASE("gather stacks instances in order") {
    const auto d = toy_balanced(3, 4);
    const std::vector<std::size_t> idx{5, 0, 11};
    const auto batch = gather(d, idx);
    CHECK(batch.n == 3);
    CHECK(batch.data == std::vector<double>{5.0, 0.0, 11.0});
}

TEST_CASE("episode counts, determinism and disjointness") {
    const auto d = toy_balanced(10, 30);
    Rng a(7), b(7);
    const auto e1 = sample_episode(d, 5, 1, 15, a);
    const auto e2 = sample_episode(d, 5, 1, 15, b);
    std::size_t s = 0, q = 0;
    for (const auto& v : e1.support) s += v.size();
    for (const auto& v : e1.queries) q += v.size();
    CHECK(s == 5);
    CHECK(q == 75);
    CHECK(e1.classes == e2.classes);
    CHECK(e1.support == e2.support);
    CHECK(e1.queries == e2.queries);

    Rng r(8);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t way = 2 + r.below(6), shot = 1 + r.below(5), query = 1 + r.below(10);
        const auto e = sample_episode(d, way, shot, query, r);
        std::set<std::int64_t> classes(e.classes.begin(), e.classes.end());
        REQUIRE(classes.size() == way);
        std::set<std::size_t> used;
        for (std::size_t k = 0; k < way; ++k) {
            for (auto i : e.support[k]) {
                REQUIRE(d.labels[i] == e.classes[k]);
                REQUIRE(used.insert(i).second);
            }
            for (auto i : e.queries[k]) {
                REQUIRE(d.labels[i] == e.classes[k]);
                REQUIRE(used.insert(i).second);
            }
        }
    }
}

TEST_CASE("episode errors") {
    const auto d = toy_balanced(4, 5);
    Rng r(9);
    CHECK_THROWS_AS(sample_episode(d, 5, 1, 1, r), InvalidInput);  // too few classes
    CHECK_THROWS_AS(sample_episode(d, 2, 3, 3, r), InvalidInput);  // class runs short
    CHECK_THROWS_AS(sample_episode(d, 0, 1, 1, r), InvalidInput);
}

TEST_CASE("class selection frequency is uniform over 10^4 episodes") {
    const std::size_t classes = 10;
    const auto d = toy_balanced(classes, 10);
    Rng r(10);
    std::vector<double> counts(classes, 0.0);
    const int episodes = 10000;
    for (int i = 0; i < episodes; ++i) {
        for (auto c : sample_episode(d, 5, 1, 1, r).classes) counts[static_cast<std::size_t>(c)] += 1.0;
    }
    const double p = 5.0 / classes;
    const double expected = episodes * p;
    const double sigma = std::sqrt(episodes * p * (1 - p));
    double chi2 = 0.0;
    for (double c : counts) {
        CHECK(std::abs(c - expected) < 3.0 * sigma);
        chi2 += (c - expected) * (c - expected) / expected;
    }
    // Selections within an episode are without replacement, so the statistic is
    // conservative here; 27.88 is the 9-dof 0.001 quantile.
    CHECK(chi2 < 27.88);
}

TEST_CASE("shuffle is a deterministic permutation") {
    std::vector<std::size_t> a(50), b(50);
    for (std::size_t i = 0; i < 50; ++i) a[i] = b[i] = i;
    Rng r1(3), r2(3);
    shuffle(a, r1);
    shuffle(b, r2);
    CHECK(a == b);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}
