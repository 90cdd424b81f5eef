#include <doctest.h>

#include <chrono>
#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "mclokd/contrastive.hpp"
#include "mclokd/error.hpp"
#include "mclokd/verification.hpp"

using namespace mclokd;
using namespace mclokd::verification;
using doctest::Approx;

TEST_CASE("hand fixture: N=2, one positive and one negative") {
    // anchor (1,0); slot 0 = (1,0) positive, slot 1 = (0,1) negative; tau = 1, K = 1.
    // Z = e + 1, K/N = 1/2, h_pos = 2e/(3e+1), 1 - h_neg = (e+1)/(e+3).
    contrastive::MemoryBank bank(2, {1, 0, 0, 1}, {0, 1}, 0.5);
    const std::vector<double> anchor{1, 0};
    const double expected = 0.9515428129132714;
    CHECK(brute_force_contrastive(anchor, bank, 0, 0, 1.0) == Approx(expected).epsilon(1e-14));
    const double e = std::exp(1.0);
    CHECK(expected == Approx(-std::log(2 * e / (3 * e + 1)) - std::log((e + 1) / (e + 3))).epsilon(1e-15));
}

TEST_CASE("large-temperature limit") {
    // As tau grows every match probability tends to 1/N, so h -> 1/(1+K) for every candidate.
    Rng rng(1);
    const std::size_t n = 16, c = 4;
    std::vector<std::int64_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int64_t>(i % c);
    const auto bank = contrastive::bank_init(n, 8, labels, 3);
    const auto anchor = testutil::random_unit(8, rng);
    const double k = static_cast<double>(bank.eligible_count(0));
    const double limit = -std::log(1.0 / (1.0 + k)) - k * std::log(k / (1.0 + k));
    const double tau = 1e3;
    const double oracle = brute_force_contrastive(anchor, bank, 0, 0, tau);
    CHECK(oracle == Approx(limit).epsilon(1e-2));
    const double prod = contrastive::directional_contrastive_loss(anchor, bank.slot(0), bank,
                                                                  contrastive::all_negatives(bank, 0), tau,
                                                                  contrastive::exact_z(bank, anchor, tau));
    CHECK(std::abs(prod - oracle) < 1e-6);
}

TEST_CASE("oracle refuses banks beyond its scale and bad arguments") {
    std::vector<std::int64_t> labels(kOracleMaxBank + 1, 0);
    labels[0] = 1;
    const auto big = contrastive::bank_init(kOracleMaxBank + 1, 2, labels, 1);
    const std::vector<double> a{1, 0};
    CHECK_THROWS_AS(brute_force_contrastive(a, big, 0, 1, 0.1), InvalidInput);
    contrastive::MemoryBank same(2, {1, 0, 0, 1}, {0, 0}, 0.5);
    CHECK_THROWS_AS(brute_force_contrastive(a, same, 0, 0, 0.1), NoNegatives);
    CHECK_THROWS_AS(brute_force_contrastive(a, same, 5, 1, 0.1), InvalidInput);
}

TEST_CASE("grad_check on a linear function is exact") {
    Rng rng(2);
    const auto w = testutil::random_vector(10, rng);
    auto f = [&](std::span<const double> x) {
        double s = 1.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
        return s;
    };
    CHECK(grad_check(f, testutil::random_vector(10, rng), w, 1e-2).max_rel_error < 1e-10);
}

TEST_CASE("grad_check reports the worst coordinate") {
    auto f = [](std::span<const double> x) { return x[0] * x[0] + 3.0 * x[1]; };
    const std::vector<double> x{2.0, 1.0};
    const auto r = grad_check(f, x, std::vector<double>{4.0, 2.0});
    CHECK(r.worst_index == 1);
    CHECK(r.numeric == Approx(3.0));
    CHECK(r.analytic == 2.0);
    CHECK(r.max_rel_error == Approx(1.0 / 3.0));
    CHECK_THROWS_AS(grad_check(f, x, std::vector<double>{1.0}), InvalidInput);
}

TEST_CASE("oracle equivalence on 50 random banks") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_oracle_checks(SuiteOptions{});
    REQUIRE(r.size() == 1);
    CHECK(r[0].passed);
    CHECK(r[0].value < 1e-6);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
}

TEST_CASE("the full suite passes with default tolerances") {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& c : run_suite(SuiteOptions{})) {
        INFO(c.name << ": " << c.value);
        CHECK(c.passed);
    }
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
}

TEST_CASE("mutation: flipping the negative-pair sign is caught") {
    SuiteOptions o;
    o.flip_negative_term = true;
    bool any_failed = false;
    for (const auto& c : run_suite(o)) any_failed = any_failed || !c.passed;
    CHECK(any_failed);
    CHECK_FALSE(run_oracle_checks(o)[0].passed);
}

TEST_CASE("tightening the tolerance to 1e-9 makes gradient checks fail") {
    SuiteOptions o;
    o.grad_tolerance = 1e-9;
    std::size_t failed = 0;
    for (const auto& c : run_gradient_checks(o)) failed += c.passed ? 0 : 1;
    CHECK(failed > 0);
}
