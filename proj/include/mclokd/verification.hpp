#pragma once

// Independent oracles: a direct-summation evaluation of the contrastive loss
// with the exact per-anchor normalizer, and a central-difference gradient
// checker. Nothing here calls into the production loss code paths it checks.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mclokd/contrastive.hpp"

namespace mclokd::verification {

inline constexpr std::size_t kOracleMaxBank = 1024;

/// Loss of one direction with Z = sum_n exp(anchor . v_n / tau) over the full
/// bank and the negative expectation taken exactly over every slot whose label
/// differs from `anchor_label`, scaled by K (defaults to that slot count).
/// The positive is bank row `positive_index`. Refuses banks above
/// kOracleMaxBank rows (InvalidInput).
double brute_force_contrastive(std::span<const double> anchor, const contrastive::MemoryBank& bank,
                               std::size_t positive_index, std::int64_t anchor_label, double tau,
                               std::optional<std::size_t> k = std::nullopt);

/// Same, with an explicit positive embedding (for example the other peer's
/// live embedding of the instance) instead of a bank row.
double brute_force_contrastive(std::span<const double> anchor, std::span<const double> positive,
                               const contrastive::MemoryBank& bank, std::int64_t anchor_label, double tau,
                               std::optional<std::size_t> k = std::nullopt);

struct ReferenceObjective {
    double ce = 0.0;
    double kl = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};

/// Batch objective recomputed from scratch: per-peer CE, KL from the
/// mean-logit teacher to the last peer, and both directions of every peer
/// pair with exact Z and every differently-labelled slot as a negative.
/// `logits[m]` is [n x classes], `embeddings[m]` is [n x d] (ignored when beta = 0).
ReferenceObjective reference_objective(const std::vector<std::vector<double>>& logits,
                                       const std::vector<std::vector<double>>& embeddings,
                                       std::span<const std::int64_t> labels,
                                       std::span<const contrastive::MemoryBank> banks, double temperature,
                                       double beta, double tau, bool kl_enabled = true);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Relative error |a - n| / max(|a|, |n|, floor) per coordinate between
/// `analytic` and the central difference (f(x + eps e_i) - f(x - eps e_i)) / 2eps.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                           std::span<const double> analytic, double eps = 1e-6, double floor = 1e-6);

struct CheckResult {
    std::string name;
    double value = 0.0;      // measured error
    double threshold = 0.0;  // pass iff value < threshold
    bool passed = false;
};

struct SuiteOptions {
    double grad_tolerance = 1e-4;
    double oracle_tolerance = 1e-6;
    std::size_t oracle_banks = 50;
    bool flip_negative_term = false;  // mutation: production uses the wrong sign
    std::uint64_t seed = 7;
};

/// Gradient checks of the losses, contrastive terms and the full objective on
/// a tiny peer graph (M=2, C=3, d=8).
std::vector<CheckResult> run_gradient_checks(const SuiteOptions& options);

/// Production loss (exact Z, full enumeration) against brute_force_contrastive
/// on random banks with N=32, d=16, C=4.
std::vector<CheckResult> run_oracle_checks(const SuiteOptions& options);

std::vector<CheckResult> run_suite(const SuiteOptions& options);

}  // namespace mclokd::verification
