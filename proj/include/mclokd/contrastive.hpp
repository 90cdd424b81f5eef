#pragma once

// Memory banks and the NCE-based multi-view contrastive loss.
//
// Direction a->b: the anchor is peer a's embedding of instance i, the positive
// is peer b's embedding of the same instance (both computed in the current
// forward pass), and the K negatives are rows of peer b's memory bank whose
// label differs from y_i. Bank rows are constants for differentiation.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mclokd/rng.hpp"

namespace mclokd::contrastive {

inline constexpr std::size_t kDefaultEmbeddingDim = 128;
inline constexpr std::size_t kDefaultNegatives = 256;
inline constexpr double kDefaultTau = 0.1;            // CIFAR-style runs
inline constexpr double kDefaultTauLargeScale = 0.07;  // ImageNet-style runs
inline constexpr double kDefaultBankMomentum = 0.5;
inline constexpr double kUnitNormTolerance = 1e-5;

/// Per-peer store of one unit embedding per training instance.
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(std::size_t dim, std::vector<double> slots, std::vector<std::int64_t> labels, double momentum);

    std::size_t size() const noexcept { return labels_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    double momentum() const noexcept { return momentum_; }

    std::span<const double> slot(std::size_t i) const { return {slots_.data() + i * dim_, dim_}; }
    std::span<const double> slots() const noexcept { return slots_; }
    std::span<const std::int64_t> labels() const noexcept { return labels_; }

    /// Number of slots whose label differs from `label`.
    std::size_t eligible_count(std::int64_t label) const;

    const std::optional<double>& z() const noexcept { return z_; }
    void set_z(double z);

    /// Blend `v` into slot `index`: normalize((1 - rho) old + rho v).
    /// rho == 1 stores v verbatim. Throws InvalidInput on a bad index or a
    /// non-unit `v`.
    void update(std::size_t index, std::span<const double> v);

private:
    std::size_t dim_ = 0;
    double momentum_ = kDefaultBankMomentum;
    std::vector<double> slots_;
    std::vector<std::int64_t> labels_;
    std::vector<std::size_t> label_counts_;
    std::optional<double> z_;
};

/// N random unit rows; deterministic under `seed`.
MemoryBank bank_init(std::size_t n, std::size_t dim, std::vector<std::int64_t> labels, std::uint64_t seed,
                     double momentum = kDefaultBankMomentum);

/// Indices of K negative rows. Rows are read from the bank they were drawn
/// from; the bank is not modified while a step's loss is computed.
struct NegativeSample {
    std::vector<std::size_t> indices;
};

/// K indices drawn uniformly with replacement among slots whose label differs
/// from `anchor_label`. Throws NoNegatives when no slot qualifies.
NegativeSample sample_negatives(const MemoryBank& bank, std::int64_t anchor_label, std::size_t k, Rng& rng);

/// Every eligible slot exactly once (full enumeration, for exact checks).
NegativeSample all_negatives(const MemoryBank& bank, std::int64_t anchor_label);

/// exp(anchor . candidate / tau) / z
double match_probability(std::span<const double> anchor, std::span<const double> candidate, double tau, double z);

/// p / (p + K / N): posterior that a candidate came from the data distribution
/// rather than the uniform noise distribution.
double nce_posterior(double p_match, std::size_t k, std::size_t n);

/// Per-anchor normalizer sum_n exp(anchor . slot_n / tau) over the whole bank.
double exact_z(const MemoryBank& bank, std::span<const double> anchor, double tau);

/// Constant normalizer: N * mean exp(anchor . slot / tau) over anchors and
/// slots. Uses `samples_per_anchor` random slots per anchor, or every slot when
/// that is 0 or >= N. Computed once and frozen in the bank; later calls return
/// the stored value.
double estimate_z(MemoryBank& bank, std::span<const double> anchors, double tau, Rng& rng,
                  std::size_t samples_per_anchor = 0);

enum class ZMode { kConstant, kExact };

struct ContrastiveConfig {
    double tau = kDefaultTau;
    std::size_t negatives = kDefaultNegatives;
    ZMode z_mode = ZMode::kConstant;
    /// Mutation switch for the verification suite: adds the negative-pair
    /// log terms instead of subtracting them. Never set in training.
    bool flip_negative_term = false;
};

struct DirectionalGrad {
    std::vector<double> anchor;
    std::vector<double> positive;
};

/// -log h(anchor, positive) - sum_k log(1 - h(anchor, negative_k)) with
/// h = nce_posterior(match_probability(.), K, N), K = negatives.indices.size(),
/// N = bank.size(). `z` is treated as a constant. Writes d/danchor and
/// d/dpositive into `grad` when non-null.
double directional_contrastive_loss(std::span<const double> anchor, std::span<const double> positive,
                                    const MemoryBank& bank, const NegativeSample& negatives, double tau, double z,
                                    DirectionalGrad* grad = nullptr, bool flip_negative_term = false);

/// Row-major batch of unit embeddings.
struct EmbeddingBatch {
    std::size_t dim = 0;
    std::vector<double> values;

    std::size_t rows() const noexcept { return dim == 0 ? 0 : values.size() / dim; }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    std::span<double> row(std::size_t i) { return {values.data() + i * dim, dim}; }
};

/// negatives[a][b][i]: negatives for peer a's anchor on instance i, drawn from
/// peer b's bank. Diagonal entries are empty.
using NegativePlan = std::vector<std::vector<std::vector<NegativeSample>>>;

NegativePlan sample_plan(std::span<const MemoryBank> banks, std::span<const std::int64_t> labels, std::size_t k,
                         Rng& rng);

/// Plan that enumerates every eligible slot for every direction and instance.
NegativePlan full_enumeration_plan(std::span<const MemoryBank> banks, std::span<const std::int64_t> labels);

/// Symmetric loss between peers a and b, averaged over the batch. Gradients
/// (when requested) are accumulated into grad_a / grad_b, sized like the inputs.
double pairwise_loss(const EmbeddingBatch& emb_a, const EmbeddingBatch& emb_b, const MemoryBank& bank_a,
                     const MemoryBank& bank_b, std::span<const NegativeSample> neg_a_to_b,
                     std::span<const NegativeSample> neg_b_to_a, const ContrastiveConfig& config,
                     EmbeddingBatch* grad_a = nullptr, EmbeddingBatch* grad_b = nullptr);

struct ContrastiveTotal {
    double loss = 0.0;
    std::size_t pairs = 0;
    std::size_t directional_terms = 0;
    std::vector<EmbeddingBatch> grads;  // filled when requested
};

/// Sum of pairwise_loss over all unordered peer pairs a < b. Throws
/// InvalidInput for fewer than two peers.
ContrastiveTotal total_contrastive_loss(std::span<const EmbeddingBatch> embeddings, std::span<const MemoryBank> banks,
                                        const NegativePlan& plan, const ContrastiveConfig& config,
                                        bool want_grads = false);

}  // namespace mclokd::contrastive
