#include "mclokd/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mclokd/error.hpp"
#include "mclokd/kernels.hpp"
#include "mclokd/losses.hpp"

namespace mclokd::contrastive {
namespace {

double norm(std::span<const double> v) { return std::sqrt(kernels::dot(v.data(), v.data(), v.size())); }

void require_unit(std::span<const double> v, const char* what) {
    const double n = norm(v);
    if (!(std::abs(n - 1.0) <= kUnitNormTolerance)) {
        throw InvalidInput(std::string(what) + ": expected unit-norm embedding, got norm " + std::to_string(n));
    }
}

double floored_log(double x) { return std::log(std::max(x, losses::kLogFloor)); }

double bank_z(const MemoryBank& bank, std::span<const double> anchor, const ContrastiveConfig& config) {
    if (config.z_mode == ZMode::kExact) return exact_z(bank, anchor, config.tau);
    if (!bank.z()) throw InvalidInput("contrastive loss: bank normalizer not estimated yet");
    return *bank.z();
}

// One direction, batch-averaged. Gradients are added (already divided by B).
double directional_batch(const EmbeddingBatch& anchors, const EmbeddingBatch& positives, const MemoryBank& bank,
                         std::span<const NegativeSample> negatives, const ContrastiveConfig& config,
                         EmbeddingBatch* grad_anchor, EmbeddingBatch* grad_positive) {
    const std::size_t batch = anchors.rows();
    if (positives.rows() != batch || negatives.size() != batch) {
        throw InvalidInput("pairwise_loss: peers disagree on batch size");
    }
    if (anchors.dim != bank.dim() || positives.dim != bank.dim()) {
        throw InvalidInput("pairwise_loss: embedding dimension does not match bank");
    }
    const double inv_batch = 1.0 / static_cast<double>(batch);
    const bool want = grad_anchor != nullptr;
    double total = 0.0;
    DirectionalGrad g;
    for (std::size_t i = 0; i < batch; ++i) {
        const double z = bank_z(bank, anchors.row(i), config);
        total += directional_contrastive_loss(anchors.row(i), positives.row(i), bank, negatives[i], config.tau, z,
                                              want ? &g : nullptr, config.flip_negative_term);
        if (want) {
            kernels::axpy(inv_batch, g.anchor.data(), grad_anchor->row(i).data(), anchors.dim);
            kernels::axpy(inv_batch, g.positive.data(), grad_positive->row(i).data(), anchors.dim);
        }
    }
    return total * inv_batch;
}

EmbeddingBatch zeros_like(const EmbeddingBatch& e) { return EmbeddingBatch{e.dim, std::vector<double>(e.values.size())}; }

}  // namespace

MemoryBank::MemoryBank(std::size_t dim, std::vector<double> slots, std::vector<std::int64_t> labels, double momentum)
    : dim_(dim), momentum_(momentum), slots_(std::move(slots)), labels_(std::move(labels)) {
    if (dim_ == 0) throw InvalidInput("MemoryBank: dim must be >= 1");
    if (slots_.size() != labels_.size() * dim_) throw InvalidInput("MemoryBank: slots/labels size mismatch");
    if (!(momentum_ >= 0.0 && momentum_ <= 1.0)) throw InvalidInput("MemoryBank: momentum must lie in [0, 1]");
    for (std::int64_t y : labels_) {
        if (y < 0) throw InvalidInput("MemoryBank: labels must be non-negative");
        if (static_cast<std::size_t>(y) >= label_counts_.size()) label_counts_.resize(static_cast<std::size_t>(y) + 1, 0);
        ++label_counts_[static_cast<std::size_t>(y)];
    }
}

std::size_t MemoryBank::eligible_count(std::int64_t label) const {
    if (label < 0 || static_cast<std::size_t>(label) >= label_counts_.size()) return size();
    return size() - label_counts_[static_cast<std::size_t>(label)];
}

void MemoryBank::set_z(double z) {
    if (!(z > 0.0) || !std::isfinite(z)) throw InvalidInput("MemoryBank::set_z: z must be positive and finite");
    z_ = z;
}

void MemoryBank::update(std::size_t index, std::span<const double> v) {
    if (index >= size()) {
        throw InvalidInput("bank_update: index " + std::to_string(index) + " out of range for N=" +
                           std::to_string(size()));
    }
    if (v.size() != dim_) throw InvalidInput("bank_update: embedding dimension mismatch");
    require_unit(v, "bank_update");
    double* row = slots_.data() + index * dim_;
    if (momentum_ == 1.0) {
        std::copy(v.begin(), v.end(), row);
        return;
    }
    std::vector<double> blended(row, row + dim_);
    kernels::scal(1.0 - momentum_, blended.data(), dim_);
    kernels::axpy(momentum_, v.data(), blended.data(), dim_);
    const double n = norm(blended);
    if (n <= 1e-12) return;  // v == -old at rho = 0.5: direction undefined, keep the old row
    for (std::size_t j = 0; j < dim_; ++j) row[j] = blended[j] / n;
}

MemoryBank bank_init(std::size_t n, std::size_t dim, std::vector<std::int64_t> labels, std::uint64_t seed,
                     double momentum) {
    if (n < 2) throw InvalidInput("bank_init: need N >= 2");
    if (dim < 1) throw InvalidInput("bank_init: need d >= 1");
    if (labels.size() != n) throw InvalidInput("bank_init: expected one label per slot");
    Rng rng(seed);
    std::vector<double> slots(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = slots.data() + i * dim;
        double sq = 0.0;
        do {
            sq = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                row[j] = rng.normal();
                sq += row[j] * row[j];
            }
        } while (sq < 1e-24);
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
    }
    return MemoryBank(dim, std::move(slots), std::move(labels), momentum);
}

NegativeSample sample_negatives(const MemoryBank& bank, std::int64_t anchor_label, std::size_t k, Rng& rng) {
    if (k < 1) throw InvalidInput("sample_negatives: K must be >= 1");
    const std::size_t eligible = bank.eligible_count(anchor_label);
    if (eligible == 0) {
        throw NoNegatives("sample_negatives: every bank slot has label " + std::to_string(anchor_label));
    }
    NegativeSample out;
    out.indices.reserve(k);
    const auto labels = bank.labels();
    if (eligible * 8 >= bank.size()) {
        while (out.indices.size() < k) {
            const std::size_t j = rng.below(bank.size());
            if (labels[j] != anchor_label) out.indices.push_back(j);
        }
    } else {
        // Sparse candidate set: index it explicitly instead of rejecting most draws.
        std::vector<std::size_t> candidates;
        candidates.reserve(eligible);
        for (std::size_t j = 0; j < bank.size(); ++j) {
            if (labels[j] != anchor_label) candidates.push_back(j);
        }
        for (std::size_t s = 0; s < k; ++s) out.indices.push_back(candidates[rng.below(candidates.size())]);
    }
    return out;
}

NegativeSample all_negatives(const MemoryBank& bank, std::int64_t anchor_label) {
    NegativeSample out;
    const auto labels = bank.labels();
    for (std::size_t j = 0; j < bank.size(); ++j) {
        if (labels[j] != anchor_label) out.indices.push_back(j);
    }
    if (out.indices.empty()) {
        throw NoNegatives("all_negatives: every bank slot has label " + std::to_string(anchor_label));
    }
    return out;
}

double match_probability(std::span<const double> anchor, std::span<const double> candidate, double tau, double z) {
    if (!(tau > 0.0)) throw InvalidInput("match_probability: tau must be > 0");
    if (!(z > 0.0)) throw InvalidInput("match_probability: z must be > 0");
    if (anchor.size() != candidate.size()) throw InvalidInput("match_probability: dimension mismatch");
    return std::exp(kernels::dot(anchor.data(), candidate.data(), anchor.size()) / tau) / z;
}

double nce_posterior(double p_match, std::size_t k, std::size_t n) {
    if (n < 1) throw InvalidInput("nce_posterior: N must be >= 1");
    const double noise = static_cast<double>(k) / static_cast<double>(n);
    const double denom = p_match + noise;
    if (!(denom > 0.0)) throw InvalidInput("nce_posterior: p + K/N must be positive");
    return p_match / denom;
}

double exact_z(const MemoryBank& bank, std::span<const double> anchor, double tau) {
    if (!(tau > 0.0)) throw InvalidInput("exact_z: tau must be > 0");
    if (anchor.size() != bank.dim()) throw InvalidInput("exact_z: dimension mismatch");
    double z = 0.0;
    for (std::size_t n = 0; n < bank.size(); ++n) {
        z += std::exp(kernels::dot(anchor.data(), bank.slot(n).data(), bank.dim()) / tau);
    }
    return z;
}

double estimate_z(MemoryBank& bank, std::span<const double> anchors, double tau, Rng& rng,
                  std::size_t samples_per_anchor) {
    if (bank.z()) return *bank.z();
    if (!(tau > 0.0)) throw InvalidInput("estimate_z: tau must be > 0");
    const std::size_t d = bank.dim();
    if (anchors.empty() || anchors.size() % d != 0) throw InvalidInput("estimate_z: anchors must be a non-empty B x d batch");
    const std::size_t rows = anchors.size() / d;
    const bool enumerate = samples_per_anchor == 0 || samples_per_anchor >= bank.size();
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* a = anchors.data() + r * d;
        const std::size_t draws = enumerate ? bank.size() : samples_per_anchor;
        for (std::size_t s = 0; s < draws; ++s) {
            const std::size_t j = enumerate ? s : rng.below(bank.size());
            sum += std::exp(kernels::dot(a, bank.slot(j).data(), d) / tau);
        }
        count += draws;
    }
    const double z = static_cast<double>(bank.size()) * sum / static_cast<double>(count);
    bank.set_z(z);
    return z;
}

double directional_contrastive_loss(std::span<const double> anchor, std::span<const double> positive,
                                    const MemoryBank& bank, const NegativeSample& negatives, double tau, double z,
                                    DirectionalGrad* grad, bool flip_negative_term) {
    if (negatives.indices.empty()) throw InvalidInput("directional_contrastive_loss: no negatives");
    if (!(tau > 0.0) || !(z > 0.0)) throw InvalidInput("directional_contrastive_loss: tau and z must be > 0");
    const std::size_t d = anchor.size();
    if (positive.size() != d || bank.dim() != d) throw InvalidInput("directional_contrastive_loss: dimension mismatch");

    const std::size_t k = negatives.indices.size();
    const double noise = static_cast<double>(k) / static_cast<double>(bank.size());
    const double neg_sign = flip_negative_term ? -1.0 : 1.0;

    if (grad != nullptr) {
        grad->anchor.assign(d, 0.0);
        grad->positive.assign(d, 0.0);
    }

    // Positive pair: d(-log h)/ds = -(1 - h) / tau.
    const double p_pos = std::exp(kernels::dot(anchor.data(), positive.data(), d) / tau) / z;
    const double h_pos = p_pos / (p_pos + noise);
    double loss = -floored_log(h_pos);
    if (grad != nullptr && h_pos > losses::kLogFloor) {
        const double ds = -(noise / (p_pos + noise)) / tau;
        kernels::axpy(ds, positive.data(), grad->anchor.data(), d);
        kernels::axpy(ds, anchor.data(), grad->positive.data(), d);
    }

    // Negatives: d(-log(1 - h))/ds = h / tau.
    for (std::size_t j : negatives.indices) {
        const auto row = bank.slot(j);
        const double p = std::exp(kernels::dot(anchor.data(), row.data(), d) / tau) / z;
        const double one_minus_h = noise / (p + noise);
        loss -= neg_sign * floored_log(one_minus_h);
        if (grad != nullptr && one_minus_h > losses::kLogFloor) {
            const double ds = neg_sign * (p / (p + noise)) / tau;
            kernels::axpy(ds, row.data(), grad->anchor.data(), d);
        }
    }
    return loss;
}

NegativePlan sample_plan(std::span<const MemoryBank> banks, std::span<const std::int64_t> labels, std::size_t k,
                         Rng& rng) {
    const std::size_t m = banks.size();
    NegativePlan plan(m, std::vector<std::vector<NegativeSample>>(m));
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = 0; b < m; ++b) {
            if (a == b) continue;
            plan[a][b].reserve(labels.size());
            for (std::int64_t y : labels) plan[a][b].push_back(sample_negatives(banks[b], y, k, rng));
        }
    }
    return plan;
}

NegativePlan full_enumeration_plan(std::span<const MemoryBank> banks, std::span<const std::int64_t> labels) {
    const std::size_t m = banks.size();
    NegativePlan plan(m, std::vector<std::vector<NegativeSample>>(m));
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = 0; b < m; ++b) {
            if (a == b) continue;
            for (std::int64_t y : labels) plan[a][b].push_back(all_negatives(banks[b], y));
        }
    }
    return plan;
}

double pairwise_loss(const EmbeddingBatch& emb_a, const EmbeddingBatch& emb_b, const MemoryBank& bank_a,
                     const MemoryBank& bank_b, std::span<const NegativeSample> neg_a_to_b,
                     std::span<const NegativeSample> neg_b_to_a, const ContrastiveConfig& config,
                     EmbeddingBatch* grad_a, EmbeddingBatch* grad_b) {
    if ((grad_a == nullptr) != (grad_b == nullptr)) throw InvalidInput("pairwise_loss: request both gradients or none");
    if (emb_a.rows() == 0) throw InvalidInput("pairwise_loss: empty batch");
    return directional_batch(emb_a, emb_b, bank_b, neg_a_to_b, config, grad_a, grad_b) +
           directional_batch(emb_b, emb_a, bank_a, neg_b_to_a, config, grad_b, grad_a);
}

ContrastiveTotal total_contrastive_loss(std::span<const EmbeddingBatch> embeddings, std::span<const MemoryBank> banks,
                                        const NegativePlan& plan, const ContrastiveConfig& config, bool want_grads) {
    const std::size_t m = embeddings.size();
    if (m < 2) throw InvalidInput("total_contrastive_loss: need at least two peers");
    if (banks.size() != m || plan.size() != m) throw InvalidInput("total_contrastive_loss: peers/banks/plan mismatch");
    ContrastiveTotal out;
    if (want_grads) {
        out.grads.reserve(m);
        for (const auto& e : embeddings) out.grads.push_back(zeros_like(e));
    }
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a + 1; b < m; ++b) {
            out.loss += pairwise_loss(embeddings[a], embeddings[b], banks[a], banks[b], plan[a][b], plan[b][a], config,
                                      want_grads ? &out.grads[a] : nullptr, want_grads ? &out.grads[b] : nullptr);
            ++out.pairs;
            out.directional_terms += 2;
        }
    }
    return out;
}

}  // namespace mclokd::contrastive
