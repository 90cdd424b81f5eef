#pragma once

// Joint optimization of the peer graph:
//
//   total = sum_m CE_m + T^2 KL(teacher || peer M) + beta * sum_{a<b} L(f_a, f_b)
//
// One train_step = forward all peers, assemble the objective, backprop, SGD
// step, then write this step's embeddings into each peer's memory bank.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "mclokd/config.hpp"
#include "mclokd/contrastive.hpp"
#include "mclokd/data.hpp"
#include "mclokd/losses.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/rng.hpp"

namespace mclokd {

/// SGD with momentum and L2 weight decay: v = mu v + (g + wd w); w -= lr v.
class Sgd {
public:
    Sgd() = default;
    Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(std::span<Param* const> params, double lr);

    std::vector<std::vector<double>>& velocity() { return velocity_; }
    const std::vector<std::vector<double>>& velocity() const { return velocity_; }

private:
    double momentum_ = 0.9;
    double weight_decay_ = 0.0;
    std::vector<std::vector<double>> velocity_;
};

struct Batch {
    Activation images;
    std::vector<std::size_t> indices;  // stable dataset indices (memory bank rows)
    std::vector<std::int64_t> labels;
};

/// Gather and augment instances.
Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices, data::AugmentPolicy policy,
                 std::size_t pad, Rng& rng);

struct ObjectiveOptions {
    double temperature = losses::kDefaultTemperature;
    double beta = losses::kDefaultBeta;
    bool kl_enabled = true;
    bool kl_detach = true;
    bool contrastive_enabled = true;
    contrastive::ContrastiveConfig contrastive;

    static ObjectiveOptions from(const TrainConfig& c);
};

struct ObjectiveResult {
    losses::LossBundle bundle;
    std::vector<std::vector<double>> dlogits;    // per peer, [batch x classes]
    std::vector<std::vector<double>> dembedding;  // per peer, [batch x d]; empty when contrastive is off
};

/// Batch-averaged objective from peer outputs. `plan` supplies negatives when
/// the contrastive term is active (banks must carry a normalizer unless the
/// contrastive config asks for exact Z). Gradients are with respect to the
/// total and already include the T^2 and beta weights.
ObjectiveResult evaluate_objective(const std::vector<PeerOutput>& outputs, std::span<const std::int64_t> labels,
                                   std::span<const contrastive::MemoryBank> banks,
                                   const contrastive::NegativePlan& plan, const ObjectiveOptions& options,
                                   bool want_grads);

/// Everything that evolves during training.
struct TrainState {
    TrainConfig config;
    PeerGraph graph;
    std::vector<contrastive::MemoryBank> banks;  // one per peer when contrastive is active
    Sgd optimizer;
    std::size_t epoch = 0;
    std::size_t step = 0;
    Rng shuffle_rng;
    Rng augment_rng;
    Rng negative_rng;
};

/// Fresh state for a run over `train` with `config.seed`.
TrainState init_state(const TrainConfig& config, const data::Dataset& train);

struct StepReport {
    losses::LossBundle bundle;
    std::size_t deploy_wrong = 0;  // deployment-peer mistakes on this batch (train error)
};

/// Throws NonFiniteLoss (with component values) if the objective is NaN/Inf.
StepReport train_step(TrainState& state, const Batch& batch, double lr);

double learning_rate(const TrainConfig& config, std::size_t epoch);

struct EpochRecord {
    std::size_t epoch = 0;
    double ce = 0.0, kl = 0.0, contrastive = 0.0, total = 0.0;
    double lr = 0.0;
    double train_error = 0.0;
    double eval_error = 0.0;      // deployment peer on the test split
    double ensemble_error = 0.0;  // mean-logit ensemble on the test split
    std::optional<double> val_error;
    double wall_time = 0.0;  // seconds since fit() started

    nlohmann::json to_json() const;
};

struct Datasets {
    data::Dataset train;
    data::Dataset val;  // empty when val_fraction == 0
    data::Dataset test;
};

Datasets load_datasets(const TrainConfig& config);

struct FitResult {
    TrainState state;
    std::vector<EpochRecord> history;
    PeerGraph deployment;
    std::size_t best_epoch = 0;
};

struct FitOptions {
    /// When set: metrics.jsonl, checkpoint_{best,final}.bin, deploy.bin and
    /// deploy.json are written here.
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs config.epochs epochs with config.seed.
FitResult fit(const TrainConfig& config, const Datasets& data, const FitOptions& options = {});
FitResult fit(const TrainConfig& config, const FitOptions& options = {});

struct MultiSeedResult {
    std::vector<std::uint64_t> seeds;
    std::vector<std::vector<EpochRecord>> histories;
    nlohmann::json summary;  // {"deploy_error": {mean, std}, "ensemble_error": {...}, "seeds": [...]}
};

/// config.num_seeds runs with seeds seed, seed+1, ...; each run writes into
/// out_dir/seed_<s>/ and the summary goes to out_dir/summary.json.
MultiSeedResult fit_seeds(const TrainConfig& config, const FitOptions& options = {});

}  // namespace mclokd
