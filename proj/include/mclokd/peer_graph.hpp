#pragma once

// M peer classifiers sharing a low-level convolutional stem.
//
//            +-- branch 0: high stages -> GAP -> classifier / projection head
//   stem ----+-- branch 1: ...
//            +-- branch M-1 (deployment peer)
//
// Each conv is followed by ReLU. The projection head maps the GAP feature to a
// unit-norm contrastive embedding and is dropped at export.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mclokd/contrastive.hpp"
#include "mclokd/layers.hpp"

namespace mclokd {

struct StageSpec {
    std::size_t width = 16;
    std::size_t depth = 1;   // conv layers in the stage
    std::size_t stride = 1;  // applied by the first conv of the stage
};

struct BackboneSpec {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t classes = 10;
    std::vector<StageSpec> stages{{16, 1, 1}, {32, 1, 2}, {64, 1, 2}};
    /// Trailing stages replicated per peer; the rest form the shared stem.
    std::size_t branch_stages = 2;

    /// Throws InvalidInput on fewer than 3 stages or a branch point outside [1, stages).
    void validate() const;
};

struct GraphOptions {
    std::size_t peers = 4;
    bool share_stem = true;
    std::size_t embedding_dim = contrastive::kDefaultEmbeddingDim;
    /// Linear layers in the projection head (ReLU between them). 0 = no head.
    std::size_t projection_layers = 1;
};

struct PeerOutput {
    std::vector<double> logits;      // [batch x classes]
    std::vector<double> features;    // [batch x feature_dim], GAP output
    contrastive::EmbeddingBatch embedding;  // [batch x d], unit rows; empty without a head
};

/// Activations retained by forward() for backward().
struct ForwardCache {
    struct Trunk {
        std::vector<Activation> acts;  // acts[0] is the trunk input, acts[l+1] post-ReLU of conv l
    };
    struct Branch {
        Trunk stem;  // used when the stem is not shared
        Trunk high;
        std::vector<double> features;
        std::vector<std::vector<double>> head_inputs;  // input to each projection layer
        std::vector<double> head_out;                  // pre-normalization output
        std::vector<double> norms;
        std::vector<double> embedding;
    };
    std::size_t batch = 0;
    Trunk stem;
    std::vector<Branch> branches;
};

class PeerGraph {
public:
    PeerGraph() = default;

    /// Deterministic under `seed`. Throws InvalidInput for M < 1 or a bad spec.
    static PeerGraph build(const BackboneSpec& spec, const GraphOptions& options, std::uint64_t seed);

    const BackboneSpec& spec() const noexcept { return spec_; }
    const GraphOptions& options() const noexcept { return options_; }
    std::size_t peers() const noexcept { return branches_.size(); }
    std::size_t feature_dim() const noexcept { return spec_.stages.back().width; }
    bool has_projection() const noexcept { return options_.projection_layers > 0; }

    /// `batch` must be [n, channels, height, width]. Fills `cache` when non-null.
    std::vector<PeerOutput> forward(const Activation& batch, ForwardCache* cache = nullptr) const;

    /// Accumulates parameter gradients. `dlogits[m]` is [batch x classes];
    /// `dembedding[m]` is [batch x d] or empty to skip the head.
    void backward(const ForwardCache& cache, std::span<const std::vector<double>> dlogits,
                  std::span<const std::vector<double>> dembedding);

    void zero_grad();

    /// Stable enumeration order: shared stem, then per peer (own stem, high
    /// stages, classifier, projection head).
    std::vector<Param*> parameters();
    std::vector<const Param*> parameters() const;
    std::size_t parameter_count() const;

    /// Parameters of the shared stem only (empty when the stem is not shared).
    std::vector<Param*> stem_parameters();
    /// Classifier weights/bias of peer m.
    Linear& classifier(std::size_t m) { return branches_.at(m).classifier; }
    std::vector<Param*> branch_parameters(std::size_t m);

    /// Standalone single-peer network computing the last peer's logits with
    /// the same arithmetic. The projection head is not carried over.
    PeerGraph export_deployment() const;

private:
    struct Branch {
        std::vector<Conv2d> stem;  // own copy when not shared
        std::vector<Conv2d> high;
        Linear classifier;
        std::vector<Linear> head;
    };

    BackboneSpec spec_;
    GraphOptions options_;
    std::vector<Conv2d> stem_;
    std::vector<Branch> branches_;
};

}  // namespace mclokd
