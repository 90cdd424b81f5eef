#pragma once

// Prototypical-network episodic evaluation of a learned representation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mclokd/data.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/rng.hpp"

namespace mclokd::fewshot {

/// Row-major [n x dim] embedding matrix.
struct Embeddings {
    std::size_t dim = 0;
    std::vector<double> values;

    std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    std::size_t rows() const noexcept { return dim == 0 ? 0 : values.size() / dim; }
};

/// Class means of the support embeddings; support[k] lists class k's vectors.
/// Throws InvalidInput for an empty class.
std::vector<std::vector<double>> compute_prototypes(const std::vector<std::vector<std::vector<double>>>& support);

/// Nearest prototype by squared Euclidean distance; ties go to the lowest class.
std::vector<std::size_t> classify_queries(const std::vector<std::vector<double>>& queries,
                                          const std::vector<std::vector<double>>& prototypes);

struct EpisodicResult {
    std::size_t way = 0, shot = 0, query = 0, episodes = 0;
    double mean = 0.0;  // accuracy in percent
    double ci = 0.0;    // 1.96 * std / sqrt(episodes), population std

    nlohmann::json to_json() const;
};

/// Accuracy over `episodes` random episodes, where row i of `embeddings` is
/// the representation of dataset instance i.
EpisodicResult episodic_accuracy(const Embeddings& embeddings, std::span<const std::int64_t> labels, std::size_t way,
                                 std::size_t shot, std::size_t query, std::size_t episodes, Rng& rng);

enum class Representation { kGap, kHead };
Representation parse_representation(const std::string& s);

/// Per-instance representation from the last peer: its GAP feature or its
/// contrastive head output.
Embeddings embed(const PeerGraph& graph, const data::Dataset& ds, Representation rep, std::size_t batch_size = 256);

/// embed() followed by episodic_accuracy().
EpisodicResult episodic_accuracy(const PeerGraph& graph, const data::Dataset& ds, Representation rep,
                                 std::size_t way, std::size_t shot, std::size_t query, std::size_t episodes, Rng& rng);

}  // namespace mclokd::fewshot
