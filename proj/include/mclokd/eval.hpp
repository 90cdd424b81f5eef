#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mclokd/data.hpp"
#include "mclokd/peer_graph.hpp"

namespace mclokd::eval {

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

/// 100 * misclassified / total over row-major [n x classes] logits.
double top1_error(std::span<const double> logits, std::size_t classes, std::span<const std::int64_t> labels);

/// Error of the graph's deployment peer (the last one).
double top1_error(const PeerGraph& model, const data::Dataset& ds, std::size_t batch_size = 256);

/// Error of argmax over the peers' mean logits.
double ensemble_top1_error(const PeerGraph& graph, const data::Dataset& ds, std::size_t batch_size = 256);

struct EvalSummary {
    double deploy_error = 0.0;
    double ensemble_error = 0.0;
    std::vector<double> peer_errors;
};

/// Deployment, ensemble and per-peer errors from a single pass.
EvalSummary evaluate(const PeerGraph& graph, const data::Dataset& ds, std::size_t batch_size = 256);

/// Mean and sample standard deviation (0 for a single value).
struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};
MeanStd mean_std(std::span<const double> values);

struct ResultRow {
    std::string method;
    std::uint64_t seed = 0;
    double error = 0.0;
};

/// Plain-text table: one line per (method, seed) plus a "mean ± std" line per method.
std::string format_results_table(std::span<const ResultRow> rows);
nlohmann::json results_json(std::span<const ResultRow> rows);

}  // namespace mclokd::eval
