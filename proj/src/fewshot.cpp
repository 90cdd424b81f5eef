#include "mclokd/fewshot.hpp"

#include <cmath>
#include <numeric>

#include "mclokd/error.hpp"

namespace mclokd::fewshot {

std::vector<std::vector<double>> compute_prototypes(const std::vector<std::vector<std::vector<double>>>& support) {
    std::vector<std::vector<double>> protos;
    protos.reserve(support.size());
    for (std::size_t k = 0; k < support.size(); ++k) {
        const auto& cls = support[k];
        if (cls.empty()) throw InvalidInput("compute_prototypes: class " + std::to_string(k) + " has no support");
        std::vector<double> mean(cls.front().size(), 0.0);
        for (const auto& v : cls) {
            if (v.size() != mean.size()) throw InvalidInput("compute_prototypes: dimension mismatch");
            for (std::size_t j = 0; j < v.size(); ++j) mean[j] += v[j];
        }
        const double inv = 1.0 / static_cast<double>(cls.size());
        for (double& x : mean) x *= inv;
        protos.push_back(std::move(mean));
    }
    return protos;
}

std::vector<std::size_t> classify_queries(const std::vector<std::vector<double>>& queries,
                                          const std::vector<std::vector<double>>& prototypes) {
    if (prototypes.empty()) throw InvalidInput("classify_queries: no prototypes");
    std::vector<std::size_t> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < prototypes.size(); ++k) {
            if (prototypes[k].size() != q.size()) throw InvalidInput("classify_queries: dimension mismatch");
            double d = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) {
                const double diff = q[j] - prototypes[k][j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        out.push_back(best);
    }
    return out;
}

nlohmann::json EpisodicResult::to_json() const {
    return {{"way", way}, {"shot", shot}, {"query", query}, {"episodes", episodes}, {"mean", mean}, {"ci", ci}};
}

EpisodicResult episodic_accuracy(const Embeddings& embeddings, std::span<const std::int64_t> labels, std::size_t way,
                                 std::size_t shot, std::size_t query, std::size_t episodes, Rng& rng) {
    if (episodes < 1) throw InvalidInput("episodic_accuracy: need at least one episode");
    if (query < 1) throw InvalidInput("episodic_accuracy: need at least one query per class");
    if (embeddings.rows() != labels.size()) throw InvalidInput("episodic_accuracy: embeddings/labels mismatch");

    std::vector<std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (y >= by_class.size()) by_class.resize(y + 1);
        by_class[y].push_back(i);
    }
    std::erase_if(by_class, [](const auto& v) { return v.empty(); });

    auto fetch = [&](std::size_t i) {
        const auto r = embeddings.row(i);
        return std::vector<double>(r.begin(), r.end());
    };

    std::vector<double> accs;
    accs.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        const data::Episode ep = data::sample_episode(by_class, way, shot, query, rng);
        std::vector<std::vector<std::vector<double>>> support(way);
        std::vector<std::vector<double>> queries;
        std::vector<std::size_t> truth;
        for (std::size_t k = 0; k < way; ++k) {
            for (std::size_t i : ep.support[k]) support[k].push_back(fetch(i));
            for (std::size_t i : ep.queries[k]) {
                queries.push_back(fetch(i));
                truth.push_back(k);
            }
        }
        const auto pred = classify_queries(queries, compute_prototypes(support));
        std::size_t correct = 0;
        for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == truth[q] ? 1 : 0;
        accs.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(pred.size()));
    }

    EpisodicResult r;
    r.way = way;
    r.shot = shot;
    r.query = query;
    r.episodes = episodes;
    r.mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(episodes);
    double ss = 0.0;
    for (double a : accs) ss += (a - r.mean) * (a - r.mean);
    r.ci = 1.96 * std::sqrt(ss / static_cast<double>(episodes)) / std::sqrt(static_cast<double>(episodes));
    return r;
}

Representation parse_representation(const std::string& s) {
    if (s == "gap") return Representation::kGap;
    if (s == "head") return Representation::kHead;
    throw InvalidInput("unknown few-shot representation '" + s + "' (expected gap or head)");
}

Embeddings embed(const PeerGraph& graph, const data::Dataset& ds, Representation rep, std::size_t batch_size) {
    if (rep == Representation::kHead && !graph.has_projection()) {
        throw InvalidInput("embed: graph has no projection head");
    }
    Embeddings out;
    out.dim = rep == Representation::kGap ? graph.feature_dim() : graph.options().embedding_dim;
    out.values.reserve(ds.size() * out.dim);
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        const std::size_t end = std::min(ds.size(), start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto outs = graph.forward(data::gather(ds, idx));
        const auto& src = rep == Representation::kGap ? outs.back().features : outs.back().embedding.values;
        out.values.insert(out.values.end(), src.begin(), src.end());
    }
    return out;
}

EpisodicResult episodic_accuracy(const PeerGraph& graph, const data::Dataset& ds, Representation rep,
                                 std::size_t way, std::size_t shot, std::size_t query, std::size_t episodes, Rng& rng) {
    return episodic_accuracy(embed(graph, ds, rep), ds.labels, way, shot, query, episodes, rng);
}

}  // namespace mclokd::fewshot
