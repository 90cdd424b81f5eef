#include "mclokd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "mclokd/error.hpp"

namespace mclokd::eval {
namespace {

template <typename Fn>
void for_each_batch(const data::Dataset& ds, std::size_t batch_size, Fn&& fn) {
    if (ds.size() == 0) throw InvalidInput("evaluation on an empty dataset");
    batch_size = std::max<std::size_t>(batch_size, 1);
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        const std::size_t end = std::min(ds.size(), start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        fn(data::gather(ds, idx), std::span<const std::int64_t>(ds.labels).subspan(start, end - start));
    }
}

std::size_t count_wrong(std::span<const double> logits, std::size_t classes, std::span<const std::int64_t> labels) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (static_cast<std::int64_t>(argmax(logits.subspan(i * classes, classes))) != labels[i]) ++wrong;
    }
    return wrong;
}

std::vector<double> mean_logits(const std::vector<PeerOutput>& outs) {
    std::vector<double> mean(outs.front().logits.size(), 0.0);
    for (const auto& o : outs) {
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += o.logits[i];
    }
    const double inv = 1.0 / static_cast<double>(outs.size());
    for (double& v : mean) v *= inv;
    return mean;
}

}  // namespace

std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw InvalidInput("argmax of an empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

double top1_error(std::span<const double> logits, std::size_t classes, std::span<const std::int64_t> labels) {
    if (labels.empty()) throw InvalidInput("top1_error: empty dataset");
    if (classes == 0 || logits.size() != labels.size() * classes) throw InvalidInput("top1_error: logits shape mismatch");
    return 100.0 * static_cast<double>(count_wrong(logits, classes, labels)) / static_cast<double>(labels.size());
}

double top1_error(const PeerGraph& model, const data::Dataset& ds, std::size_t batch_size) {
    return evaluate(model, ds, batch_size).deploy_error;
}

double ensemble_top1_error(const PeerGraph& graph, const data::Dataset& ds, std::size_t batch_size) {
    return evaluate(graph, ds, batch_size).ensemble_error;
}

EvalSummary evaluate(const PeerGraph& graph, const data::Dataset& ds, std::size_t batch_size) {
    const std::size_t classes = graph.spec().classes;
    const std::size_t m = graph.peers();
    std::vector<std::size_t> wrong(m, 0);
    std::size_t wrong_ens = 0;
    for_each_batch(ds, batch_size, [&](const Activation& x, std::span<const std::int64_t> y) {
        const auto outs = graph.forward(x);
        for (std::size_t p = 0; p < m; ++p) wrong[p] += count_wrong(outs[p].logits, classes, y);
        wrong_ens += count_wrong(mean_logits(outs), classes, y);
    });
    const double n = static_cast<double>(ds.size());
    EvalSummary s;
    for (std::size_t p = 0; p < m; ++p) s.peer_errors.push_back(100.0 * static_cast<double>(wrong[p]) / n);
    s.deploy_error = s.peer_errors.back();
    s.ensemble_error = 100.0 * static_cast<double>(wrong_ens) / n;
    return s;
}

MeanStd mean_std(std::span<const double> values) {
    MeanStd r;
    if (values.empty()) return r;
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return r;
}

std::string format_results_table(std::span<const ResultRow> rows) {
    std::string out = "method                 seed    top1_error(%)\n";
    std::map<std::string, std::vector<double>> by_method;
    std::vector<std::string> order;
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-22s %-7llu %.2f\n", r.method.c_str(), static_cast<unsigned long long>(r.seed),
                      r.error);
        out += line;
        if (!by_method.contains(r.method)) order.push_back(r.method);
        by_method[r.method].push_back(r.error);
    }
    for (const auto& method : order) {
        const MeanStd ms = mean_std(by_method[method]);
        std::snprintf(line, sizeof line, "%-22s %-7s %.2f ± %.2f\n", method.c_str(), "mean", ms.mean, ms.stddev);
        out += line;
    }
    return out;
}

nlohmann::json results_json(std::span<const ResultRow> rows) {
    nlohmann::json runs = nlohmann::json::array();
    std::map<std::string, std::vector<double>> by_method;
    for (const auto& r : rows) {
        runs.push_back({{"method", r.method}, {"seed", r.seed}, {"error", r.error}});
        by_method[r.method].push_back(r.error);
    }
    nlohmann::json summary = nlohmann::json::object();
    for (const auto& [method, errs] : by_method) {
        const MeanStd ms = mean_std(errs);
        summary[method] = {{"mean", ms.mean}, {"std", ms.stddev}, {"runs", errs.size()}};
    }
    return {{"runs", runs}, {"summary", summary}};
}

}  // namespace mclokd::eval
