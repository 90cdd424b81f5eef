#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <filesystem>
#include <string>
#include <vector>

#include "mclokd/config.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/rng.hpp"

namespace testutil {

inline std::vector<double> random_vector(std::size_t n, mclokd::Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline std::vector<double> random_unit(std::size_t n, mclokd::Rng& rng) {
    auto v = random_vector(n, rng);
    double s = 0.0;
    for (double x : v) s += x * x;
    for (double& x : v) x /= std::sqrt(s);
    return v;
}

inline std::vector<double> random_distribution(std::size_t n, mclokd::Rng& rng) {
    std::vector<double> p(n);
    double s = 0.0;
    for (double& x : p) {
        x = rng.uniform(1e-3, 1.0);
        s += x;
    }
    for (double& x : p) x /= s;
    return p;
}

inline double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline mclokd::BackboneSpec tiny_spec(std::size_t classes = 3) {
    mclokd::BackboneSpec s;
    s.channels = 2;
    s.height = s.width = 6;
    s.classes = classes;
    s.stages = {{3, 1, 1}, {4, 1, 2}, {5, 1, 2}};
    s.branch_stages = 2;
    return s;
}

inline mclokd::Activation random_batch(const mclokd::BackboneSpec& s, std::size_t n, mclokd::Rng& rng) {
    mclokd::Activation a(n, s.channels, s.height, s.width);
    for (double& v : a.data) v = rng.normal();
    return a;
}

/// Small, fast training config over the synthetic set.
inline mclokd::TrainConfig tiny_config(std::size_t epochs = 1) {
    mclokd::TrainConfig c;
    c.dataset = "synthetic";
    c.epochs = epochs;
    c.synthetic.train_size = 240;
    c.synthetic.test_size = 120;
    c.synthetic.classes = 4;
    c.synthetic.channels = 2;
    c.synthetic.height = c.synthetic.width = 6;
    c.synthetic.fewshot_classes = 6;
    c.synthetic.fewshot_per_class = 10;
    c.stage_widths = {4, 6, 8};
    c.peers = 3;
    c.embedding_dim = 8;
    c.negatives = 16;
    c.batch_size = 32;
    c.lr = 0.05;
    return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mclokd_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace testutil
