#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "mclokd/error.hpp"
#include "mclokd/losses.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/trainer.hpp"
#include "mclokd/verification.hpp"

using namespace mclokd;
using verification::grad_check;

namespace {

GraphOptions opts(std::size_t peers, bool share = true, std::size_t d = 8) {
    GraphOptions o;
    o.peers = peers;
    o.share_stem = share;
    o.embedding_dim = d;
    return o;
}

std::vector<double> flatten_params(const PeerGraph& g) {
    std::vector<double> out;
    for (const Param* p : g.parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
    return out;
}

}  // namespace

TEST_CASE("layer gradients match finite differences") {
    Rng rng(1);
    SUBCASE("conv2d weights, bias and input") {
        for (std::size_t stride : {1u, 2u}) {
            Conv2d conv(2, 3, 3, stride, 1);
            conv.init(rng);
            Activation x(2, 2, 5, 5);
            for (double& v : x.data) v = rng.normal();
            const Activation y0 = conv.forward(x);
            const auto proj = testutil::random_vector(y0.data.size(), rng);
            auto loss_of = [&](const Conv2d& c, const Activation& in) {
                const Activation y = c.forward(in);
                double s = 0.0;
                for (std::size_t i = 0; i < y.data.size(); ++i) s += proj[i] * y.data[i];
                return s;
            };
            Activation dout = y0;
            dout.data = proj;
            Activation din;
            conv.backward(x, dout, &din);

            auto fw = [&](std::span<const double> w) {
                Conv2d c = conv;
                c.weight.value.assign(w.begin(), w.end());
                return loss_of(c, x);
            };
            auto fx = [&](std::span<const double> v) {
                Activation in = x;
                in.data.assign(v.begin(), v.end());
                return loss_of(conv, in);
            };
            auto fb = [&](std::span<const double> b) {
                Conv2d c = conv;
                c.bias.value.assign(b.begin(), b.end());
                return loss_of(c, x);
            };
            CHECK(grad_check(fw, conv.weight.value, conv.weight.grad).max_rel_error < 1e-6);
            CHECK(grad_check(fb, conv.bias.value, conv.bias.grad).max_rel_error < 1e-6);
            CHECK(grad_check(fx, x.data, din.data).max_rel_error < 1e-6);
        }
    }
    SUBCASE("linear") {
        Linear lin(5, 4);
        lin.init(rng);
        const auto x = testutil::random_vector(3 * 5, rng);
        const auto proj = testutil::random_vector(3 * 4, rng);
        auto loss_of = [&](const Linear& l, std::span<const double> in) {
            const auto y = l.forward(in, 3);
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += proj[i] * y[i];
            return s;
        };
        const auto dx = lin.backward(x, proj, 3, true);
        auto fw = [&](std::span<const double> w) {
            Linear l = lin;
            l.weight.value.assign(w.begin(), w.end());
            return loss_of(l, x);
        };
        auto fx = [&](std::span<const double> v) { return loss_of(lin, v); };
        CHECK(grad_check(fw, lin.weight.value, lin.weight.grad).max_rel_error < 1e-6);
        CHECK(grad_check(fx, x, dx).max_rel_error < 1e-6);
    }
    SUBCASE("l2 normalization and pooling") {
        const auto x = testutil::random_vector(4 * 6, rng);
        const auto proj = testutil::random_vector(4 * 6, rng);
        std::vector<double> norms;
        const auto y = l2_normalize_rows(x, 6, norms);
        const auto dx = l2_normalize_rows_backward(y, proj, norms, 6);
        auto f = [&](std::span<const double> v) {
            std::vector<double> n;
            const auto out = l2_normalize_rows(v, 6, n);
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) s += proj[i] * out[i];
            return s;
        };
        CHECK(grad_check(f, x, dx).max_rel_error < 1e-6);

        Activation a(2, 3, 4, 4);
        for (double& v : a.data) v = rng.normal();
        const auto pooled = global_avg_pool(a);
        CHECK(pooled.size() == 6);
        const auto dp = testutil::random_vector(6, rng);
        const auto back = global_avg_pool_backward(dp, 2, 3, 4, 4);
        CHECK(back.data[0] == doctest::Approx(dp[0] / 16.0));
    }
}

TEST_CASE("build: determinism, validation and parameter counts") {
    const auto spec = testutil::tiny_spec();
    const auto a = PeerGraph::build(spec, opts(4), 17);
    const auto b = PeerGraph::build(spec, opts(4), 17);
    CHECK(testutil::bitwise_equal(flatten_params(a), flatten_params(b)));
    CHECK_FALSE(testutil::bitwise_equal(flatten_params(a), flatten_params(PeerGraph::build(spec, opts(4), 18))));

    const std::size_t one = PeerGraph::build(spec, opts(1), 1).parameter_count();
    CHECK(a.parameter_count() < 4 * one);
    CHECK(PeerGraph::build(spec, opts(4, false), 1).parameter_count() == 4 * one);

    CHECK_THROWS_AS(PeerGraph::build(spec, opts(0), 1), InvalidInput);
    auto bad = spec;
    bad.branch_stages = 3;
    CHECK_THROWS_AS(PeerGraph::build(bad, opts(2), 1), InvalidInput);
    bad.branch_stages = 0;
    CHECK_THROWS_AS(PeerGraph::build(bad, opts(2), 1), InvalidInput);
    bad = spec;
    bad.stages.pop_back();
    CHECK_THROWS_AS(PeerGraph::build(bad, opts(2), 1), InvalidInput);
}

TEST_CASE("M=1 graph is one classifier plus a projection head") {
    Rng rng(2);
    const auto spec = testutil::tiny_spec();
    const auto g = PeerGraph::build(spec, opts(1), 3);
    const auto out = g.forward(testutil::random_batch(spec, 4, rng));
    REQUIRE(out.size() == 1);
    CHECK(out[0].logits.size() == 4 * spec.classes);
    CHECK(out[0].features.size() == 4 * g.feature_dim());
    CHECK(out[0].embedding.rows() == 4);
    CHECK(out[0].embedding.dim == 8);
}

TEST_CASE("forward contracts") {
    Rng rng(3);
    const auto spec = testutil::tiny_spec(5);
    auto g = PeerGraph::build(spec, opts(3), 4);
    const auto x = testutil::random_batch(spec, 7, rng);

    SUBCASE("embeddings are unit-norm and branches are isomorphic") {
        const auto out = g.forward(x);
        REQUIRE(out.size() == 3);
        for (const auto& o : out) {
            CHECK(o.logits.size() == 7 * 5);
            CHECK(o.embedding.dim == 8);
            for (std::size_t i = 0; i < 7; ++i) CHECK(std::abs(testutil::norm(o.embedding.row(i)) - 1.0) < 1e-5);
        }
    }
    SUBCASE("zero classifier gives zero logits and a uniform softmax") {
        for (std::size_t m = 0; m < 3; ++m) {
            std::fill(g.classifier(m).weight.value.begin(), g.classifier(m).weight.value.end(), 0.0);
            std::fill(g.classifier(m).bias.value.begin(), g.classifier(m).bias.value.end(), 0.0);
        }
        for (const auto& o : g.forward(x)) {
            for (double v : o.logits) CHECK(v == 0.0);
            for (double p : losses::softmax(std::span<const double>(o.logits).first(5))) CHECK(p == doctest::Approx(0.2));
        }
    }
    SUBCASE("wrong input shape") {
        Activation bad(2, spec.channels + 1, spec.height, spec.width);
        CHECK_THROWS_AS(g.forward(bad), InvalidInput);
    }
}

TEST_CASE("copying branch parameters makes two peers identical") {
    Rng rng(4);
    const auto spec = testutil::tiny_spec();
    auto g = PeerGraph::build(spec, opts(2), 5);
    auto src = g.branch_parameters(0);
    auto dst = g.branch_parameters(1);
    REQUIRE(src.size() == dst.size());
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    const auto out = g.forward(testutil::random_batch(spec, 6, rng));
    CHECK(testutil::bitwise_equal(out[0].logits, out[1].logits));
    CHECK(testutil::bitwise_equal(out[0].embedding.values, out[1].embedding.values));
}

TEST_CASE("deployment export") {
    Rng rng(5);
    const auto spec = testutil::tiny_spec(4);
    for (bool share : {true, false}) {
        const auto g = PeerGraph::build(spec, opts(4, share), 6);
        const auto dep = g.export_deployment();
        CHECK(dep.peers() == 1);
        CHECK_FALSE(dep.has_projection());

        GraphOptions single = opts(1);
        single.projection_layers = 0;
        CHECK(dep.parameter_count() == PeerGraph::build(spec, single, 0).parameter_count());

        const auto x = testutil::random_batch(spec, 100, rng);
        const auto full = g.forward(x);
        const auto mine = dep.forward(x);
        CHECK(testutil::bitwise_equal(full.back().logits, mine[0].logits));
        for (std::size_t i = 0; i < 100; ++i) {
            const auto a = losses::softmax(std::span<const double>(full.back().logits).subspan(i * 4, 4));
            const auto b = losses::softmax(std::span<const double>(mine[0].logits).subspan(i * 4, 4));
            CHECK(testutil::bitwise_equal(a, b));
        }
        CHECK(testutil::bitwise_equal(flatten_params(dep), flatten_params(g.export_deployment())));
    }
}

TEST_CASE("every loss term sends gradient into the shared stem") {
    Rng rng(6);
    const auto spec = testutil::tiny_spec();
    auto g = PeerGraph::build(spec, opts(3), 7);
    const std::size_t n = 6;
    const auto x = testutil::random_batch(spec, n, rng);
    std::vector<std::int64_t> labels{0, 1, 2, 0, 1, 2};
    std::vector<contrastive::MemoryBank> banks;
    for (int m = 0; m < 3; ++m) {
        banks.push_back(contrastive::bank_init(12, 8, {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, rng.next_u64()));
        banks.back().set_z(12.0);
    }
    const auto plan = contrastive::sample_plan(banks, labels, 5, rng);

    auto stem_grad_norm = [&](double ce_w, double kl_w, double beta) {
        ForwardCache cache;
        const auto out = g.forward(x, &cache);
        ObjectiveOptions o;
        o.beta = beta;
        o.kl_enabled = kl_w > 0.0;
        const auto r = evaluate_objective(out, labels, banks, plan, o, true);
        // Isolate one term by subtracting the gradient of the others.
        auto dl = r.dlogits;
        if (ce_w == 0.0) {
            for (std::size_t m = 0; m < 3; ++m) {
                for (std::size_t i = 0; i < n; ++i) {
                    const auto gce = losses::cross_entropy_grad(
                        std::span<const double>(out[m].logits).subspan(i * 3, 3), static_cast<std::size_t>(labels[i]));
                    for (std::size_t c = 0; c < 3; ++c) dl[m][i * 3 + c] -= gce[c] / static_cast<double>(n);
                }
            }
        }
        g.zero_grad();
        g.backward(cache, dl, r.dembedding);
        double s = 0.0;
        for (Param* p : g.stem_parameters())
            for (double v : p->grad) s += v * v;
        return std::sqrt(s);
    };
    CHECK(stem_grad_norm(1.0, 0.0, 0.0) > 0.0);  // CE
    CHECK(stem_grad_norm(0.0, 1.0, 0.0) > 0.0);  // KL only
    CHECK(stem_grad_norm(0.0, 0.0, 0.5) > 0.0);  // contrastive only
    CHECK(stem_grad_norm(1.0, 1.0, 0.025) > 0.0);
}
