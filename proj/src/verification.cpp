#include "mclokd/verification.hpp"

#include <algorithm>
#include <cmath>

#include "mclokd/error.hpp"
#include "mclokd/losses.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/trainer.hpp"

namespace mclokd::verification {
namespace {

// Deliberately plain arithmetic: no kernels, no batching.
double plain_dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double oracle_log(double x) { return std::log(x < 1e-12 ? 1e-12 : x); }

std::vector<double> random_unit(std::size_t d, Rng& rng) {
    std::vector<double> v(d);
    double sq = 0.0;
    for (double& x : v) {
        x = rng.normal();
        sq += x * x;
    }
    for (double& x : v) x /= std::sqrt(sq);
    return v;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

std::vector<double> random_distribution(std::size_t n, Rng& rng) {
    std::vector<double> p(n);
    double s = 0.0;
    for (double& x : p) {
        x = rng.uniform(0.05, 1.0);
        s += x;
    }
    for (double& x : p) x /= s;
    return p;
}

contrastive::MemoryBank random_bank(std::size_t n, std::size_t d, std::size_t classes, Rng& rng) {
    std::vector<std::int64_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int64_t>(i % classes);
    return contrastive::bank_init(n, d, std::move(labels), rng.next_u64());
}

CheckResult grad_result(std::string name, const GradCheckReport& r, double tol) {
    return {std::move(name), r.max_rel_error, tol, r.max_rel_error < tol};
}

}  // namespace

double brute_force_contrastive(std::span<const double> anchor, std::span<const double> positive,
                               const contrastive::MemoryBank& bank, std::int64_t anchor_label, double tau,
                               std::optional<std::size_t> k) {
    const std::size_t n = bank.size();
    if (n > kOracleMaxBank) {
        throw InvalidInput("brute_force_contrastive: bank of " + std::to_string(n) + " rows exceeds oracle scale " +
                           std::to_string(kOracleMaxBank));
    }
    if (!(tau > 0.0)) throw InvalidInput("brute_force_contrastive: tau must be > 0");

    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(plain_dot(anchor, bank.slot(j)) / tau);

    std::vector<std::size_t> eligible;
    for (std::size_t j = 0; j < n; ++j) {
        if (bank.labels()[j] != anchor_label) eligible.push_back(j);
    }
    if (eligible.empty()) throw NoNegatives("brute_force_contrastive: no slot with a different label");
    const double kk = static_cast<double>(k.value_or(eligible.size()));
    const double pn = 1.0 / static_cast<double>(n);

    auto posterior = [&](std::span<const double> v) {
        const double pp = std::exp(plain_dot(anchor, v) / tau) / z;
        return pp / (pp + kk * pn);
    };

    double expectation = 0.0;
    for (std::size_t j : eligible) expectation += oracle_log(1.0 - posterior(bank.slot(j)));
    expectation /= static_cast<double>(eligible.size());
    return -oracle_log(posterior(positive)) - kk * expectation;
}

double brute_force_contrastive(std::span<const double> anchor, const contrastive::MemoryBank& bank,
                               std::size_t positive_index, std::int64_t anchor_label, double tau,
                               std::optional<std::size_t> k) {
    if (positive_index >= bank.size()) throw InvalidInput("brute_force_contrastive: positive index out of range");
    return brute_force_contrastive(anchor, bank.slot(positive_index), bank, anchor_label, tau, k);
}

ReferenceObjective reference_objective(const std::vector<std::vector<double>>& logits,
                                       const std::vector<std::vector<double>>& embeddings,
                                       std::span<const std::int64_t> labels,
                                       std::span<const contrastive::MemoryBank> banks, double temperature,
                                       double beta, double tau, bool kl_enabled) {
    const std::size_t m = logits.size();
    const std::size_t n = labels.size();
    if (m == 0 || n == 0) throw InvalidInput("reference_objective: empty input");
    const std::size_t classes = logits[0].size() / n;

    auto log_softmax = [&](const std::vector<double>& z, double t) {
        double mx = z[0];
        for (double v : z) mx = std::max(mx, v);
        double s = 0.0;
        for (double v : z) s += std::exp((v - mx) / t);
        std::vector<double> out(z.size());
        for (std::size_t c = 0; c < z.size(); ++c) out[c] = (z[c] - mx) / t - std::log(s);
        return out;
    };

    ReferenceObjective r;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::vector<double>> rows(m);
        std::vector<double> mean(classes, 0.0);
        for (std::size_t p = 0; p < m; ++p) {
            rows[p].assign(logits[p].begin() + static_cast<std::ptrdiff_t>(i * classes),
                           logits[p].begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
            for (std::size_t c = 0; c < classes; ++c) mean[c] += rows[p][c] / static_cast<double>(m);
            r.ce -= log_softmax(rows[p], 1.0)[static_cast<std::size_t>(labels[i])];
        }
        if (kl_enabled) {
            const auto lt = log_softmax(mean, temperature);
            const auto ls = log_softmax(rows.back(), temperature);
            for (std::size_t c = 0; c < classes; ++c) r.kl += std::exp(lt[c]) * (lt[c] - ls[c]);
        }
    }
    r.ce /= static_cast<double>(n);
    r.kl = std::max(0.0, r.kl / static_cast<double>(n));

    if (beta > 0.0) {
        const std::size_t d = embeddings[0].size() / n;
        auto row = [&](std::size_t p, std::size_t i) {
            return std::span<const double>(embeddings[p].data() + i * d, d);
        };
        for (std::size_t a = 0; a < m; ++a) {
            for (std::size_t b = a + 1; b < m; ++b) {
                double pair = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    pair += brute_force_contrastive(row(a, i), row(b, i), banks[b], labels[i], tau);
                    pair += brute_force_contrastive(row(b, i), row(a, i), banks[a], labels[i], tau);
                }
                r.contrastive += pair / static_cast<double>(n);
            }
        }
    }
    r.total = r.ce + temperature * temperature * r.kl + beta * r.contrastive;
    return r;
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                           std::span<const double> analytic, double eps, double floor) {
    if (analytic.size() != x.size()) throw InvalidInput("grad_check: gradient size mismatch");
    GradCheckReport rep;
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        const double up = f(probe);
        probe[i] = x[i] - eps;
        const double down = f(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (i == 0 || rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_index = i;
            rep.analytic = analytic[i];
            rep.numeric = numeric;
        }
    }
    return rep;
}

std::vector<CheckResult> run_gradient_checks(const SuiteOptions& options) {
    const double tol = options.grad_tolerance;
    Rng rng(options.seed);
    std::vector<CheckResult> out;

    {
        // Sanity: central differences are exact on affine functions.
        const auto w = random_vector(6, rng);
        auto f = [&](std::span<const double> x) {
            double s = 0.5;
            for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
            return s;
        };
        const auto r = grad_check(f, random_vector(6, rng), w, 1e-2);
        out.push_back({"linear function", r.max_rel_error, 1e-10, r.max_rel_error < 1e-10});
    }
    {
        const auto z = random_vector(5, rng, 2.0);
        const std::size_t y = 2;
        auto f = [&](std::span<const double> x) { return losses::cross_entropy(losses::softmax(x), y); };
        out.push_back(grad_result("softmax cross-entropy", grad_check(f, z, losses::cross_entropy_grad(z, y)), tol));
    }
    {
        const auto teacher = random_distribution(5, rng);
        const auto z = random_vector(5, rng, 2.0);
        const double t = 3.0;
        auto f = [&](std::span<const double> x) { return losses::kl_divergence(teacher, losses::softmax(x, t)); };
        out.push_back(grad_result("kl (detached teacher)", grad_check(f, z, losses::kl_student_grad(teacher, z, t)), tol));
    }
    {
        const std::size_t m = 3, c = 4;
        const double t = 3.0;
        std::vector<std::vector<double>> logits;
        for (std::size_t p = 0; p < m; ++p) logits.push_back(random_vector(c, rng, 2.0));
        std::vector<double> flat;
        for (const auto& l : logits) flat.insert(flat.end(), l.begin(), l.end());
        auto unflat = [&](std::span<const double> x) {
            std::vector<std::vector<double>> v(m);
            for (std::size_t p = 0; p < m; ++p) v[p].assign(x.begin() + static_cast<std::ptrdiff_t>(p * c),
                                                            x.begin() + static_cast<std::ptrdiff_t>((p + 1) * c));
            return v;
        };
        auto f = [&](std::span<const double> x) {
            const auto v = unflat(x);
            return losses::kl_divergence(losses::ensemble_soft_targets(v, t), losses::softmax(v.back(), t));
        };
        std::vector<double> analytic;
        for (const auto& g : losses::kl_full_grad(logits, m - 1, t)) analytic.insert(analytic.end(), g.begin(), g.end());
        out.push_back(grad_result("kl (through teacher)", grad_check(f, flat, analytic), tol));
    }
    {
        const std::size_t n = 16, d = 8;
        auto bank = random_bank(n, d, 4, rng);
        const auto anchor = random_unit(d, rng);
        const auto positive = random_unit(d, rng);
        const auto neg = contrastive::sample_negatives(bank, 0, 6, rng);
        const double tau = 0.1, z = static_cast<double>(n) * 1.3;
        contrastive::DirectionalGrad g;
        contrastive::directional_contrastive_loss(anchor, positive, bank, neg, tau, z, &g, options.flip_negative_term);
        auto fa = [&](std::span<const double> x) {
            return contrastive::directional_contrastive_loss(x, positive, bank, neg, tau, z, nullptr,
                                                             options.flip_negative_term);
        };
        auto fp = [&](std::span<const double> x) {
            return contrastive::directional_contrastive_loss(anchor, x, bank, neg, tau, z, nullptr,
                                                             options.flip_negative_term);
        };
        out.push_back(grad_result("directional contrastive / anchor", grad_check(fa, anchor, g.anchor), tol));
        out.push_back(grad_result("directional contrastive / positive", grad_check(fp, positive, g.positive), tol));
    }

    {
        const std::size_t m = 3, batch = 4, d = 6, n = 20;
        std::vector<contrastive::MemoryBank> banks;
        for (std::size_t p = 0; p < m; ++p) {
            banks.push_back(random_bank(n, d, 3, rng));
            banks.back().set_z(static_cast<double>(n) * rng.uniform(0.8, 1.5));
        }
        std::vector<std::int64_t> labels = {0, 1, 2, 0};
        const auto plan = contrastive::sample_plan(banks, labels, 5, rng);
        contrastive::ContrastiveConfig cfg;
        cfg.tau = 0.2;
        cfg.flip_negative_term = options.flip_negative_term;
        std::vector<double> flat;
        for (std::size_t p = 0; p < m * batch; ++p) {
            const auto u = random_unit(d, rng);
            flat.insert(flat.end(), u.begin(), u.end());
        }
        auto unflat = [&](std::span<const double> x) {
            std::vector<contrastive::EmbeddingBatch> e(m);
            for (std::size_t p = 0; p < m; ++p) {
                e[p].dim = d;
                e[p].values.assign(x.begin() + static_cast<std::ptrdiff_t>(p * batch * d),
                                   x.begin() + static_cast<std::ptrdiff_t>((p + 1) * batch * d));
            }
            return e;
        };
        auto f = [&](std::span<const double> x) {
            return contrastive::total_contrastive_loss(unflat(x), banks, plan, cfg).loss;
        };
        const auto total = contrastive::total_contrastive_loss(unflat(flat), banks, plan, cfg, true);
        std::vector<double> analytic;
        for (const auto& g : total.grads) analytic.insert(analytic.end(), g.values.begin(), g.values.end());
        out.push_back(grad_result("total contrastive / embeddings (M=3)", grad_check(f, flat, analytic), tol));
    }

    // Full objective on a tiny graph. The teacher is not detached here so the
    // analytic gradient is the true gradient of the reported total.
    {
        BackboneSpec spec;
        spec.channels = 2;
        spec.height = spec.width = 4;
        spec.classes = 3;
        spec.stages = {{3, 1, 1}, {4, 1, 2}, {5, 1, 2}};
        spec.branch_stages = 2;
        GraphOptions go;
        go.peers = 2;
        go.embedding_dim = 8;
        PeerGraph graph = PeerGraph::build(spec, go, rng.next_u64());

        const std::size_t batch = 3, n = 12;
        Activation x(batch, spec.channels, spec.height, spec.width);
        for (double& v : x.data) v = rng.normal();
        std::vector<std::int64_t> labels = {0, 1, 2};
        std::vector<contrastive::MemoryBank> banks;
        for (std::size_t m = 0; m < go.peers; ++m) {
            std::vector<std::int64_t> bank_labels(n);
            for (std::size_t i = 0; i < n; ++i) bank_labels[i] = static_cast<std::int64_t>(i % spec.classes);
            banks.push_back(contrastive::bank_init(n, go.embedding_dim, bank_labels, rng.next_u64()));
            banks.back().set_z(static_cast<double>(n) * rng.uniform(0.8, 1.5));
        }
        const auto plan = contrastive::sample_plan(banks, labels, 4, rng);

        ObjectiveOptions opts;
        opts.temperature = 3.0;
        opts.beta = 0.5;  // larger than the default so the contrastive path carries weight in the check
        opts.kl_detach = false;
        opts.contrastive.tau = 0.1;
        opts.contrastive.flip_negative_term = options.flip_negative_term;

        auto params = graph.parameters();
        std::vector<double> theta;
        for (const Param* p : params) theta.insert(theta.end(), p->value.begin(), p->value.end());
        auto load = [&](std::span<const double> t) {
            std::size_t off = 0;
            for (Param* p : params) {
                std::copy(t.begin() + static_cast<std::ptrdiff_t>(off),
                          t.begin() + static_cast<std::ptrdiff_t>(off + p->size()), p->value.begin());
                off += p->size();
            }
        };
        auto f = [&](std::span<const double> t) {
            load(t);
            const auto outs = graph.forward(x);
            return evaluate_objective(outs, labels, banks, plan, opts, false).bundle.total;
        };

        load(theta);
        ForwardCache cache;
        const auto outs = graph.forward(x, &cache);
        const auto obj = evaluate_objective(outs, labels, banks, plan, opts, true);
        graph.zero_grad();
        graph.backward(cache, obj.dlogits, obj.dembedding);
        std::vector<double> analytic;
        for (const Param* p : params) analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());
        out.push_back(grad_result("full objective, tiny graph (M=2, C=3, d=8)", grad_check(f, theta, analytic), tol));
        load(theta);
    }
    return out;
}

std::vector<CheckResult> run_oracle_checks(const SuiteOptions& options) {
    constexpr std::size_t kN = 32, kD = 16, kC = 4;
    Rng rng(options.seed ^ 0x0EAC1Eull);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < options.oracle_banks; ++trial) {
        const auto bank = random_bank(kN, kD, kC, rng);
        const std::size_t pos = rng.below(kN);
        const std::int64_t label = bank.labels()[pos];
        const auto anchor = random_unit(kD, rng);
        const double tau = rng.uniform(0.07, 0.5);

        const auto neg = contrastive::all_negatives(bank, label);
        const double z = contrastive::exact_z(bank, anchor, tau);
        const double production = contrastive::directional_contrastive_loss(anchor, bank.slot(pos), bank, neg, tau, z,
                                                                            nullptr, options.flip_negative_term);
        const double oracle = brute_force_contrastive(anchor, bank, pos, label, tau);
        worst = std::max(worst, std::abs(production - oracle));
    }
    return {{"oracle equivalence (exact Z, full enumeration, " + std::to_string(options.oracle_banks) + " banks)", worst,
             options.oracle_tolerance, worst < options.oracle_tolerance}};
}

std::vector<CheckResult> run_suite(const SuiteOptions& options) {
    auto out = run_oracle_checks(options);
    auto grads = run_gradient_checks(options);
    out.insert(out.end(), grads.begin(), grads.end());
    return out;
}

}  // namespace mclokd::verification
