#include "mclokd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mclokd/error.hpp"

namespace mclokd::losses {
namespace {

double floored_log(double p) { return std::log(std::max(p, kLogFloor)); }

void check_same_size(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) {
        throw InvalidInput(std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                           std::to_string(b.size()) + ")");
    }
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InvalidInput("softmax: temperature must be > 0");
    if (logits.size() < 2) throw InvalidInput("softmax: need at least two classes");
    // Scale before shifting so that softmax(z, T) and softmax(z / T, 1) share every rounding step.
    std::vector<double> p(logits.size());
    double smax = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < logits.size(); ++c) {
        if (!std::isfinite(logits[c])) throw InvalidInput("softmax: non-finite logit");
        p[c] = logits[c] / temperature;
        if (!std::isfinite(p[c])) throw InvalidInput("softmax: logit / temperature overflows");
        smax = std::max(smax, p[c]);
    }
    double sum = 0.0;
    for (double& v : p) {
        v = std::exp(v - smax);
        sum += v;
    }
    for (double& v : p) v /= sum;
    return p;
}

double cross_entropy(std::span<const double> probs, std::size_t label) {
    if (label >= probs.size()) throw InvalidInput("cross_entropy: label out of range");
    return -floored_log(probs[label]);
}

std::vector<double> ensemble_soft_targets(std::span<const std::vector<double>> all_logits, double temperature) {
    if (all_logits.empty()) throw InvalidInput("ensemble_soft_targets: no peers");
    const std::size_t classes = all_logits.front().size();
    std::vector<double> mean(classes, 0.0);
    for (const auto& z : all_logits) {
        if (z.size() != classes) throw InvalidInput("ensemble_soft_targets: peers disagree on class count");
        for (std::size_t c = 0; c < classes; ++c) mean[c] += z[c];
    }
    const double inv = 1.0 / static_cast<double>(all_logits.size());
    for (double& v : mean) v *= inv;
    return softmax(mean, temperature);
}

double kl_divergence(std::span<const double> teacher, std::span<const double> student) {
    check_same_size(teacher, student, "kl_divergence");
    double kl = 0.0;
    for (std::size_t c = 0; c < teacher.size(); ++c) {
        if (teacher[c] <= 0.0) continue;
        kl += teacher[c] * (floored_log(teacher[c]) - floored_log(student[c]));
    }
    // Rounding can leave a -1e-17 residue for identical inputs.
    return std::max(kl, 0.0);
}

LossBundle combine(double ce, double kl, double contrastive, double temperature, double beta) {
    LossBundle b;
    b.ce = ce;
    b.kl = kl;
    b.contrastive = contrastive;
    b.temperature = temperature;
    b.beta = beta;
    b.total = ce + temperature * temperature * kl + beta * contrastive;
    return b;
}

std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) throw InvalidInput("cross_entropy_grad: label out of range");
    std::vector<double> g = softmax(logits, 1.0);
    g[label] -= 1.0;
    return g;
}

std::vector<double> kl_student_grad(std::span<const double> teacher, std::span<const double> student_logits,
                                    double temperature) {
    check_same_size(teacher, student_logits, "kl_student_grad");
    std::vector<double> g = softmax(student_logits, temperature);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = (g[c] - teacher[c]) / temperature;
    return g;
}

std::vector<std::vector<double>> kl_full_grad(std::span<const std::vector<double>> all_logits, std::size_t student,
                                              double temperature) {
    if (student >= all_logits.size()) throw InvalidInput("kl_full_grad: student index out of range");
    const std::vector<double> teacher = ensemble_soft_targets(all_logits, temperature);
    const std::vector<double> soft_student = softmax(all_logits[student], temperature);
    const std::size_t classes = teacher.size();

    // dKL/da_j for teacher logits a = mean/T: t_j (g_j - sum_c t_c g_c), g_c = log t_c - log s_c.
    std::vector<double> g(classes);
    double tg = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        g[c] = floored_log(teacher[c]) - floored_log(soft_student[c]);
        tg += teacher[c] * g[c];
    }
    const double scale = 1.0 / (static_cast<double>(all_logits.size()) * temperature);
    std::vector<double> through_teacher(classes);
    for (std::size_t c = 0; c < classes; ++c) through_teacher[c] = scale * teacher[c] * (g[c] - tg);

    std::vector<std::vector<double>> grads(all_logits.size(), through_teacher);
    for (std::size_t c = 0; c < classes; ++c) grads[student][c] += (soft_student[c] - teacher[c]) / temperature;
    return grads;
}

}  // namespace mclokd::losses
