#pragma once

// Classification and distillation losses over a single instance's logits.
// Batch averaging happens in the trainer.

#include <cstddef>
#include <span>
#include <vector>

namespace mclokd::losses {

/// Floor applied inside every log so degenerate distributions give finite losses.
inline constexpr double kLogFloor = 1e-12;

inline constexpr double kDefaultTemperature = 3.0;
inline constexpr double kDefaultBeta = 0.025;

/// exp(z_c / T) / sum_d exp(z_d / T), max-shifted. Throws InvalidInput on
/// non-finite logits, T <= 0 or fewer than two classes.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

/// -log max(probs[label], kLogFloor).
double cross_entropy(std::span<const double> probs, std::size_t label);

/// Softened softmax of the peers' mean logits: the online ensemble teacher.
std::vector<double> ensemble_soft_targets(std::span<const std::vector<double>> all_logits, double temperature);

/// sum_c t_c log(t_c / s_c); terms with t_c == 0 contribute 0, s_c is floored.
double kl_divergence(std::span<const double> teacher, std::span<const double> student);

struct LossBundle {
    double ce = 0.0;
    double kl = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    double temperature = kDefaultTemperature;
    double beta = kDefaultBeta;
};

/// total = ce + T^2 kl + beta contrastive.
LossBundle combine(double ce, double kl, double contrastive,
                   double temperature = kDefaultTemperature, double beta = kDefaultBeta);

// Analytic gradients with respect to logits.

/// d CE(softmax(z), y) / dz = softmax(z) - onehot(y).
std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t label);

/// d KL(teacher || softmax(z/T)) / dz with the teacher held constant:
/// (softmax(z/T) - teacher) / T.
std::vector<double> kl_student_grad(std::span<const double> teacher, std::span<const double> student_logits,
                                    double temperature);

/// Gradient of KL(ensemble(all_logits, T) || softmax(all_logits[student]/T))
/// with respect to every peer's logits, including the path through the teacher.
/// Used when the teacher is not detached.
std::vector<std::vector<double>> kl_full_grad(std::span<const std::vector<double>> all_logits,
                                              std::size_t student, double temperature);

}  // namespace mclokd::losses
