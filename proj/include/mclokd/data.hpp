#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mclokd/layers.hpp"
#include "mclokd/rng.hpp"

namespace mclokd::data {

/// Images with stable instance indices: instance i is row i in every epoch
/// and every run over the same split. Pixels are stored CHW per image.
struct Dataset {
    std::string name;
    std::size_t channels = 0, height = 0, width = 0;
    std::size_t classes = 0;
    std::vector<double> pixels;
    std::vector<std::int64_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_size() const noexcept { return channels * height * width; }
    std::span<const double> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }
};

enum class Split { kTrain, kTest, kFewShot };

Split parse_split(const std::string& s);
const char* split_name(Split s);

/// Parameters of the procedural dataset used at desk scale.
///
/// Each class owns `modes` smooth random templates. An instance picks one
/// template, shifts it circularly by up to `max_shift` pixels, scales its
/// contrast, and adds white noise. Training labels are flipped to another
/// class with probability `label_noise`; test labels are clean. The few-shot
/// split draws `fewshot_classes` further classes disjoint from the training
/// classes.
struct SyntheticSpec {
    std::size_t train_size = 5000;
    std::size_t test_size = 2000;
    std::size_t classes = 10;
    std::size_t channels = 3;
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t modes = 3;
    std::size_t max_shift = 1;
    double noise = 1.0;
    double contrast = 0.2;
    double label_noise = 0.0;
    std::size_t fewshot_classes = 20;
    std::size_t fewshot_per_class = 40;
    double fewshot_noise = 1.0;
    std::uint64_t seed = 2020;
};

Dataset make_synthetic(const SyntheticSpec& spec, Split split);

/// CIFAR-100 binary release ("cifar-100-binary/{train,test}.bin" under root),
/// fine labels, per-channel standardized.
Dataset load_cifar100(const std::filesystem::path& root, Split split);

/// Dispatch on `name` ("synthetic" or "cifar100"). An empty root falls back to
/// $MCLOKD_DATA_ROOT, then "./data". Throws IoError with a hint when missing.
Dataset load_dataset(const std::string& name, Split split, const std::filesystem::path& root,
                     const SyntheticSpec& synthetic = {});

std::filesystem::path default_data_root();

/// Moves a trailing `fraction` of a seeded permutation into a validation set.
/// Both halves are re-indexed from 0.
std::pair<Dataset, Dataset> split_validation(const Dataset& full, double fraction, std::uint64_t seed);

enum class AugmentPolicy { kNone, kStandard };

AugmentPolicy parse_augment(const std::string& s);

/// kNone copies the image. kStandard zero-pads by `pad`, crops back to H x W
/// at a random offset, then flips horizontally with probability 1/2.
std::vector<double> augment(std::span<const double> image, std::size_t channels, std::size_t height,
                            std::size_t width, AugmentPolicy policy, std::size_t pad, Rng& rng);

/// Stack the given instances into an NCHW batch.
Activation gather(const Dataset& ds, std::span<const std::size_t> indices);

/// Instance indices per class label.
std::vector<std::vector<std::size_t>> index_by_class(const Dataset& ds);

struct Episode {
    std::size_t way = 0, shot = 0, query = 0;
    std::vector<std::int64_t> classes;               // dataset labels, episode class k = classes[k]
    std::vector<std::vector<std::size_t>> support;   // [way][shot]
    std::vector<std::vector<std::size_t>> queries;   // [way][query]
};

/// `way` distinct classes uniformly at random, then shot + query distinct
/// instances per class. Throws InvalidInput when a class runs short.
Episode sample_episode(const std::vector<std::vector<std::size_t>>& by_class, std::size_t way, std::size_t shot,
                       std::size_t query, Rng& rng);
Episode sample_episode(const Dataset& ds, std::size_t way, std::size_t shot, std::size_t query, Rng& rng);

/// Fisher-Yates in place with our own Rng, so orderings are portable.
void shuffle(std::span<std::size_t> v, Rng& rng);

}  // namespace mclokd::data
