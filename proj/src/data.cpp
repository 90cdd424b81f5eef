#include "mclokd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "mclokd/error.hpp"

namespace mclokd::data {
namespace {

// Zero-mean, unit-variance smooth field: white noise box-blurred twice per channel.
std::vector<double> smooth_template(const SyntheticSpec& s, Rng& rng) {
    const std::size_t h = s.height, w = s.width, plane = h * w;
    std::vector<double> t(s.channels * plane);
    std::vector<double> tmp(plane);
    for (std::size_t c = 0; c < s.channels; ++c) {
        double* x = t.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) x[i] = rng.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const std::size_t yy = (y + h + static_cast<std::size_t>(dy + 1) - 1) % h;
                            const std::size_t xw = (xx + w + static_cast<std::size_t>(dx + 1) - 1) % w;
                            acc += x[yy * w + xw];
                        }
                    }
                    tmp[y * w + xx] = acc / 9.0;
                }
            }
            std::copy(tmp.begin(), tmp.end(), x);
        }
    }
    const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
    double var = 0.0;
    for (double v : t) var += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(t.size()) + 1e-12);
    for (double& v : t) v = (v - mean) * inv;
    return t;
}

std::uint64_t split_stream(Split s) {
    switch (s) {
        case Split::kTrain: return 0x7472u;
        case Split::kTest: return 0x7465u;
        case Split::kFewShot: return 0x6673u;
    }
    return 0;
}

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Split parse_split(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "test") return Split::kTest;
    if (s == "fewshot") return Split::kFewShot;
    throw InvalidInput("unknown split '" + s + "' (expected train, test or fewshot)");
}

const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kTest: return "test";
        case Split::kFewShot: return "fewshot";
    }
    return "?";
}

Dataset make_synthetic(const SyntheticSpec& spec, Split split) {
    if (spec.classes < 2) throw InvalidInput("synthetic dataset: need at least 2 classes");
    if (spec.modes < 1 || spec.channels < 1 || spec.height < 1 || spec.width < 1) {
        throw InvalidInput("synthetic dataset: empty shape");
    }
    // Templates for training and few-shot classes come from one stream, so
    // the few-shot classes are fixed regardless of which split is built.
    Rng template_rng(spec.seed);
    const std::size_t total_classes = spec.classes + spec.fewshot_classes;
    std::vector<std::vector<double>> templates;
    templates.reserve(total_classes * spec.modes);
    for (std::size_t i = 0; i < total_classes * spec.modes; ++i) templates.push_back(smooth_template(spec, template_rng));

    Dataset ds;
    ds.name = std::string("synthetic/") + split_name(split);
    ds.channels = spec.channels;
    ds.height = spec.height;
    ds.width = spec.width;

    std::size_t count = 0, class_offset = 0, classes = spec.classes;
    double noise = spec.noise;
    switch (split) {
        case Split::kTrain: count = spec.train_size; break;
        case Split::kTest: count = spec.test_size; break;
        case Split::kFewShot:
            classes = spec.fewshot_classes;
            class_offset = spec.classes;
            count = spec.fewshot_classes * spec.fewshot_per_class;
            noise = spec.fewshot_noise;
            break;
    }
    if (classes < 2 && count > 0) throw InvalidInput("synthetic dataset: split needs at least 2 classes");
    ds.classes = classes;

    Rng rng(spec.seed ^ (split_stream(split) << 32));
    const std::size_t plane = spec.height * spec.width;
    ds.pixels.resize(count * ds.image_size());
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        // Balanced: instance i belongs to class i mod C.
        const std::size_t cls = i % classes;
        const std::size_t mode = rng.below(spec.modes);
        const auto& t = templates[(class_offset + cls) * spec.modes + mode];
        const std::size_t sy = rng.below(2 * spec.max_shift + 1);
        const std::size_t sx = rng.below(2 * spec.max_shift + 1);
        const double contrast = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
        double* dst = ds.pixels.data() + i * ds.image_size();
        for (std::size_t c = 0; c < spec.channels; ++c) {
            for (std::size_t y = 0; y < spec.height; ++y) {
                const std::size_t ty = (y + spec.height * (spec.max_shift + 1) + sy - spec.max_shift) % spec.height;
                for (std::size_t x = 0; x < spec.width; ++x) {
                    const std::size_t tx = (x + spec.width * (spec.max_shift + 1) + sx - spec.max_shift) % spec.width;
                    const double v = contrast * t[c * plane + ty * spec.width + tx];
                    dst[c * plane + y * spec.width + x] = noise > 0.0 ? v + noise * rng.normal() : v;
                }
            }
        }
        std::int64_t label = static_cast<std::int64_t>(cls);
        if (split == Split::kTrain && spec.label_noise > 0.0 && rng.uniform() < spec.label_noise) {
            label = static_cast<std::int64_t>((cls + 1 + rng.below(classes - 1)) % classes);
        }
        ds.labels[i] = label;
    }
    return ds;
}

Dataset load_cifar100(const std::filesystem::path& root, Split split) {
    if (split == Split::kFewShot) throw InvalidInput("cifar100 has no few-shot split");
    const auto file = root / "cifar-100-binary" / (split == Split::kTrain ? "train.bin" : "test.bin");
    if (!std::filesystem::exists(file)) {
        throw IoError("CIFAR-100 not found at " + file.string() +
                      "; download cifar-100-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html and "
                      "extract it under the data root (set MCLOKD_DATA_ROOT or data_root)");
    }
    constexpr std::size_t kRecord = 2 + 3 * 32 * 32;
    const auto bytes = read_file(file);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
        throw IoError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kRecord));
    }
    static constexpr double kMean[3] = {0.5071, 0.4865, 0.4409};
    static constexpr double kStd[3] = {0.2673, 0.2564, 0.2762};
    Dataset ds;
    ds.name = std::string("cifar100/") + split_name(split);
    ds.channels = 3;
    ds.height = ds.width = 32;
    ds.classes = 100;
    const std::size_t n = bytes.size() / kRecord;
    ds.pixels.resize(n * ds.image_size());
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * kRecord;
        ds.labels[i] = rec[1];  // rec[0] is the coarse label
        if (rec[1] >= 100) throw IoError(file.string() + ": fine label out of range at record " + std::to_string(i));
        double* dst = ds.pixels.data() + i * ds.image_size();
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < 1024; ++p) {
                dst[c * 1024 + p] = (rec[2 + c * 1024 + p] / 255.0 - kMean[c]) / kStd[c];
            }
        }
    }
    return ds;
}

std::filesystem::path default_data_root() {
    if (const char* env = std::getenv("MCLOKD_DATA_ROOT"); env != nullptr && *env != '\0') return env;
    return "data";
}

Dataset load_dataset(const std::string& name, Split split, const std::filesystem::path& root,
                     const SyntheticSpec& synthetic) {
    if (name == "synthetic") return make_synthetic(synthetic, split);
    if (name == "cifar100") return load_cifar100(root.empty() ? default_data_root() : root, split);
    throw InvalidInput("unknown dataset '" + name + "' (expected synthetic or cifar100)");
}

std::pair<Dataset, Dataset> split_validation(const Dataset& full, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw InvalidInput("validation fraction must lie in [0, 1)");
    std::vector<std::size_t> order(full.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    shuffle(order, rng);
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(full.size())));
    const std::size_t n_train = full.size() - n_val;
    // Keep the training half in original order so indices stay monotone in the source.
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    auto take = [&](const std::vector<std::size_t>& idx, const char* suffix) {
        Dataset d;
        d.name = full.name + suffix;
        d.channels = full.channels;
        d.height = full.height;
        d.width = full.width;
        d.classes = full.classes;
        d.pixels.reserve(idx.size() * full.image_size());
        for (std::size_t i : idx) {
            const auto img = full.image(i);
            d.pixels.insert(d.pixels.end(), img.begin(), img.end());
            d.labels.push_back(full.labels[i]);
        }
        return d;
    };
    return {take(train_idx, ""), take(val_idx, "/val")};
}

AugmentPolicy parse_augment(const std::string& s) {
    if (s == "none") return AugmentPolicy::kNone;
    if (s == "standard") return AugmentPolicy::kStandard;
    throw InvalidInput("unknown augment policy '" + s + "' (expected none or standard)");
}

std::vector<double> augment(std::span<const double> image, std::size_t channels, std::size_t height,
                            std::size_t width, AugmentPolicy policy, std::size_t pad, Rng& rng) {
    if (image.size() != channels * height * width) throw InvalidInput("augment: image size mismatch");
    if (policy == AugmentPolicy::kNone) return {image.begin(), image.end()};
    const std::size_t oy = rng.below(2 * pad + 1);
    const std::size_t ox = rng.below(2 * pad + 1);
    const bool flip = rng.uniform() < 0.5;
    std::vector<double> out(image.size(), 0.0);
    const std::size_t plane = height * width;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad);
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t x = 0; x < width; ++x) {
                const std::size_t dx = flip ? width - 1 - x : x;
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(dx + ox) - static_cast<std::ptrdiff_t>(pad);
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
                out[c * plane + y * width + x] =
                    image[c * plane + static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx)];
            }
        }
    }
    return out;
}

Activation gather(const Dataset& ds, std::span<const std::size_t> indices) {
    Activation batch(indices.size(), ds.channels, ds.height, ds.width);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= ds.size()) throw InvalidInput("gather: index out of range");
        const auto img = ds.image(indices[b]);
        std::copy(img.begin(), img.end(), batch.sample(b));
    }
    return batch;
}

std::vector<std::vector<std::size_t>> index_by_class(const Dataset& ds) {
    std::vector<std::vector<std::size_t>> by_class(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto y = static_cast<std::size_t>(ds.labels[i]);
        if (y >= by_class.size()) by_class.resize(y + 1);
        by_class[y].push_back(i);
    }
    return by_class;
}

Episode sample_episode(const std::vector<std::vector<std::size_t>>& by_class, std::size_t way, std::size_t shot,
                       std::size_t query, Rng& rng) {
    if (way < 1 || shot < 1) throw InvalidInput("sample_episode: way and shot must be >= 1");
    if (by_class.size() < way) {
        throw InvalidInput("sample_episode: dataset has " + std::to_string(by_class.size()) + " classes, need " +
                           std::to_string(way));
    }
    std::vector<std::size_t> classes(by_class.size());
    std::iota(classes.begin(), classes.end(), 0);
    // Partial Fisher-Yates: the first `way` entries are a uniform draw.
    for (std::size_t i = 0; i < way; ++i) std::swap(classes[i], classes[i + rng.below(classes.size() - i)]);

    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.query = query;
    for (std::size_t k = 0; k < way; ++k) {
        std::vector<std::size_t> pool = by_class[classes[k]];
        if (pool.size() < shot + query) {
            throw InvalidInput("sample_episode: class " + std::to_string(classes[k]) + " has " +
                               std::to_string(pool.size()) + " instances, need " + std::to_string(shot + query));
        }
        for (std::size_t i = 0; i < shot + query; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        ep.classes.push_back(static_cast<std::int64_t>(classes[k]));
        ep.support.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shot));
        ep.queries.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(shot),
                                pool.begin() + static_cast<std::ptrdiff_t>(shot + query));
    }
    return ep;
}

Episode sample_episode(const Dataset& ds, std::size_t way, std::size_t shot, std::size_t query, Rng& rng) {
    return sample_episode(index_by_class(ds), way, shot, query, rng);
}

void shuffle(std::span<std::size_t> v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace mclokd::data
