#pragma once

// Training configuration: a flat, typed JSON object. Every key is listed in
// config_schema(); unknown keys and wrongly-typed values are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mclokd/contrastive.hpp"
#include "mclokd/data.hpp"
#include "mclokd/losses.hpp"
#include "mclokd/peer_graph.hpp"

namespace mclokd {

struct TrainConfig {
    // data
    std::string dataset = "synthetic";
    std::string data_root;
    data::SyntheticSpec synthetic;
    double val_fraction = 0.0;
    std::string augment = "none";
    std::size_t augment_pad = 1;

    // peer graph
    std::vector<std::size_t> stage_widths{16, 32, 64};
    std::vector<std::size_t> stage_strides{1, 2, 2};
    std::size_t stage_depth = 1;
    std::size_t branch_stages = 2;
    bool share_stem = true;
    std::size_t peers = 4;
    std::size_t embedding_dim = contrastive::kDefaultEmbeddingDim;
    std::size_t projection_layers = 1;

    // objective
    double temperature = losses::kDefaultTemperature;
    double beta = losses::kDefaultBeta;
    double tau = contrastive::kDefaultTau;
    std::size_t negatives = contrastive::kDefaultNegatives;
    double bank_momentum = contrastive::kDefaultBankMomentum;
    bool kl_enabled = true;
    bool kl_detach = true;
    std::size_t z_samples = 0;  // slots per anchor for the normalizer estimate; 0 = all

    // optimization
    std::size_t epochs = 0;
    std::size_t batch_size = 64;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::string schedule = "cosine";  // cosine | step | constant
    std::size_t lr_step_epochs = 30;
    double lr_gamma = 0.1;
    std::uint64_t seed = 1;
    std::size_t num_seeds = 1;

    // few-shot evaluation
    std::string fewshot_embedding = "gap";  // gap | head

    /// Cross-field checks. Throws ConfigError naming the field.
    void validate() const;

    /// Backbone for an input of the given shape.
    BackboneSpec backbone(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes) const;
    GraphOptions graph_options() const;
    contrastive::ContrastiveConfig contrastive_config() const;

    bool contrastive_active() const { return beta > 0.0 && peers >= 2 && projection_layers > 0; }
};

struct ConfigKey {
    const char* name;
    const char* type;  // "string" | "integer" | "number" | "boolean" | "integer[]"
    const char* description;
    bool required;
};

const std::vector<ConfigKey>& config_schema();

/// Throws ConfigError on unknown keys, missing required keys or type errors.
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const TrainConfig& c);

TrainConfig load_config(const std::string& path);

/// Applies "key=value". The value is parsed as JSON when possible and as a
/// bare string otherwise. Throws ConfigError for unknown keys.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Keys whose values fix the shapes stored in a checkpoint.
const std::vector<std::string>& structural_keys();

}  // namespace mclokd
