#include "mclokd/config.hpp"

#include <fstream>
#include <functional>
#include <set>

#include "mclokd/error.hpp"

namespace mclokd {
namespace {

using nlohmann::json;

struct Binding {
    ConfigKey key;
    std::function<void(TrainConfig&, const json&)> set;
    std::function<json(const TrainConfig&)> get;
};

template <typename T>
T typed(const json& v, const char* name, const char* type) {
    const std::string t = type;
    bool ok = false;
    if (t == "string") ok = v.is_string();
    else if (t == "integer") ok = v.is_number_integer() && v.get<std::int64_t>() >= 0;
    else if (t == "number") ok = v.is_number();
    else if (t == "boolean") ok = v.is_boolean();
    else if (t == "integer[]") {
        ok = v.is_array() && !v.empty();
        if (ok) {
            for (const auto& e : v) ok = ok && e.is_number_integer() && e.get<std::int64_t>() > 0;
        }
    }
    if (!ok) throw ConfigError(name, std::string("expected ") + type + ", got " + v.dump());
    return v.get<T>();
}

#define MCLOKD_KEY(NAME, TYPE, CXX, MEMBER, REQ, DESC)                                          \
    Binding {                                                                                   \
        ConfigKey{NAME, TYPE, DESC, REQ},                                                       \
            [](TrainConfig& c, const json& v) { c.MEMBER = typed<CXX>(v, NAME, TYPE); },        \
            [](const TrainConfig& c) { return json(c.MEMBER); }                                 \
    }

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = {
        MCLOKD_KEY("dataset", "string", std::string, dataset, true, "synthetic | cifar100"),
        MCLOKD_KEY("epochs", "integer", std::size_t, epochs, true, "training epochs"),
        MCLOKD_KEY("data_root", "string", std::string, data_root, false,
                   "dataset root; empty uses $MCLOKD_DATA_ROOT, then ./data"),
        MCLOKD_KEY("synthetic_train_size", "integer", std::size_t, synthetic.train_size, false, "synthetic training instances"),
        MCLOKD_KEY("synthetic_test_size", "integer", std::size_t, synthetic.test_size, false, "synthetic test instances"),
        MCLOKD_KEY("synthetic_classes", "integer", std::size_t, synthetic.classes, false, "synthetic class count C"),
        MCLOKD_KEY("synthetic_channels", "integer", std::size_t, synthetic.channels, false, "synthetic image channels"),
        MCLOKD_KEY("synthetic_height", "integer", std::size_t, synthetic.height, false, "synthetic image height"),
        MCLOKD_KEY("synthetic_width", "integer", std::size_t, synthetic.width, false, "synthetic image width"),
        MCLOKD_KEY("synthetic_modes", "integer", std::size_t, synthetic.modes, false, "templates per class"),
        MCLOKD_KEY("synthetic_max_shift", "integer", std::size_t, synthetic.max_shift, false, "max circular shift (px)"),
        MCLOKD_KEY("synthetic_noise", "number", double, synthetic.noise, false, "pixel noise stddev"),
        MCLOKD_KEY("synthetic_contrast", "number", double, synthetic.contrast, false,
                   "per-image contrast is drawn from [1 - c, 1 + c]"),
        MCLOKD_KEY("synthetic_label_noise", "number", double, synthetic.label_noise, false,
                   "probability a training label is flipped"),
        MCLOKD_KEY("synthetic_seed", "integer", std::uint64_t, synthetic.seed, false, "dataset generator seed"),
        MCLOKD_KEY("fewshot_classes", "integer", std::size_t, synthetic.fewshot_classes, false,
                   "novel classes in the few-shot split"),
        MCLOKD_KEY("fewshot_per_class", "integer", std::size_t, synthetic.fewshot_per_class, false,
                   "instances per few-shot class"),
        MCLOKD_KEY("fewshot_noise", "number", double, synthetic.fewshot_noise, false, "pixel noise of the few-shot split"),
        MCLOKD_KEY("val_fraction", "number", double, val_fraction, false, "fraction of train held out for validation"),
        MCLOKD_KEY("augment", "string", std::string, augment, false, "none | standard"),
        MCLOKD_KEY("augment_pad", "integer", std::size_t, augment_pad, false, "padding for random crops"),
        MCLOKD_KEY("stage_widths", "integer[]", std::vector<std::size_t>, stage_widths, false, "channels per stage"),
        MCLOKD_KEY("stage_strides", "integer[]", std::vector<std::size_t>, stage_strides, false, "stride of each stage"),
        MCLOKD_KEY("stage_depth", "integer", std::size_t, stage_depth, false, "conv layers per stage"),
        MCLOKD_KEY("branch_stages", "integer", std::size_t, branch_stages, false, "trailing stages owned by each peer"),
        MCLOKD_KEY("share_stem", "boolean", bool, share_stem, false, "share the leading stages across peers"),
        MCLOKD_KEY("peers", "integer", std::size_t, peers, false, "peer count M"),
        MCLOKD_KEY("embedding_dim", "integer", std::size_t, embedding_dim, false, "contrastive embedding size d"),
        MCLOKD_KEY("projection_layers", "integer", std::size_t, projection_layers, false,
                   "linear layers in the projection head (0 = none)"),
        MCLOKD_KEY("temperature", "number", double, temperature, false, "distillation temperature T"),
        MCLOKD_KEY("beta", "number", double, beta, false, "contrastive weight"),
        MCLOKD_KEY("tau", "number", double, tau, false, "contrastive temperature"),
        MCLOKD_KEY("negatives", "integer", std::size_t, negatives, false, "negatives K per anchor"),
        MCLOKD_KEY("bank_momentum", "number", double, bank_momentum, false, "memory bank blend rho"),
        MCLOKD_KEY("kl_enabled", "boolean", bool, kl_enabled, false, "distill the ensemble into the last peer"),
        MCLOKD_KEY("kl_detach", "boolean", bool, kl_detach, false, "treat the ensemble teacher as a constant"),
        MCLOKD_KEY("z_samples", "integer", std::size_t, z_samples, false,
                   "bank slots per anchor when estimating the normalizer (0 = all)"),
        MCLOKD_KEY("batch_size", "integer", std::size_t, batch_size, false, "mini-batch size"),
        MCLOKD_KEY("lr", "number", double, lr, false, "initial learning rate"),
        MCLOKD_KEY("momentum", "number", double, momentum, false, "SGD momentum"),
        MCLOKD_KEY("weight_decay", "number", double, weight_decay, false, "L2 weight decay"),
        MCLOKD_KEY("schedule", "string", std::string, schedule, false, "cosine | step | constant"),
        MCLOKD_KEY("lr_step_epochs", "integer", std::size_t, lr_step_epochs, false, "step schedule period"),
        MCLOKD_KEY("lr_gamma", "number", double, lr_gamma, false, "step schedule decay"),
        MCLOKD_KEY("seed", "integer", std::uint64_t, seed, false, "training seed"),
        MCLOKD_KEY("num_seeds", "integer", std::size_t, num_seeds, false, "independent runs seed, seed+1, ..."),
        MCLOKD_KEY("fewshot_embedding", "string", std::string, fewshot_embedding, false,
                   "gap | head: representation used for episodes"),
    };
    return table;
}

#undef MCLOKD_KEY

}  // namespace

void TrainConfig::validate() const {
    if (dataset != "synthetic" && dataset != "cifar100") throw ConfigError("dataset", "expected synthetic or cifar100");
    if (augment != "none" && augment != "standard") throw ConfigError("augment", "expected none or standard");
    if (schedule != "cosine" && schedule != "step" && schedule != "constant") {
        throw ConfigError("schedule", "expected cosine, step or constant");
    }
    if (fewshot_embedding != "gap" && fewshot_embedding != "head") {
        throw ConfigError("fewshot_embedding", "expected gap or head");
    }
    if (stage_widths.size() < 3) throw ConfigError("stage_widths", "need at least 3 stages");
    if (stage_strides.size() != stage_widths.size()) throw ConfigError("stage_strides", "must match stage_widths length");
    if (stage_depth < 1) throw ConfigError("stage_depth", "must be >= 1");
    if (branch_stages < 1 || branch_stages >= stage_widths.size()) {
        throw ConfigError("branch_stages", "must lie in [1, number of stages)");
    }
    if (peers < 1) throw ConfigError("peers", "must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("beta", "must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau", "must be > 0");
    if (negatives < 1) throw ConfigError("negatives", "must be >= 1");
    if (!(bank_momentum >= 0.0 && bank_momentum <= 1.0)) throw ConfigError("bank_momentum", "must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction", "must lie in [0, 1)");
    if (num_seeds < 1) throw ConfigError("num_seeds", "must be >= 1");
    if (beta > 0.0 && projection_layers > 0 && embedding_dim < 1) throw ConfigError("embedding_dim", "must be >= 1");
    if (!(synthetic.contrast >= 0.0 && synthetic.contrast < 1.0)) {
        throw ConfigError("synthetic_contrast", "must lie in [0, 1)");
    }
    if (!(synthetic.label_noise >= 0.0 && synthetic.label_noise < 1.0)) {
        throw ConfigError("synthetic_label_noise", "must lie in [0, 1)");
    }
}

BackboneSpec TrainConfig::backbone(std::size_t channels, std::size_t height, std::size_t width,
                                   std::size_t classes) const {
    BackboneSpec s;
    s.channels = channels;
    s.height = height;
    s.width = width;
    s.classes = classes;
    s.stages.clear();
    for (std::size_t i = 0; i < stage_widths.size(); ++i) s.stages.push_back({stage_widths[i], stage_depth, stage_strides[i]});
    s.branch_stages = branch_stages;
    return s;
}

GraphOptions TrainConfig::graph_options() const {
    GraphOptions g;
    g.peers = peers;
    g.share_stem = share_stem;
    g.embedding_dim = embedding_dim;
    g.projection_layers = projection_layers;
    return g;
}

contrastive::ContrastiveConfig TrainConfig::contrastive_config() const {
    contrastive::ContrastiveConfig c;
    c.tau = tau;
    c.negatives = negatives;
    return c;
}

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> out;
        for (const auto& b : bindings()) out.push_back(b.key);
        return out;
    }();
    return keys;
}

TrainConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    std::set<std::string> known;
    for (const auto& b : bindings()) known.insert(b.key.name);
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw ConfigError(k, "unknown key");
    }
    TrainConfig c;
    for (const auto& b : bindings()) {
        if (!j.contains(b.key.name)) {
            if (b.key.required) throw ConfigError(b.key.name, "missing required field");
            continue;
        }
        b.set(c, j.at(b.key.name));
    }
    c.validate();
    return c;
}

json config_to_json(const TrainConfig& c) {
    json j = json::object();
    for (const auto& b : bindings()) j[b.key.name] = b.get(c);
    return j;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("invalid JSON in ") + path + ": " + e.what());
    }
    return config_from_json(j);
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    bool known = false;
    for (const auto& b : bindings()) known = known || key == b.key.name;
    if (!known) throw ConfigError(key, "unknown key");
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    doc[key] = value;
}

const std::vector<std::string>& structural_keys() {
    static const std::vector<std::string> keys = {
        "dataset", "synthetic_train_size", "synthetic_classes", "synthetic_channels", "synthetic_height",
        "synthetic_width", "val_fraction", "stage_widths", "stage_strides", "stage_depth", "branch_stages",
        "share_stem", "peers", "embedding_dim", "projection_layers",
    };
    return keys;
}

}  // namespace mclokd
