#include "mclokd/checkpoint.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>
#include <string_view>

#include "mclokd/error.hpp"

namespace mclokd {
namespace {

constexpr std::array<char, 8> kMagic = {'M', 'C', 'L', 'O', 'K', 'D', 'C', 'K'};
constexpr std::size_t kHeaderSize = 24;

class Writer {
public:
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void str(std::string_view s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void doubles(std::span<const double> v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view buf) : buf_(buf) {}

    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(buf_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::vector<double> doubles() {
        const std::uint64_t n = u64();
        if (n > (buf_.size() - pos_) / sizeof(double)) throw IntegrityError("checkpoint: array length exceeds payload");
        std::vector<double> v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }
    void raw(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (n > buf_.size() - pos_) throw IntegrityError("checkpoint: truncated payload");
    }
    std::string_view buf_;
    std::size_t pos_ = 0;
};

std::uint32_t crc(std::string_view bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(c);
}

void write_container(const std::filesystem::path& path, CheckpointKind kind, const std::string& payload) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Write to a sibling temp file and rename, so a crash never leaves a half-written checkpoint.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        const std::uint32_t version = kCheckpointVersion;
        const auto k = static_cast<std::uint32_t>(kind);
        const std::uint64_t len = payload.size();
        const std::uint32_t sum = crc(payload);
        out.write(kMagic.data(), kMagic.size());
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&k), sizeof k);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct Container {
    CheckpointKind kind;
    std::string payload;
};

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() < kHeaderSize + 4 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw IntegrityError(path.string() + ": not a checkpoint (bad magic)");
    }
    std::uint32_t version, kind;
    std::uint64_t len;
    std::memcpy(&version, bytes.data() + 8, 4);
    std::memcpy(&kind, bytes.data() + 12, 4);
    std::memcpy(&len, bytes.data() + 16, 8);
    if (version != kCheckpointVersion) {
        throw IntegrityError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    if (kind != 1 && kind != 2) throw IntegrityError(path.string() + ": unknown checkpoint kind");
    if (len != bytes.size() - kHeaderSize - 4) throw IntegrityError(path.string() + ": payload length mismatch");
    std::string payload = bytes.substr(kHeaderSize, len);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + kHeaderSize + len, 4);
    if (stored != crc(payload)) throw IntegrityError(path.string() + ": checksum mismatch");
    return {static_cast<CheckpointKind>(kind), std::move(payload)};
}

void write_params(Writer& w, const PeerGraph& g) {
    const auto params = g.parameters();
    w.u64(params.size());
    for (const Param* p : params) w.doubles(p->value);
}

void read_params(Reader& r, PeerGraph& g) {
    auto params = g.parameters();
    if (r.u64() != params.size()) throw IntegrityError("checkpoint: parameter tensor count does not match structure");
    for (Param* p : params) {
        auto v = r.doubles();
        if (v.size() != p->size()) throw IntegrityError("checkpoint: parameter tensor size does not match structure");
        p->value = std::move(v);
        std::fill(p->grad.begin(), p->grad.end(), 0.0);
    }
}

TrainConfig parse_config_snapshot(const std::string& text) {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IntegrityError("checkpoint: config snapshot is not valid JSON");
    return config_from_json(j);
}

PeerGraph skeleton(const TrainConfig& c, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t classes, const GraphOptions& opts) {
    return PeerGraph::build(c.backbone(channels, height, width, classes), opts, 0);
}

void write_shape(Writer& w, const BackboneSpec& s) {
    w.u64(s.channels);
    w.u64(s.height);
    w.u64(s.width);
    w.u64(s.classes);
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    Writer w;
    w.str(config_to_json(state.config).dump());
    write_shape(w, state.graph.spec());
    w.u64(state.epoch);
    w.u64(state.step);
    w.str(state.shuffle_rng.state());
    w.str(state.augment_rng.state());
    w.str(state.negative_rng.state());
    write_params(w, state.graph);
    const auto& vel = state.optimizer.velocity();
    w.u64(vel.size());
    for (const auto& v : vel) w.doubles(v);
    w.u64(state.banks.size());
    for (const auto& bank : state.banks) {
        w.u64(bank.size());
        w.u64(bank.dim());
        w.f64(bank.momentum());
        w.u64(bank.z() ? 1 : 0);
        w.f64(bank.z().value_or(0.0));
        w.doubles(bank.slots());
        w.u64(bank.labels().size());
        for (std::int64_t y : bank.labels()) w.u64(static_cast<std::uint64_t>(y));
    }
    write_container(path, CheckpointKind::kTrainState, w.bytes());
}

TrainState restore_checkpoint(const std::filesystem::path& path, const TrainConfig* expected) {
    const Container c = read_container(path);
    if (c.kind != CheckpointKind::kTrainState) {
        throw IncompatibleCheckpoint(path.string() + ": holds a deployment network, not a training state");
    }
    Reader r(c.payload);
    TrainState s;
    s.config = parse_config_snapshot(r.str());
    if (expected != nullptr) {
        const auto want = config_to_json(*expected);
        const auto have = config_to_json(s.config);
        for (const auto& key : structural_keys()) {
            if (want.at(key) != have.at(key)) {
                throw IncompatibleCheckpoint(path.string() + ": config field '" + key + "' is " + have.at(key).dump() +
                                             " in the checkpoint but " + want.at(key).dump() + " in the run config");
            }
        }
    }
    const std::size_t channels = r.u64(), height = r.u64(), width = r.u64(), classes = r.u64();
    s.graph = skeleton(s.config, channels, height, width, classes, s.config.graph_options());
    s.epoch = r.u64();
    s.step = r.u64();
    s.shuffle_rng.set_state(r.str());
    s.augment_rng.set_state(r.str());
    s.negative_rng.set_state(r.str());
    read_params(r, s.graph);
    s.optimizer = Sgd(s.config.momentum, s.config.weight_decay);
    const std::uint64_t nvel = r.u64();
    if (nvel != 0 && nvel != s.graph.parameters().size()) throw IntegrityError("checkpoint: optimizer state mismatch");
    for (std::uint64_t i = 0; i < nvel; ++i) s.optimizer.velocity().push_back(r.doubles());
    const std::uint64_t nbanks = r.u64();
    for (std::uint64_t b = 0; b < nbanks; ++b) {
        const std::uint64_t n = r.u64(), d = r.u64();
        const double rho = r.f64();
        const bool has_z = r.u64() != 0;
        const double z = r.f64();
        auto slots = r.doubles();
        const std::uint64_t nl = r.u64();
        if (nl != n || slots.size() != n * d) throw IntegrityError("checkpoint: memory bank shape mismatch");
        std::vector<std::int64_t> labels(n);
        for (auto& y : labels) y = static_cast<std::int64_t>(r.u64());
        contrastive::MemoryBank bank(d, std::move(slots), std::move(labels), rho);
        if (has_z) bank.set_z(z);
        s.banks.push_back(std::move(bank));
    }
    if (!r.done()) throw IntegrityError("checkpoint: trailing bytes after payload");
    return s;
}

nlohmann::json describe_structure(const PeerGraph& graph) {
    const auto& spec = graph.spec();
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : spec.stages) stages.push_back({{"width", st.width}, {"depth", st.depth}, {"stride", st.stride}});
    return {
        {"input", {{"channels", spec.channels}, {"height", spec.height}, {"width", spec.width}}},
        {"classes", spec.classes},
        {"stages", stages},
        {"branch_stages", spec.branch_stages},
        {"peers", graph.peers()},
        {"share_stem", graph.options().share_stem},
        {"projection_layers", graph.options().projection_layers},
        {"embedding_dim", graph.has_projection() ? graph.options().embedding_dim : 0},
        {"feature_dim", graph.feature_dim()},
        {"conv", {{"kernel", 3}, {"padding", 1}, {"activation", "relu"}}},
        {"head", "global average pool -> linear classifier"},
        {"parameter_count", graph.parameter_count()},
    };
}

void save_deployment(const PeerGraph& deployment, const TrainConfig& config, const std::filesystem::path& path) {
    if (deployment.peers() != 1) throw InvalidInput("save_deployment: expected a single-peer network");
    Writer w;
    w.str(config_to_json(config).dump());
    write_shape(w, deployment.spec());
    write_params(w, deployment);
    write_container(path, CheckpointKind::kDeployment, w.bytes());

    auto desc = describe_structure(deployment);
    desc["format_version"] = kCheckpointVersion;
    desc["source_peer"] = config.peers;  // 1-based: the last peer
    auto json_path = path;
    json_path.replace_extension(".json");
    std::ofstream out(json_path);
    out << desc.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + json_path.string());
}

DeploymentArtifact load_deployment(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.kind != CheckpointKind::kDeployment) throw IncompatibleCheckpoint(path.string() + ": not a deployment export");
    Reader r(c.payload);
    DeploymentArtifact a;
    a.config = parse_config_snapshot(r.str());
    const std::size_t channels = r.u64(), height = r.u64(), width = r.u64(), classes = r.u64();
    GraphOptions opts = a.config.graph_options();
    opts.peers = 1;
    opts.share_stem = true;
    opts.projection_layers = 0;
    a.graph = skeleton(a.config, channels, height, width, classes, opts);
    read_params(r, a.graph);
    if (!r.done()) throw IntegrityError("checkpoint: trailing bytes after payload");
    return a;
}

CheckpointKind checkpoint_kind(const std::filesystem::path& path) { return read_container(path).kind; }

}  // namespace mclokd
