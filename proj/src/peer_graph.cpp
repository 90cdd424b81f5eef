#include "mclokd/peer_graph.hpp"

#include <string>

#include "mclokd/error.hpp"

namespace mclokd {
namespace {

std::vector<Conv2d> make_trunk(std::span<const StageSpec> stages, std::size_t in_channels) {
    std::vector<Conv2d> convs;
    for (const StageSpec& st : stages) {
        for (std::size_t l = 0; l < st.depth; ++l) {
            convs.emplace_back(in_channels, st.width, 3, l == 0 ? st.stride : 1, 1);
            in_channels = st.width;
        }
    }
    return convs;
}

Activation run_trunk(const std::vector<Conv2d>& convs, const Activation& in, ForwardCache::Trunk* cache) {
    if (cache != nullptr) {
        cache->acts.clear();
        cache->acts.push_back(in);
    }
    Activation x = in;
    for (const Conv2d& conv : convs) {
        x = relu(conv.forward(x));
        if (cache != nullptr) cache->acts.push_back(x);
    }
    return x;
}

/// Backprop through a trunk given dL/d(output). Returns dL/d(input) when asked.
Activation backprop_trunk(std::vector<Conv2d>& convs, const ForwardCache::Trunk& cache, Activation dout,
                          bool want_input_grad) {
    for (std::size_t l = convs.size(); l-- > 0;) {
        Activation dpre = relu_backward(cache.acts[l + 1], dout);
        const bool need = l > 0 || want_input_grad;
        Activation din;
        convs[l].backward(cache.acts[l], dpre, need ? &din : nullptr);
        dout = std::move(din);
    }
    return dout;
}

void add_into(Activation& acc, const Activation& x) {
    if (acc.data.empty()) {
        acc = x;
        return;
    }
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += x.data[i];
}

void collect(std::vector<Conv2d>& convs, std::vector<Param*>& out) {
    for (Conv2d& c : convs) {
        out.push_back(&c.weight);
        out.push_back(&c.bias);
    }
}

}  // namespace

void BackboneSpec::validate() const {
    if (stages.size() < 3) throw InvalidInput("BackboneSpec: need at least 3 stages");
    if (branch_stages < 1 || branch_stages >= stages.size()) {
        throw InvalidInput("BackboneSpec: branch_stages must lie in [1, " + std::to_string(stages.size()) + ")");
    }
    if (channels == 0 || height == 0 || width == 0) throw InvalidInput("BackboneSpec: empty input shape");
    if (classes < 2) throw InvalidInput("BackboneSpec: need at least 2 classes");
    for (const StageSpec& s : stages) {
        if (s.width == 0 || s.depth == 0 || s.stride == 0) throw InvalidInput("BackboneSpec: zero-sized stage");
    }
}

PeerGraph PeerGraph::build(const BackboneSpec& spec, const GraphOptions& options, std::uint64_t seed) {
    spec.validate();
    if (options.peers < 1) throw InvalidInput("PeerGraph::build: need M >= 1 peers");
    if (options.projection_layers > 0 && options.embedding_dim == 0) {
        throw InvalidInput("PeerGraph::build: embedding_dim must be >= 1");
    }
    PeerGraph g;
    g.spec_ = spec;
    g.options_ = options;

    const std::size_t stem_count = spec.stages.size() - spec.branch_stages;
    const std::span<const StageSpec> all(spec.stages);
    const auto stem_stages = all.first(stem_count);
    const auto high_stages = all.subspan(stem_count);
    const std::size_t stem_width = stem_stages.back().width;

    if (options.share_stem) g.stem_ = make_trunk(stem_stages, spec.channels);
    g.branches_.resize(options.peers);
    for (Branch& b : g.branches_) {
        if (!options.share_stem) b.stem = make_trunk(stem_stages, spec.channels);
        b.high = make_trunk(high_stages, stem_width);
        b.classifier = Linear(g.feature_dim(), spec.classes);
        for (std::size_t l = 0; l < options.projection_layers; ++l) {
            b.head.emplace_back(l == 0 ? g.feature_dim() : options.embedding_dim, options.embedding_dim);
        }
    }

    Rng rng(seed);
    for (Conv2d& c : g.stem_) c.init(rng);
    for (Branch& b : g.branches_) {
        for (Conv2d& c : b.stem) c.init(rng);
        for (Conv2d& c : b.high) c.init(rng);
        b.classifier.init(rng);
        for (Linear& l : b.head) l.init(rng);
    }
    return g;
}

std::vector<PeerOutput> PeerGraph::forward(const Activation& batch, ForwardCache* cache) const {
    if (batch.c != spec_.channels || batch.h != spec_.height || batch.w != spec_.width ||
        batch.data.size() != batch.n * batch.sample_size()) {
        throw InvalidInput("PeerGraph::forward: batch shape does not match the backbone input");
    }
    if (batch.n == 0) throw InvalidInput("PeerGraph::forward: empty batch");
    if (cache != nullptr) {
        cache->batch = batch.n;
        cache->branches.assign(branches_.size(), {});
    }
    Activation shared;
    if (options_.share_stem) shared = run_trunk(stem_, batch, cache ? &cache->stem : nullptr);

    std::vector<PeerOutput> outs(branches_.size());
    for (std::size_t m = 0; m < branches_.size(); ++m) {
        const Branch& b = branches_[m];
        ForwardCache::Branch* bc = cache ? &cache->branches[m] : nullptr;
        Activation stem_out = options_.share_stem ? shared : run_trunk(b.stem, batch, bc ? &bc->stem : nullptr);
        const Activation high = run_trunk(b.high, stem_out, bc ? &bc->high : nullptr);

        PeerOutput& out = outs[m];
        out.features = global_avg_pool(high);
        out.logits = b.classifier.forward(out.features, batch.n);
        if (!b.head.empty()) {
            std::vector<double> h = out.features;
            for (std::size_t l = 0; l < b.head.size(); ++l) {
                if (l > 0) {
                    for (double& v : h) v = v > 0.0 ? v : 0.0;
                }
                if (bc != nullptr) bc->head_inputs.push_back(h);
                h = b.head[l].forward(h, batch.n);
            }
            std::vector<double> norms;
            out.embedding.dim = options_.embedding_dim;
            out.embedding.values = l2_normalize_rows(h, options_.embedding_dim, norms);
            if (bc != nullptr) {
                bc->head_out = std::move(h);
                bc->norms = std::move(norms);
                bc->embedding = out.embedding.values;
            }
        }
        if (bc != nullptr) bc->features = out.features;
    }
    return outs;
}

void PeerGraph::backward(const ForwardCache& cache, std::span<const std::vector<double>> dlogits,
                         std::span<const std::vector<double>> dembedding) {
    const std::size_t n = cache.batch;
    if (dlogits.size() != branches_.size() || cache.branches.size() != branches_.size()) {
        throw InvalidInput("PeerGraph::backward: expected one gradient per peer");
    }
    if (!dembedding.empty() && dembedding.size() != branches_.size()) {
        throw InvalidInput("PeerGraph::backward: expected one embedding gradient per peer");
    }
    const std::size_t fdim = feature_dim();
    Activation dshared;
    for (std::size_t m = 0; m < branches_.size(); ++m) {
        Branch& b = branches_[m];
        const ForwardCache::Branch& bc = cache.branches[m];
        if (dlogits[m].size() != n * spec_.classes) throw InvalidInput("PeerGraph::backward: logits gradient shape");

        std::vector<double> dfeat = b.classifier.backward(bc.features, dlogits[m], n, true);

        const bool head_grad = !b.head.empty() && !dembedding.empty() && !dembedding[m].empty();
        if (head_grad) {
            if (dembedding[m].size() != n * options_.embedding_dim) {
                throw InvalidInput("PeerGraph::backward: embedding gradient shape");
            }
            std::vector<double> dh =
                l2_normalize_rows_backward(bc.embedding, dembedding[m], bc.norms, options_.embedding_dim);
            for (std::size_t l = b.head.size(); l-- > 0;) {
                dh = b.head[l].backward(bc.head_inputs[l], dh, n, true);
                if (l > 0) {
                    const auto& in = bc.head_inputs[l];
                    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] = in[i] > 0.0 ? dh[i] : 0.0;
                }
            }
            for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] += dh[i];
        }

        const Activation& high_out = bc.high.acts.back();
        Activation dhigh = global_avg_pool_backward(dfeat, n, fdim, high_out.h, high_out.w);
        Activation dstem = backprop_trunk(b.high, bc.high, std::move(dhigh), true);
        if (options_.share_stem) {
            add_into(dshared, dstem);
        } else {
            backprop_trunk(b.stem, bc.stem, std::move(dstem), false);
        }
    }
    if (options_.share_stem) backprop_trunk(stem_, cache.stem, std::move(dshared), false);
}

void PeerGraph::zero_grad() {
    for (Param* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::vector<Param*> PeerGraph::parameters() {
    std::vector<Param*> out;
    collect(stem_, out);
    for (std::size_t m = 0; m < branches_.size(); ++m) {
        auto bp = branch_parameters(m);
        out.insert(out.end(), bp.begin(), bp.end());
    }
    return out;
}

std::vector<const Param*> PeerGraph::parameters() const {
    auto mut = const_cast<PeerGraph*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

std::size_t PeerGraph::parameter_count() const {
    std::size_t n = 0;
    for (const Param* p : parameters()) n += p->size();
    return n;
}

std::vector<Param*> PeerGraph::stem_parameters() {
    std::vector<Param*> out;
    collect(stem_, out);
    return out;
}

std::vector<Param*> PeerGraph::branch_parameters(std::size_t m) {
    Branch& b = branches_.at(m);
    std::vector<Param*> out;
    collect(b.stem, out);
    collect(b.high, out);
    out.push_back(&b.classifier.weight);
    out.push_back(&b.classifier.bias);
    for (Linear& l : b.head) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

PeerGraph PeerGraph::export_deployment() const {
    PeerGraph d;
    d.spec_ = spec_;
    d.options_ = options_;
    d.options_.peers = 1;
    d.options_.share_stem = true;
    d.options_.projection_layers = 0;
    const Branch& last = branches_.back();
    d.stem_ = options_.share_stem ? stem_ : last.stem;
    Branch b;
    b.high = last.high;
    b.classifier = last.classifier;
    d.branches_.push_back(std::move(b));
    for (Param* p : d.parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
    return d;
}

}  // namespace mclokd
