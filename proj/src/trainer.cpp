#include "mclokd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mclokd/checkpoint.hpp"
#include "mclokd/error.hpp"
#include "mclokd/eval.hpp"
#include "mclokd/kernels.hpp"

namespace mclokd {

void Sgd::step(std::span<Param* const> params, double lr) {
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const Param* p : params) velocity_.emplace_back(p->size(), 0.0);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        std::vector<double>& v = velocity_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.grad[j] + weight_decay_ * p.value[j];
            v[j] = momentum_ * v[j] + g;
            p.value[j] -= lr * v[j];
        }
    }
}

Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices, data::AugmentPolicy policy,
                 std::size_t pad, Rng& rng) {
    Batch b;
    b.images = Activation(indices.size(), ds.channels, ds.height, ds.width);
    b.indices.assign(indices.begin(), indices.end());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ds.size()) throw InvalidInput("make_batch: index out of range");
        const auto img = data::augment(ds.image(indices[i]), ds.channels, ds.height, ds.width, policy, pad, rng);
        std::copy(img.begin(), img.end(), b.images.sample(i));
        b.labels.push_back(ds.labels[indices[i]]);
    }
    return b;
}

ObjectiveOptions ObjectiveOptions::from(const TrainConfig& c) {
    ObjectiveOptions o;
    o.temperature = c.temperature;
    o.beta = c.beta;
    o.kl_enabled = c.kl_enabled && c.peers >= 2;
    o.kl_detach = c.kl_detach;
    o.contrastive_enabled = c.contrastive_active();
    o.contrastive = c.contrastive_config();
    return o;
}

ObjectiveResult evaluate_objective(const std::vector<PeerOutput>& outputs, std::span<const std::int64_t> labels,
                                   std::span<const contrastive::MemoryBank> banks,
                                   const contrastive::NegativePlan& plan, const ObjectiveOptions& options,
                                   bool want_grads) {
    const std::size_t m = outputs.size();
    const std::size_t n = labels.size();
    if (m == 0 || n == 0) throw InvalidInput("evaluate_objective: empty batch");
    const std::size_t classes = outputs.front().logits.size() / n;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double t = options.temperature;

    ObjectiveResult r;
    if (want_grads) r.dlogits.assign(m, std::vector<double>(n * classes, 0.0));

    double ce = 0.0;
    double kl = 0.0;
    std::vector<std::vector<double>> per_peer(m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < m; ++p) {
            const auto* z = outputs[p].logits.data() + i * classes;
            per_peer[p].assign(z, z + classes);
        }
        const auto label = static_cast<std::size_t>(labels[i]);
        for (std::size_t p = 0; p < m; ++p) {
            ce += losses::cross_entropy(losses::softmax(per_peer[p]), label);
            if (want_grads) {
                const auto g = losses::cross_entropy_grad(per_peer[p], label);
                kernels::axpy(inv_n, g.data(), r.dlogits[p].data() + i * classes, classes);
            }
        }
        if (options.kl_enabled) {
            const auto teacher = losses::ensemble_soft_targets(per_peer, t);
            kl += losses::kl_divergence(teacher, losses::softmax(per_peer.back(), t));
            if (want_grads) {
                const double w = t * t * inv_n;
                if (options.kl_detach) {
                    const auto g = losses::kl_student_grad(teacher, per_peer.back(), t);
                    kernels::axpy(w, g.data(), r.dlogits.back().data() + i * classes, classes);
                } else {
                    const auto gs = losses::kl_full_grad(per_peer, m - 1, t);
                    for (std::size_t p = 0; p < m; ++p) {
                        kernels::axpy(w, gs[p].data(), r.dlogits[p].data() + i * classes, classes);
                    }
                }
            }
        }
    }
    ce *= inv_n;
    kl *= inv_n;

    double con = 0.0;
    if (options.contrastive_enabled && options.beta > 0.0) {
        std::vector<contrastive::EmbeddingBatch> emb;
        emb.reserve(m);
        for (const auto& o : outputs) emb.push_back(o.embedding);
        auto total = contrastive::total_contrastive_loss(emb, banks, plan, options.contrastive, want_grads);
        con = total.loss;
        if (want_grads) {
            for (auto& g : total.grads) {
                kernels::scal(options.beta, g.values.data(), g.values.size());
                r.dembedding.push_back(std::move(g.values));
            }
        }
    }
    r.bundle = losses::combine(ce, kl, con, t, options.beta);
    return r;
}

TrainState init_state(const TrainConfig& config, const data::Dataset& train) {
    config.validate();
    TrainState s;
    s.config = config;
    Rng master(config.seed);
    const auto spec = config.backbone(train.channels, train.height, train.width, train.classes);
    s.graph = PeerGraph::build(spec, config.graph_options(), master.next_u64());
    s.shuffle_rng = master.split();
    s.augment_rng = master.split();
    s.negative_rng = master.split();
    if (config.contrastive_active()) {
        for (std::size_t m = 0; m < config.peers; ++m) {
            s.banks.push_back(contrastive::bank_init(train.size(), config.embedding_dim, train.labels,
                                                     master.next_u64(), config.bank_momentum));
        }
    }
    s.optimizer = Sgd(config.momentum, config.weight_decay);
    return s;
}

StepReport train_step(TrainState& state, const Batch& batch, double lr) {
    const TrainConfig& cfg = state.config;
    const ObjectiveOptions opts = ObjectiveOptions::from(cfg);
    ForwardCache cache;
    const auto outputs = state.graph.forward(batch.images, &cache);
    for (std::size_t m = 0; m < outputs.size(); ++m) {
        for (double v : outputs[m].logits) {
            if (!std::isfinite(v)) {
                throw NonFiniteLoss("non-finite logits from peer " + std::to_string(m) + " at epoch " +
                                    std::to_string(state.epoch) + " step " + std::to_string(state.step));
            }
        }
    }

    contrastive::NegativePlan plan;
    if (opts.contrastive_enabled) {
        const std::size_t m = outputs.size();
        for (std::size_t b = 0; b < m; ++b) {
            if (state.banks[b].z()) continue;
            // Anchors contrasted against bank b are the other peers' embeddings.
            std::vector<double> anchors;
            for (std::size_t a = 0; a < m; ++a) {
                if (a == b) continue;
                anchors.insert(anchors.end(), outputs[a].embedding.values.begin(), outputs[a].embedding.values.end());
            }
            contrastive::estimate_z(state.banks[b], anchors, cfg.tau, state.negative_rng, cfg.z_samples);
        }
        plan = contrastive::sample_plan(state.banks, batch.labels, cfg.negatives, state.negative_rng);
    }

    ObjectiveResult obj = evaluate_objective(outputs, batch.labels, state.banks, plan, opts, true);
    const auto& b = obj.bundle;
    if (!std::isfinite(b.total)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << state.epoch << " step " << state.step << ": ce=" << b.ce
           << " kl=" << b.kl << " contrastive=" << b.contrastive << " total=" << b.total;
        throw NonFiniteLoss(os.str());
    }

    state.graph.zero_grad();
    state.graph.backward(cache, obj.dlogits, obj.dembedding);
    auto params = state.graph.parameters();
    state.optimizer.step(params, lr);

    if (opts.contrastive_enabled) {
        for (std::size_t m = 0; m < outputs.size(); ++m) {
            for (std::size_t i = 0; i < batch.indices.size(); ++i) {
                state.banks[m].update(batch.indices[i], outputs[m].embedding.row(i));
            }
        }
    }
    ++state.step;

    StepReport report;
    report.bundle = b;
    const std::size_t classes = state.graph.spec().classes;
    const auto& deploy = outputs.back().logits;
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        const auto pred = eval::argmax(std::span<const double>(deploy).subspan(i * classes, classes));
        if (static_cast<std::int64_t>(pred) != batch.labels[i]) ++report.deploy_wrong;
    }
    return report;
}

double learning_rate(const TrainConfig& config, std::size_t epoch) {
    if (config.schedule == "constant" || config.epochs == 0) return config.lr;
    if (config.schedule == "step") {
        const std::size_t period = std::max<std::size_t>(config.lr_step_epochs, 1);
        return config.lr * std::pow(config.lr_gamma, static_cast<double>(epoch / period));
    }
    const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

nlohmann::json EpochRecord::to_json() const {
    nlohmann::json j = {
        {"epoch", epoch},           {"ce", ce},
        {"kl", kl},                 {"contrastive", contrastive},
        {"total", total},           {"lr", lr},
        {"train_error", train_error}, {"eval_error", eval_error},
        {"ensemble_error", ensemble_error},
    };
    j["val_error"] = val_error ? nlohmann::json(*val_error) : nlohmann::json(nullptr);
    j["wall_time"] = wall_time;
    return j;
}

Datasets load_datasets(const TrainConfig& config) {
    const auto train_split = data::load_dataset(config.dataset, data::Split::kTrain, config.data_root, config.synthetic);
    Datasets d;
    if (config.val_fraction > 0.0) {
        auto [tr, val] = data::split_validation(train_split, config.val_fraction, config.synthetic.seed);
        d.train = std::move(tr);
        d.val = std::move(val);
    } else {
        d.train = train_split;
    }
    d.test = data::load_dataset(config.dataset, data::Split::kTest, config.data_root, config.synthetic);
    return d;
}

FitResult fit(const TrainConfig& config, const FitOptions& options) { return fit(config, load_datasets(config), options); }

FitResult fit(const TrainConfig& config, const Datasets& data, const FitOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    FitResult result{init_state(config, data.train), {}, {}, 0};
    TrainState& state = result.state;

    std::ofstream metrics;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        const auto path = *options.out_dir / "metrics.jsonl";
        metrics.open(path, std::ios::trunc);
        if (!metrics) throw IoError("cannot write " + path.string());
    }

    const auto policy = data::parse_augment(config.augment);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    double best_error = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        state.epoch = epoch;
        const double lr = learning_rate(config, epoch);
        data::shuffle(order, state.shuffle_rng);

        double ce = 0.0, kl = 0.0, con = 0.0, total = 0.0;
        std::size_t wrong = 0, batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const auto idx = std::span<const std::size_t>(order).subspan(start, end - start);
            const Batch batch = make_batch(data.train, idx, policy, config.augment_pad, state.augment_rng);
            const StepReport r = train_step(state, batch, lr);
            ce += r.bundle.ce;
            kl += r.bundle.kl;
            con += r.bundle.contrastive;
            total += r.bundle.total;
            wrong += r.deploy_wrong;
            ++batches;
        }
        state.epoch = epoch + 1;

        EpochRecord rec;
        rec.epoch = epoch + 1;
        const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
        rec.ce = ce / nb;
        rec.kl = kl / nb;
        rec.contrastive = con / nb;
        rec.total = total / nb;
        rec.lr = lr;
        rec.train_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(std::max<std::size_t>(order.size(), 1));
        const auto summary = eval::evaluate(state.graph, data.test);
        rec.eval_error = summary.deploy_error;
        rec.ensemble_error = summary.ensemble_error;
        if (data.val.size() > 0) rec.val_error = eval::top1_error(state.graph, data.val);
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

        const double selection = rec.val_error.value_or(rec.eval_error);
        if (selection < best_error) {
            best_error = selection;
            result.best_epoch = rec.epoch;
            if (options.out_dir) save_checkpoint(state, *options.out_dir / "checkpoint_best.bin");
        }
        if (metrics.is_open()) {
            metrics << rec.to_json().dump() << '\n';
            metrics.flush();
            if (!metrics) throw IoError("failed writing " + (*options.out_dir / "metrics.jsonl").string());
        }
        if (options.on_epoch) options.on_epoch(rec);
        result.history.push_back(rec);
    }

    result.deployment = state.graph.export_deployment();
    if (options.out_dir) {
        save_checkpoint(state, *options.out_dir / "checkpoint_final.bin");
        save_deployment(result.deployment, config, *options.out_dir / "deploy.bin");
    }
    return result;
}

MultiSeedResult fit_seeds(const TrainConfig& config, const FitOptions& options) {
    const Datasets data = load_datasets(config);
    MultiSeedResult out;
    std::vector<double> deploy, ensemble;
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t k = 0; k < config.num_seeds; ++k) {
        TrainConfig c = config;
        c.seed = config.seed + k;
        c.num_seeds = 1;
        FitOptions o = options;
        if (options.out_dir) o.out_dir = *options.out_dir / ("seed_" + std::to_string(c.seed));
        FitResult r = fit(c, data, o);
        out.seeds.push_back(c.seed);
        const double dep = r.history.empty() ? eval::top1_error(r.state.graph, data.test) : r.history.back().eval_error;
        const double ens =
            r.history.empty() ? eval::ensemble_top1_error(r.state.graph, data.test) : r.history.back().ensemble_error;
        deploy.push_back(dep);
        ensemble.push_back(ens);
        runs.push_back({{"seed", c.seed}, {"deploy_error", dep}, {"ensemble_error", ens}});
        out.histories.push_back(std::move(r.history));
    }
    const auto d = eval::mean_std(deploy);
    const auto e = eval::mean_std(ensemble);
    out.summary = {
        {"seeds", out.seeds},
        {"runs", runs},
        {"deploy_error", {{"mean", d.mean}, {"std", d.stddev}}},
        {"ensemble_error", {{"mean", e.mean}, {"std", e.stddev}}},
    };
    if (options.out_dir) {
        std::ofstream s(*options.out_dir / "summary.json");
        s << out.summary.dump(2) << '\n';
        if (!s) throw IoError("cannot write " + (*options.out_dir / "summary.json").string());
    }
    return out;
}

}  // namespace mclokd
