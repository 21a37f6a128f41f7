// SGD training for the public-model zoo: normal, adversarial (linf / l2
// inner maximization) and corruption procedure groups, plus white-box PGD
// scoring used by tests and source selection.
#pragma once

#include "tapm/models.hpp"

namespace tapm {

struct SgdConfig {
    int epochs = 12;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch = 125;
    bool pad_crop = true;
    bool patch_mix = false;
    double patch_mix_prob = 0.5;
};

struct AdvInnerConfig {
    double eps_linf = 0.03;
    double eps_l2 = -1.0;  // <= 0: eps_linf * sqrt(d) / 4
    int steps = 7;
    double step_frac = 2.5;  // step size = step_frac * eps / steps
};

struct TrainRecipe {
    SgdConfig sgd;
    AdvInnerConfig adv;
    CorruptionConfig corruption;
};

inline double resolve_eps_l2(const AdvInnerConfig& cfg, const InputSpec& in) {
    if (cfg.eps_l2 > 0.0) return cfg.eps_l2;
    double d = static_cast<double>(in.channels) * in.size * in.size;
    return cfg.eps_linf * std::sqrt(d) / 4.0;
}

enum class Norm { linf, l2 };

namespace detail {

inline void project_l2_inplace(Tensor& x, const Tensor& center, double eps) {
    int B = x.dim(0);
    int64_t d = x.numel() / B;
    for (int b = 0; b < B; ++b) {
        double* p = x.ptr() + b * d;
        const double* c = center.ptr() + b * d;
        double norm2 = 0.0;
        for (int64_t k = 0; k < d; ++k) norm2 += (p[k] - c[k]) * (p[k] - c[k]);
        double norm = std::sqrt(norm2);
        if (norm > eps) {
            double s = eps / norm;
            for (int64_t k = 0; k < d; ++k) p[k] = c[k] + s * (p[k] - c[k]);
        }
    }
}

// White-box PGD against live parameter bindings; shared by adversarial
// training and the robustness scores in source selection.
inline Tensor white_box_pgd(const ModelGraph& mg, const Bindings& params, const Tensor& x, const Tensor& y,
                            Norm norm, double eps, int steps, double step, Rng& rng,
                            Values& values, Grads& grads) {
    int B = x.dim(0);
    int64_t d = x.numel() / B;
    Tensor adv = x;
    if (norm == Norm::linf) {
        for (double& v : adv.data) v += rng.uniform(-eps, eps);
    } else {
        // random direction, radius scaled into the ball
        std::vector<double> dir(static_cast<size_t>(d));
        for (int b = 0; b < B; ++b) {
            double n2 = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                dir[static_cast<size_t>(k)] = rng.normal();
                n2 += dir[static_cast<size_t>(k)] * dir[static_cast<size_t>(k)];
            }
            double r = eps * rng.uniform();
            double s = n2 > 0 ? r / std::sqrt(n2) : 0.0;
            for (int64_t k = 0; k < d; ++k) adv.data[static_cast<size_t>(b * d + k)] += s * dir[static_cast<size_t>(k)];
        }
    }
    clamp01_inplace(adv);
    if (norm == Norm::linf) project_linf_inplace(adv, x, eps);
    else project_l2_inplace(adv, x, eps);
    Bindings bind = params;
    bind["y"] = &y;
    for (int t = 0; t < steps; ++t) {
        bind["x"] = &adv;
        evaluate(mg.graph, bind, values);
        backward(mg.graph, values, grads);
        const Tensor& g = grads[static_cast<size_t>(mg.input)];
        if (!all_finite(g)) fail_numeric(cat("non-finite gradient at inner pgd step ", t));
        if (norm == Norm::linf) {
            for (size_t k = 0; k < adv.data.size(); ++k)
                adv.data[k] += step * (g.data[k] > 0.0 ? 1.0 : (g.data[k] < 0.0 ? -1.0 : 0.0));
            project_linf_inplace(adv, x, eps);
        } else {
            for (int b = 0; b < B; ++b) {
                const double* gp = g.ptr() + b * d;
                double n2 = 0.0;
                for (int64_t k = 0; k < d; ++k) n2 += gp[k] * gp[k];
                double s = n2 > 0 ? step / std::sqrt(n2) : 0.0;
                double* p = adv.ptr() + b * d;
                for (int64_t k = 0; k < d; ++k) p[k] += s * gp[k];
            }
            project_l2_inplace(adv, x, eps);
        }
        clamp01_inplace(adv);
    }
    return adv;
}

}  // namespace detail

// Accuracy under a white-box PGD attack of the given norm (evaluation
// attacks proper are linf-only; the l2 route exists for training-side
// scoring and the adversarial-training dominance checks).
inline double white_box_robust_accuracy(const TrainedModel& model, const Tensor& images, const std::vector<int>& labels,
                                        Norm norm, double eps, int steps, uint64_t seed, int batch_cap = 256) {
    int N = images.dim(0);
    require(N > 0, "robust accuracy over an empty set");
    double step = 2.5 * eps / std::max(1, steps);
    int hit = 0;
    Values values;
    Grads grads;
    for (int lo = 0, chunk = 0; lo < N; lo += batch_cap, ++chunk) {
        int hi = std::min(N, lo + batch_cap);
        int B = hi - lo;
        ModelGraph mg = build_model_graph(model.arch, model.input, B, GraphPurpose::ce_loss);
        Tensor x = slice_rows(images, lo, hi);
        Tensor y({B});
        for (int i = 0; i < B; ++i) y.data[static_cast<size_t>(i)] = labels[static_cast<size_t>(lo + i)];
        Rng rng = derive_rng(seed, "wbpgd", static_cast<uint64_t>(chunk), static_cast<uint64_t>(norm));
        Tensor adv = detail::white_box_pgd(mg, param_bindings(model), x, y, norm, eps, steps, step, rng, values, grads);
        Bindings bind = param_bindings(model);
        bind["x"] = &adv;
        evaluate(mg.graph, bind, values);
        const Tensor& logits = values[static_cast<size_t>(mg.logits)];
        for (int i = 0; i < B; ++i) {
            const double* z = logits.ptr() + static_cast<int64_t>(i) * model.input.classes;
            int best = 0;
            for (int c = 1; c < model.input.classes; ++c)
                if (z[c] > z[best]) best = c;
            hit += best == labels[static_cast<size_t>(lo + i)];
        }
    }
    return static_cast<double>(hit) / N;
}

inline TrainedModel train_model(Arch arch, ModelGroup group, const DatasetPair& data, const TrainRecipe& recipe,
                                uint64_t seed, std::string id = "") {
    const SgdConfig& sgd = recipe.sgd;
    require(sgd.epochs >= 0, "epochs must be >= 0");
    require(sgd.batch >= 2 && sgd.lr > 0.0, "bad sgd config");
    require(data.train.count() > 0 && data.test.count() > 0, "empty dataset");

    TrainedModel model;
    model.arch = arch;
    model.group = group;
    model.seed = seed;
    model.input = {data.train.classes, data.train.images.dim(1), data.train.images.dim(2)};
    model.params = init_params(arch, model.input, seed);
    model.id = id.empty() ? cat(group_name(group), "/", arch_name(arch), "-s", seed) : std::move(id);

    if (sgd.epochs == 0) {
        model.clean_accuracy = accuracy(model, data.test.images, data.test.labels);
        return model;
    }

    Bindings params = param_bindings(model);
    std::map<std::string, Tensor> velocity, grad_acc;
    for (auto& [k, v] : model.params) {
        velocity.emplace(k, Tensor(v.shape));
        grad_acc.emplace(k, Tensor(v.shape));
    }

    double eps_l2 = resolve_eps_l2(recipe.adv, model.input);
    Rng rng = derive_rng(seed, "train", static_cast<uint64_t>(arch), static_cast<uint64_t>(group));
    int n = data.train.count();
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    std::map<int, ModelGraph> mix_graphs, ce_graphs;
    Values values;
    Grads grads;
    Tensor ones_b, zeros_b;

    for (int epoch = 0; epoch < sgd.epochs; ++epoch) {
        double lr = sgd.lr * (epoch >= (3 * sgd.epochs) / 4 ? 0.1 : 1.0);
        rng.shuffle(order);
        for (int lo = 0; lo < n; lo += sgd.batch) {
            int hi = std::min(n, lo + sgd.batch);
            int B = hi - lo;
            std::vector<int> rows(order.begin() + lo, order.begin() + hi);
            Tensor xb = gather_rows(data.train.images, rows);
            std::vector<int> ya(static_cast<size_t>(B)), yb;
            for (int i = 0; i < B; ++i) ya[static_cast<size_t>(i)] = data.train.labels[static_cast<size_t>(rows[static_cast<size_t>(i)])];
            yb = ya;
            double lam = 1.0;
            if (sgd.pad_crop) xb = pad_crop(xb, rng);
            if (sgd.patch_mix && rng.uniform() < sgd.patch_mix_prob) {
                PatchMix pm = patch_mix(xb, ya, rng);
                xb = std::move(pm.images);
                yb = std::move(pm.labels_b);
                lam = pm.lam;
            }

            auto& mg = mix_graphs.try_emplace(B).first->second;
            if (mg.batch != B) mg = build_model_graph(arch, model.input, B, GraphPurpose::train_mix);

            std::vector<Tensor> branches;
            branches.push_back(xb);
            if (group == ModelGroup::linf_adv || group == ModelGroup::l2_adv) {
                auto& cg = ce_graphs.try_emplace(B).first->second;
                if (cg.batch != B) cg = build_model_graph(arch, model.input, B, GraphPurpose::ce_loss);
                Norm norm = group == ModelGroup::linf_adv ? Norm::linf : Norm::l2;
                double eps = norm == Norm::linf ? recipe.adv.eps_linf : eps_l2;
                double step = recipe.adv.step_frac * eps / std::max(1, recipe.adv.steps);
                Tensor y({B});
                for (int i = 0; i < B; ++i) y.data[static_cast<size_t>(i)] = ya[static_cast<size_t>(i)];
                branches.push_back(detail::white_box_pgd(cg, params, xb, y, norm, eps, recipe.adv.steps, step, rng, values, grads));
            } else if (group == ModelGroup::corruption) {
                branches[0] = corrupt_batch(xb, rng, recipe.corruption);
            }

            Tensor ta({B}), tb({B}), wa({B}), wb({B});
            for (int i = 0; i < B; ++i) {
                ta.data[static_cast<size_t>(i)] = ya[static_cast<size_t>(i)];
                tb.data[static_cast<size_t>(i)] = yb[static_cast<size_t>(i)];
            }
            wa.fill(lam);
            wb.fill(1.0 - lam);

            for (auto& [k, t] : grad_acc) t.fill(0.0);
            for (const Tensor& bx : branches) {
                Bindings bind = params;
                bind["x"] = &bx;
                bind["y"] = &ta;
                bind["y_b"] = &tb;
                bind["w_a"] = &wa;
                bind["w_b"] = &wb;
                evaluate(mg.graph, bind, values);
                double loss = values[static_cast<size_t>(mg.loss)].data[0];
                if (!std::isfinite(loss)) fail_numeric(cat("training diverged at epoch ", epoch, " for ", model.id));
                backward(mg.graph, values, grads);
                for (int ni = 0; ni < mg.graph.size(); ++ni) {
                    const Node& nd = mg.graph.at(ni);
                    if (nd.op != Op::param) continue;
                    auto& acc = grad_acc.at(nd.name);
                    const auto& gsrc = grads[static_cast<size_t>(ni)];
                    for (size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += gsrc.data[k];
                }
            }
            for (auto& [k, theta] : model.params) {
                Tensor& v = velocity.at(k);
                const Tensor& gacc = grad_acc.at(k);
                for (size_t e = 0; e < theta.data.size(); ++e) {
                    double g = gacc.data[e] + sgd.weight_decay * theta.data[e];
                    v.data[e] = sgd.momentum * v.data[e] + g;
                    theta.data[e] -= lr * v.data[e];
                }
            }
        }
    }
    model.clean_accuracy = accuracy(model, data.test.images, data.test.labels);
    return model;
}

// --- zoo ---

struct ZooRow {
    Arch arch;
    ModelGroup group;
    uint64_t seed;
};

inline std::vector<TrainedModel> build_zoo(const DatasetPair& data, const std::vector<ZooRow>& rows,
                                           const TrainRecipe& recipe, uint64_t global_seed) {
    require(!rows.empty(), "zoo spec is empty");
    std::vector<std::string> seen;
    for (const auto& r : rows) {
        std::string key = cat(arch_name(r.arch), "|", group_name(r.group), "|", r.seed);
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            fail_config(cat("duplicate zoo row (", key, ")"));
        seen.push_back(key);
    }
    std::vector<TrainedModel> zoo;
    zoo.reserve(rows.size());
    for (const auto& r : rows) {
        Digest d;
        d.add(global_seed).add("zoo").add(r.seed);
        zoo.push_back(train_model(r.arch, r.group, data, recipe, d.value(),
                                  cat(group_name(r.group), "/", arch_name(r.arch), "-s", r.seed)));
    }
    return zoo;
}

inline const TrainedModel& find_model(const std::vector<TrainedModel>& zoo, const std::string& id) {
    for (const auto& m : zoo)
        if (m.id == id) return m;
    fail_dependency(cat("model '", id, "' not found in zoo"));
}

}  // namespace tapm
