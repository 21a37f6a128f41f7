// Architecture catalog, parameter init and the trained-model record that the
// zoo, attacks and defenses pass around.
#pragma once

#include "tapm/data.hpp"
#include "tapm/graph.hpp"

namespace tapm {

enum class Arch { mlp_small, mlp_wide, cnn_small, cnn_deep, mixer_lite };
enum class ModelGroup { normal, linf_adv, l2_adv, corruption };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::mlp_small: return "mlp-small";
        case Arch::mlp_wide: return "mlp-wide";
        case Arch::cnn_small: return "cnn-small";
        case Arch::cnn_deep: return "cnn-deep";
        case Arch::mixer_lite: return "mixer-lite";
    }
    return "?";
}

inline Arch parse_arch(const std::string& s) {
    for (Arch a : {Arch::mlp_small, Arch::mlp_wide, Arch::cnn_small, Arch::cnn_deep, Arch::mixer_lite})
        if (s == arch_name(a)) return a;
    fail_config(cat("unknown architecture '", s, "'"));
}

inline const char* group_name(ModelGroup g) {
    switch (g) {
        case ModelGroup::normal: return "normal";
        case ModelGroup::linf_adv: return "linf-adv";
        case ModelGroup::l2_adv: return "l2-adv";
        case ModelGroup::corruption: return "corruption";
    }
    return "?";
}

inline ModelGroup parse_group(const std::string& s) {
    for (ModelGroup g : {ModelGroup::normal, ModelGroup::linf_adv, ModelGroup::l2_adv, ModelGroup::corruption})
        if (s == group_name(g)) return g;
    fail_config(cat("unknown training group '", s, "'"));
}

inline std::vector<ModelGroup> all_groups() {
    return {ModelGroup::normal, ModelGroup::linf_adv, ModelGroup::l2_adv, ModelGroup::corruption};
}

enum class GraphPurpose { forward, ce_loss, dlr_loss, train_mix };

// Node handles into one built graph instance. tap points at the activation
// nearest one-fourth depth (the feature-level attack hooks in there).
struct ModelGraph {
    Graph graph;
    int batch = 0;
    int input = -1, labels_a = -1, labels_b = -1, weight_a = -1, weight_b = -1;
    int logits = -1, loss = -1, tap = -1;
};

struct InputSpec {
    int classes = 4, channels = 1, size = 12;
};

namespace detail {

struct ArchBuilder {
    Graph g;
    std::vector<int> relus;
    int relu(int x) {
        int id = g.relu(x);
        relus.push_back(id);
        return id;
    }
    int tap_node() const {
        require(!relus.empty(), "architecture has no activation to tap");
        int L = static_cast<int>(relus.size());
        int best = 0;
        double target = 0.25, best_d = 1e9;
        for (int i = 0; i < L; ++i) {
            double d = std::fabs((i + 1.0) / L - target);
            if (d < best_d - 1e-12) {
                best_d = d;
                best = i;
            }
        }
        return relus[static_cast<size_t>(best)];
    }
};

inline int dense(ArchBuilder& b, int x, const std::string& name, int in_dim, int out_dim) {
    int w = b.g.param(name + ".w", {in_dim, out_dim});
    int bias = b.g.param(name + ".b", {out_dim});
    return b.g.add(b.g.matmul(x, w), bias);
}

inline int conv(ArchBuilder& b, int x, const std::string& name, int ci, int co, int k, int stride, int pad) {
    int w = b.g.param(name + ".w", {co, ci, k, k});
    int bias = b.g.param(name + ".b", {co});
    return b.g.add(b.g.conv2d(x, w, stride, pad), bias);
}

inline int mixer_patch(int size) {
    for (int p : {4, 3, 2})
        if (size % p == 0) return p;
    fail_config(cat("mixer-lite needs the image side divisible by 4, 3 or 2; got ", size));
}

}  // namespace detail

inline ModelGraph build_model_graph(Arch arch, const InputSpec& in, int batch, GraphPurpose purpose) {
    require(batch >= 1, "batch must be >= 1");
    detail::ArchBuilder b;
    ModelGraph m;
    m.batch = batch;
    int D = in.channels * in.size * in.size;
    m.input = b.g.input("x", {batch, in.channels, in.size, in.size});
    int h = -1;
    switch (arch) {
        case Arch::mlp_small: {
            int flat = b.g.reshape(m.input, {batch, D});
            h = detail::dense(b, b.relu(detail::dense(b, flat, "fc1", D, 64)), "fc2", 64, in.classes);
            break;
        }
        case Arch::mlp_wide: {
            int flat = b.g.reshape(m.input, {batch, D});
            int h1 = b.relu(detail::dense(b, flat, "fc1", D, 128));
            int h2 = b.relu(detail::dense(b, h1, "fc2", 128, 64));
            h = detail::dense(b, h2, "fc3", 64, in.classes);
            break;
        }
        case Arch::cnn_small: {
            require(in.size % 4 == 0, cat("cnn-small needs the image side divisible by 4; got ", in.size));
            int c1 = b.g.mean_pool(b.relu(detail::conv(b, m.input, "conv1", in.channels, 8, 3, 1, 1)), 2, 2);
            int c2 = b.g.mean_pool(b.relu(detail::conv(b, c1, "conv2", 8, 16, 3, 1, 1)), 2, 2);
            int q = in.size / 4;
            h = detail::dense(b, b.g.reshape(c2, {batch, 16 * q * q}), "fc", 16 * q * q, in.classes);
            break;
        }
        case Arch::cnn_deep: {
            require(in.size % 4 == 0, cat("cnn-deep needs the image side divisible by 4; got ", in.size));
            int c1 = b.relu(detail::conv(b, m.input, "conv1", in.channels, 6, 3, 1, 1));
            int c2 = b.g.mean_pool(b.relu(detail::conv(b, c1, "conv2", 6, 6, 3, 1, 1)), 2, 2);
            int c3 = b.relu(detail::conv(b, c2, "conv3", 6, 12, 3, 1, 1));
            int c4 = b.g.mean_pool(b.relu(detail::conv(b, c3, "conv4", 12, 12, 3, 1, 1)), 2, 2);
            int q = in.size / 4;
            h = detail::dense(b, b.g.reshape(c4, {batch, 12 * q * q}), "fc", 12 * q * q, in.classes);
            break;
        }
        case Arch::mixer_lite: {
            int p = detail::mixer_patch(in.size);
            int t = in.size / p;          // tokens per side
            int tokens = t * t, dim = 16;
            int embed = detail::conv(b, m.input, "embed", in.channels, dim, p, p, 0);
            int seq = b.g.reshape(embed, {batch, dim, tokens});  // [B, dim, tokens]
            int wt = b.g.param("token.w", {tokens, tokens});
            int x1 = b.g.add(seq, b.relu(b.g.matmul(seq, wt)));
            int wc = b.g.param("channel.w", {dim, dim});
            int x2 = b.g.add(x1, b.relu(b.g.matmul(wc, x1)));
            h = detail::dense(b, b.g.reshape(x2, {batch, dim * tokens}), "head", dim * tokens, in.classes);
            break;
        }
    }
    m.logits = h;
    m.tap = b.tap_node();
    if (purpose == GraphPurpose::ce_loss) {
        m.labels_a = b.g.labels("y", batch);
        m.loss = b.g.softmax_ce(m.logits, m.labels_a, true);
        b.g.set_loss(m.loss);
    } else if (purpose == GraphPurpose::dlr_loss) {
        m.labels_a = b.g.labels("y", batch);
        m.loss = b.g.dlr_loss(m.logits, m.labels_a, true);
        b.g.set_loss(m.loss);
    } else if (purpose == GraphPurpose::train_mix) {
        // Mixed-label loss: mean_b(wa_b * CE(y_a) + wb_b * CE(y_b)). Plain
        // batches bind y_b = y_a, wa = 1, wb = 0.
        m.labels_a = b.g.labels("y", batch);
        m.labels_b = b.g.labels("y_b", batch);
        m.weight_a = b.g.input("w_a", {batch});
        m.weight_b = b.g.input("w_b", {batch});
        int ce_a = b.g.softmax_ce(m.logits, m.labels_a, false);
        int ce_b = b.g.softmax_ce(m.logits, m.labels_b, false);
        int mixed = b.g.add(b.g.mul(ce_a, m.weight_a), b.g.mul(ce_b, m.weight_b));
        m.loss = b.g.scale(b.g.sum(mixed), 1.0 / batch);
        b.g.set_loss(m.loss);
    }
    m.graph = std::move(b.g);
    return m;
}

inline std::map<std::string, Tensor> init_params(Arch arch, const InputSpec& in, uint64_t seed) {
    // Shapes come from the graph itself so init can never drift from it.
    ModelGraph m = build_model_graph(arch, in, 1, GraphPurpose::forward);
    Rng rng = derive_rng(seed, "init", static_cast<uint64_t>(arch));
    std::map<std::string, Tensor> params;
    for (const auto& node : m.graph.nodes) {
        if (node.op != Op::param) continue;
        Tensor t(node.shape);
        if (node.shape.size() == 1) {
            t.fill(0.0);  // biases
        } else {
            int64_t fan_in = shape_numel(node.shape);
            if (node.shape.size() == 2) fan_in = node.shape[0];
            else if (node.shape.size() == 4) fan_in = static_cast<int64_t>(node.shape[1]) * node.shape[2] * node.shape[3];
            double s = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (double& v : t.data) v = s * rng.normal();
        }
        params.emplace(node.name, std::move(t));
    }
    return params;
}

struct TrainedModel {
    std::string id;
    Arch arch = Arch::mlp_small;
    ModelGroup group = ModelGroup::normal;
    uint64_t seed = 0;
    InputSpec input;
    std::map<std::string, Tensor> params;
    bool has_feature_tap = true;
    double clean_accuracy = -1.0;  // recorded on the test split after training
};

inline uint64_t params_digest(const std::map<std::string, Tensor>& params) {
    Digest d;
    for (const auto& [k, v] : params) {
        d.add(k);
        d.add(tensor_digest(v));
    }
    return d.value();
}

inline Bindings param_bindings(const TrainedModel& model) {
    Bindings b;
    for (const auto& [k, v] : model.params) b[k] = &v;
    return b;
}

// Batched forward pass over an arbitrary row count.
inline Tensor forward_logits(const TrainedModel& model, const Tensor& images, int batch_cap = 256) {
    int N = images.dim(0);
    Tensor out({N, model.input.classes});
    Values values;
    int64_t stride = row_stride(images);
    for (int lo = 0; lo < N; lo += batch_cap) {
        int hi = std::min(N, lo + batch_cap);
        int B = hi - lo;
        ModelGraph mg = build_model_graph(model.arch, model.input, B, GraphPurpose::forward);
        Tensor x = slice_rows(images, lo, hi);
        Bindings bind = param_bindings(model);
        bind["x"] = &x;
        evaluate(mg.graph, bind, values);
        std::copy_n(values[static_cast<size_t>(mg.logits)].ptr(), static_cast<int64_t>(B) * model.input.classes,
                    out.ptr() + static_cast<int64_t>(lo) * model.input.classes);
        (void)stride;
    }
    return out;
}

inline std::vector<int> predict(const TrainedModel& model, const Tensor& images) {
    Tensor logits = forward_logits(model, images);
    int N = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        const double* z = logits.ptr() + static_cast<int64_t>(i) * C;
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (z[c] > z[best]) best = c;
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

inline double accuracy(const TrainedModel& model, const Tensor& images, const std::vector<int>& labels) {
    require(images.dim(0) > 0, "accuracy over an empty set");
    require(static_cast<size_t>(images.dim(0)) == labels.size(), "image/label count mismatch");
    std::vector<int> pred = predict(model, images);
    int hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace tapm
