// Reverse-mode autodiff over a small fixed op set. Graphs are immutable once
// built; inputs and parameters are both supplied through the bindings map so
// one graph instance can serve many models/batches concurrently.
#pragma once

#include <optional>

#include "tapm/tensor.hpp"

namespace tapm {

enum class Op {
    input,
    param,
    matmul,
    conv2d,
    add,
    relu,
    mean_pool,
    reshape,
    scale,
    softmax_ce,
    dlr_loss,
    sum,
    mul,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::input: return "input";
        case Op::param: return "parameter";
        case Op::matmul: return "matmul";
        case Op::conv2d: return "conv2d";
        case Op::add: return "add";
        case Op::relu: return "relu";
        case Op::mean_pool: return "mean-pool";
        case Op::reshape: return "reshape";
        case Op::scale: return "scale";
        case Op::softmax_ce: return "softmax-cross-entropy";
        case Op::dlr_loss: return "dlr-loss";
        case Op::sum: return "sum";
        case Op::mul: return "mul";
    }
    return "?";
}

struct Node {
    Op op;
    std::vector<int> parents;
    std::vector<int> shape;
    std::string name;          // input/param only
    bool differentiable = true;  // false for label inputs
    int stride = 1, pad = 0;   // conv2d
    int pool_h = 1, pool_w = 1;
    double scale_c = 1.0;
    bool reduce_mean = true;   // loss nodes
};

struct Graph {
    std::vector<Node> nodes;
    int loss_node = -1;

    int size() const { return static_cast<int>(nodes.size()); }
    const Node& at(int i) const { return nodes[static_cast<size_t>(i)]; }

    std::string node_label(int i) const {
        const Node& n = at(i);
        if (!n.name.empty()) return cat(n.name, " (#", i, ")");
        return cat("#", i, ":", op_name(n.op));
    }

    int push(Node n) {
        for (int p : n.parents)
            require(p >= 0 && p < size(), "graph parents must precede the node");
        nodes.push_back(std::move(n));
        return size() - 1;
    }

    int input(std::string name, std::vector<int> shape) {
        Node n{Op::input, {}, std::move(shape)};
        n.name = std::move(name);
        return push(std::move(n));
    }

    // Integer class indices travel as doubles; flagged non-differentiable so
    // backward and gradcheck leave them alone.
    int labels(std::string name, int batch) {
        Node n{Op::input, {}, {batch}};
        n.name = std::move(name);
        n.differentiable = false;
        return push(std::move(n));
    }

    int param(std::string name, std::vector<int> shape) {
        Node n{Op::param, {}, std::move(shape)};
        n.name = std::move(name);
        return push(std::move(n));
    }

    int matmul(int a, int b) {
        const auto &sa = at(a).shape, &sb = at(b).shape;
        std::vector<int> out;
        if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) out = {sa[0], sb[1]};
        else if (sa.size() == 3 && sb.size() == 2 && sa[2] == sb[0]) out = {sa[0], sa[1], sb[1]};
        else if (sa.size() == 2 && sb.size() == 3 && sa[1] == sb[1]) out = {sb[0], sa[0], sb[2]};
        else fail_invalid(cat("matmul shape mismatch ", shape_str(sa), " x ", shape_str(sb), " at node #", size()));
        return push(Node{Op::matmul, {a, b}, std::move(out)});
    }

    int conv2d(int x, int w, int stride, int pad) {
        const auto &sx = at(x).shape, &sw = at(w).shape;
        require(sx.size() == 4 && sw.size() == 4, cat("conv2d expects [B,C,H,W] and [Co,Ci,kh,kw] at node #", size()));
        require(sx[1] == sw[1], cat("conv2d channel mismatch ", shape_str(sx), " vs ", shape_str(sw), " at node #", size()));
        require(stride >= 1 && pad >= 0, "conv2d stride/pad out of range");
        int h = sx[2] + 2 * pad - sw[2], w_ = sx[3] + 2 * pad - sw[3];
        require(h >= 0 && w_ >= 0 && h % stride == 0 && w_ % stride == 0,
                cat("conv2d geometry does not tile ", shape_str(sx), " at node #", size()));
        Node n{Op::conv2d, {x, w}, {sx[0], sw[0], h / stride + 1, w_ / stride + 1}};
        n.stride = stride;
        n.pad = pad;
        return push(std::move(n));
    }

    // Broadcast is deliberately narrow: same shape, a trailing-dim bias
    // vector, or a per-channel bias against [B,C,H,W].
    int add(int a, int b) {
        const auto &sa = at(a).shape, &sb = at(b).shape;
        bool same = sa == sb;
        bool row_bias = sb.size() == 1 && !sa.empty() && sa.back() == sb[0];
        bool chan_bias = sa.size() == 4 && sb.size() == 1 && sa[1] == sb[0];
        if (!(same || row_bias || chan_bias))
            fail_invalid(cat("add shape mismatch ", shape_str(sa), " + ", shape_str(sb), " at node #", size()));
        return push(Node{Op::add, {a, b}, sa});
    }

    int relu(int x) { return push(Node{Op::relu, {x}, at(x).shape}); }

    int mean_pool(int x, int kh, int kw) {
        const auto& s = at(x).shape;
        require(s.size() == 4, cat("mean-pool expects [B,C,H,W] at node #", size()));
        require(kh >= 1 && kw >= 1 && s[2] % kh == 0 && s[3] % kw == 0,
                cat("mean-pool window must tile ", shape_str(s), " at node #", size()));
        Node n{Op::mean_pool, {x}, {s[0], s[1], s[2] / kh, s[3] / kw}};
        n.pool_h = kh;
        n.pool_w = kw;
        return push(std::move(n));
    }

    int reshape(int x, std::vector<int> shape) {
        require(shape_numel(shape) == shape_numel(at(x).shape),
                cat("reshape element count mismatch at node #", size()));
        return push(Node{Op::reshape, {x}, std::move(shape)});
    }

    int scale(int x, double c) {
        Node n{Op::scale, {x}, at(x).shape};
        n.scale_c = c;
        return push(std::move(n));
    }

    int softmax_ce(int logits, int labels_node, bool mean = true) {
        const auto &sl = at(logits).shape, &sy = at(labels_node).shape;
        require(sl.size() == 2, cat("softmax-cross-entropy expects [B,C] logits at node #", size()));
        require(sy.size() == 1 && sy[0] == sl[0], cat("softmax-cross-entropy label shape mismatch at node #", size()));
        Node n{Op::softmax_ce, {logits, labels_node}, mean ? std::vector<int>{1} : std::vector<int>{sl[0]}};
        n.reduce_mean = mean;
        return push(std::move(n));
    }

    int dlr_loss(int logits, int labels_node, bool mean = true) {
        const auto &sl = at(logits).shape, &sy = at(labels_node).shape;
        require(sl.size() == 2, cat("dlr-loss expects [B,C] logits at node #", size()));
        require(sl[1] >= 3, cat("dlr-loss needs >= 3 classes at node #", size()));
        require(sy.size() == 1 && sy[0] == sl[0], cat("dlr-loss label shape mismatch at node #", size()));
        Node n{Op::dlr_loss, {logits, labels_node}, mean ? std::vector<int>{1} : std::vector<int>{sl[0]}};
        n.reduce_mean = mean;
        return push(std::move(n));
    }

    int sum(int x) { return push(Node{Op::sum, {x}, {1}}); }

    int mul(int a, int b) {
        require(at(a).shape == at(b).shape,
                cat("mul shape mismatch ", shape_str(at(a).shape), " vs ", shape_str(at(b).shape), " at node #", size()));
        return push(Node{Op::mul, {a, b}, at(a).shape});
    }

    void set_loss(int node) {
        require(node >= 0 && node < size() && shape_numel(at(node).shape) == 1,
                "designated loss node must be scalar");
        loss_node = node;
    }
};

using Bindings = std::map<std::string, const Tensor*>;
using Values = std::vector<Tensor>;
using Grads = std::vector<Tensor>;

// --- matmul kernels (all accumulate into out) ---

namespace detail {

inline void mm_nn(double* out, const double* a, const double* b, int M, int K, int N) {
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
            double amk = a[m * K + k];
            const double* br = b + static_cast<int64_t>(k) * N;
            double* orow = out + static_cast<int64_t>(m) * N;
            for (int n = 0; n < N; ++n) orow[n] += amk * br[n];
        }
}

// out[M,K] += A[M,N] * B[K,N]^T
inline void mm_nt(double* out, const double* a, const double* b, int M, int N, int K) {
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
            const double *ar = a + static_cast<int64_t>(m) * N, *br = b + static_cast<int64_t>(k) * N;
            double acc = 0.0;
            for (int n = 0; n < N; ++n) acc += ar[n] * br[n];
            out[m * K + k] += acc;
        }
}

// out[K,N] += A[M,K]^T * B[M,N]
inline void mm_tn(double* out, const double* a, const double* b, int M, int K, int N) {
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
            double amk = a[m * K + k];
            const double* br = b + static_cast<int64_t>(m) * N;
            double* orow = out + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) orow[n] += amk * br[n];
        }
}

inline void conv2d_forward(const Tensor& x, const Tensor& w, int stride, int pad, Tensor& out) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int Ho = out.dim(2), Wo = out.dim(3);
    out.fill(0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co) {
            double* orow = out.ptr() + ((static_cast<int64_t>(b) * Co + co) * Ho) * Wo;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xp = x.ptr() + ((static_cast<int64_t>(b) * Ci + ci) * H) * W;
                const double* wp = w.ptr() + ((static_cast<int64_t>(co) * Ci + ci) * kh) * kw;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ki = 0; ki < kh; ++ki) {
                        int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        for (int ow = 0; ow < Wo; ++ow) {
                            double acc = 0.0;
                            int base = ow * stride - pad;
                            for (int kj = 0; kj < kw; ++kj) {
                                int iw = base + kj;
                                if (iw >= 0 && iw < W) acc += xp[ih * W + iw] * wp[ki * kw + kj];
                            }
                            orow[oh * Wo + ow] += acc;
                        }
                    }
            }
        }
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, int stride, int pad, const Tensor& g,
                            Tensor* dx, Tensor* dw) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int Ho = g.dim(2), Wo = g.dim(3);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co) {
            const double* gp = g.ptr() + ((static_cast<int64_t>(b) * Co + co) * Ho) * Wo;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xp = x.ptr() + ((static_cast<int64_t>(b) * Ci + ci) * H) * W;
                const double* wp = w.ptr() + ((static_cast<int64_t>(co) * Ci + ci) * kh) * kw;
                double* dxp = dx ? dx->ptr() + ((static_cast<int64_t>(b) * Ci + ci) * H) * W : nullptr;
                double* dwp = dw ? dw->ptr() + ((static_cast<int64_t>(co) * Ci + ci) * kh) * kw : nullptr;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ki = 0; ki < kh; ++ki) {
                        int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        for (int ow = 0; ow < Wo; ++ow) {
                            double gv = gp[oh * Wo + ow];
                            if (gv == 0.0) continue;
                            int base = ow * stride - pad;
                            for (int kj = 0; kj < kw; ++kj) {
                                int iw = base + kj;
                                if (iw < 0 || iw >= W) continue;
                                if (dxp) dxp[ih * W + iw] += gv * wp[ki * kw + kj];
                                if (dwp) dwp[ki * kw + kj] += gv * xp[ih * W + iw];
                            }
                        }
                    }
            }
        }
}

inline int label_at(const Tensor& labels, int b, int classes, const std::string& where) {
    double v = labels.data[static_cast<size_t>(b)];
    int y = static_cast<int>(v);
    if (static_cast<double>(y) != v || y < 0 || y >= classes)
        fail_invalid(cat("label out of range at row ", b, " in ", where));
    return y;
}

}  // namespace detail

// --- loss kernels, shared with the ensemble attack path ---

inline std::vector<double> softmax_ce_forward(const Tensor& logits, const Tensor& labels, const std::string& where = "softmax-cross-entropy") {
    int B = logits.dim(0), C = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        const double* z = logits.ptr() + static_cast<int64_t>(b) * C;
        int y = detail::label_at(labels, b, C, where);
        double m = z[0];
        for (int c = 1; c < C; ++c) m = std::max(m, z[c]);
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(z[c] - m);
        out[static_cast<size_t>(b)] = m + std::log(s) - z[y];
    }
    return out;
}

// weights[b] scales row b; accumulates into dlogits.
inline void softmax_ce_input_grad(const Tensor& logits, const Tensor& labels, const std::vector<double>& weights,
                                  Tensor& dlogits, const std::string& where = "softmax-cross-entropy") {
    int B = logits.dim(0), C = logits.dim(1);
    for (int b = 0; b < B; ++b) {
        double wb = weights[static_cast<size_t>(b)];
        const double* z = logits.ptr() + static_cast<int64_t>(b) * C;
        double* d = dlogits.ptr() + static_cast<int64_t>(b) * C;
        int y = detail::label_at(labels, b, C, where);
        double m = z[0];
        for (int c = 1; c < C; ++c) m = std::max(m, z[c]);
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(z[c] - m);
        for (int c = 0; c < C; ++c) d[c] += wb * (std::exp(z[c] - m) / s - (c == y ? 1.0 : 0.0));
    }
}

struct DlrParts {
    int top1, top3, other;  // indices of z_(1), z_(3) and max over i != y
    double value;
};

inline DlrParts dlr_parts(const double* z, int C, int y, int row, const std::string& where) {
    std::vector<int> order(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) order[static_cast<size_t>(c)] = c;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return z[a] != z[b] ? z[a] > z[b] : a < b; });
    int k1 = order[0], k3 = order[2];
    if (z[k1] == z[k3]) fail_numeric(cat("degenerate dlr denominator at row ", row, " in ", where));
    int other = y == 0 ? 1 : 0;
    for (int c = 0; c < C; ++c)
        if (c != y && z[c] > z[other]) other = c;
    return {k1, k3, other, (z[other] - z[y]) / (z[k1] - z[k3])};
}

inline std::vector<double> dlr_forward(const Tensor& logits, const Tensor& labels, const std::string& where = "dlr-loss") {
    int B = logits.dim(0), C = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        const double* z = logits.ptr() + static_cast<int64_t>(b) * C;
        out[static_cast<size_t>(b)] = dlr_parts(z, C, detail::label_at(labels, b, C, where), b, where).value;
    }
    return out;
}

inline void dlr_input_grad(const Tensor& logits, const Tensor& labels, const std::vector<double>& weights,
                           Tensor& dlogits, const std::string& where = "dlr-loss") {
    int B = logits.dim(0), C = logits.dim(1);
    for (int b = 0; b < B; ++b) {
        const double* z = logits.ptr() + static_cast<int64_t>(b) * C;
        double* d = dlogits.ptr() + static_cast<int64_t>(b) * C;
        int y = detail::label_at(labels, b, C, where);
        DlrParts p = dlr_parts(z, C, y, b, where);
        double v = z[p.top1] - z[p.top3];
        double wb = weights[static_cast<size_t>(b)];
        double u = z[p.other] - z[y];
        // d(u/v) = du/v - u * dv / v^2
        d[p.other] += wb / v;
        d[y] -= wb / v;
        double k = wb * u / (v * v);
        d[p.top1] -= k;
        d[p.top3] += k;
    }
}

// --- forward / backward ---

inline void evaluate(const Graph& g, const Bindings& bindings, Values& values) {
    int n = g.size();
    if (static_cast<int>(values.size()) != n) values.assign(static_cast<size_t>(n), Tensor());
    for (int i = 0; i < n; ++i) {
        const Node& nd = g.at(i);
        Tensor& out = values[static_cast<size_t>(i)];
        if (nd.op == Op::input || nd.op == Op::param) {
            auto it = bindings.find(nd.name);
            if (it == bindings.end()) fail_invalid(cat("unbound ", op_name(nd.op), " '", nd.name, "'"));
            require(it->second->shape == nd.shape,
                    cat("binding shape ", shape_str(it->second->shape), " does not match ", g.node_label(i), " ", shape_str(nd.shape)));
            out = *it->second;
            continue;
        }
        if (out.shape != nd.shape) out = Tensor(nd.shape);
        const Tensor* a = nd.parents.empty() ? nullptr : &values[static_cast<size_t>(nd.parents[0])];
        const Tensor* b = nd.parents.size() > 1 ? &values[static_cast<size_t>(nd.parents[1])] : nullptr;
        switch (nd.op) {
            case Op::matmul: {
                out.fill(0.0);
                if (a->rank() == 2 && b->rank() == 2)
                    detail::mm_nn(out.ptr(), a->ptr(), b->ptr(), a->dim(0), a->dim(1), b->dim(1));
                else if (a->rank() == 3) {
                    int B = a->dim(0), M = a->dim(1), K = a->dim(2), N = b->dim(1);
                    for (int bb = 0; bb < B; ++bb)
                        detail::mm_nn(out.ptr() + static_cast<int64_t>(bb) * M * N, a->ptr() + static_cast<int64_t>(bb) * M * K, b->ptr(), M, K, N);
                } else {
                    int B = b->dim(0), M = a->dim(0), K = a->dim(1), N = b->dim(2);
                    for (int bb = 0; bb < B; ++bb)
                        detail::mm_nn(out.ptr() + static_cast<int64_t>(bb) * M * N, a->ptr(), b->ptr() + static_cast<int64_t>(bb) * K * N, M, K, N);
                }
                break;
            }
            case Op::conv2d:
                detail::conv2d_forward(*a, *b, nd.stride, nd.pad, out);
                break;
            case Op::add: {
                if (a->shape == b->shape) {
                    for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = a->data[k] + b->data[k];
                } else if (a->rank() == 4 && b->rank() == 1 && b->dim(0) == a->dim(1)) {
                    int B = a->dim(0), C = a->dim(1);
                    int64_t hw = static_cast<int64_t>(a->dim(2)) * a->dim(3);
                    for (int bb = 0; bb < B; ++bb)
                        for (int c = 0; c < C; ++c) {
                            double bias = b->data[static_cast<size_t>(c)];
                            int64_t base = (static_cast<int64_t>(bb) * C + c) * hw;
                            for (int64_t k = 0; k < hw; ++k) out.data[static_cast<size_t>(base + k)] = a->data[static_cast<size_t>(base + k)] + bias;
                        }
                } else {
                    int N = b->dim(0);
                    int64_t rows = a->numel() / N;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int c = 0; c < N; ++c)
                            out.data[static_cast<size_t>(r * N + c)] = a->data[static_cast<size_t>(r * N + c)] + b->data[static_cast<size_t>(c)];
                }
                break;
            }
            case Op::relu:
                for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = a->data[k] > 0.0 ? a->data[k] : 0.0;
                break;
            case Op::mean_pool: {
                int B = a->dim(0), C = a->dim(1), H = a->dim(2), W = a->dim(3);
                int kh = nd.pool_h, kw = nd.pool_w, Ho = H / kh, Wo = W / kw;
                double inv = 1.0 / (kh * kw);
                for (int bc = 0; bc < B * C; ++bc) {
                    const double* p = a->ptr() + static_cast<int64_t>(bc) * H * W;
                    double* q = out.ptr() + static_cast<int64_t>(bc) * Ho * Wo;
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            double acc = 0.0;
                            for (int di = 0; di < kh; ++di)
                                for (int dj = 0; dj < kw; ++dj) acc += p[(i * kh + di) * W + j * kw + dj];
                            q[i * Wo + j] = acc * inv;
                        }
                }
                break;
            }
            case Op::reshape:
                out.data = a->data;
                break;
            case Op::scale:
                for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = a->data[k] * nd.scale_c;
                break;
            case Op::softmax_ce: {
                auto per = softmax_ce_forward(*a, *b, g.node_label(i));
                if (nd.reduce_mean) {
                    double acc = 0.0;
                    for (double v : per) acc += v;
                    out.data[0] = acc / static_cast<double>(per.size());
                } else {
                    out.data = per;
                }
                break;
            }
            case Op::dlr_loss: {
                auto per = dlr_forward(*a, *b, g.node_label(i));
                if (nd.reduce_mean) {
                    double acc = 0.0;
                    for (double v : per) acc += v;
                    out.data[0] = acc / static_cast<double>(per.size());
                } else {
                    out.data = per;
                }
                break;
            }
            case Op::sum: {
                double acc = 0.0;
                for (double v : a->data) acc += v;
                out.data[0] = acc;
                break;
            }
            case Op::mul:
                for (size_t k = 0; k < out.data.size(); ++k) out.data[k] = a->data[k] * b->data[k];
                break;
            case Op::input:
            case Op::param:
                break;
        }
    }
}

inline Values evaluate(const Graph& g, const Bindings& bindings) {
    Values v;
    evaluate(g, bindings, v);
    return v;
}

// Seeds dOut/dNode at `seed_node` and sweeps in reverse. Grads come back for
// every node (zeros where the seed node does not depend on them).
inline void backward_from(const Graph& g, const Values& values, int seed_node, const Tensor& seed, Grads& grads) {
    int n = g.size();
    require(seed_node >= 0 && seed_node < n, "backward seed node out of range");
    require(seed.shape == g.at(seed_node).shape, "backward seed shape mismatch");
    if (static_cast<int>(grads.size()) != n) grads.assign(static_cast<size_t>(n), Tensor());
    for (int i = 0; i < n; ++i) {
        if (grads[static_cast<size_t>(i)].shape != g.at(i).shape)
            grads[static_cast<size_t>(i)] = Tensor(g.at(i).shape);
        else
            grads[static_cast<size_t>(i)].fill(0.0);
    }
    grads[static_cast<size_t>(seed_node)] = seed;
    for (int i = seed_node; i >= 0; --i) {
        const Node& nd = g.at(i);
        const Tensor& go = grads[static_cast<size_t>(i)];
        if (nd.parents.empty()) continue;
        const Tensor& va = values[static_cast<size_t>(nd.parents[0])];
        Tensor& ga = grads[static_cast<size_t>(nd.parents[0])];
        bool da = g.at(nd.parents[0]).differentiable;
        switch (nd.op) {
            case Op::matmul: {
                const Tensor& vb = values[static_cast<size_t>(nd.parents[1])];
                Tensor& gb = grads[static_cast<size_t>(nd.parents[1])];
                if (va.rank() == 2 && vb.rank() == 2) {
                    int M = va.dim(0), K = va.dim(1), N = vb.dim(1);
                    detail::mm_nt(ga.ptr(), go.ptr(), vb.ptr(), M, N, K);
                    detail::mm_tn(gb.ptr(), va.ptr(), go.ptr(), M, K, N);
                } else if (va.rank() == 3) {
                    int B = va.dim(0), M = va.dim(1), K = va.dim(2), N = vb.dim(1);
                    for (int bb = 0; bb < B; ++bb) {
                        detail::mm_nt(ga.ptr() + static_cast<int64_t>(bb) * M * K, go.ptr() + static_cast<int64_t>(bb) * M * N, vb.ptr(), M, N, K);
                        detail::mm_tn(gb.ptr(), va.ptr() + static_cast<int64_t>(bb) * M * K, go.ptr() + static_cast<int64_t>(bb) * M * N, M, K, N);
                    }
                } else {
                    int B = vb.dim(0), M = va.dim(0), K = va.dim(1), N = vb.dim(2);
                    for (int bb = 0; bb < B; ++bb) {
                        detail::mm_nt(ga.ptr(), go.ptr() + static_cast<int64_t>(bb) * M * N, vb.ptr() + static_cast<int64_t>(bb) * K * N, M, N, K);
                        detail::mm_tn(gb.ptr() + static_cast<int64_t>(bb) * K * N, va.ptr(), go.ptr() + static_cast<int64_t>(bb) * M * N, M, K, N);
                    }
                }
                break;
            }
            case Op::conv2d: {
                const Tensor& vw = values[static_cast<size_t>(nd.parents[1])];
                Tensor& gw = grads[static_cast<size_t>(nd.parents[1])];
                detail::conv2d_backward(va, vw, nd.stride, nd.pad, go, da ? &ga : nullptr, &gw);
                break;
            }
            case Op::add: {
                const Tensor& vb = values[static_cast<size_t>(nd.parents[1])];
                Tensor& gb = grads[static_cast<size_t>(nd.parents[1])];
                if (da)
                    for (size_t k = 0; k < go.data.size(); ++k) ga.data[k] += go.data[k];
                if (va.shape == vb.shape) {
                    for (size_t k = 0; k < go.data.size(); ++k) gb.data[k] += go.data[k];
                } else if (va.rank() == 4 && vb.rank() == 1 && vb.dim(0) == va.dim(1)) {
                    int B = va.dim(0), C = va.dim(1);
                    int64_t hw = static_cast<int64_t>(va.dim(2)) * va.dim(3);
                    for (int bb = 0; bb < B; ++bb)
                        for (int c = 0; c < C; ++c) {
                            int64_t base = (static_cast<int64_t>(bb) * C + c) * hw;
                            double acc = 0.0;
                            for (int64_t k = 0; k < hw; ++k) acc += go.data[static_cast<size_t>(base + k)];
                            gb.data[static_cast<size_t>(c)] += acc;
                        }
                } else {
                    int N = vb.dim(0);
                    int64_t rows = va.numel() / N;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int c = 0; c < N; ++c) gb.data[static_cast<size_t>(c)] += go.data[static_cast<size_t>(r * N + c)];
                }
                break;
            }
            case Op::relu:
                // Subgradient 0 at exactly 0.
                if (da)
                    for (size_t k = 0; k < go.data.size(); ++k)
                        if (va.data[k] > 0.0) ga.data[k] += go.data[k];
                break;
            case Op::mean_pool: {
                if (!da) break;
                int B = va.dim(0), C = va.dim(1), H = va.dim(2), W = va.dim(3);
                int kh = nd.pool_h, kw = nd.pool_w, Ho = H / kh, Wo = W / kw;
                double inv = 1.0 / (kh * kw);
                for (int bc = 0; bc < B * C; ++bc) {
                    double* p = ga.ptr() + static_cast<int64_t>(bc) * H * W;
                    const double* q = go.ptr() + static_cast<int64_t>(bc) * Ho * Wo;
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            double gv = q[i * Wo + j] * inv;
                            for (int di = 0; di < kh; ++di)
                                for (int dj = 0; dj < kw; ++dj) p[(i * kh + di) * W + j * kw + dj] += gv;
                        }
                }
                break;
            }
            case Op::reshape:
                if (da)
                    for (size_t k = 0; k < go.data.size(); ++k) ga.data[k] += go.data[k];
                break;
            case Op::scale:
                if (da)
                    for (size_t k = 0; k < go.data.size(); ++k) ga.data[k] += go.data[k] * nd.scale_c;
                break;
            case Op::softmax_ce: {
                if (!da) break;
                const Tensor& labels = values[static_cast<size_t>(nd.parents[1])];
                int B = va.dim(0);
                std::vector<double> w(static_cast<size_t>(B));
                for (int b = 0; b < B; ++b)
                    w[static_cast<size_t>(b)] = nd.reduce_mean ? go.data[0] / B : go.data[static_cast<size_t>(b)];
                softmax_ce_input_grad(va, labels, w, ga, g.node_label(i));
                break;
            }
            case Op::dlr_loss: {
                if (!da) break;
                const Tensor& labels = values[static_cast<size_t>(nd.parents[1])];
                int B = va.dim(0);
                std::vector<double> w(static_cast<size_t>(B));
                for (int b = 0; b < B; ++b)
                    w[static_cast<size_t>(b)] = nd.reduce_mean ? go.data[0] / B : go.data[static_cast<size_t>(b)];
                dlr_input_grad(va, labels, w, ga, g.node_label(i));
                break;
            }
            case Op::sum:
                if (da)
                    for (size_t k = 0; k < ga.data.size(); ++k) ga.data[k] += go.data[0];
                break;
            case Op::mul: {
                const Tensor& vb = values[static_cast<size_t>(nd.parents[1])];
                Tensor& gb = grads[static_cast<size_t>(nd.parents[1])];
                if (da)
                    for (size_t k = 0; k < go.data.size(); ++k) ga.data[k] += go.data[k] * vb.data[k];
                if (g.at(nd.parents[1]).differentiable)
                    for (size_t k = 0; k < go.data.size(); ++k) gb.data[k] += go.data[k] * va.data[k];
                break;
            }
            case Op::input:
            case Op::param:
                break;
        }
    }
}

inline void backward(const Graph& g, const Values& values, Grads& grads, double seed = 1.0) {
    require(g.loss_node >= 0, "graph has no designated loss node");
    require(shape_numel(g.at(g.loss_node).shape) == 1, "designated loss node is not scalar");
    backward_from(g, values, g.loss_node, Tensor::scalar(seed), grads);
}

inline Grads backward(const Graph& g, const Values& values, double seed = 1.0) {
    Grads gr;
    backward(g, values, gr, seed);
    return gr;
}

// --- finite-difference oracle ---

struct GradCheckEntry {
    std::string node;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    int checked = 0, skipped = 0;
    bool passed = false;
};

// Central differences on the designated loss. Coordinates whose +-h probes
// land a relu input on the other side of 0 (or exactly on it) are reported
// as skipped instead of compared.
inline GradCheckReport finite_diff_check(const Graph& g, const Bindings& bindings, double h = 1e-5,
                                         double tol = 1e-4, int coords_per_node = 100, uint64_t seed = 0) {
    require(g.loss_node >= 0, "finite_diff_check needs a designated loss node");
    std::map<std::string, Tensor> local;
    for (const auto& [k, v] : bindings) local.emplace(k, *v);
    Bindings bound;
    for (auto& [k, v] : local) bound[k] = &v;

    Values center = evaluate(g, bound);
    Grads grads = backward(g, center);

    std::vector<int> relu_nodes;
    for (int i = 0; i < g.size(); ++i)
        if (g.at(i).op == Op::relu) relu_nodes.push_back(g.at(i).parents[0]);

    Rng rng = derive_rng(seed, "gradcheck");
    GradCheckReport report;
    Values plus, minus;
    for (int i = 0; i < g.size(); ++i) {
        const Node& nd = g.at(i);
        if ((nd.op != Op::input && nd.op != Op::param) || !nd.differentiable) continue;
        Tensor& t = local.at(nd.name);
        GradCheckEntry entry{g.node_label(i), 0.0, 0, 0};
        int64_t n = t.numel();
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        if (n > coords_per_node) {
            rng.shuffle(idx);
            idx.resize(static_cast<size_t>(coords_per_node));
        }
        for (int64_t k : idx) {
            double orig = t.data[static_cast<size_t>(k)];
            t.data[static_cast<size_t>(k)] = orig + h;
            evaluate(g, bound, plus);
            t.data[static_cast<size_t>(k)] = orig - h;
            evaluate(g, bound, minus);
            t.data[static_cast<size_t>(k)] = orig;
            bool kink = false;
            for (int rn : relu_nodes) {
                const auto &vp = plus[static_cast<size_t>(rn)].data, &vm = minus[static_cast<size_t>(rn)].data;
                for (size_t e = 0; e < vp.size() && !kink; ++e)
                    if (vp[e] == 0.0 || vm[e] == 0.0 || (vp[e] > 0.0) != (vm[e] > 0.0)) kink = true;
                if (kink) break;
            }
            if (kink) {
                ++entry.skipped;
                continue;
            }
            double numeric = (plus[static_cast<size_t>(g.loss_node)].data[0] - minus[static_cast<size_t>(g.loss_node)].data[0]) / (2.0 * h);
            double analytic = grads[static_cast<size_t>(i)].data[static_cast<size_t>(k)];
            double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
            entry.max_rel_err = std::max(entry.max_rel_err, std::fabs(analytic - numeric) / denom);
            ++entry.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.checked += entry.checked;
        report.skipped += entry.skipped;
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

}  // namespace tapm
