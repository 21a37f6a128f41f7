// Dense f64 tensor plus the binary checkpoint format shared by model
// snapshots and attack cache blobs.
#pragma once

#include <algorithm>
#include <map>
#include <numeric>

#include "tapm/common.hpp"

namespace tapm {

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        require(d > 0, "tensor dims must be positive");
        n *= d;
    }
    return n;
}

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        require(static_cast<int64_t>(data.size()) == shape_numel(shape), "tensor data size does not match shape");
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        t.fill(v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out + "]";
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline uint64_t tensor_digest(const Tensor& t) {
    Digest d;
    for (int s : t.shape) d.add(s);
    d.bytes(t.data.data(), t.data.size() * sizeof(double));
    return d.value();
}

// --- elementwise helpers used all over the attack/training loops ---

inline void clamp01_inplace(Tensor& t) {
    for (double& v : t.data) v = std::min(1.0, std::max(0.0, v));
}

inline void project_linf_inplace(Tensor& x, const Tensor& center, double eps) {
    require(x.same_shape(center), "project_linf: shape mismatch");
    for (size_t i = 0; i < x.data.size(); ++i) {
        double lo = center.data[i] - eps, hi = center.data[i] + eps;
        x.data[i] = std::min(hi, std::max(lo, x.data[i]));
    }
}

inline double linf_dist(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "linf_dist: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

// --- checkpoint format ---
// "TAPM" magic, u32 version, u32 record count, then per record:
// u32 name length, name bytes, u32 rank, u32 dims..., f64 data. All little endian.

namespace detail {
inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((b >> (8 * i)) & 0xff));
}
struct ByteReader {
    const std::string& s;
    size_t pos = 0;
    std::string where;
    explicit ByteReader(const std::string& str, std::string w) : s(str), where(std::move(w)) {}
    void need(size_t n) {
        if (pos + n > s.size()) fail_invalid(cat("truncated checkpoint: ", where));
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        uint64_t b = 0;
        for (int i = 0; i < 8; ++i) b |= static_cast<uint64_t>(static_cast<unsigned char>(s[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &b, 8);
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string v = s.substr(pos, n);
        pos += n;
        return v;
    }
};
}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const std::map<std::string, Tensor>& records) {
    std::string out;
    out += "TAPM";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<uint32_t>(records.size()));
    for (const auto& [name, t] : records) {
        detail::put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(out, static_cast<uint32_t>(d));
        for (double v : t.data) detail::put_f64(out, v);
    }
    write_text_file(path, out);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path) {
    std::string raw = read_text_file(path);
    detail::ByteReader r(raw, path.string());
    if (r.str(4) != "TAPM") fail_invalid(cat("bad checkpoint magic in ", path.string()));
    uint32_t version = r.u32();
    if (version != kCheckpointVersion) fail_invalid(cat("unsupported checkpoint version ", version, " in ", path.string()));
    uint32_t count = r.u32();
    std::map<std::string, Tensor> records;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u32());
        uint32_t rank = r.u32();
        std::vector<int> shape;
        for (uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u32()));
        Tensor t(shape);
        for (double& v : t.data) v = r.f64();
        if (!records.emplace(std::move(name), std::move(t)).second)
            fail_invalid(cat("duplicate record name in ", path.string()));
    }
    if (r.pos != raw.size()) fail_invalid(cat("trailing bytes in ", path.string()));
    return records;
}

// --- translation-smoothing convolution (TI attack, blur corruption) ---
// Separable tent kernel, zero padded, normalized so the 2-D kernel sums to 1.

inline std::vector<double> tent_kernel(int size) {
    require(size >= 1 && size % 2 == 1, "tent kernel size must be odd and >= 1");
    int r = size / 2;
    std::vector<double> k(static_cast<size_t>(size));
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        k[static_cast<size_t>(i)] = 1.0 - std::fabs(i - r) / (r + 1.0);
        sum += k[static_cast<size_t>(i)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// x is [B,C,H,W]; convolves H then W with the same 1-D kernel.
inline Tensor smooth_conv2d(const Tensor& x, const std::vector<double>& k1d) {
    require(x.rank() == 4, "smooth_conv2d expects [B,C,H,W]");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int r = static_cast<int>(k1d.size()) / 2;
    Tensor tmp(x.shape), out(x.shape);
    const double* src = x.ptr();
    double* mid = tmp.ptr();
    for (int bc = 0; bc < B * C; ++bc) {
        const double* p = src + static_cast<int64_t>(bc) * H * W;
        double* q = mid + static_cast<int64_t>(bc) * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int t = -r; t <= r; ++t) {
                    int ii = i + t;
                    if (ii >= 0 && ii < H) acc += k1d[static_cast<size_t>(t + r)] * p[ii * W + j];
                }
                q[i * W + j] = acc;
            }
    }
    double* dst = out.ptr();
    for (int bc = 0; bc < B * C; ++bc) {
        const double* p = mid + static_cast<int64_t>(bc) * H * W;
        double* q = dst + static_cast<int64_t>(bc) * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int t = -r; t <= r; ++t) {
                    int jj = j + t;
                    if (jj >= 0 && jj < W) acc += k1d[static_cast<size_t>(t + r)] * p[i * W + jj];
                }
                q[i * W + j] = acc;
            }
    }
    return out;
}

}  // namespace tapm
