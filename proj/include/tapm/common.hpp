// Shared plumbing: error type with exit-code categories, deterministic RNG,
// content digests, a tiny thread helper and number formatting.
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tapm {

struct Error : std::runtime_error {
    // Categories map onto the CLI exit codes: config=2, dependency=3, numeric=4.
    enum class Kind { config, dependency, numeric, invalid };
    Kind kind;
    Error(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

template <class... A>
std::string cat(A&&... a) {
    std::ostringstream o;
    (o << ... << a);
    return o.str();
}

[[noreturn]] inline void fail_config(const std::string& m) { throw Error(Error::Kind::config, m); }
[[noreturn]] inline void fail_dependency(const std::string& m) { throw Error(Error::Kind::dependency, m); }
[[noreturn]] inline void fail_numeric(const std::string& m) { throw Error(Error::Kind::numeric, m); }
[[noreturn]] inline void fail_invalid(const std::string& m) { throw Error(Error::Kind::invalid, m); }

inline void require(bool ok, const std::string& m) {
    if (!ok) fail_invalid(m);
}

// FNV-1a, 64 bit. Used for cache keys, ledger digests and RNG substream
// derivation; not cryptographic, just stable and collision-safe at this scale.
struct Digest {
    uint64_t h = 1469598103934665603ull;
    void bytes(const void* p, size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ull;
        }
    }
    Digest& add(const std::string& s) {
        bytes(s.data(), s.size());
        bytes("\x1f", 1);
        return *this;
    }
    Digest& add(uint64_t v) {
        bytes(&v, sizeof v);
        return *this;
    }
    Digest& add(int64_t v) { return add(static_cast<uint64_t>(v)); }
    Digest& add(int v) { return add(static_cast<uint64_t>(static_cast<int64_t>(v))); }
    Digest& add(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        return add(bits);
    }
    uint64_t value() const { return h; }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }
};

inline uint64_t digest_bytes(const void* p, size_t n) {
    Digest d;
    d.bytes(p, n);
    return d.value();
}

inline std::string digest_file_hex(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) fail_dependency(cat("cannot open for digest: ", p.string()));
    Digest d;
    char buf[1 << 16];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) d.bytes(buf, static_cast<size_t>(f.gcount()));
    return d.hex();
}

// mt19937_64 with distributions implemented here so streams are identical on
// every standard library (std:: distributions are not pinned by the standard).
struct Rng {
    std::mt19937_64 eng;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed) : eng(seed) {}

    uint64_t next() { return eng(); }

    double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method.
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u, v, s;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare = v * f;
        has_spare = true;
        return u * f;
    }

    int uniform_int(int n) {
        require(n > 0, "uniform_int needs n > 0");
        return static_cast<int>(eng() % static_cast<uint64_t>(n));
    }

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<size_t>(uniform_int(static_cast<int>(i)))]);
    }
};

inline Rng derive_rng(uint64_t seed, const std::string& tag, uint64_t a = 0, uint64_t b = 0) {
    Digest d;
    d.add(seed).add(tag).add(a).add(b);
    return Rng(d.value());
}

// Splits [0, n) into contiguous blocks, one thread per block. Output slots are
// disjoint by construction so results do not depend on the worker count.
template <class F>
void parallel_for(int64_t n, int jobs, F&& fn) {
    if (jobs > n) jobs = static_cast<int>(n);
    if (jobs <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(jobs));
    std::exception_ptr err;
    std::mutex err_mu;
    for (int t = 0; t < jobs; ++t) {
        int64_t lo = n * t / jobs, hi = n * (t + 1) / jobs;
        workers.emplace_back([&, lo, hi] {
            try {
                for (int64_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> g(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    if (err) std::rethrow_exception(err);
}

// Shortest round-trip decimal form; keeps CSV/JSON artifacts byte-stable.
inline std::string fmt_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string fmt_fixed(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

inline std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) fail_dependency(cat("cannot read ", p.string()));
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& body) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) fail_dependency(cat("cannot write ", p.string()));
    f << body;
    if (!f) fail_dependency(cat("short write: ", p.string()));
}

}  // namespace tapm
