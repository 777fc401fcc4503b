#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hipt {

/// Domain error: invalid input files, contract violations, mismatched digests.
/// The CLI maps these to exit code 1 (usage errors are exit code 2).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/**
 * Dense row-major matrix of doubles. Small and value-semantic; everything in
 * this project is desk-scale (hundreds of rows at most).
 */
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void scale_inplace(std::span<double> a, double k) {
    for (double& x : a) x *= k;
}

/// Normalize to unit length. Near-zero vectors are left untouched.
inline void normalize_inplace(std::span<double> a, double eps = 1e-12) {
    double n = norm(a);
    if (n > eps) scale_inplace(a, 1.0 / n);
}

inline std::vector<double> normalized(std::span<const double> a) {
    std::vector<double> out(a.begin(), a.end());
    normalize_inplace(out);
    return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b, double eps = 1e-12) {
    double na = norm(a);
    double nb = norm(b);
    if (na < eps || nb < eps) return 0.0;
    return dot(a, b) / (na * nb);
}

/// Numerically stable softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

// ---------------------------------------------------------------------------
// Digests: FNV-1a over raw bytes, reported as a hex string. Used for frozen
// backbone checks, checkpoint/label-space binding, and input-file echoes.
// ---------------------------------------------------------------------------

class Digest {
public:
    Digest& update(const void* ptr, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(ptr);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
        return *this;
    }

    Digest& update(std::string_view s) { return update(s.data(), s.size()); }

    Digest& update(std::span<const double> v) {
        return update(v.data(), v.size() * sizeof(double));
    }

    Digest& update(double x) { return update(&x, sizeof(x)); }
    Digest& update(std::uint64_t x) { return update(&x, sizeof(x)); }

    std::uint64_t value() const { return state_; }

    std::string hex() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = state_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xF];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t hash64(std::string_view s) {
    return Digest().update(s).value();
}

/// Derive an independent sub-seed for a named RNG stream.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view tag) {
    return Digest().update(seed).update(tag).value();
}

inline void fill_gaussian(std::span<double> out, std::mt19937_64& rng, double stddev,
                          double mean = 0.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& x : out) x = dist(rng);
}

// ---------------------------------------------------------------------------
// Small string helpers for the text file formats.
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.emplace_back(s.substr(start));
            break;
        }
        parts.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return parts;
}

}  // namespace hipt
