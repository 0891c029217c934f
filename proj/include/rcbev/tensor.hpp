#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcbev {

/// Dense row-major tensor of doubles with an explicit shape.
/// The single value carrier for every operator in this library.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<size_t>(numel_of(shape_)) != data_.size()) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int i, int j) {
        assert(rank() == 2);
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const {
        assert(rank() == 2);
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double& at(int c, int y, int x) {
        assert(rank() == 3);
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at(int c, int y, int x) const {
        assert(rank() == 3);
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    /// Pointer to row i of a rank-2 tensor.
    double* row(int i) { return data_.data() + static_cast<size_t>(i) * shape_[1]; }
    const double* row(int i) const { return data_.data() + static_cast<size_t>(i) * shape_[1]; }

    /// Pointer to channel plane c of a rank-3 (C,H,W) tensor.
    double* plane(int c) { return data_.data() + static_cast<size_t>(c) * shape_[1] * shape_[2]; }
    const double* plane(int c) const {
        return data_.data() + static_cast<size_t>(c) * shape_[1] * shape_[2];
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != size()) {
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Tensor& operator+=(const Tensor& o) {
        assert(same_shape(o));
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Deterministic RNG. The uint64->double mappings are written out explicitly
/// so streams are pinned by this code alone, not by libstdc++ distribution
/// internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        assert(n > 0);
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    /// Poisson-distributed count. Large rates are split into chunks
    /// (Poisson(a+b) = Poisson(a) + Poisson(b)) so the product-of-uniforms
    /// inversion never underflows.
    int poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        int k = 0;
        while (lambda > 30.0) {
            k += poisson_small(30.0);
            lambda -= 30.0;
        }
        return k + poisson_small(lambda);
    }

    int poisson_small(double lambda) {
        const double limit = std::exp(-lambda);
        double prod = uniform();
        int k = 0;
        while (prod > limit) {
            prod *= uniform();
            ++k;
        }
        return k;
    }

    /// Fisher-Yates shuffle of index vector [0, n).
    std::vector<int> permutation(int n) {
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(uniform_int(i + 1));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        return idx;
    }

private:
    uint64_t state_;
};

inline Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * stddev;
    return t;
}

inline Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// A trainable tensor paired with its gradient accumulator.
struct Param {
    Tensor value;
    Tensor grad;

    Param() = default;
    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad.fill(0.0); }
};

struct NamedParam {
    std::string name;
    Param* p;
};

/// Weight (out x in) plus bias (out) of one affine layer.
struct LinearParams {
    Param weight;
    Param bias;

    LinearParams() = default;
    LinearParams(int out_dim, int in_dim)
        : weight(Tensor::zeros({out_dim, in_dim})), bias(Tensor::zeros({out_dim})) {}

    int in_dim() const { return weight.value.dim(1); }
    int out_dim() const { return weight.value.dim(0); }

    /// Kaiming-style init scaled by fan-in; bias zero.
    void init(Rng& rng, double gain = 1.0) {
        double s = gain / std::sqrt(static_cast<double>(in_dim()));
        for (int64_t i = 0; i < weight.value.size(); ++i) weight.value[i] = rng.normal() * s;
        bias.value.fill(0.0);
    }

    static LinearParams identity(int n) {
        LinearParams p(n, n);
        for (int i = 0; i < n; ++i) p.weight.value.at(i, i) = 1.0;
        return p;
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &weight});
        out.push_back({prefix + ".b", &bias});
    }
};

}  // namespace rcbev
