#pragma once

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace msb {

// Thrown when tensor shapes do not line up (e.g. channel mismatch).
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown for invalid configuration values (kernel larger than input,
// non-increasing dilation rates, bad anchor layouts, ...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown on file-format or filesystem problems.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown when a numeric routine meets a non-finite value it cannot handle.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense rank-4 feature map in NCHW layout, w fastest.
template <typename T = float>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;

    Tensor(int n_, int c_, int h_, int w_, T fill = T(0)) : n(n_), c(c_), h(h_), w(w_) {
        if (n < 1 || c < 1 || h < 1 || w < 1) {
            throw ShapeError("tensor dims must all be >= 1, got (" + dims_str() + ")");
        }
        v.assign(count(), fill);
    }

    static Tensor full(int n, int c, int h, int w, T value) { return Tensor(n, c, h, w, value); }

    std::size_t count() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
               static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }

    std::size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
    }

    T& at(int in, int ic, int ih, int iw) { return v[index(in, ic, ih, iw)]; }
    const T& at(int in, int ic, int ih, int iw) const { return v[index(in, ic, ih, iw)]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string dims_str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }

    bool all_finite() const {
        for (const T& x : v) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.n = n;
        out.c = c;
        out.h = h;
        out.w = w;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

// Convolution filter. Kernel extents must be odd so that "same" padding
// (pad = r*(k-1)/2) keeps spatial resolution.
template <typename T = float>
struct Filter {
    int out_channels = 0, in_channels = 0, kernel_h = 0, kernel_w = 0;
    std::vector<T> weights;  // [out][in][kh][kw], kw fastest
    std::vector<T> bias;     // empty or one per out channel

    Filter() = default;

    Filter(int co, int ci, int kh, int kw, bool with_bias = true)
        : out_channels(co), in_channels(ci), kernel_h(kh), kernel_w(kw) {
        if (co < 1 || ci < 1 || kh < 1 || kw < 1) {
            throw ShapeError("filter dims must all be >= 1");
        }
        if (kh % 2 == 0 || kw % 2 == 0) {
            throw ConfigError("filter kernel extents must be odd, got " + std::to_string(kh) +
                              "x" + std::to_string(kw));
        }
        weights.assign(static_cast<std::size_t>(co) * ci * kh * kw, T(0));
        if (with_bias) bias.assign(static_cast<std::size_t>(co), T(0));
    }

    bool has_bias() const { return !bias.empty(); }

    std::size_t weight_count() const { return weights.size(); }
    std::size_t param_count() const { return weights.size() + bias.size(); }

    std::size_t windex(int co, int ci, int u, int v) const {
        return ((static_cast<std::size_t>(co) * in_channels + ci) * kernel_h + u) * kernel_w + v;
    }

    T& weight(int co, int ci, int u, int v) { return weights[windex(co, ci, u, v)]; }
    const T& weight(int co, int ci, int u, int v) const { return weights[windex(co, ci, u, v)]; }

    template <typename U>
    Filter<U> cast() const {
        Filter<U> out(out_channels, in_channels, kernel_h, kernel_w, has_bias());
        for (std::size_t i = 0; i < weights.size(); ++i) out.weights[i] = static_cast<U>(weights[i]);
        for (std::size_t i = 0; i < bias.size(); ++i) out.bias[i] = static_cast<U>(bias[i]);
        return out;
    }
};

// Geometry of one convolution application.
struct ConvSpec {
    int dilation = 1;
    int stride = 1;
    int padding = 0;  // zeros added on each of the four sides

    void validate() const {
        if (dilation < 1) throw ConfigError("dilation must be >= 1");
        if (stride < 1) throw ConfigError("stride must be >= 1");
        if (padding < 0) throw ConfigError("padding must be >= 0");
    }
};

// Padding that keeps spatial resolution for an odd kernel at dilation r.
inline int same_padding(int kernel, int dilation) {
    return dilation * (kernel - 1) / 2;
}

}  // namespace msb
