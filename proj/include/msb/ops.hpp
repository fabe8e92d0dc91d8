#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "msb/tensor.hpp"

namespace msb {

namespace detail {

// C (MxN) += A (MxK) * B (KxN), row-major.
template <typename T>
void gemm_nn_acc(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::size_t>(i) * K;
        T* c = C + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C (MxN) += A (MxK) * B^T with B stored (NxK): C[i][j] += dot(A row i, B row j).
template <typename T>
void gemm_nt_acc(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::size_t>(i) * K;
        T* c = C + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::size_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C (MxN) += A^T * B with A stored (KxM), B (KxN): C[i][j] += sum_t A[t][i]*B[t][j].
template <typename T>
void gemm_tn_acc(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int t = 0; t < K; ++t) {
        const T* a = A + static_cast<std::size_t>(t) * M;
        const T* b = B + static_cast<std::size_t>(t) * N;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// Unfold one batch item into a (C*kh*kw) x (out_h*out_w) patch matrix.
template <typename T>
void im2col(const Tensor<T>& in, int batch, int kh, int kw, const ConvSpec& s, int out_h,
            int out_w, T* cols) {
    const int H = in.h, W = in.w, C = in.c;
    const T* base = in.data() + static_cast<std::size_t>(batch) * C * H * W;
    T* col = cols;
    for (int c = 0; c < C; ++c) {
        const T* plane = base + static_cast<std::size_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * s.stride - s.padding + u * s.dilation;
                    if (ih < 0 || ih >= H) {
                        std::fill(col, col + out_w, T(0));
                        col += out_w;
                        continue;
                    }
                    const T* row = plane + static_cast<std::size_t>(ih) * W;
                    for (int ow = 0; ow < out_w; ++ow) {
                        const int iw = ow * s.stride - s.padding + v * s.dilation;
                        col[ow] = (iw >= 0 && iw < W) ? row[iw] : T(0);
                    }
                    col += out_w;
                }
            }
        }
    }
}

// Scatter-add a patch-matrix gradient back onto one batch item.
template <typename T>
void col2im_acc(const T* cols, int C, int H, int W, int kh, int kw, const ConvSpec& s, int out_h,
                int out_w, T* grad) {
    const T* col = cols;
    for (int c = 0; c < C; ++c) {
        T* plane = grad + static_cast<std::size_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * s.stride - s.padding + u * s.dilation;
                    if (ih < 0 || ih >= H) {
                        col += out_w;
                        continue;
                    }
                    T* row = plane + static_cast<std::size_t>(ih) * W;
                    for (int ow = 0; ow < out_w; ++ow) {
                        const int iw = ow * s.stride - s.padding + v * s.dilation;
                        if (iw >= 0 && iw < W) row[iw] += col[ow];
                    }
                    col += out_w;
                }
            }
        }
    }
}

}  // namespace detail

struct ConvOutShape {
    int h = 0, w = 0;
};

template <typename T>
ConvOutShape conv2d_output_shape(const Tensor<T>& input, const Filter<T>& filter,
                                 const ConvSpec& spec) {
    spec.validate();
    if (filter.in_channels != input.c) {
        throw ShapeError("conv2d: filter expects " + std::to_string(filter.in_channels) +
                         " input channels, tensor has " + std::to_string(input.c));
    }
    const int eff_h = (filter.kernel_h - 1) * spec.dilation + 1;
    const int eff_w = (filter.kernel_w - 1) * spec.dilation + 1;
    if (eff_h > input.h + 2 * spec.padding || eff_w > input.w + 2 * spec.padding) {
        throw ConfigError("conv2d: effective kernel " + std::to_string(eff_h) + "x" +
                          std::to_string(eff_w) + " exceeds padded input " +
                          std::to_string(input.h + 2 * spec.padding) + "x" +
                          std::to_string(input.w + 2 * spec.padding));
    }
    return {(input.h + 2 * spec.padding - eff_h) / spec.stride + 1,
            (input.w + 2 * spec.padding - eff_w) / spec.stride + 1};
}

// Dilated 2-D convolution with zero padding:
//   out[n,co,y,x] = bias[co] + sum_{ci,u,v} in[n,ci, y*s-p+u*r, x*s-p+v*r] * W[co,ci,u,v]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Filter<T>& filter, const ConvSpec& spec = {}) {
    const ConvOutShape os = conv2d_output_shape(input, filter, spec);
    Tensor<T> out(input.n, filter.out_channels, os.h, os.w);

    const int K = input.c * filter.kernel_h * filter.kernel_w;
    const int Q = os.h * os.w;
    std::vector<T> cols(static_cast<std::size_t>(K) * Q);
    for (int b = 0; b < input.n; ++b) {
        detail::im2col(input, b, filter.kernel_h, filter.kernel_w, spec, os.h, os.w, cols.data());
        T* o = out.data() + static_cast<std::size_t>(b) * filter.out_channels * Q;
        if (filter.has_bias()) {
            for (int co = 0; co < filter.out_channels; ++co) {
                std::fill(o + static_cast<std::size_t>(co) * Q,
                          o + static_cast<std::size_t>(co + 1) * Q, filter.bias[co]);
            }
        }
        detail::gemm_nn_acc(filter.out_channels, Q, K, filter.weights.data(), cols.data(), o);
    }
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Filter<T> filter;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Filter<T>& filter, const ConvSpec& spec,
                             const Tensor<T>& upstream) {
    const ConvOutShape os = conv2d_output_shape(input, filter, spec);
    if (upstream.n != input.n || upstream.c != filter.out_channels || upstream.h != os.h ||
        upstream.w != os.w) {
        throw ShapeError("conv2d_backward: upstream shape " + upstream.dims_str() +
                         " does not match forward output");
    }

    ConvGrads<T> g{Tensor<T>(input.n, input.c, input.h, input.w),
                   Filter<T>(filter.out_channels, filter.in_channels, filter.kernel_h,
                             filter.kernel_w, filter.has_bias())};

    const int K = input.c * filter.kernel_h * filter.kernel_w;
    const int Q = os.h * os.w;
    std::vector<T> cols(static_cast<std::size_t>(K) * Q);
    std::vector<T> gcols(static_cast<std::size_t>(K) * Q);
    for (int b = 0; b < input.n; ++b) {
        detail::im2col(input, b, filter.kernel_h, filter.kernel_w, spec, os.h, os.w, cols.data());
        const T* up = upstream.data() + static_cast<std::size_t>(b) * filter.out_channels * Q;
        detail::gemm_nt_acc(filter.out_channels, K, Q, up, cols.data(), g.filter.weights.data());
        if (filter.has_bias()) {
            for (int co = 0; co < filter.out_channels; ++co) {
                const T* row = up + static_cast<std::size_t>(co) * Q;
                T acc = T(0);
                for (int q = 0; q < Q; ++q) acc += row[q];
                g.filter.bias[co] += acc;
            }
        }
        std::fill(gcols.begin(), gcols.end(), T(0));
        detail::gemm_tn_acc(K, Q, filter.out_channels, filter.weights.data(), up, gcols.data());
        detail::col2im_acc(gcols.data(), input.c, input.h, input.w, filter.kernel_h,
                           filter.kernel_w, spec, os.h, os.w,
                           g.input.data() + static_cast<std::size_t>(b) * input.c * input.h *
                                                input.w);
    }
    return g;
}

// Mean over (h, w) per (n, c); result shaped (n, c, 1, 1).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    Tensor<T> out(input.n, input.c, 1, 1);
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    const T inv = T(1) / static_cast<T>(plane);
    for (int b = 0; b < input.n; ++b) {
        for (int c = 0; c < input.c; ++c) {
            const T* p = input.data() + (static_cast<std::size_t>(b) * input.c + c) * plane;
            T acc = T(0);
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            out.at(b, c, 0, 0) = acc * inv;
        }
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& input, const Tensor<T>& upstream) {
    if (upstream.n != input.n || upstream.c != input.c || upstream.h != 1 || upstream.w != 1) {
        throw ShapeError("global_avg_pool_backward: upstream must be (n, c, 1, 1)");
    }
    Tensor<T> g(input.n, input.c, input.h, input.w);
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    const T inv = T(1) / static_cast<T>(plane);
    for (int b = 0; b < input.n; ++b) {
        for (int c = 0; c < input.c; ++c) {
            T* p = g.data() + (static_cast<std::size_t>(b) * input.c + c) * plane;
            const T v = upstream.at(b, c, 0, 0) * inv;
            std::fill(p, p + plane, v);
        }
    }
    return g;
}

// Per-pixel max over channels; result shaped (n, 1, h, w).
template <typename T>
Tensor<T> channel_max_pool(const Tensor<T>& input) {
    Tensor<T> out(input.n, 1, input.h, input.w);
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int b = 0; b < input.n; ++b) {
        const T* base = input.data() + static_cast<std::size_t>(b) * input.c * plane;
        T* o = out.data() + static_cast<std::size_t>(b) * plane;
        std::copy(base, base + plane, o);
        for (int c = 1; c < input.c; ++c) {
            const T* p = base + static_cast<std::size_t>(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] = std::max(o[i], p[i]);
        }
    }
    return out;
}

// Gradient routes to the lowest-index channel attaining the max (deterministic ties).
template <typename T>
Tensor<T> channel_max_pool_backward(const Tensor<T>& input, const Tensor<T>& upstream) {
    if (upstream.n != input.n || upstream.c != 1 || upstream.h != input.h ||
        upstream.w != input.w) {
        throw ShapeError("channel_max_pool_backward: upstream must be (n, 1, h, w)");
    }
    Tensor<T> g(input.n, input.c, input.h, input.w);
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int b = 0; b < input.n; ++b) {
        const T* base = input.data() + static_cast<std::size_t>(b) * input.c * plane;
        const T* up = upstream.data() + static_cast<std::size_t>(b) * plane;
        T* gb = g.data() + static_cast<std::size_t>(b) * input.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            int best = 0;
            T bv = base[i];
            for (int c = 1; c < input.c; ++c) {
                const T v = base[static_cast<std::size_t>(c) * plane + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            gb[static_cast<std::size_t>(best) * plane + i] = up[i];
        }
    }
    return g;
}

template <typename T>
Tensor<T> elementwise_add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("elementwise_add: shape mismatch " + a.dims_str() + " vs " +
                         b.dims_str());
    }
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
    return out;
}

enum class GateKind { Channel, Spatial };

template <typename T>
GateKind classify_gate(const Tensor<T>& input, const Tensor<T>& gate) {
    if (gate.n == input.n && gate.c == input.c && gate.h == 1 && gate.w == 1) {
        return GateKind::Channel;
    }
    if (gate.n == input.n && gate.c == 1 && gate.h == input.h && gate.w == input.w) {
        return GateKind::Spatial;
    }
    throw ShapeError("broadcast_mul: gate " + gate.dims_str() +
                     " is neither a channel gate (n,c,1,1) nor a spatial gate (n,1,h,w) for "
                     "input " +
                     input.dims_str());
}

// Cellwise product with the gate replicated along its unit axes.
template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& input, const Tensor<T>& gate) {
    const GateKind kind = classify_gate(input, gate);
    Tensor<T> out = input;
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int b = 0; b < input.n; ++b) {
        for (int c = 0; c < input.c; ++c) {
            T* o = out.data() + (static_cast<std::size_t>(b) * input.c + c) * plane;
            if (kind == GateKind::Channel) {
                const T gv = gate.at(b, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) o[i] *= gv;
            } else {
                const T* gp = gate.data() + static_cast<std::size_t>(b) * plane;
                for (std::size_t i = 0; i < plane; ++i) o[i] *= gp[i];
            }
        }
    }
    return out;
}

template <typename T>
struct BroadcastMulGrads {
    Tensor<T> input;
    Tensor<T> gate;
};

template <typename T>
BroadcastMulGrads<T> broadcast_mul_backward(const Tensor<T>& input, const Tensor<T>& gate,
                                            const Tensor<T>& upstream) {
    if (!upstream.same_shape(input)) {
        throw ShapeError("broadcast_mul_backward: upstream shape mismatch");
    }
    const GateKind kind = classify_gate(input, gate);
    BroadcastMulGrads<T> g{Tensor<T>(input.n, input.c, input.h, input.w),
                           Tensor<T>(gate.n, gate.c, gate.h, gate.w)};
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int b = 0; b < input.n; ++b) {
        for (int c = 0; c < input.c; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * input.c + c) * plane;
            const T* in = input.data() + off;
            const T* up = upstream.data() + off;
            T* gi = g.input.data() + off;
            if (kind == GateKind::Channel) {
                const T gv = gate.at(b, c, 0, 0);
                T acc = T(0);
                for (std::size_t i = 0; i < plane; ++i) {
                    gi[i] = up[i] * gv;
                    acc += up[i] * in[i];
                }
                g.gate.at(b, c, 0, 0) += acc;
            } else {
                const T* gp = gate.data() + static_cast<std::size_t>(b) * plane;
                T* gg = g.gate.data() + static_cast<std::size_t>(b) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    gi[i] = up[i] * gp[i];
                    gg[i] += up[i] * in[i];
                }
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no parts");
    int channels = parts[0].c;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (parts[i].n != parts[0].n || parts[i].h != parts[0].h || parts[i].w != parts[0].w) {
            throw ShapeError("concat_channels: part " + std::to_string(i) + " shape " +
                             parts[i].dims_str() + " does not match " + parts[0].dims_str());
        }
        channels += parts[i].c;
    }
    Tensor<T> out(parts[0].n, channels, parts[0].h, parts[0].w);
    const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
    for (int b = 0; b < out.n; ++b) {
        T* o = out.data() + static_cast<std::size_t>(b) * channels * plane;
        for (const Tensor<T>& p : parts) {
            const T* src = p.data() + static_cast<std::size_t>(b) * p.c * plane;
            std::copy(src, src + static_cast<std::size_t>(p.c) * plane, o);
            o += static_cast<std::size_t>(p.c) * plane;
        }
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> parts) {
    std::vector<Tensor<T>> copies;
    copies.reserve(parts.size());
    for (const Tensor<T>* p : parts) copies.push_back(*p);
    return concat_channels(std::span<const Tensor<T>>(copies));
}

// Channel range [begin, end) of the input, as a fresh tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int begin, int end) {
    if (begin < 0 || end > input.c || begin >= end) {
        throw ShapeError("slice_channels: bad range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") for " + std::to_string(input.c) + " channels");
    }
    Tensor<T> out(input.n, end - begin, input.h, input.w);
    const std::size_t plane = static_cast<std::size_t>(input.h) * input.w;
    for (int b = 0; b < input.n; ++b) {
        const T* src =
            input.data() + (static_cast<std::size_t>(b) * input.c + begin) * plane;
        T* dst = out.data() + static_cast<std::size_t>(b) * out.c * plane;
        std::copy(src, src + static_cast<std::size_t>(out.c) * plane, dst);
    }
    return out;
}

// Nearest-neighbor upsampling by 2: out[n,c,y,x] = in[n,c,y/2,x/2].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
    Tensor<T> out(input.n, input.c, input.h * 2, input.w * 2);
    for (int b = 0; b < input.n; ++b) {
        for (int c = 0; c < input.c; ++c) {
            for (int y = 0; y < out.h; ++y) {
                const T* src = &input.at(b, c, y / 2, 0);
                T* dst = &out.at(b, c, y, 0);
                for (int x = 0; x < out.w; ++x) dst[x] = src[x / 2];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& upstream) {
    if (upstream.h % 2 != 0 || upstream.w % 2 != 0) {
        throw ShapeError("upsample_nearest2x_backward: upstream spatial dims must be even");
    }
    Tensor<T> g(upstream.n, upstream.c, upstream.h / 2, upstream.w / 2);
    for (int b = 0; b < upstream.n; ++b) {
        for (int c = 0; c < upstream.c; ++c) {
            for (int y = 0; y < upstream.h; ++y) {
                const T* src = &upstream.at(b, c, y, 0);
                T* dst = &g.at(b, c, y / 2, 0);
                for (int x = 0; x < upstream.w; ++x) dst[x / 2] += src[x];
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    Tensor<T> out = input;
    for (T& x : out.v) x = T(1) / (T(1) + std::exp(-x));
    return out;
}

// Takes the forward *output* so the derivative reuses y*(1-y).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& output, const Tensor<T>& upstream) {
    if (!output.same_shape(upstream)) throw ShapeError("sigmoid_backward: shape mismatch");
    Tensor<T> g = upstream;
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] *= output.v[i] * (T(1) - output.v[i]);
    return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out = input;
    for (T& x : out.v) x = std::max(x, T(0));
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& upstream) {
    if (!input.same_shape(upstream)) throw ShapeError("relu_backward: shape mismatch");
    Tensor<T> g = upstream;
    for (std::size_t i = 0; i < g.v.size(); ++i) {
        if (input.v[i] <= T(0)) g.v[i] = T(0);
    }
    return g;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    if (!dst.same_shape(src)) throw ShapeError("add_into: shape mismatch");
    for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

template <typename T>
void add_into(Filter<T>& dst, const Filter<T>& src) {
    for (std::size_t i = 0; i < dst.weights.size(); ++i) dst.weights[i] += src.weights[i];
    for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
}

}  // namespace msb
