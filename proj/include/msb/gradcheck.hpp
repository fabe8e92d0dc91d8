#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msb/tensor.hpp"

namespace msb {

// A named view of one parameter block together with its analytic gradient.
template <typename T>
struct ParamView {
    std::string name;
    T* value = nullptr;
    const T* grad = nullptr;
    std::size_t count = 0;
};

template <typename T>
struct GradCheckResult {
    T max_rel_error = T(0);
    std::string worst_param;
    std::size_t worst_index = 0;
    T worst_analytic = T(0);
    T worst_numeric = T(0);
};

// Central-difference verification of analytic gradients. For every parameter
// cell, compares the provided gradient against (L(p+eps) - L(p-eps)) / (2 eps)
// with relative error |a - n| / max(|a|, |n|, 1e-8). The loss callback must be
// deterministic; parameters are restored exactly after probing. A larger
// denominator floor can be supplied when the forward pass runs in 32-bit
// arithmetic and small gradients drown in rounding noise.
template <typename T, typename LossFn>
GradCheckResult<T> finite_difference_check(LossFn&& loss, std::span<const ParamView<T>> params,
                                           T eps, T denom_floor = T(1e-8)) {
    if (!(eps > T(0))) throw ConfigError("finite_difference_check: epsilon must be > 0");
    GradCheckResult<T> result;
    for (const ParamView<T>& p : params) {
        for (std::size_t i = 0; i < p.count; ++i) {
            const T orig = p.value[i];
            p.value[i] = orig + eps;
            const T lp = loss();
            p.value[i] = orig - eps;
            const T lm = loss();
            p.value[i] = orig;
            if (!std::isfinite(static_cast<double>(lp)) ||
                !std::isfinite(static_cast<double>(lm))) {
                throw NumericError("finite_difference_check: non-finite loss probing " + p.name +
                                   "[" + std::to_string(i) + "]");
            }
            const T numeric = (lp - lm) / (T(2) * eps);
            const T analytic = p.grad[i];
            const T denom = std::max({std::abs(analytic), std::abs(numeric), denom_floor});
            const T rel = std::abs(analytic - numeric) / denom;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = p.name;
                result.worst_index = i;
                result.worst_analytic = analytic;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

// Convenience views over the common parameter containers.
template <typename T>
ParamView<T> view_of(const std::string& name, std::vector<T>& value, const std::vector<T>& grad) {
    return ParamView<T>{name, value.data(), grad.data(), value.size()};
}

template <typename T>
void append_filter_views(std::vector<ParamView<T>>& views, const std::string& name,
                         Filter<T>& value, const Filter<T>& grad) {
    views.push_back(view_of(name + ".weight", value.weights, grad.weights));
    if (value.has_bias()) views.push_back(view_of(name + ".bias", value.bias, grad.bias));
}

}  // namespace msb
