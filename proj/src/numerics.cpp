// SPDX-License-Identifier: Apache-2.0
#include "postadapt/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace postadapt {

namespace {

template <typename T>
dvec log_softmax_impl(std::span<const T> v) {
    if (v.empty()) throw DimMismatch("log_softmax: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x))) throw ValidationError("log_softmax: non-finite input");
        mx = std::max(mx, static_cast<double>(x));
    }
    double sum = 0.0;
    for (T x : v) sum += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(sum);
    dvec out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]) - lse;
    return out;
}

} // namespace

dvec log_softmax(std::span<const double> v) { return log_softmax_impl(v); }
dvec log_softmax(std::span<const float> v) { return log_softmax_impl(v); }

dvec softmax(std::span<const double> v) {
    dvec out = log_softmax(v);
    for (double& x : out) x = std::exp(x);
    return out;
}

OptimizerState OptimizerState::like(std::span<const Mat* const> params) {
    OptimizerState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const Mat* p : params) {
        st.m.emplace_back(p->rows, p->cols);
        st.v.emplace_back(p->rows, p->cols);
    }
    return st;
}

void adamw_step(std::span<Mat* const> params, std::span<const Mat> grads,
                OptimizerState& state, const AdamWConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw DimMismatch("adamw_step: parameter/gradient count mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t t = 0; t < params.size(); ++t) {
        Mat& p = *params[t];
        const Mat& g = grads[t];
        if (!p.same_shape(g) || !p.same_shape(state.m[t]))
            throw DimMismatch("adamw_step: shape mismatch in tensor " + std::to_string(t));
        Mat& m = state.m[t];
        Mat& v = state.v[t];
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = g.data[i];
            const double mi = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double pv = p.data[i];
            p.data[i] = static_cast<float>(pv - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps)
                                              - cfg.lr * cfg.weight_decay * pv);
        }
    }
}

double global_norm(std::span<const Mat> grads) {
    double acc = 0.0;
    for (const Mat& g : grads)
        for (float x : g.data) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

double clip_global_norm(std::span<Mat> grads, double max_norm) {
    if (max_norm <= 0.0) throw ValidationError("clip_global_norm: max_norm must be positive");
    const double norm = global_norm({grads.data(), grads.size()});
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (Mat& g : grads)
            for (float& x : g.data) x = static_cast<float>(x * scale);
    }
    return norm;
}

std::vector<double> finite_diff(const std::function<double(std::span<const float>)>& f,
                                std::span<const float> params, double eps) {
    if (eps <= 0.0) throw ValidationError("finite_diff: eps must be positive");
    std::vector<float> work(params.begin(), params.end());
    std::vector<double> grad(params.size());
    for (size_t i = 0; i < work.size(); ++i) {
        const float orig = work[i];
        work[i] = static_cast<float>(static_cast<double>(orig) + eps);
        const double xp = work[i];
        const double fp = f(work);
        work[i] = static_cast<float>(static_cast<double>(orig) - eps);
        const double xm = work[i];
        const double fm = f(work);
        work[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw ValidationError("finite_diff: non-finite function evaluation");
        // Divide by the realized step: the perturbed values are quantized to
        // f32, and 2*eps would misstate the step by up to one ulp.
        if (xp == xm) throw ValidationError("finite_diff: eps vanishes at f32 precision");
        grad[i] = (fp - fm) / (xp - xm);
    }
    return grad;
}

double max_rel_error(std::span<const double> analytic, std::span<const double> numeric) {
    if (analytic.size() != numeric.size()) throw DimMismatch("max_rel_error: length mismatch");
    double scale = 1e-12;
    for (size_t i = 0; i < analytic.size(); ++i)
        scale = std::max({scale, std::fabs(analytic[i]), std::fabs(numeric[i])});
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / scale);
    return worst;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double sigmoid_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s);
}

double silu(double x) { return x * sigmoid(x); }

double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

} // namespace postadapt
