// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "postadapt/mat.hpp"

namespace postadapt {

// Max-subtracted log-softmax; logsumexp accumulates in 64-bit.
dvec log_softmax(std::span<const double> v);
dvec log_softmax(std::span<const float> v);
dvec softmax(std::span<const double> v);

struct AdamWConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct OptimizerState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    int64_t step = 0;

    static OptimizerState like(std::span<const Mat* const> params);
};

// Decoupled AdamW: weight decay applied directly to params, epsilon inside
// the denominator after bias correction. Updates params in place.
void adamw_step(std::span<Mat* const> params, std::span<const Mat> grads,
                OptimizerState& state, const AdamWConfig& cfg);

double global_norm(std::span<const Mat> grads);

// Scales grads in place so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::span<Mat> grads, double max_norm = 1.0);

// Central differences, one coordinate at a time over a flat parameter view.
// f must be pure; evaluations that come back non-finite are an error.
std::vector<double> finite_diff(const std::function<double(std::span<const float>)>& f,
                                std::span<const float> params, double eps = 1e-3);

// Largest per-coordinate discrepancy, normalized by the larger of the two
// gradients' max magnitudes. This is the tolerance all gradient checks use.
double max_rel_error(std::span<const double> analytic, std::span<const double> numeric);

double silu(double x);
double silu_grad(double x);
double sigmoid(double x);
double sigmoid_grad(double x);

} // namespace postadapt
