// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "postadapt/errors.hpp"
#include "postadapt/rng.hpp"

namespace postadapt {

using dvec = std::vector<double>;
using fvec = std::vector<float>;

// Dense row-major float32 matrix. Storage is 32-bit; reductions over matrix
// data accumulate in 64-bit (see matvec/vecmat below).
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
        if (r <= 0 || c <= 0) throw DimMismatch("Mat dims must be positive");
    }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }
    std::span<float> row(int r) {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return data.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    static Mat gaussian(int r, int c, double std_dev, Rng& rng) {
        Mat m(r, c);
        for (auto& v : m.data) v = static_cast<float>(std_dev * rng.gaussian());
        return m;
    }
};

inline bool operator==(const Mat& a, const Mat& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

inline void check_finite(const Mat& m, const std::string& name) {
    for (float v : m.data) {
        if (!std::isfinite(v)) throw ValidationError("non-finite value in " + name);
    }
}

// y = M x, 64-bit accumulation per output coordinate.
template <typename T>
dvec matvec(const Mat& m, std::span<const T> x) {
    if (static_cast<int>(x.size()) != m.cols) throw DimMismatch("matvec: dim mismatch");
    dvec y(static_cast<size_t>(m.rows));
    for (int r = 0; r < m.rows; ++r) {
        const float* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += static_cast<double>(row[c]) * static_cast<double>(x[c]);
        y[static_cast<size_t>(r)] = acc;
    }
    return y;
}

// y = M^T x  (i.e. y_c = sum_r x_r * M[r][c]), 64-bit accumulation.
template <typename T>
dvec vecmat(std::span<const T> x, const Mat& m) {
    if (static_cast<int>(x.size()) != m.rows) throw DimMismatch("vecmat: dim mismatch");
    dvec y(static_cast<size_t>(m.cols), 0.0);
    for (int r = 0; r < m.rows; ++r) {
        const float* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        const double xv = static_cast<double>(x[static_cast<size_t>(r)]);
        if (xv == 0.0) continue;
        for (int c = 0; c < m.cols; ++c) y[static_cast<size_t>(c)] += xv * static_cast<double>(row[c]);
    }
    return y;
}

inline dvec to_dvec(std::span<const float> x) { return dvec(x.begin(), x.end()); }

} // namespace postadapt
