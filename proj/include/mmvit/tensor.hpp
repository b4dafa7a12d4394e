#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmvit/errors.hpp"
#include "mmvit/rng.hpp"

namespace mmvit {

// Dense row-major tensor of 64-bit floats. Rank and extents are dynamic;
// the last axis varies fastest. This is a plain value type: copying copies
// the buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
        data.assign(static_cast<size_t>(checked_numel(shape)), 0.0);
    }

    static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }

    static Tensor full(std::vector<int> shp, double v) {
        Tensor t(std::move(shp));
        for (double& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    // 2-D constructor from nested lists, for tests and hand values.
    static Tensor matrix(const std::vector<std::vector<double>>& rows);

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    // Extents of the two trailing axes, treating the tensor as a stack of
    // matrices. Rank must be >= 2 (rows/cols) or >= 1 (cols only).
    int rows() const {
        if (rank() < 2) throw DimensionError("rows(): rank " + std::to_string(rank()) + " tensor");
        return shape[shape.size() - 2];
    }
    int cols() const {
        if (rank() < 1) throw DimensionError("cols(): rank-0 tensor");
        return shape.back();
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const;

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (double& x : data) x = rng.normal(mean, stddev);
    }
    void fill_uniform(Rng& rng, double lo, double hi) {
        for (double& x : data) x = rng.uniform(lo, hi);
    }

    static int64_t checked_numel(const std::vector<int>& shp);
};

std::string shape_to_string(const std::vector<int>& shape);

// Elementwise helpers on plain tensors (the autodiff ops live in tape.hpp;
// these are for data preparation and tests).
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double k, const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

}  // namespace mmvit
