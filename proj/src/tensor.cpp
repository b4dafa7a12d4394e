#include "mmvit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mmvit {

int64_t Tensor::checked_numel(const std::vector<int>& shp) {
    int64_t n = 1;
    for (int e : shp) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_to_string(shp));
        n *= e;
        if (n > (int64_t(1) << 34))
            throw DimensionError("tensor too large: shape " + shape_to_string(shp));
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty() || rows[0].empty()) throw DimensionError("matrix(): empty rows");
    Tensor t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw DimensionError("matrix(): ragged rows");
        for (size_t c = 0; c < rows[r].size(); ++c) t.data[r * rows[0].size() + c] = rows[r][c];
    }
    return t;
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "tensor +");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "tensor -");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor operator*(double k, const Tensor& a) {
    Tensor out = a;
    for (double& x : out.data) x *= k;
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

bool all_finite(const Tensor& t) {
    for (double x : t.data)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace mmvit
