#include "mmvit/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace mmvit {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatR>;
using MapC = Eigen::Map<const MatR>;

const Tensor& Value::val() const { return tape->value(id); }
const Tensor& Value::grad() const { return tape->grad(id); }

Value Tape::leaf(Tensor v) { return emit(std::move(v), nullptr); }

Value Tape::emit(Tensor v, std::function<void(Tape&, NodeId)> backprop) {
    Node n;
    n.grad = Tensor(v.shape);
    n.value = std::move(v);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<NodeId>(nodes_.size() - 1)};
}

void Tape::backward(Value root) {
    if (root.tape != this) throw ContractError("backward: root belongs to a different tape");
    if (backward_done_) throw StateError("backward: tape already differentiated; build a fresh tape");
    if (value(root.id).numel() != 1)
        throw ContractError("backward: root must be scalar, got shape " + value(root.id).shape_str());
    backward_done_ = true;
    grad(root.id).data[0] = 1.0;
    for (NodeId i = root.id; i >= 0; --i) {
        auto& node = nodes_[static_cast<size_t>(i)];
        if (node.backprop) node.backprop(*this, i);
    }
}

namespace {

Tape& same_tape(Value a, Value b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ContractError(std::string(op) + ": operands must live on one tape");
    return *a.tape;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
}

}  // namespace

Value matmul(Value a, Value b) {
    Tape& t = same_tape(a, b, "matmul");
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    require_rank2(A, "matmul");
    require_rank2(B, "matmul");
    if (A.cols() != B.rows())
        throw DimensionError("matmul: inner extents differ, " + A.shape_str() + " @ " + B.shape_str());
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    MapC mA(A.data.data(), m, k), mB(B.data.data(), k, n);
    MapM(out.data.data(), m, n).noalias() = mA * mB;
    const NodeId ai = a.id, bi = b.id;
    return t.emit(std::move(out), [ai, bi, m, k, n](Tape& tp, NodeId self) {
        MapC g(tp.grad(self).data.data(), m, n);
        MapC va(tp.value(ai).data.data(), m, k);
        MapC vb(tp.value(bi).data.data(), k, n);
        MapM(tp.grad(ai).data.data(), m, k).noalias() += g * vb.transpose();
        MapM(tp.grad(bi).data.data(), k, n).noalias() += va.transpose() * g;
    });
}

Value add(Value a, Value b) {
    Tape& t = same_tape(a, b, "add");
    if (!a.val().same_shape(b.val()))
        throw DimensionError("add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
    Tensor out = a.val();
    const double* pb = b.val().data.data();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += pb[i];
    const NodeId ai = a.id, bi = b.id;
    return t.emit(std::move(out), [ai, bi](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& ga = tp.grad(ai).data;
        auto& gb = tp.grad(bi).data;
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

Value mul(Value a, Value b) {
    Tape& t = same_tape(a, b, "mul");
    if (!a.val().same_shape(b.val()))
        throw DimensionError("mul: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
    Tensor out = a.val();
    const double* pb = b.val().data.data();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= pb[i];
    const NodeId ai = a.id, bi = b.id;
    return t.emit(std::move(out), [ai, bi](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        const auto& va = tp.value(ai).data;
        const auto& vb = tp.value(bi).data;
        auto& ga = tp.grad(ai).data;
        auto& gb = tp.grad(bi).data;
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * vb[i];
            gb[i] += g[i] * va[i];
        }
    });
}

Value add_rowvec(Value a, Value v) {
    Tape& t = same_tape(a, v, "add_rowvec");
    const Tensor& A = a.val();
    const Tensor& B = v.val();
    if (B.rank() != 1)
        throw DimensionError("add_rowvec: vector must be rank 1, got " + B.shape_str());
    const int n = B.dim(0);
    if (A.rank() < 1 || A.cols() != n)
        throw DimensionError("add_rowvec: trailing extent of " + A.shape_str() + " != " + B.shape_str());
    Tensor out = A;
    const int64_t rows = A.numel() / n;
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < n; ++c) out.data[static_cast<size_t>(r) * n + c] += B.data[static_cast<size_t>(c)];
    const NodeId ai = a.id, vi = v.id;
    return t.emit(std::move(out), [ai, vi, rows, n](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& ga = tp.grad(ai).data;
        auto& gv = tp.grad(vi).data;
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < n; ++c) {
                const size_t i = static_cast<size_t>(r) * n + c;
                ga[i] += g[i];
                gv[static_cast<size_t>(c)] += g[i];
            }
    });
}

Value scale(Value a, double k) {
    Tensor out = a.val();
    for (double& x : out.data) x *= k;
    const NodeId ai = a.id;
    return a.tape->emit(std::move(out), [ai, k](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& ga = tp.grad(ai).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
    });
}

Value shift(Value a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x += c;
    const NodeId ai = a.id;
    return a.tape->emit(std::move(out), [ai](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& ga = tp.grad(ai).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

namespace {

// Shared softmax backward: gx = y * (g - sum(g * y)) per row.
void softmax_backprop(Tape& tp, NodeId self, NodeId ai, int rows, int n) {
    const auto& g = tp.grad(self).data;
    const auto& y = tp.value(self).data;
    auto& ga = tp.grad(ai).data;
    for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * n;
        double dot = 0.0;
        for (int c = 0; c < n; ++c) dot += g[base + c] * y[base + c];
        for (int c = 0; c < n; ++c) ga[base + c] += y[base + c] * (g[base + c] - dot);
    }
}

}  // namespace

Value softmax_rows(Value a) {
    const Tensor& A = a.val();
    require_rank2(A, "softmax_rows");
    const int m = A.rows(), n = A.cols();
    Tensor out({m, n});
    for (int r = 0; r < m; ++r) {
        const size_t base = static_cast<size_t>(r) * n;
        double mx = A.data[base];
        for (int c = 1; c < n; ++c) mx = std::max(mx, A.data[base + c]);
        double sum = 0.0;
        for (int c = 0; c < n; ++c) sum += (out.data[base + c] = std::exp(A.data[base + c] - mx));
        for (int c = 0; c < n; ++c) out.data[base + c] /= sum;
    }
    const NodeId ai = a.id;
    return a.tape->emit(std::move(out), [ai, m, n](Tape& tp, NodeId self) {
        softmax_backprop(tp, self, ai, m, n);
    });
}

Value masked_softmax_rows(Value a, std::shared_ptr<const std::vector<uint8_t>> mask) {
    const Tensor& A = a.val();
    require_rank2(A, "masked_softmax_rows");
    const int m = A.rows(), n = A.cols();
    if (!mask || mask->size() != A.data.size())
        throw DimensionError("masked_softmax_rows: mask size does not match " + A.shape_str());
    Tensor out({m, n});
    const auto& mk = *mask;
    for (int r = 0; r < m; ++r) {
        const size_t base = static_cast<size_t>(r) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c)
            if (mk[base + c]) mx = std::max(mx, A.data[base + c]);
        if (!std::isfinite(mx))
            throw ContractError("masked_softmax_rows: row " + std::to_string(r) + " has an empty key set");
        double sum = 0.0;
        for (int c = 0; c < n; ++c)
            if (mk[base + c]) sum += (out.data[base + c] = std::exp(A.data[base + c] - mx));
        for (int c = 0; c < n; ++c)
            if (mk[base + c]) out.data[base + c] /= sum;
    }
    const NodeId ai = a.id;
    // Masked-out outputs are exactly zero, so the dense softmax backward
    // already sends zero gradient to masked-out score entries.
    return a.tape->emit(std::move(out), [ai, m, n](Tape& tp, NodeId self) {
        softmax_backprop(tp, self, ai, m, n);
    });
}

Value layer_norm(Value x, Value gain, Value bias) {
    Tape& t = same_tape(x, gain, "layer_norm");
    same_tape(x, bias, "layer_norm");
    const Tensor& X = x.val();
    const Tensor& G = gain.val();
    const Tensor& B = bias.val();
    if (G.rank() != 1 || B.rank() != 1)
        throw DimensionError("layer_norm: gain/bias must be rank 1");
    const int d = X.cols();
    if (G.dim(0) != d || B.dim(0) != d)
        throw DimensionError("layer_norm: gain/bias extent != feature extent " + std::to_string(d));
    const int64_t rows = X.numel() / d;
    Tensor out(X.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * d;
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += X.data[base + c];
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dx = X.data[base + c] - mu;
            var += dx * dx;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int c = 0; c < d; ++c)
            out.data[base + c] = G.data[static_cast<size_t>(c)] * (X.data[base + c] - mu) * inv +
                                 B.data[static_cast<size_t>(c)];
    }
    const NodeId xi = x.id, gi = gain.id, bi = bias.id;
    return t.emit(std::move(out), [xi, gi, bi, rows, d](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        const auto& X = tp.value(xi).data;
        const auto& G = tp.value(gi).data;
        auto& gx = tp.grad(xi).data;
        auto& gg = tp.grad(gi).data;
        auto& gb = tp.grad(bi).data;
        std::vector<double> xhat(static_cast<size_t>(d));
        for (int64_t r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * d;
            double mu = 0.0;
            for (int c = 0; c < d; ++c) mu += X[base + c];
            mu /= d;
            double var = 0.0;
            for (int c = 0; c < d; ++c) {
                const double dx = X[base + c] - mu;
                var += dx * dx;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            double m1 = 0.0, m2 = 0.0;  // mean(gxhat), mean(gxhat * xhat)
            for (int c = 0; c < d; ++c) {
                xhat[static_cast<size_t>(c)] = (X[base + c] - mu) * inv;
                const double gh = g[base + c] * G[static_cast<size_t>(c)];
                m1 += gh;
                m2 += gh * xhat[static_cast<size_t>(c)];
            }
            m1 /= d;
            m2 /= d;
            for (int c = 0; c < d; ++c) {
                const double gh = g[base + c] * G[static_cast<size_t>(c)];
                gx[base + c] += inv * (gh - m1 - xhat[static_cast<size_t>(c)] * m2);
                gg[static_cast<size_t>(c)] += g[base + c] * xhat[static_cast<size_t>(c)];
                gb[static_cast<size_t>(c)] += g[base + c];
            }
        }
    });
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

Value gelu(Value x) {
    Tensor out = x.val();
    for (double& v : out.data) {
        const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    const NodeId xi = x.id;
    return x.tape->emit(std::move(out), [xi](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        const auto& X = tp.value(xi).data;
        auto& gx = tp.grad(xi).data;
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = X[i];
            const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
            const double th = std::tanh(u);
            const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
            gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
        }
    });
}

Value mean(Value x) {
    const double n = static_cast<double>(x.val().numel());
    double s = 0.0;
    for (double v : x.val().data) s += v;
    const NodeId xi = x.id;
    return x.tape->emit(Tensor::scalar(s / n), [xi, n](Tape& tp, NodeId self) {
        const double g = tp.grad(self).data[0] / n;
        for (double& v : tp.grad(xi).data) v += g;
    });
}

Value sum(Value x) {
    double s = 0.0;
    for (double v : x.val().data) s += v;
    const NodeId xi = x.id;
    return x.tape->emit(Tensor::scalar(s), [xi](Tape& tp, NodeId self) {
        const double g = tp.grad(self).data[0];
        for (double& v : tp.grad(xi).data) v += g;
    });
}

Value transpose_last_two(Value x) {
    const Tensor& X = x.val();
    if (X.rank() < 2)
        throw DimensionError("transpose_last_two: need rank >= 2, got " + X.shape_str());
    const int m = X.rows(), n = X.cols();
    std::vector<int> shp = X.shape;
    std::swap(shp[shp.size() - 1], shp[shp.size() - 2]);
    const int64_t batches = X.numel() / (static_cast<int64_t>(m) * n);
    Tensor out(shp);
    for (int64_t b = 0; b < batches; ++b) {
        const size_t base = static_cast<size_t>(b) * m * n;
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c)
                out.data[base + static_cast<size_t>(c) * m + r] = X.data[base + static_cast<size_t>(r) * n + c];
    }
    const NodeId xi = x.id;
    return x.tape->emit(std::move(out), [xi, m, n, batches](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& gx = tp.grad(xi).data;
        for (int64_t b = 0; b < batches; ++b) {
            const size_t base = static_cast<size_t>(b) * m * n;
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c)
                    gx[base + static_cast<size_t>(r) * n + c] += g[base + static_cast<size_t>(c) * m + r];
        }
    });
}

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Tape& t = *parts[0].tape;
    const int n = parts[0].val().cols();
    int total = 0;
    for (const Value& p : parts) {
        same_tape(parts[0], p, "concat_rows");
        require_rank2(p.val(), "concat_rows");
        if (p.val().cols() != n)
            throw DimensionError("concat_rows: column mismatch " + p.val().shape_str());
        total += p.val().rows();
    }
    Tensor out({total, n});
    std::vector<NodeId> ids;
    std::vector<int> offsets;
    int at = 0;
    for (const Value& p : parts) {
        std::copy(p.val().data.begin(), p.val().data.end(), out.data.begin() + static_cast<int64_t>(at) * n);
        ids.push_back(p.id);
        offsets.push_back(at);
        at += p.val().rows();
    }
    return t.emit(std::move(out), [ids, offsets, n](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        for (size_t k = 0; k < ids.size(); ++k) {
            auto& gp = tp.grad(ids[k]).data;
            const size_t base = static_cast<size_t>(offsets[k]) * n;
            for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[base + i];
        }
    });
}

Value concat_last_dim(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_last_dim: no parts");
    Tape& t = *parts[0].tape;
    const int m = parts[0].val().rows();
    int total = 0;
    for (const Value& p : parts) {
        same_tape(parts[0], p, "concat_last_dim");
        require_rank2(p.val(), "concat_last_dim");
        if (p.val().rows() != m)
            throw DimensionError("concat_last_dim: row mismatch " + p.val().shape_str());
        total += p.val().cols();
    }
    Tensor out({m, total});
    std::vector<NodeId> ids;
    std::vector<int> offsets;
    std::vector<int> widths;
    int at = 0;
    for (const Value& p : parts) {
        const int w = p.val().cols();
        for (int r = 0; r < m; ++r)
            std::copy(p.val().data.begin() + static_cast<int64_t>(r) * w,
                      p.val().data.begin() + static_cast<int64_t>(r + 1) * w,
                      out.data.begin() + static_cast<int64_t>(r) * total + at);
        ids.push_back(p.id);
        offsets.push_back(at);
        widths.push_back(w);
        at += w;
    }
    return t.emit(std::move(out), [ids, offsets, widths, m, total](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        for (size_t k = 0; k < ids.size(); ++k) {
            auto& gp = tp.grad(ids[k]).data;
            const int w = widths[k];
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < w; ++c)
                    gp[static_cast<size_t>(r) * w + c] +=
                        g[static_cast<size_t>(r) * total + offsets[k] + c];
        }
    });
}

std::vector<Value> split_last_dim(Value x, int parts) {
    const Tensor& X = x.val();
    require_rank2(X, "split_last_dim");
    if (parts <= 0) throw ContractError("split_last_dim: parts must be positive");
    const int m = X.rows(), n = X.cols();
    if (n % parts != 0)
        throw DimensionError("split_last_dim: " + std::to_string(n) + " columns not divisible by " +
                             std::to_string(parts));
    const int w = n / parts;
    // copy all pieces out before the first emit: X references tape storage,
    // which may reallocate as nodes are appended
    std::vector<Tensor> pieces;
    for (int k = 0; k < parts; ++k) {
        Tensor piece({m, w});
        const int off = k * w;
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
                piece.data[static_cast<size_t>(r) * w + c] = X.data[static_cast<size_t>(r) * n + off + c];
        pieces.push_back(std::move(piece));
    }
    std::vector<Value> out;
    const NodeId xi = x.id;
    for (int k = 0; k < parts; ++k) {
        const int off = k * w;
        out.push_back(x.tape->emit(std::move(pieces[static_cast<size_t>(k)]), [xi, m, n, w, off](Tape& tp, NodeId self) {
            const auto& g = tp.grad(self).data;
            auto& gx = tp.grad(xi).data;
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < w; ++c)
                    gx[static_cast<size_t>(r) * n + off + c] += g[static_cast<size_t>(r) * w + c];
        }));
    }
    return out;
}

Value gather_rows(Value x, std::vector<int> index) {
    const Tensor& X = x.val();
    require_rank2(X, "gather_rows");
    const int m = X.rows(), n = X.cols();
    for (int i : index)
        if (i < 0 || i >= m)
            throw DimensionError("gather_rows: index " + std::to_string(i) + " outside [0, " +
                                 std::to_string(m) + ")");
    Tensor out({static_cast<int>(index.size()), n});
    for (size_t r = 0; r < index.size(); ++r)
        std::copy(X.data.begin() + static_cast<int64_t>(index[r]) * n,
                  X.data.begin() + static_cast<int64_t>(index[r] + 1) * n,
                  out.data.begin() + static_cast<int64_t>(r) * n);
    const NodeId xi = x.id;
    auto idx = std::make_shared<std::vector<int>>(std::move(index));
    return x.tape->emit(std::move(out), [xi, idx, n](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& gx = tp.grad(xi).data;
        for (size_t r = 0; r < idx->size(); ++r)
            for (int c = 0; c < n; ++c)
                gx[static_cast<size_t>((*idx)[r]) * n + c] += g[r * n + c];
    });
}

Value slice_rows(Value x, int begin, int count) {
    const Tensor& X = x.val();
    require_rank2(X, "slice_rows");
    const int m = X.rows(), n = X.cols();
    if (begin < 0 || count <= 0 || begin + count > m)
        throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") outside " + X.shape_str());
    Tensor out({count, n});
    std::copy(X.data.begin() + static_cast<int64_t>(begin) * n,
              X.data.begin() + static_cast<int64_t>(begin + count) * n, out.data.begin());
    const NodeId xi = x.id;
    return x.tape->emit(std::move(out), [xi, begin, count, n](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& gx = tp.grad(xi).data;
        const size_t base = static_cast<size_t>(begin) * n;
        for (size_t i = 0; i < static_cast<size_t>(count) * n; ++i) gx[base + i] += g[i];
    });
}

Value reshape(Value x, std::vector<int> shape) {
    const Tensor& X = x.val();
    if (Tensor::checked_numel(shape) != X.numel())
        throw DimensionError("reshape: " + X.shape_str() + " to incompatible " + shape_to_string(shape));
    Tensor out = X;
    out.shape = std::move(shape);
    const NodeId xi = x.id;
    return x.tape->emit(std::move(out), [xi](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        auto& gx = tp.grad(xi).data;
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

namespace {

struct ConvDims {
    int H, W, kh, kw, ph, pw;
};

ConvDims conv_dims(const Tensor& X, const Tensor& K, int kchannels_expected, const char* op) {
    if (X.rank() != 3) throw DimensionError(std::string(op) + ": input must be [H x W x C], got " + X.shape_str());
    ConvDims d{};
    d.H = X.dim(0);
    d.W = X.dim(1);
    d.kh = K.dim(0);
    d.kw = K.dim(1);
    if (K.dim(2) != kchannels_expected)
        throw DimensionError(std::string(op) + ": kernel channels " + std::to_string(K.dim(2)) +
                             " != input channels " + std::to_string(kchannels_expected));
    if (d.kh > d.H || d.kw > d.W)
        throw DimensionError(std::string(op) + ": kernel " + K.shape_str() + " larger than lattice " +
                             X.shape_str());
    d.ph = (d.kh - 1) / 2;
    d.pw = (d.kw - 1) / 2;
    return d;
}

}  // namespace

Value conv2d_same(Value x, Value kernel) {
    Tape& t = same_tape(x, kernel, "conv2d_same");
    const Tensor& X = x.val();
    const Tensor& K = kernel.val();
    if (K.rank() != 3)
        throw DimensionError("conv2d_same: kernel must be [kh x kw x C], got " + K.shape_str());
    const int C = X.rank() == 3 ? X.dim(2) : -1;
    const ConvDims cd = conv_dims(X, K, C, "conv2d_same");
    Tensor out(X.shape);
    for (int i = 0; i < cd.H; ++i)
        for (int j = 0; j < cd.W; ++j)
            for (int a = 0; a < cd.kh; ++a) {
                const int si = i + a - cd.ph;
                if (si < 0 || si >= cd.H) continue;
                for (int b = 0; b < cd.kw; ++b) {
                    const int sj = j + b - cd.pw;
                    if (sj < 0 || sj >= cd.W) continue;
                    const size_t xo = (static_cast<size_t>(si) * cd.W + sj) * C;
                    const size_t oo = (static_cast<size_t>(i) * cd.W + j) * C;
                    const size_t ko = (static_cast<size_t>(a) * cd.kw + b) * C;
                    for (int c = 0; c < C; ++c) out.data[oo + c] += X.data[xo + c] * K.data[ko + c];
                }
            }
    const NodeId xi = x.id, ki = kernel.id;
    return t.emit(std::move(out), [xi, ki, cd, C](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        const auto& X = tp.value(xi).data;
        const auto& K = tp.value(ki).data;
        auto& gx = tp.grad(xi).data;
        auto& gk = tp.grad(ki).data;
        for (int i = 0; i < cd.H; ++i)
            for (int j = 0; j < cd.W; ++j)
                for (int a = 0; a < cd.kh; ++a) {
                    const int si = i + a - cd.ph;
                    if (si < 0 || si >= cd.H) continue;
                    for (int b = 0; b < cd.kw; ++b) {
                        const int sj = j + b - cd.pw;
                        if (sj < 0 || sj >= cd.W) continue;
                        const size_t xo = (static_cast<size_t>(si) * cd.W + sj) * C;
                        const size_t oo = (static_cast<size_t>(i) * cd.W + j) * C;
                        const size_t ko = (static_cast<size_t>(a) * cd.kw + b) * C;
                        for (int c = 0; c < C; ++c) {
                            gx[xo + c] += g[oo + c] * K[ko + c];
                            gk[ko + c] += g[oo + c] * X[xo + c];
                        }
                    }
                }
    });
}

Value conv2d_same_full(Value x, Value kernel) {
    Tape& t = same_tape(x, kernel, "conv2d_same_full");
    const Tensor& X = x.val();
    const Tensor& K = kernel.val();
    if (K.rank() != 4)
        throw DimensionError("conv2d_same_full: kernel must be [kh x kw x Cin x Cout], got " + K.shape_str());
    const int Cin = X.rank() == 3 ? X.dim(2) : -1;
    const ConvDims cd = conv_dims(X, K, Cin, "conv2d_same_full");
    const int Cout = K.dim(3);
    Tensor out({cd.H, cd.W, Cout});
    for (int i = 0; i < cd.H; ++i)
        for (int j = 0; j < cd.W; ++j)
            for (int a = 0; a < cd.kh; ++a) {
                const int si = i + a - cd.ph;
                if (si < 0 || si >= cd.H) continue;
                for (int b = 0; b < cd.kw; ++b) {
                    const int sj = j + b - cd.pw;
                    if (sj < 0 || sj >= cd.W) continue;
                    const size_t xo = (static_cast<size_t>(si) * cd.W + sj) * Cin;
                    const size_t oo = (static_cast<size_t>(i) * cd.W + j) * Cout;
                    const size_t ko = (static_cast<size_t>(a) * cd.kw + b) * static_cast<size_t>(Cin) * Cout;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int co = 0; co < Cout; ++co)
                            out.data[oo + co] += X.data[xo + ci] * K.data[ko + static_cast<size_t>(ci) * Cout + co];
                }
            }
    const NodeId xi = x.id, ki = kernel.id;
    return t.emit(std::move(out), [xi, ki, cd, Cin, Cout](Tape& tp, NodeId self) {
        const auto& g = tp.grad(self).data;
        const auto& X = tp.value(xi).data;
        const auto& K = tp.value(ki).data;
        auto& gx = tp.grad(xi).data;
        auto& gk = tp.grad(ki).data;
        for (int i = 0; i < cd.H; ++i)
            for (int j = 0; j < cd.W; ++j)
                for (int a = 0; a < cd.kh; ++a) {
                    const int si = i + a - cd.ph;
                    if (si < 0 || si >= cd.H) continue;
                    for (int b = 0; b < cd.kw; ++b) {
                        const int sj = j + b - cd.pw;
                        if (sj < 0 || sj >= cd.W) continue;
                        const size_t xo = (static_cast<size_t>(si) * cd.W + sj) * Cin;
                        const size_t oo = (static_cast<size_t>(i) * cd.W + j) * Cout;
                        const size_t ko =
                            (static_cast<size_t>(a) * cd.kw + b) * static_cast<size_t>(Cin) * Cout;
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int co = 0; co < Cout; ++co) {
                                const size_t kk = ko + static_cast<size_t>(ci) * Cout + co;
                                gx[xo + ci] += g[oo + co] * K[kk];
                                gk[kk] += g[oo + co] * X[xo + ci];
                            }
                    }
                }
    });
}

Value cross_entropy_logits(Value logits, int label) {
    const Tensor& L = logits.val();
    const int C = static_cast<int>(L.numel());
    if (L.rank() > 2 || (L.rank() == 2 && L.rows() != 1))
        throw DimensionError("cross_entropy_logits: logits must be [C] or [1 x C], got " + L.shape_str());
    if (label < 0 || label >= C)
        throw ContractError("cross_entropy_logits: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(C) + ")");
    double mx = L.data[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, L.data[static_cast<size_t>(c)]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(L.data[static_cast<size_t>(c)] - mx);
    const double loss = mx + std::log(sum) - L.data[static_cast<size_t>(label)];
    const NodeId li = logits.id;
    return logits.tape->emit(Tensor::scalar(loss), [li, label, C, mx, sum](Tape& tp, NodeId self) {
        const double g = tp.grad(self).data[0];
        const auto& L = tp.value(li).data;
        auto& gl = tp.grad(li).data;
        for (int c = 0; c < C; ++c) {
            const double p = std::exp(L[static_cast<size_t>(c)] - mx) / sum;
            gl[static_cast<size_t>(c)] += g * (p - (c == label ? 1.0 : 0.0));
        }
    });
}

}  // namespace mmvit
