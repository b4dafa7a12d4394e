#include "mmvit/attention.hpp"

#include <cmath>
#include <cstdio>

#include "mmvit/errors.hpp"

namespace mmvit {

WindowGeometry resolve_windows(const FieldDims& dims, int window_m, int window_f) {
    WindowGeometry win;
    if (window_f < 1 || dims.T % window_f != 0)
        throw ConfigError("window_f=" + std::to_string(window_f) + " must divide T=" + std::to_string(dims.T));
    win.F = window_f;
    if (window_m < 1 || window_m > dims.N)
        throw ConfigError("window_m=" + std::to_string(window_m) + " out of range for N=" + std::to_string(dims.N));
    const double root = std::sqrt(double(window_m));
    int best_mh = 0;
    for (int mh = 1; mh <= window_m; ++mh) {
        if (window_m % mh != 0) continue;
        const int mw = window_m / mh;
        if (dims.gh % mh != 0 || dims.gw % mw != 0) continue;
        if (best_mh == 0 || std::abs(mh - root) < std::abs(best_mh - root) ||
            (std::abs(mh - root) == std::abs(best_mh - root) && mh > best_mh))
            best_mh = mh;
    }
    if (best_mh == 0)
        throw ConfigError("window_m=" + std::to_string(window_m) + " admits no tile dividing the " +
                          std::to_string(dims.gh) + "x" + std::to_string(dims.gw) + " patch grid");
    win.mh = best_mh;
    win.mw = window_m / best_mh;
    return win;
}

std::vector<int> scope_keys(const FieldDims& dims, const AttentionScope& scope, int s, int t, int p) {
    std::vector<int> keys;
    switch (scope.axis) {
        case ScopeAxis::JointAll:
            keys.reserve(size_t(dims.tokens()));
            for (int ks = 0; ks < dims.S; ++ks)
                for (int kt = 0; kt < dims.T; ++kt)
                    for (int kp = 0; kp < dims.N; ++kp) keys.push_back(dims.row(ks, kt, kp));
            break;
        case ScopeAxis::TimeAcrossModalities:
            for (int ks = 0; ks < dims.S; ++ks)
                for (int kt = 0; kt < dims.T; ++kt) keys.push_back(dims.row(ks, kt, p));
            break;
        case ScopeAxis::SpaceAcrossModalities:
            for (int ks = 0; ks < dims.S; ++ks)
                for (int kp = 0; kp < dims.N; ++kp) keys.push_back(dims.row(ks, t, kp));
            break;
        case ScopeAxis::TimeWithin:
            for (int kt = 0; kt < dims.T; ++kt) keys.push_back(dims.row(s, kt, p));
            break;
        case ScopeAxis::SpaceWithin:
            for (int kp = 0; kp < dims.N; ++kp) keys.push_back(dims.row(s, t, kp));
            break;
        case ScopeAxis::ModalityMerged:
            for (int ks = 0; ks < dims.S; ++ks) keys.push_back(dims.row(ks, t, p));
            break;
        case ScopeAxis::ModalityCo:
            for (int ks = 0; ks < dims.S; ++ks)
                if (ks != s) keys.push_back(dims.row(ks, t, p));
            break;
        case ScopeAxis::LocalTime: {
            const int origin = t - t % scope.win.F;
            for (int kt = origin; kt < origin + scope.win.F; ++kt) keys.push_back(dims.row(s, kt, p));
            break;
        }
        case ScopeAxis::LocalSpace: {
            const int py = p / dims.gw, px = p % dims.gw;
            const int oy = py - py % scope.win.mh, ox = px - px % scope.win.mw;
            for (int ky = oy; ky < oy + scope.win.mh; ++ky)
                for (int kx = ox; kx < ox + scope.win.mw; ++kx)
                    keys.push_back(dims.row(s, t, ky * dims.gw + kx));
            break;
        }
    }
    return keys;
}

int scope_cardinality(const FieldDims& dims, const AttentionScope& scope) {
    switch (scope.axis) {
        case ScopeAxis::JointAll: return dims.S * dims.T * dims.N;
        case ScopeAxis::TimeAcrossModalities: return dims.S * dims.T;
        case ScopeAxis::SpaceAcrossModalities: return dims.S * dims.N;
        case ScopeAxis::TimeWithin: return dims.T;
        case ScopeAxis::SpaceWithin: return dims.N;
        case ScopeAxis::ModalityMerged: return dims.S;
        case ScopeAxis::ModalityCo: return dims.S - 1;
        case ScopeAxis::LocalTime: return scope.win.F;
        case ScopeAxis::LocalSpace: return scope.win.mh * scope.win.mw;
    }
    throw ContractError("scope_cardinality: bad axis");
}

ScopeMask build_scope_mask(const FieldDims& dims, const AttentionScope& scope, bool cls_in_stage) {
    if (scope.axis == ScopeAxis::ModalityCo && dims.S < 2)
        throw ConfigError("co attention needs at least two active modalities");
    const int rows = dims.rows();
    auto keys = std::make_shared<std::vector<uint8_t>>(size_t(rows) * rows, uint8_t{0});
    for (int s = 0; s < dims.S; ++s)
        for (int t = 0; t < dims.T; ++t)
            for (int p = 0; p < dims.N; ++p) {
                const int q = dims.row(s, t, p);
                for (int k : scope_keys(dims, scope, s, t, p)) (*keys)[size_t(q) * rows + k] = 1;
                if (cls_in_stage) (*keys)[size_t(q) * rows + dims.cls()] = 1;
            }
    if (cls_in_stage) {
        for (int k = 0; k < rows; ++k) (*keys)[size_t(dims.cls()) * rows + k] = 1;
    } else {
        (*keys)[size_t(dims.cls()) * rows + dims.cls()] = 1;
    }
    ScopeMask mask;
    mask.rows = rows;
    mask.keys = std::move(keys);
    mask.cls_in_stage = cls_in_stage;
    return mask;
}

Value msa(const TokenField& field, const ScopeMask& mask, const MsaParams& params,
          double score_shift, Tensor* attn_out) {
    const int rows = field.dims.rows();
    if (mask.rows != rows) throw DimensionError("msa: mask built for a different field size");
    const int h = int(params.wq.size());
    if (h == 0 || params.wk.size() != size_t(h) || params.wv.size() != size_t(h))
        throw DimensionError("msa: head parameter lists must be non-empty and equal length");
    const int dh = params.wq[0].val().rows();

    std::vector<Value> heads;
    heads.reserve(size_t(h));
    Tensor avg;
    if (attn_out) avg = Tensor({rows, rows});
    for (int i = 0; i < h; ++i) {
        Value q = matmul(field.rows, transpose_last_two(params.wq[i]));
        Value k = matmul(field.rows, transpose_last_two(params.wk[i]));
        Value v = matmul(field.rows, transpose_last_two(params.wv[i]));
        Value scores = scale(matmul(q, transpose_last_two(k)), 1.0 / std::sqrt(double(dh)));
        if (score_shift != 0.0) scores = shift(scores, score_shift);
        Value attn = masked_softmax_rows(scores, mask.keys);
        if (attn_out)
            for (size_t j = 0; j < avg.data.size(); ++j) avg.data[j] += attn.val().data[j] / h;
        heads.push_back(matmul(attn, v));
    }
    if (attn_out) *attn_out = std::move(avg);

    Value merged = h == 1 ? heads[0] : concat_last_dim(heads);
    Value out = matmul(merged, transpose_last_two(params.wo));
    if (!mask.cls_in_stage) {
        Tape& tape = *field.rows.tape;
        Value zero_cls = tape.leaf(Tensor({1, field.dims.d}));
        out = concat_rows({slice_rows(out, 0, field.dims.tokens()), zero_cls});
    }
    return out;
}

Value shift_merge_mix(const TokenField& field) {
    const FieldDims& dims = field.dims;
    if (dims.S != kNumModalities)
        throw ConfigError("shift-merge needs all " + std::to_string(kNumModalities) + " modalities active");
    if (dims.d % kNumModalities != 0)
        throw ConfigError("shift-merge needs d divisible by " + std::to_string(kNumModalities));
    const int tn = dims.T * dims.N;

    // Quarter j of every token, still in full row order.
    std::vector<Value> quarters = split_last_dim(field.rows, kNumModalities);
    std::vector<Value> out_blocks;
    out_blocks.reserve(kNumModalities + 1);
    for (int j = 0; j < kNumModalities; ++j) {
        // Output modality j: channel chunk i comes from modality i's quarter j
        // at the same (frame, patch).
        std::vector<Value> chunks;
        chunks.reserve(kNumModalities);
        for (int i = 0; i < kNumModalities; ++i)
            chunks.push_back(slice_rows(quarters[j], i * tn, tn));
        out_blocks.push_back(concat_last_dim(chunks));
    }
    Tape& tape = *field.rows.tape;
    out_blocks.push_back(tape.leaf(Tensor({1, dims.d})));
    return concat_rows(out_blocks);
}

Value mca_shift_merge(const TokenField& field) {
    return add(shift_merge_mix(field), field.rows);
}

std::vector<std::vector<int>> spatial_tiles(const FieldDims& dims, const WindowGeometry& win) {
    std::vector<std::vector<int>> tiles;
    for (int oy = 0; oy < dims.gh; oy += win.mh)
        for (int ox = 0; ox < dims.gw; ox += win.mw) {
            std::vector<int> tile;
            for (int y = oy; y < oy + win.mh; ++y)
                for (int x = ox; x < ox + win.mw; ++x) tile.push_back(y * dims.gw + x);
            tiles.push_back(std::move(tile));
        }
    return tiles;
}

std::vector<std::vector<int>> temporal_blocks(const FieldDims& dims, const WindowGeometry& win) {
    std::vector<std::vector<int>> blocks;
    for (int o = 0; o < dims.T; o += win.F) {
        std::vector<int> block;
        for (int t = o; t < o + win.F; ++t) block.push_back(t);
        blocks.push_back(std::move(block));
    }
    return blocks;
}

namespace {

// Runs a same-padded convolution over each modality's token lattice and adds
// the result back onto the field; CLS gets no convolution term.
Value lattice_conv(const TokenField& field, Value kernel, bool full, bool temporal) {
    const FieldDims& dims = field.dims;
    Tape& tape = *field.rows.tape;
    std::vector<Value> blocks;
    if (temporal) {
        // One [T x N x d] lattice per modality; the kernel spans frames only.
        blocks.reserve(size_t(dims.S) + 1);
        for (int s = 0; s < dims.S; ++s) {
            Value block = slice_rows(field.rows, s * dims.T * dims.N, dims.T * dims.N);
            Value lattice = reshape(block, {dims.T, dims.N, dims.d});
            Value conv = full ? conv2d_same_full(lattice, kernel) : conv2d_same(lattice, kernel);
            blocks.push_back(reshape(conv, {dims.T * dims.N, dims.d}));
        }
    } else {
        // One [gh x gw x d] lattice per (modality, frame).
        blocks.reserve(size_t(dims.S) * dims.T + 1);
        for (int s = 0; s < dims.S; ++s)
            for (int t = 0; t < dims.T; ++t) {
                Value block = slice_rows(field.rows, (s * dims.T + t) * dims.N, dims.N);
                Value lattice = reshape(block, {dims.gh, dims.gw, dims.d});
                Value conv = full ? conv2d_same_full(lattice, kernel) : conv2d_same(lattice, kernel);
                blocks.push_back(reshape(conv, {dims.N, dims.d}));
            }
    }
    blocks.push_back(tape.leaf(Tensor({1, dims.d})));
    return add(concat_rows(blocks), field.rows);
}

}  // namespace

Value inter_window_conv_time(const TokenField& field, Value kernel, const WindowGeometry& win, bool full) {
    const Tensor& kv = kernel.val();
    const int want_rank = full ? 4 : 3;
    if (kv.rank() != want_rank || kv.dim(0) != win.F || kv.dim(1) != 1 || kv.dim(2) != field.dims.d)
        throw DimensionError("inter_window_conv_time: kernel " + shape_to_string(kv.shape) +
                             " must be [F x 1 x d" + (full ? " x d]" : "]"));
    return lattice_conv(field, kernel, full, /*temporal=*/true);
}

Value inter_window_conv_space(const TokenField& field, Value kernel, const WindowGeometry& win, bool full) {
    const Tensor& kv = kernel.val();
    const int want_rank = full ? 4 : 3;
    if (kv.rank() != want_rank || kv.dim(0) != win.mh || kv.dim(1) != win.mw || kv.dim(2) != field.dims.d)
        throw DimensionError("inter_window_conv_space: kernel " + shape_to_string(kv.shape) +
                             " must be [mh x mw x d" + (full ? " x d]" : "]"));
    return lattice_conv(field, kernel, full, /*temporal=*/false);
}

}  // namespace mmvit
