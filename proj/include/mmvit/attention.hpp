#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mmvit/tokenize.hpp"

namespace mmvit {

// Which slice of the (modality, time, patch) index space a query token may
// attend over. Every variant's attention is the same masked-joint kernel;
// only the key set changes.
enum class ScopeAxis {
    JointAll,             // every token of every modality, frame, patch
    TimeAcrossModalities, // same patch, all frames, all modalities
    SpaceAcrossModalities,// same frame, all patches, all modalities
    TimeWithin,           // same modality, same patch, all frames
    SpaceWithin,          // same modality, same frame, all patches
    ModalityMerged,       // same frame and patch, all modalities (own included)
    ModalityCo,           // same frame and patch, the other modalities only
    LocalTime,            // same modality and patch, frames in the same F-block
    LocalSpace,           // same modality and frame, patches in the same tile
};

// Spatial tile (mh x mw) and temporal extent F for the local scopes. The
// spatial tile covering M patches is the divisor pair of M with mh | gh,
// mw | gw whose mh is closest to sqrt(M) (ties prefer the taller tile).
struct WindowGeometry {
    int mh = 1, mw = 1;  // tile in grid rows x cols, mh*mw == M
    int F = 1;           // frames per temporal window, F | T
};
WindowGeometry resolve_windows(const FieldDims& dims, int window_m, int window_f);

struct AttentionScope {
    ScopeAxis axis = ScopeAxis::JointAll;
    WindowGeometry win;
};

// Field-token key list for one query position, in row-index order. CLS
// handling lives in the mask builder, not here.
std::vector<int> scope_keys(const FieldDims& dims, const AttentionScope& scope, int s, int t, int p);

// Number of field keys each field query sees under a scope (uniform over
// queries for every scope except none, so a single number).
int scope_cardinality(const FieldDims& dims, const AttentionScope& scope);

// Row-major [rows x rows] 0/1 key mask over the full field. Every field
// query also sees CLS when CLS takes part in the stage; the CLS query then
// sees the whole field. When CLS sits a stage out its row is self-only and
// the caller zeroes its output contribution.
struct ScopeMask {
    int rows = 0;
    std::shared_ptr<const std::vector<uint8_t>> keys;
    bool cls_in_stage = true;
};
ScopeMask build_scope_mask(const FieldDims& dims, const AttentionScope& scope, bool cls_in_stage);

// Multi-head attention parameters: per-head projections stored [d_h x d]
// (queries are row vectors, so each projection applies as x * W^T), and the
// output projection [d x h*d_h].
struct MsaParams {
    std::vector<Value> wq, wk, wv;
    Value wo;
};

// Masked multi-head self-attention over a pre-normalized field. Returns the
// stage contribution (no residual added). Scores are scaled by 1/sqrt(d_h);
// `score_shift` adds a constant to every in-scope score before the softmax.
// When `attn_out` is given it receives the head-averaged [rows x rows]
// attention matrix (out-of-scope entries zero; a sidelined CLS row reads as
// identity so downstream composition treats it as a pass-through).
Value msa(const TokenField& field, const ScopeMask& mask, const MsaParams& params,
          double score_shift = 0.0, Tensor* attn_out = nullptr);

// Parameter-free cross-modal mixing: splits each token's channels into
// kNumModalities equal chunks and rebuilds chunk i from the co-located token
// of modality i, so every output token carries one chunk from each modality
// at its (frame, patch) site. Returns the mixed field with a zero CLS row.
Value shift_merge_mix(const TokenField& field);

// The shift-merge operator as specified on raw values: mix plus identity,
// CLS row passed through unchanged.
Value mca_shift_merge(const TokenField& field);

// Window index partitions used by the local scopes; exposed for tests.
std::vector<std::vector<int>> spatial_tiles(const FieldDims& dims, const WindowGeometry& win);
std::vector<std::vector<int>> temporal_blocks(const FieldDims& dims, const WindowGeometry& win);

// Inter-window information paths for the locally-windowed variant: a
// depthwise convolution over the token lattice with stride 1 and same
// padding, residual added inside, CLS untouched. The temporal kernel is
// [F x 1 x d] sliding over the [T x N] lattice per modality; the spatial
// kernel is [mh x mw x d] sliding over the [gh x gw] grid per (modality,
// frame). Kernels are shared across modalities. The `full` variants take
// [kh x kw x d x d] kernels mixing channels.
Value inter_window_conv_time(const TokenField& field, Value kernel, const WindowGeometry& win, bool full);
Value inter_window_conv_space(const TokenField& field, Value kernel, const WindowGeometry& win, bool full);

}  // namespace mmvit
