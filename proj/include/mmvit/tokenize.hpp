#pragma once

#include <array>

#include "mmvit/clip.hpp"
#include "mmvit/tape.hpp"

namespace mmvit {

// Keep-flags per modality. A dropped modality still occupies its token slots
// but contributes zero content, so its tokens degenerate to their learned
// position embeddings.
using ModalityMask = std::array<bool, kNumModalities>;
inline constexpr ModalityMask kKeepAll{true, true, true, true};

// Geometry of a token field: S active modalities (fixed order I, M, R, A with
// inactive ones absent), T frame steps, N patches per frame on a gh x gw
// grid, d embedding channels. Field rows are laid out modality-major then
// time then patch, with the single CLS row last.
struct FieldDims {
    int S = 0, T = 0, N = 0, d = 0;
    int gh = 0, gw = 0;

    int tokens() const { return S * T * N; }
    int rows() const { return tokens() + 1; }
    int cls() const { return tokens(); }
    int row(int s, int t, int p) const { return (s * T + t) * N + p; }
};

// A token field on a tape: [S*T*N + 1 x d] rows plus its geometry.
struct TokenField {
    Value rows;
    FieldDims dims;

    // Test-facing views of the spec-level field layout.
    Tensor tokens_tensor() const;  // [S x T x N x d]
    Tensor cls_tensor() const;     // [d]
};

// Splits an [C x H x W] frame into P x P patches, one row per patch in grid
// raster order; each row is the (C, P, P) block flattened row-major.
Tensor patchify(const Tensor& frame, int P);
Tensor unpatchify(const Tensor& patches, int C, int H, int W, int P);

// Per-clip content ready for embedding: one patch matrix [T*N x C*P*P] per
// visual modality plus the audio feature rows [T x 128]. Pure data
// preparation, no parameters involved, so it can be cached per clip.
struct PreparedClip {
    std::array<Tensor, 3> patches;  // I, M, R
    Tensor audio;                   // [T x 128]
    int label = 0;
};
PreparedClip prepare_clip(const CompressedClip& clip, int P);

// Per-modality patch-vector widths (channels * P * P) in modality order.
int content_width(Modality m, int P);

// Embedding parameters as tape values, one slot per modality in fixed order.
// Visual E[s] is [d x C_s*P*P] with PE[s] [T*N x d]; the audio slot holds
// E [d x 128] with PE [T x d] (one audio token per step, replicated over N
// spatial slots after embedding, so all copies share parameters and their
// gradients flow into the single source row).
struct EmbeddingRefs {
    std::array<Value, kNumModalities> E;
    std::array<Value, kNumModalities> PE;
    Value cls;
};

// Assembles the token field z = E*x + PE per modality plus the CLS row (CLS
// carries no position embedding). `active` selects which modalities exist in
// the field at all; `keep` zeroes the content of dropped-but-present ones.
TokenField tokenize(Tape& tape, const PreparedClip& clip, const EmbeddingRefs& embed,
                    const FieldDims& dims, const std::array<bool, kNumModalities>& active,
                    const ModalityMask& keep);

// Audio feature stub standing in for a pretrained embedder: Hann window,
// DFT magnitudes, 64 triangular mel filters over [0, sample_rate/2]
// (mel(f) = 2595 log10(1 + f/700)), mean/variance normalization, zero-padded
// to 128. Deterministic; identical input gives identical output.
inline constexpr int kPhiSampleRate = 16000;
inline constexpr int kPhiMelBins = 64;
Tensor phi_stub(const std::vector<double>& window, int sample_rate = kPhiSampleRate);

// Center frequency (Hz) of 0-based mel filter j under phi_stub's layout;
// exposed so tests can pick probe tones analytically.
double phi_mel_center_hz(int j, int sample_rate = kPhiSampleRate);

}  // namespace mmvit
