#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mmvit/tensor.hpp"

namespace mmvit {

// The four modality streams in their fixed order. Everything downstream
// (token layout, masks, CSV columns) indexes modalities this way.
enum class Modality { IFrame = 0, Motion = 1, Residual = 2, Audio = 3 };
inline constexpr int kNumModalities = 4;
inline constexpr const char* kModalityNames[kNumModalities] = {"iframe", "motion", "residual", "audio"};

inline constexpr int kAudioFeatureDim = 128;
inline constexpr double kMotionClamp = 16.0;

// One decoded clip. Extents:
//   iframes   [T x 3 x H x W], RGB in [0, 1]
//   motion    [T x 2 x H x W], (dx, dy) in [-16, 16]
//   residuals [T x 3 x H x W], values in [-1, 1]
//   audio     [T x 128] feature rows, one per frame step
struct CompressedClip {
    Tensor iframes;
    Tensor motion;
    Tensor residuals;
    Tensor audio;
    int label = 0;

    int T() const { return iframes.dim(0); }
    int H() const { return iframes.dim(2); }
    int W() const { return iframes.dim(3); }

    // Throws DimensionError/ContractError when the extents or value ranges
    // above do not hold.
    void validate() const;
};

// Clip file layout, all little-endian: magic "MMVC", version u32, label u32,
// T/H/W u32, then the four tensors in modality order using the tensor
// serialization from serialize.hpp.
inline constexpr char kClipMagic[4] = {'M', 'M', 'V', 'C'};
inline constexpr uint32_t kClipVersion = 1;

void write_clip(std::ostream& out, const CompressedClip& clip);
void write_clip_file(const std::string& path, const CompressedClip& clip);
CompressedClip read_clip(std::istream& in);
CompressedClip read_clip_file(const std::string& path);

// Dataset manifest: one "path<TAB>label" line per clip. Relative paths are
// resolved against the manifest's directory.
struct ManifestEntry {
    std::string path;
    int label;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

}  // namespace mmvit
