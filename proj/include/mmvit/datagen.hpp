#pragma once

#include <utility>

#include "mmvit/clip.hpp"
#include "mmvit/rng.hpp"

namespace mmvit {

// Synthetic 8-class compressed-clip benchmark. Classes come in four pairs,
// one pair per modality; the two classes of a pair differ only through a
// signature carried by that designated modality, while every other stream is
// drawn from a class-independent generic distribution:
//   0/1  horizontal vs vertical grating baked into the frame texture
//   2/3  rightward vs leftward uniform motion field
//   4/5  horizontal vs vertical stripe pattern in the stored residuals
//   6/7  low vs high trio of audio tones
// Frames obey compressed-video physics: frame t equals the motion-compensated
// previous frame plus the residual. The residual-pair classes are the one
// deliberate exception — their stripe pattern is added to the stored residual
// stream only, so it stays invisible in the frames (a frame-visible pattern
// would leak the class into the frame stream and defeat the ablation).
struct DatasetSpec {
    int num_classes = 8;  // fixed: two classes per modality
    int clips_per_class = 64;
    int T = 4, H = 32, W = 32;
    double sigma = 0.1;  // additive Gaussian noise on every stored tensor
    bool audio_phi = false;  // synthesize waveforms and run phi_stub instead
                             // of writing the spectral lines straight into the
                             // feature rows
    std::uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

inline constexpr int kMacroblock = 16;
inline constexpr int kAudioWindowSamples = 256;

// Signature amplitudes, exposed so test oracles can reconstruct patterns.
inline constexpr double kGratingAmp = 0.35;
inline constexpr int kGratingPeriod = 16;
inline constexpr double kStripeAmp = 0.3;
inline constexpr int kStripePeriod = 8;
inline constexpr double kMotionSpeed = 3.0;

Modality designated_modality(int label);

// Exact signature patterns per label, for oracle-side reconstruction.
Tensor iframe_grating(int label, int H, int W);                 // [3 x H x W], labels 0/1
std::pair<double, double> motion_signature(int label);          // (dx, dy), labels 2/3
Tensor residual_stripes(int label, int H, int W);               // [3 x H x W], labels 4/5
std::vector<int> audio_tone_bins(int label);                    // DFT bins of the synth window, labels 6/7

// Nearest-pixel motion compensation: each 16x16 destination macroblock copies
// the source frame displaced by the block's vector (the value at its top-left
// pixel, rounded to integers), with reads clamped to the frame border.
Tensor motion_compensate(const Tensor& frame, const Tensor& motion);  // [C x H x W], [2 x H x W]

CompressedClip generate_clip(const DatasetSpec& spec, int label, int clip_index);
std::vector<CompressedClip> generate(const DatasetSpec& spec);

// Writes one file per clip plus a manifest into dir (created if missing);
// returns the manifest path. Byte-identical for identical specs.
std::string write_dataset(const DatasetSpec& spec, const std::string& dir);

}  // namespace mmvit
