#include "mmvit/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mmvit/errors.hpp"
#include "mmvit/tokenize.hpp"

namespace mmvit {

void DatasetSpec::validate() const {
    if (num_classes != 8) throw ConfigError("the synthetic set is defined for exactly 8 classes");
    if (clips_per_class < 1) throw ConfigError("clips_per_class must be at least 1");
    if (T < 2) throw ConfigError("clips need at least 2 frames");
    if (H < kMacroblock || W < kMacroblock || H % kMacroblock != 0 || W % kMacroblock != 0)
        throw ConfigError("H and W must be positive multiples of the macroblock size " +
                          std::to_string(kMacroblock));
    if (sigma < 0.0) throw ConfigError("sigma must be non-negative");
}

Modality designated_modality(int label) {
    if (label < 0 || label > 7) throw ContractError("label out of range");
    return Modality(label / 2);
}

Tensor iframe_grating(int label, int H, int W) {
    if (label != 0 && label != 1) throw ContractError("iframe grating is defined for labels 0 and 1");
    Tensor g({3, H, W});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int along = label == 0 ? y : x;
                g.data[(size_t(c) * H + y) * W + x] =
                    kGratingAmp * std::sin(2.0 * M_PI * along / kGratingPeriod);
            }
    return g;
}

std::pair<double, double> motion_signature(int label) {
    if (label != 2 && label != 3) throw ContractError("motion signature is defined for labels 2 and 3");
    return {label == 2 ? kMotionSpeed : -kMotionSpeed, 0.0};
}

Tensor residual_stripes(int label, int H, int W) {
    if (label != 4 && label != 5) throw ContractError("residual stripes are defined for labels 4 and 5");
    Tensor g({3, H, W});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int along = label == 4 ? y : x;
                g.data[(size_t(c) * H + y) * W + x] =
                    kStripeAmp * std::sin(2.0 * M_PI * along / kStripePeriod);
            }
    return g;
}

std::vector<int> audio_tone_bins(int label) {
    if (label != 6 && label != 7) throw ContractError("audio tones are defined for labels 6 and 7");
    return label == 6 ? std::vector<int>{16, 28, 40} : std::vector<int>{88, 100, 112};
}

Tensor motion_compensate(const Tensor& frame, const Tensor& motion) {
    if (frame.rank() != 3) throw DimensionError("motion_compensate: frame must be [C x H x W]");
    const int C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    if (motion.shape != std::vector<int>{2, H, W})
        throw DimensionError("motion_compensate: motion must be [2 x H x W]");
    Tensor out({C, H, W});
    for (int by = 0; by < H; by += kMacroblock)
        for (int bx = 0; bx < W; bx += kMacroblock) {
            const int dx = int(std::lround(motion.data[(0 * size_t(H) + by) * W + bx]));
            const int dy = int(std::lround(motion.data[(1 * size_t(H) + by) * W + bx]));
            for (int c = 0; c < C; ++c)
                for (int y = by; y < by + kMacroblock; ++y)
                    for (int x = bx; x < bx + kMacroblock; ++x) {
                        const int sy = std::clamp(y - dy, 0, H - 1);
                        const int sx = std::clamp(x - dx, 0, W - 1);
                        out.data[(size_t(c) * H + y) * W + x] = frame.data[(size_t(c) * H + sy) * W + sx];
                    }
        }
    return out;
}

namespace {

// Smooth zero-mean field: a few random low-frequency sinusoids per channel.
Tensor sinusoid_field(Rng& rng, int H, int W, int components, double amp) {
    Tensor f({3, H, W});
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < components; ++k) {
            const double fy = 1.0 + rng.below(3);  // 1..3 cycles across the frame
            const double fx = 1.0 + rng.below(3);
            const double phase = rng.uniform() * 2.0 * M_PI;
            const double a = amp * (0.5 + 0.5 * rng.uniform());
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    f.data[(size_t(c) * H + y) * W + x] +=
                        a * std::sin(2.0 * M_PI * (fy * y / H + fx * x / W) + phase);
        }
    return f;
}

void fill_motion_frame(Tensor& motion, int t, double dx, double dy) {
    const int H = motion.dim(2), W = motion.dim(3);
    double* base = &motion.data[size_t(t) * 2 * H * W];
    std::fill(base, base + size_t(H) * W, dx);
    std::fill(base + size_t(H) * W, base + 2 * size_t(H) * W, dy);
}

void set_frame(Tensor& video, int t, const Tensor& f) {
    std::copy(f.data.begin(), f.data.end(), video.data.begin() + size_t(t) * f.data.size());
}

}  // namespace

CompressedClip generate_clip(const DatasetSpec& spec, int label, int clip_index) {
    spec.validate();
    if (label < 0 || label >= spec.num_classes) throw ContractError("label out of range");
    const int T = spec.T, H = spec.H, W = spec.W;
    const int group = label / 2;

    Rng clip_rng = Rng(spec.seed).fork(uint64_t(label) * uint64_t(spec.clips_per_class) + uint64_t(clip_index));
    Rng tex = clip_rng.fork(0), mot = clip_rng.fork(1), res = clip_rng.fork(2), aud = clip_rng.fork(3),
        noise = clip_rng.fork(4);

    CompressedClip clip;
    clip.label = label;
    clip.iframes = Tensor({T, 3, H, W});
    clip.motion = Tensor({T, 2, H, W});
    clip.residuals = Tensor({T, 3, H, W});
    clip.audio = Tensor({T, kAudioFeatureDim});

    // Base texture, with the frame-pair signature baked in at t=0 so motion
    // compensation carries it through the whole clip.
    Tensor base = sinusoid_field(tex, H, W, 2, 0.04);
    for (double& v : base.data) v += 0.5;
    if (group == 0) base = base + iframe_grating(label, H, W);
    for (double& v : base.data) v = std::clamp(v, 0.0, 1.0);
    set_frame(clip.iframes, 0, base);

    // One displacement per clip: the signature for the motion pair, a random
    // near-cardinal direction at comparable speed for everyone else. Generic
    // motion clustering around the axes means roughly a quarter of the
    // non-motion clips move like one of the motion classes, so direction
    // alone never settles the label and the other streams must be consulted.
    double dx, dy;
    if (group == 1) {
        std::tie(dx, dy) = motion_signature(label);
    } else {
        const double angle = (M_PI / 2.0) * double(mot.below(4)) + mot.normal(0.0, 0.45);
        const double mag = 1.5 + 2.0 * mot.uniform();
        dx = mag * std::cos(angle);
        dy = mag * std::sin(angle);
    }
    for (int t = 1; t < T; ++t) fill_motion_frame(clip.motion, t, dx, dy);

    // Frame recursion: frame t is the motion-compensated previous frame plus
    // a small generic innovation; the stored residual is the exact
    // difference, so decoding reproduces the frames bit for bit.
    Tensor prev = base;
    for (int t = 1; t < T; ++t) {
        Tensor mvec({2, H, W});
        std::copy(clip.motion.data.begin() + size_t(t) * 2 * H * W,
                  clip.motion.data.begin() + size_t(t + 1) * 2 * H * W, mvec.data.begin());
        Tensor compensated = motion_compensate(prev, mvec);
        Tensor innovation = sinusoid_field(res, H, W, 2, 0.015);
        Tensor frame = compensated + innovation;
        for (double& v : frame.data) v = std::clamp(v, 0.0, 1.0);
        Tensor residual = frame - compensated;
        if (group == 2) residual = residual + residual_stripes(label, H, W);
        for (double& v : residual.data) v = std::clamp(v, -1.0, 1.0);
        set_frame(clip.iframes, t, frame);
        std::copy(residual.data.begin(), residual.data.end(),
                  clip.residuals.data.begin() + size_t(t) * 3 * H * W);
        prev = std::move(frame);
    }

    // Audio: a trio of spectral lines per clip — fixed low/high trios for the
    // audio pair, random lines for everyone else. The default path writes the
    // lines straight into the feature rows (amplitude jitter per frame, light
    // spread to neighbor bins); audio_phi instead synthesizes the trio as a
    // waveform (random phases) and runs it through the phi frontend.
    std::vector<int> bins;
    if (group == 3) {
        bins = audio_tone_bins(label);
    } else {
        while (bins.size() < 3) {
            const int b = 8 + int(aud.below(113));
            bool dup = false;
            for (int have : bins) dup = dup || have == b;
            if (!dup) bins.push_back(b);
        }
    }
    if (spec.audio_phi) {
        std::vector<double> window(kAudioWindowSamples);
        for (int t = 0; t < T; ++t) {
            std::fill(window.begin(), window.end(), 0.0);
            for (int b : bins) {
                const double phase = aud.uniform() * 2.0 * M_PI;
                for (int i = 0; i < kAudioWindowSamples; ++i)
                    window[size_t(i)] += std::sin(2.0 * M_PI * b * i / kAudioWindowSamples + phase) / 3.0;
            }
            Tensor feats = phi_stub(window);
            std::copy(feats.data.begin(), feats.data.end(),
                      clip.audio.data.begin() + size_t(t) * kAudioFeatureDim);
        }
    } else {
        for (int t = 0; t < T; ++t) {
            double* row = &clip.audio.data[size_t(t) * kAudioFeatureDim];
            for (int b : bins) {
                const double a = 0.8 + 0.4 * aud.uniform();
                row[b] += a;
                if (b > 0) row[b - 1] += 0.35 * a;
                if (b < kAudioFeatureDim - 1) row[b + 1] += 0.35 * a;
            }
        }
    }

    if (spec.sigma > 0.0) {
        for (double& v : clip.iframes.data) v = std::clamp(v + spec.sigma * noise.normal(), 0.0, 1.0);
        for (double& v : clip.motion.data)
            v = std::clamp(v + spec.sigma * noise.normal(), -kMotionClamp, kMotionClamp);
        for (double& v : clip.residuals.data) v = std::clamp(v + spec.sigma * noise.normal(), -1.0, 1.0);
        for (double& v : clip.audio.data) v += spec.sigma * noise.normal();
    }
    clip.validate();
    return clip;
}

std::vector<CompressedClip> generate(const DatasetSpec& spec) {
    spec.validate();
    std::vector<CompressedClip> clips;
    clips.reserve(size_t(spec.num_classes) * spec.clips_per_class);
    for (int label = 0; label < spec.num_classes; ++label)
        for (int i = 0; i < spec.clips_per_class; ++i) clips.push_back(generate_clip(spec, label, i));
    return clips;
}

std::string write_dataset(const DatasetSpec& spec, const std::string& dir) {
    spec.validate();
    std::filesystem::create_directories(dir);
    std::vector<ManifestEntry> manifest;
    for (int label = 0; label < spec.num_classes; ++label)
        for (int i = 0; i < spec.clips_per_class; ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "clip_%d_%04d.mmvc", label, i);
            write_clip_file((std::filesystem::path(dir) / name).string(), generate_clip(spec, label, i));
            manifest.push_back({name, label});
        }
    const std::string mpath = (std::filesystem::path(dir) / "manifest.tsv").string();
    write_manifest(mpath, manifest);
    return mpath;
}

}  // namespace mmvit
