#include "mmvit/tokenize.hpp"

#include <cmath>
#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "mmvit/errors.hpp"

namespace mmvit {

Tensor TokenField::tokens_tensor() const {
    const Tensor& r = rows.val();
    Tensor out({dims.S, dims.T, dims.N, dims.d});
    std::copy(r.data.begin(), r.data.end() - dims.d, out.data.begin());
    return out;
}

Tensor TokenField::cls_tensor() const {
    const Tensor& r = rows.val();
    Tensor out({dims.d});
    std::copy(r.data.end() - dims.d, r.data.end(), out.data.begin());
    return out;
}

Tensor patchify(const Tensor& frame, int P) {
    if (frame.rank() != 3) throw DimensionError("patchify: frame must be [C x H x W], got " + shape_to_string(frame.shape));
    const int C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    if (P <= 0 || H % P != 0 || W % P != 0)
        throw DimensionError("patchify: patch size " + std::to_string(P) + " must divide " +
                             std::to_string(H) + "x" + std::to_string(W));
    const int gh = H / P, gw = W / P, N = gh * gw;
    Tensor out({N, C * P * P});
    for (int p = 0; p < N; ++p) {
        const int py = (p / gw) * P, px = (p % gw) * P;
        double* dst = &out.data[size_t(p) * C * P * P];
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < P; ++y)
                for (int x = 0; x < P; ++x)
                    *dst++ = frame.data[(size_t(c) * H + py + y) * W + px + x];
    }
    return out;
}

Tensor unpatchify(const Tensor& patches, int C, int H, int W, int P) {
    if (patches.rank() != 2) throw DimensionError("unpatchify: patches must be rank 2");
    const int gh = H / P, gw = W / P, N = gh * gw;
    if (P <= 0 || H % P != 0 || W % P != 0 || patches.rows() != N || patches.cols() != C * P * P)
        throw DimensionError("unpatchify: patches " + shape_to_string(patches.shape) + " do not tile [" +
                             std::to_string(C) + " x " + std::to_string(H) + " x " + std::to_string(W) + "]");
    Tensor out({C, H, W});
    for (int p = 0; p < N; ++p) {
        const int py = (p / gw) * P, px = (p % gw) * P;
        const double* src = &patches.data[size_t(p) * C * P * P];
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < P; ++y)
                for (int x = 0; x < P; ++x)
                    out.data[(size_t(c) * H + py + y) * W + px + x] = *src++;
    }
    return out;
}

int content_width(Modality m, int P) {
    switch (m) {
        case Modality::IFrame: return 3 * P * P;
        case Modality::Motion: return 2 * P * P;
        case Modality::Residual: return 3 * P * P;
        case Modality::Audio: return kAudioFeatureDim;
    }
    throw ContractError("content_width: bad modality");
}

PreparedClip prepare_clip(const CompressedClip& clip, int P) {
    clip.validate();
    const int T = clip.T(), H = clip.H(), W = clip.W();
    if (P <= 0 || H % P != 0 || W % P != 0)
        throw ConfigError("prepare_clip: patch size " + std::to_string(P) + " does not tile " +
                          std::to_string(H) + "x" + std::to_string(W));
    const int N = (H / P) * (W / P);

    PreparedClip out;
    out.label = clip.label;
    const Tensor* streams[3] = {&clip.iframes, &clip.motion, &clip.residuals};
    for (int s = 0; s < 3; ++s) {
        const int C = streams[s]->dim(1);
        Tensor mat({T * N, C * P * P});
        for (int t = 0; t < T; ++t) {
            Tensor frame({C, H, W});
            const size_t off = size_t(t) * C * H * W;
            std::copy(streams[s]->data.begin() + off, streams[s]->data.begin() + off + size_t(C) * H * W,
                      frame.data.begin());
            Tensor patches = patchify(frame, P);
            std::copy(patches.data.begin(), patches.data.end(), mat.data.begin() + size_t(t) * N * C * P * P);
        }
        out.patches[s] = std::move(mat);
    }
    out.audio = clip.audio;
    return out;
}

TokenField tokenize(Tape& tape, const PreparedClip& clip, const EmbeddingRefs& embed,
                    const FieldDims& dims, const std::array<bool, kNumModalities>& active,
                    const ModalityMask& keep) {
    if (dims.T <= 0 || dims.N <= 0 || dims.d <= 0 || dims.gh * dims.gw != dims.N)
        throw DimensionError("tokenize: bad field dims");
    int S = 0;
    for (bool a : active) S += a ? 1 : 0;
    if (S != dims.S) throw DimensionError("tokenize: active modality count does not match dims.S");
    if (S == 0) throw ConfigError("tokenize: at least one modality must be active");

    std::vector<Value> parts;
    parts.reserve(size_t(S) + 1);
    for (int m = 0; m < kNumModalities; ++m) {
        if (!active[m]) continue;
        if (m < 3) {
            if (clip.patches[m].rank() != 2 || clip.patches[m].rows() != dims.T * dims.N)
                throw DimensionError("tokenize: patch matrix " + shape_to_string(clip.patches[m].shape) +
                                     " does not match T*N=" + std::to_string(dims.T * dims.N));
            Tensor content = keep[m] ? clip.patches[m] : Tensor({dims.T * dims.N, clip.patches[m].cols()});
            Value tok = matmul(tape.leaf(std::move(content)), transpose_last_two(embed.E[m]));
            parts.push_back(add(tok, embed.PE[m]));
        } else {
            if (clip.audio.rank() != 2 || clip.audio.rows() != dims.T || clip.audio.cols() != kAudioFeatureDim)
                throw DimensionError("tokenize: audio features " + shape_to_string(clip.audio.shape) +
                                     " must be [T x 128]");
            Tensor feats = keep[m] ? clip.audio : Tensor({dims.T, kAudioFeatureDim});
            Value step = add(matmul(tape.leaf(std::move(feats)), transpose_last_two(embed.E[m])), embed.PE[m]);
            std::vector<int> rep(size_t(dims.T) * dims.N);
            for (int t = 0; t < dims.T; ++t)
                for (int p = 0; p < dims.N; ++p) rep[size_t(t) * dims.N + p] = t;
            parts.push_back(gather_rows(step, rep));
        }
    }
    parts.push_back(reshape(embed.cls, {1, dims.d}));
    return TokenField{concat_rows(parts), dims};
}

namespace {

double mel_of_hz(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double hz_of_mel(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

double phi_mel_center_hz(int j, int sample_rate) {
    if (j < 0 || j >= kPhiMelBins) throw ContractError("phi_mel_center_hz: filter index out of range");
    const double step = mel_of_hz(sample_rate / 2.0) / (kPhiMelBins + 1);
    return hz_of_mel((j + 1) * step);
}

Tensor phi_stub(const std::vector<double>& window, int sample_rate) {
    if (window.size() < 16) throw ContractError("phi_stub: window must hold at least 16 samples");
    if (sample_rate <= 0) throw ContractError("phi_stub: sample rate must be positive");
    const int n = int(window.size());

    bool silent = true;
    for (double v : window)
        if (v != 0.0) { silent = false; break; }
    Tensor out({kAudioFeatureDim});
    if (silent) return out;

    std::vector<double> tapered(window.size());
    for (int i = 0; i < n; ++i)
        tapered[i] = window[i] * 0.5 * (1.0 - std::cos(2.0 * M_PI * i / (n - 1)));

    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> spectrum;
    fft.fwd(spectrum, tapered);
    const int half = n / 2;  // one-sided bins 0..half
    std::vector<double> mag(size_t(half) + 1);
    for (int k = 0; k <= half; ++k) mag[k] = std::abs(spectrum[k]);

    // Triangular filters between kPhiMelBins + 2 equally spaced mel points.
    const double mel_max = mel_of_hz(sample_rate / 2.0);
    std::vector<double> edges(kPhiMelBins + 2);
    for (int j = 0; j < kPhiMelBins + 2; ++j) edges[j] = hz_of_mel(j * mel_max / (kPhiMelBins + 1));

    std::vector<double> energy(kPhiMelBins, 0.0);
    const double hz_per_bin = double(sample_rate) / n;
    for (int k = 0; k <= half; ++k) {
        const double f = k * hz_per_bin;
        for (int j = 0; j < kPhiMelBins; ++j) {
            const double lo = edges[j], mid = edges[j + 1], hi = edges[j + 2];
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            if (w > 0.0) energy[j] += w * mag[k];
        }
    }

    double mean = 0.0;
    for (double e : energy) mean += e;
    mean /= kPhiMelBins;
    double var = 0.0;
    for (double e : energy) var += (e - mean) * (e - mean);
    var /= kPhiMelBins;
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (int j = 0; j < kPhiMelBins; ++j) out.data[j] = (energy[j] - mean) * inv;
    return out;
}

}  // namespace mmvit
