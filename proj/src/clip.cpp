#include "mmvit/clip.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmvit/serialize.hpp"

namespace mmvit {

void CompressedClip::validate() const {
    if (iframes.rank() != 4 || iframes.dim(1) != 3)
        throw DimensionError("clip: iframes must be [T x 3 x H x W], got " + iframes.shape_str());
    const int t = iframes.dim(0), h = iframes.dim(2), w = iframes.dim(3);
    if (motion.shape != std::vector<int>{t, 2, h, w})
        throw DimensionError("clip: motion must be [T x 2 x H x W], got " + motion.shape_str());
    if (residuals.shape != std::vector<int>{t, 3, h, w})
        throw DimensionError("clip: residuals must be [T x 3 x H x W], got " + residuals.shape_str());
    if (audio.shape != std::vector<int>{t, kAudioFeatureDim})
        throw DimensionError("clip: audio must be [T x 128], got " + audio.shape_str());
    for (double v : iframes.data)
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("clip: iframe value outside [0, 1]");
    for (double v : motion.data)
        if (!(std::fabs(v) <= kMotionClamp)) throw ContractError("clip: motion value outside [-16, 16]");
    for (double v : residuals.data)
        if (!(std::fabs(v) <= 1.0)) throw ContractError("clip: residual value outside [-1, 1]");
    for (double v : audio.data)
        if (!std::isfinite(v)) throw ContractError("clip: non-finite audio value");
}

void write_clip(std::ostream& out, const CompressedClip& clip) {
    out.write(kClipMagic, 4);
    write_u32(out, kClipVersion);
    write_u32(out, static_cast<uint32_t>(clip.label));
    write_u32(out, static_cast<uint32_t>(clip.T()));
    write_u32(out, static_cast<uint32_t>(clip.H()));
    write_u32(out, static_cast<uint32_t>(clip.W()));
    write_tensor(out, clip.iframes);
    write_tensor(out, clip.motion);
    write_tensor(out, clip.residuals);
    write_tensor(out, clip.audio);
}

void write_clip_file(const std::string& path, const CompressedClip& clip) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    write_clip(f, clip);
    if (!f) throw DataError("write failed: " + path);
}

CompressedClip read_clip(std::istream& in) {
    size_t offset = 0;
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4)
        throw FormatError("truncated input while reading clip magic", static_cast<size_t>(in.gcount()));
    offset = 4;
    if (std::string(magic, 4) != std::string(kClipMagic, 4))
        throw FormatError("bad clip magic, expected MMVC", 0);
    const uint32_t version = read_u32(in, offset, "clip version");
    if (version != kClipVersion)
        throw FormatError("unsupported clip version " + std::to_string(version), offset - 4);
    CompressedClip clip;
    clip.label = static_cast<int>(read_u32(in, offset, "clip label"));
    const uint32_t t = read_u32(in, offset, "clip T");
    const uint32_t h = read_u32(in, offset, "clip H");
    const uint32_t w = read_u32(in, offset, "clip W");
    clip.iframes = read_tensor(in, offset, "clip iframes");
    clip.motion = read_tensor(in, offset, "clip motion");
    clip.residuals = read_tensor(in, offset, "clip residuals");
    clip.audio = read_tensor(in, offset, "clip audio");
    if (clip.iframes.shape != std::vector<int>{static_cast<int>(t), 3, static_cast<int>(h), static_cast<int>(w)})
        throw FormatError("clip header does not match iframe tensor " + clip.iframes.shape_str(), offset);
    clip.validate();
    return clip;
}

CompressedClip read_clip_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open clip file: " + path);
    return read_clip(f);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path dir = std::filesystem::path(path).parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": missing tab separator");
        ManifestEntry e;
        std::filesystem::path p(line.substr(0, tab));
        e.path = p.is_absolute() ? p.string() : (dir / p).string();
        try {
            e.label = std::stoi(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": bad label");
        }
        if (e.label < 0)
            throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": negative label");
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    for (const auto& e : entries) f << e.path << '\t' << e.label << '\n';
    if (!f) throw DataError("write failed: " + path);
}

}  // namespace mmvit
