#include "mmvit/model.hpp"

#include <cmath>
#include <fstream>
#include <string_view>

#include "mmvit/errors.hpp"
#include "mmvit/rng.hpp"
#include "mmvit/serialize.hpp"

namespace mmvit {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Joint: return "I";
        case Variant::FactorTimeSpace: return "II";
        case Variant::FactorThreeWay: return "III";
        case Variant::LocalWindow: return "IV";
    }
    throw ContractError("variant_name: bad variant");
}

const char* mca_name(McaKind m) {
    switch (m) {
        case McaKind::Merged: return "merged";
        case McaKind::Co: return "co";
        case McaKind::ShiftMerge: return "shift_merge";
    }
    throw ContractError("mca_name: bad mca kind");
}

Variant parse_variant(const std::string& s) {
    if (s == "1" || s == "I") return Variant::Joint;
    if (s == "2" || s == "II") return Variant::FactorTimeSpace;
    if (s == "3" || s == "III") return Variant::FactorThreeWay;
    if (s == "4" || s == "IV") return Variant::LocalWindow;
    throw ConfigError("unknown variant '" + s + "' (expected I..IV or 1..4)");
}

McaKind parse_mca(const std::string& s) {
    if (s == "merged") return McaKind::Merged;
    if (s == "co") return McaKind::Co;
    if (s == "shift_merge") return McaKind::ShiftMerge;
    throw ConfigError("unknown mca kind '" + s + "' (expected merged, co, or shift_merge)");
}

int ModelConfig::active_modalities() const {
    int n = 0;
    for (bool b : modalities) n += b ? 1 : 0;
    return n;
}

FieldDims ModelConfig::field_dims() const {
    FieldDims f;
    f.S = active_modalities();
    f.T = T;
    f.N = patches();
    f.d = d;
    f.gh = grid_h();
    f.gw = grid_w();
    return f;
}

WindowGeometry ModelConfig::windows() const {
    return resolve_windows(field_dims(), resolved_window_m(), resolved_window_f());
}

void ModelConfig::validate() const {
    if (T < 1) throw ConfigError("T must be at least 1");
    if (P < 1 || H < P || W < P || H % P != 0 || W % P != 0)
        throw ConfigError("patch size " + std::to_string(P) + " must tile " + std::to_string(H) + "x" +
                          std::to_string(W));
    if (d < 1 || h < 1 || d % h != 0)
        throw ConfigError("head count " + std::to_string(h) + " must divide width " + std::to_string(d));
    if (L < 1) throw ConfigError("L must be at least 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be at least 1");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (order.size() != 3 || order.find('T') == std::string::npos || order.find('M') == std::string::npos ||
        order.find('S') == std::string::npos)
        throw ConfigError("order must be a permutation of T, M, S, got '" + order + "'");
    if (active_modalities() < 1) throw ConfigError("at least one modality must be active");

    const bool three_way = variant == Variant::FactorThreeWay || variant == Variant::LocalWindow;
    if (three_way && mca == McaKind::Co && active_modalities() < 2)
        throw ConfigError("co attention needs at least two active modalities");
    if (three_way && mca == McaKind::ShiftMerge) {
        if (active_modalities() != kNumModalities)
            throw ConfigError("shift-merge needs all modalities active");
        if (d % kNumModalities != 0)
            throw ConfigError("shift-merge needs d divisible by " + std::to_string(kNumModalities));
    }
    if (variant == Variant::LocalWindow) windows();  // throws when nothing tiles
}

int ParamStore::add(std::string name, Tensor init) {
    if (index.count(name)) throw ContractError("duplicate parameter name: " + name);
    const int id = int(entries.size());
    Tensor grad(init.shape);
    entries.push_back(Entry{name, std::move(init), std::move(grad)});
    index.emplace(entries.back().name, id);
    return id;
}

int ParamStore::find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? -1 : it->second;
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
    const int id = find(name);
    if (id < 0) throw ContractError("unknown parameter: " + name);
    return entries[size_t(id)];
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
}

void ParamStore::zero_grads() {
    for (Entry& e : entries) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
}

long long ParamStore::scalar_count() const {
    long long n = 0;
    for (const Entry& e : entries) n += e.value.numel();
    return n;
}

namespace {

std::string stage_base(int layer, const std::string& stage) {
    return "layer" + std::to_string(layer) + "." + stage + ".";
}

std::vector<StageSpec> build_stages(const ModelConfig& cfg, const WindowGeometry& win) {
    std::vector<StageSpec> stages;
    switch (cfg.variant) {
        case Variant::Joint:
            stages.push_back({'J', "joint", {ScopeAxis::JointAll, {}}, true, false});
            break;
        case Variant::FactorTimeSpace:
            stages.push_back({'T', "time", {ScopeAxis::TimeAcrossModalities, {}}, true, false});
            stages.push_back({'S', "space", {ScopeAxis::SpaceAcrossModalities, {}}, true, false});
            break;
        case Variant::FactorThreeWay:
        case Variant::LocalWindow: {
            const bool local = cfg.variant == Variant::LocalWindow;
            for (char c : cfg.order) {
                StageSpec s;
                s.tag = c;
                s.conv_after = false;
                if (c == 'T') {
                    s.name = "time";
                    s.scope = local ? AttentionScope{ScopeAxis::LocalTime, win}
                                    : AttentionScope{ScopeAxis::TimeWithin, {}};
                    s.conv_after = local;
                } else if (c == 'M') {
                    s.name = "modality";
                    s.attention = cfg.mca != McaKind::ShiftMerge;
                    s.scope = {cfg.mca == McaKind::Co ? ScopeAxis::ModalityCo : ScopeAxis::ModalityMerged, {}};
                } else {
                    s.name = "space";
                    s.scope = local ? AttentionScope{ScopeAxis::LocalSpace, win}
                                    : AttentionScope{ScopeAxis::SpaceWithin, {}};
                    s.conv_after = local;
                }
                stages.push_back(std::move(s));
            }
            break;
        }
    }
    return stages;
}

// Row-stochastic stand-in for the parameter-free shift-merge stage: every
// token mixes the co-located tokens of all modalities equally, CLS is
// untouched.
Tensor shift_merge_matrix(const FieldDims& dims) {
    const int rows = dims.rows();
    Tensor m({rows, rows});
    const double w = 1.0 / dims.S;
    for (int s = 0; s < dims.S; ++s)
        for (int t = 0; t < dims.T; ++t)
            for (int p = 0; p < dims.N; ++p) {
                const int q = dims.row(s, t, p);
                for (int i = 0; i < dims.S; ++i) m.data[size_t(q) * rows + dims.row(i, t, p)] = w;
            }
    m.data[size_t(dims.cls()) * rows + dims.cls()] = 1.0;
    return m;
}

}  // namespace

std::vector<StageSpec> model_stages(const ModelConfig& cfg) {
    cfg.validate();
    const WindowGeometry win = cfg.variant == Variant::LocalWindow ? cfg.windows() : WindowGeometry{};
    return build_stages(cfg, win);
}

MmvitModel::MmvitModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    dims_ = cfg_.field_dims();
    win_ = cfg_.variant == Variant::LocalWindow ? cfg_.windows() : WindowGeometry{};
    stages_ = build_stages(cfg_, win_);
    masks_.reserve(stages_.size());
    for (const StageSpec& s : stages_) {
        const bool cls_in = cfg_.cls_every_stage || s.tag == 'S' || s.tag == 'J';
        masks_.push_back(s.attention ? build_scope_mask(dims_, s.scope, cls_in) : ScopeMask{});
    }
    register_params();
}

void MmvitModel::register_params() {
    const int dh = cfg_.d / cfg_.h;
    const int hidden = cfg_.mlp_ratio * cfg_.d;

    for (int m = 0; m < kNumModalities; ++m) {
        if (!cfg_.modalities[size_t(m)]) continue;
        const std::string base = std::string("embed.") + kModalityNames[m] + ".";
        const int width = content_width(Modality(m), cfg_.P);
        store_.add(base + "e", Tensor({cfg_.d, width}));
        const int pe_rows = m == int(Modality::Audio) ? cfg_.T : cfg_.T * cfg_.patches();
        store_.add(base + "pe", Tensor({pe_rows, cfg_.d}));
    }
    store_.add("embed.cls", Tensor({cfg_.d}));

    for (int l = 0; l < cfg_.L; ++l) {
        for (const StageSpec& s : stages_) {
            const std::string base = stage_base(l, s.name);
            store_.add(base + "ln.gain", Tensor({cfg_.d}));
            store_.add(base + "ln.bias", Tensor({cfg_.d}));
            if (s.attention) {
                for (int i = 0; i < cfg_.h; ++i) {
                    const std::string hb = base + "h" + std::to_string(i) + ".";
                    store_.add(hb + "wq", Tensor({dh, cfg_.d}));
                    store_.add(hb + "wk", Tensor({dh, cfg_.d}));
                    store_.add(hb + "wv", Tensor({dh, cfg_.d}));
                }
                store_.add(base + "wo", Tensor({cfg_.d, cfg_.d}));
            }
            if (s.conv_after) {
                const std::string kname = "layer" + std::to_string(l) +
                                          (s.tag == 'T' ? ".conv_time.k" : ".conv_space.k");
                std::vector<int> shape = s.tag == 'T' ? std::vector<int>{win_.F, 1, cfg_.d}
                                                      : std::vector<int>{win_.mh, win_.mw, cfg_.d};
                if (cfg_.conv_full) shape.push_back(cfg_.d);
                store_.add(kname, Tensor(std::move(shape)));
            }
        }
        const std::string mb = stage_base(l, "mlp");
        store_.add(mb + "ln.gain", Tensor({cfg_.d}));
        store_.add(mb + "ln.bias", Tensor({cfg_.d}));
        store_.add(mb + "fc1.w", Tensor({hidden, cfg_.d}));
        store_.add(mb + "fc1.b", Tensor({hidden}));
        store_.add(mb + "fc2.w", Tensor({cfg_.d, hidden}));
        store_.add(mb + "fc2.b", Tensor({cfg_.d}));
    }

    store_.add("final.ln.gain", Tensor({cfg_.d}));
    store_.add("final.ln.bias", Tensor({cfg_.d}));
    store_.add("head.w", Tensor({cfg_.num_classes, cfg_.d}));
    store_.add("head.b", Tensor({cfg_.num_classes}));

    for (ParamStore::Entry& e : store_.entries) init_param(e);
}

// Draws are keyed by (seed, parameter name), so a parameter keeps the same
// initial value no matter which variant or stage order registered it.
void MmvitModel::init_param(ParamStore::Entry& e) const {
    Rng rng = Rng(cfg_.seed).fork(fnv1a(e.name));
    const std::string& n = e.name;
    auto ends_with = [&n](const char* suffix) {
        const size_t len = std::string_view(suffix).size();
        return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
    };

    if (ends_with("ln.gain")) {
        std::fill(e.value.data.begin(), e.value.data.end(), 1.0);
    } else if (ends_with("ln.bias") || ends_with(".b") || ends_with("head.w") || ends_with("conv_time.k") ||
               ends_with("conv_space.k")) {
        // zeros: biases, the classifier, and the inter-window kernels (the
        // convolution starts as an identity path)
    } else if (ends_with(".pe") || n == "embed.cls" || ends_with("embed.iframe.e") ||
               ends_with("embed.motion.e") || ends_with("embed.residual.e") || ends_with("embed.audio.e")) {
        e.value.fill_normal(rng, 0.0, 0.02);
    } else if (ends_with(".wo") && cfg_.wo_identity) {
        for (int i = 0; i < cfg_.d; ++i) e.value.at(i, i) = 1.0;
    } else {
        // attention and MLP weights: zero-mean normal at Xavier scale
        const int fan_out = e.value.dim(0);
        const int fan_in = int(e.value.numel() / fan_out);
        e.value.fill_normal(rng, 0.0, std::sqrt(2.0 / (fan_in + fan_out)));
    }
}

MmvitModel::ForwardResult MmvitModel::forward(Tape& tape, const PreparedClip& clip, const ModalityMask& keep,
                                              ForwardTrace* trace, double score_shift) const {
    std::vector<NodeId> ids;
    std::vector<Value> pv;
    ids.reserve(store_.entries.size());
    pv.reserve(store_.entries.size());
    for (const ParamStore::Entry& e : store_.entries) {
        Value v = tape.leaf(e.value);
        ids.push_back(v.id);
        pv.push_back(v);
    }
    auto val = [&](const std::string& name) -> Value {
        const int id = store_.find(name);
        if (id < 0) throw ContractError("forward: missing parameter " + name);
        return pv[size_t(id)];
    };

    EmbeddingRefs embed;
    for (int m = 0; m < kNumModalities; ++m) {
        if (!cfg_.modalities[size_t(m)]) continue;
        const std::string base = std::string("embed.") + kModalityNames[m] + ".";
        embed.E[size_t(m)] = val(base + "e");
        embed.PE[size_t(m)] = val(base + "pe");
    }
    embed.cls = val("embed.cls");

    TokenField field = tokenize(tape, clip, embed, dims_, cfg_.modalities, keep);
    Value x = field.rows;
    if (trace) trace->layers.assign(size_t(cfg_.L), {});

    for (int l = 0; l < cfg_.L; ++l) {
        for (size_t si = 0; si < stages_.size(); ++si) {
            const StageSpec& s = stages_[si];
            const std::string base = stage_base(l, s.name);
            Value normed = layer_norm(x, val(base + "ln.gain"), val(base + "ln.bias"));
            TokenField nf{normed, dims_};
            Value contrib;
            if (s.attention) {
                MsaParams mp;
                for (int i = 0; i < cfg_.h; ++i) {
                    const std::string hb = base + "h" + std::to_string(i) + ".";
                    mp.wq.push_back(val(hb + "wq"));
                    mp.wk.push_back(val(hb + "wk"));
                    mp.wv.push_back(val(hb + "wv"));
                }
                mp.wo = val(base + "wo");
                Tensor attn;
                contrib = msa(nf, masks_[si], mp, score_shift, trace ? &attn : nullptr);
                if (trace) trace->layers[size_t(l)].push_back({s.name, std::move(attn)});
            } else {
                contrib = shift_merge_mix(nf);
                if (trace) trace->layers[size_t(l)].push_back({s.name, shift_merge_matrix(dims_)});
            }
            x = add(contrib, x);
            if (s.conv_after) {
                TokenField xf{x, dims_};
                x = s.tag == 'T'
                        ? inter_window_conv_time(xf, val("layer" + std::to_string(l) + ".conv_time.k"), win_,
                                                 cfg_.conv_full)
                        : inter_window_conv_space(xf, val("layer" + std::to_string(l) + ".conv_space.k"), win_,
                                                  cfg_.conv_full);
            }
        }
        const std::string mb = stage_base(l, "mlp");
        Value normed = layer_norm(x, val(mb + "ln.gain"), val(mb + "ln.bias"));
        Value h1 = gelu(add_rowvec(matmul(normed, transpose_last_two(val(mb + "fc1.w"))), val(mb + "fc1.b")));
        Value h2 = add_rowvec(matmul(h1, transpose_last_two(val(mb + "fc2.w"))), val(mb + "fc2.b"));
        x = add(h2, x);
    }

    Value cls_row = slice_rows(x, dims_.cls(), 1);
    Value final_ln = layer_norm(cls_row, val("final.ln.gain"), val("final.ln.bias"));
    Value logits = add_rowvec(matmul(final_ln, transpose_last_two(val("head.w"))), val("head.b"));
    return ForwardResult{logits, std::move(ids)};
}

void MmvitModel::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(kCheckpointMagic, 4);
    write_u32(f, kCheckpointVersion);
    write_u32(f, uint32_t(cfg_.variant));
    write_u32(f, uint32_t(cfg_.mca));
    f.write(cfg_.order.data(), 3);
    for (int v : {cfg_.T, cfg_.H, cfg_.W, cfg_.P, cfg_.d, cfg_.h, cfg_.L, cfg_.mlp_ratio, cfg_.num_classes,
                  cfg_.window_m, cfg_.window_f})
        write_u32(f, uint32_t(v));
    write_u64(f, cfg_.seed);
    const uint32_t flags = (cfg_.cls_every_stage ? 1u : 0u) | (cfg_.conv_full ? 2u : 0u) |
                           (cfg_.wo_identity ? 4u : 0u);
    write_u32(f, flags);
    for (bool b : cfg_.modalities) f.put(b ? 1 : 0);
    write_u64(f, uint64_t(store_.entries.size()));
    for (const ParamStore::Entry& e : store_.entries) {
        write_u32(f, uint32_t(e.name.size()));
        f.write(e.name.data(), std::streamsize(e.name.size()));
        write_tensor(f, e.value);
    }
    if (!f) throw DataError("write failed: " + path);
}

MmvitModel MmvitModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    size_t offset = 0;
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw FormatError("not a model checkpoint (bad magic)", 0);
    offset = 4;
    const uint32_t version = read_u32(f, offset, "checkpoint version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), offset - 4);

    ModelConfig cfg;
    cfg.variant = Variant(read_u32(f, offset, "variant"));
    if (uint32_t(cfg.variant) < 1 || uint32_t(cfg.variant) > 4)
        throw FormatError("bad variant id in checkpoint", offset - 4);
    const uint32_t mca = read_u32(f, offset, "mca kind");
    if (mca > 2) throw FormatError("bad mca kind in checkpoint", offset - 4);
    cfg.mca = McaKind(mca);
    char order[3];
    f.read(order, 3);
    if (f.gcount() != 3) throw FormatError("truncated checkpoint in stage order", offset);
    cfg.order.assign(order, 3);
    offset += 3;
    for (int* v : {&cfg.T, &cfg.H, &cfg.W, &cfg.P, &cfg.d, &cfg.h, &cfg.L, &cfg.mlp_ratio, &cfg.num_classes,
                   &cfg.window_m, &cfg.window_f})
        *v = int(read_u32(f, offset, "model dimension"));
    cfg.seed = read_u64(f, offset, "seed");
    const uint32_t flags = read_u32(f, offset, "flags");
    cfg.cls_every_stage = flags & 1u;
    cfg.conv_full = flags & 2u;
    cfg.wo_identity = flags & 4u;
    for (int m = 0; m < kNumModalities; ++m) {
        const int c = f.get();
        if (c == EOF) throw FormatError("truncated checkpoint in modality flags", offset);
        cfg.modalities[size_t(m)] = c != 0;
        ++offset;
    }

    MmvitModel model(cfg);
    const uint64_t count = read_u64(f, offset, "parameter count");
    if (count != model.store_.entries.size())
        throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, model needs " +
                              std::to_string(model.store_.entries.size()),
                          offset - 8);
    for (ParamStore::Entry& e : model.store_.entries) {
        const uint32_t len = read_u32(f, offset, "parameter name length");
        if (len > 4096) throw FormatError("unreasonable parameter name length", offset - 4);
        std::string name(len, '\0');
        f.read(name.data(), len);
        if (uint32_t(f.gcount()) != len) throw FormatError("truncated checkpoint in parameter name", offset);
        offset += len;
        if (name != e.name)
            throw FormatError("parameter order mismatch: expected " + e.name + ", found " + name,
                              offset - len);
        Tensor t = read_tensor(f, offset, e.name.c_str());
        if (t.shape != e.value.shape)
            throw FormatError("parameter " + e.name + " has shape " + t.shape_str() + ", expected " +
                                  e.value.shape_str(),
                              offset);
        e.value = std::move(t);
    }
    return model;
}

}  // namespace mmvit
