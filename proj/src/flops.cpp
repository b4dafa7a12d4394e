#include "mmvit/flops.hpp"

#include <sstream>

#include "mmvit/errors.hpp"

namespace mmvit {

namespace {

long long embed_mas(const ModelConfig& cfg) {
    long long mas = 0;
    for (int m = 0; m < kNumModalities; ++m) {
        if (!cfg.modalities[size_t(m)]) continue;
        if (m == int(Modality::Audio))
            mas += (long long)cfg.T * cfg.d * kAudioFeatureDim;
        else
            mas += (long long)cfg.T * cfg.patches() * cfg.d * content_width(Modality(m), cfg.P);
    }
    return mas;
}

// Symbolic per-query key-count term for one stage.
std::string card_term(const StageSpec& s) {
    if (!s.attention) return "S";
    switch (s.scope.axis) {
        case ScopeAxis::JointAll: return "S*T*N";
        case ScopeAxis::TimeAcrossModalities: return "S*T";
        case ScopeAxis::SpaceAcrossModalities: return "S*N";
        case ScopeAxis::TimeWithin: return "T";
        case ScopeAxis::SpaceWithin: return "N";
        case ScopeAxis::ModalityMerged: return "S";
        case ScopeAxis::ModalityCo: return "S-1";
        case ScopeAxis::LocalTime: return "F";
        case ScopeAxis::LocalSpace: return "M";
    }
    throw ContractError("card_term: bad axis");
}

}  // namespace

long long count_params(const ModelConfig& cfg) {
    cfg.validate();
    const long long d = cfg.d, dh = d / cfg.h, hidden = (long long)cfg.mlp_ratio * d;
    const WindowGeometry win =
        cfg.variant == Variant::LocalWindow ? cfg.windows() : WindowGeometry{};

    long long p = 0;
    for (int m = 0; m < kNumModalities; ++m) {
        if (!cfg.modalities[size_t(m)]) continue;
        if (m == int(Modality::Audio))
            p += d * kAudioFeatureDim + (long long)cfg.T * d;
        else
            p += d * content_width(Modality(m), cfg.P) + (long long)cfg.T * cfg.patches() * d;
    }
    p += d;  // CLS

    long long per_layer = 0;
    for (const StageSpec& s : model_stages(cfg)) {
        per_layer += 2 * d;  // stage layer norm
        if (s.attention) per_layer += (long long)cfg.h * 3 * dh * d + d * d;
        if (s.conv_after) {
            const long long taps = s.tag == 'T' ? win.F : (long long)win.mh * win.mw;
            per_layer += taps * d * (cfg.conv_full ? d : 1);
        }
    }
    per_layer += 2 * d + hidden * d + hidden + d * hidden + d;  // MLP block
    p += (long long)cfg.L * per_layer;

    p += 2 * d;                                     // final norm
    p += (long long)cfg.num_classes * d + cfg.num_classes;  // classifier
    return p;
}

FlopsReport count_flops(const ModelConfig& cfg) {
    cfg.validate();
    const FieldDims dims = cfg.field_dims();
    const WindowGeometry win =
        cfg.variant == Variant::LocalWindow ? cfg.windows() : WindowGeometry{};

    FlopsReport r;
    r.variant = variant_name(cfg.variant);
    const bool three_way = cfg.variant == Variant::FactorThreeWay || cfg.variant == Variant::LocalWindow;
    r.mca = three_way ? mca_name(cfg.mca) : "-";
    r.params = count_params(cfg);

    const long long tokens = dims.tokens(), rows = dims.rows(), d = cfg.d;
    const long long hidden = (long long)cfg.mlp_ratio * d;

    r.stages.push_back({"embed", 0, embed_mas(cfg)});
    r.stages.push_back({"proj", 0, (long long)cfg.L * 4 * rows * d * d});

    std::vector<std::string> terms;
    for (const StageSpec& s : model_stages(cfg)) {
        const bool cls_in = cfg.cls_every_stage || s.tag == 'S' || s.tag == 'J';
        long long card = 0, mas = 0;
        if (s.attention) {
            card = scope_cardinality(dims, s.scope);
            const long long key_sum = tokens * (card + (cls_in ? 1 : 0)) + (cls_in ? rows : 0);
            mas = (long long)cfg.L * 2 * key_sum * d;
        } else {
            card = dims.S;  // shift-merge consults one co-located token per modality
        }
        r.stage_cards.push_back(card);
        terms.push_back(card_term(s));
        r.stages.push_back({s.name, card, mas});
        if (s.conv_after) {
            const long long taps = s.tag == 'T' ? win.F : (long long)win.mh * win.mw;
            r.stages.push_back({s.tag == 'T' ? "conv_time" : "conv_space", 0,
                                (long long)cfg.L * tokens * taps * d * (cfg.conv_full ? d : 1)});
        }
    }

    r.stages.push_back({"mlp", 0, (long long)cfg.L * 2 * rows * d * hidden});
    r.stages.push_back({"head", 0, (long long)cfg.num_classes * d});

    std::ostringstream c;
    c << "O(";
    for (size_t i = 0; i < terms.size(); ++i) c << (i ? " + " : "") << terms[i];
    c << ")";
    r.complexity = c.str();

    for (const StageCost& s : r.stages) r.total_mas += s.mas;
    r.total_flops = 2 * r.total_mas;
    return r;
}

std::string flops_csv(const std::vector<FlopsReport>& reports) {
    std::ostringstream out;
    out << "variant,mca,complexity,keys_per_query,total_mas,total_flops,params\n";
    for (const FlopsReport& r : reports) {
        long long key_sum = 0;
        for (long long c : r.stage_cards) key_sum += c;
        out << r.variant << "," << r.mca << "," << r.complexity << "," << key_sum << "," << r.total_mas
            << "," << r.total_flops << "," << r.params << "\n";
    }
    return out.str();
}

}  // namespace mmvit
