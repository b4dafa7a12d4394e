#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmvit/attention.hpp"

namespace mmvit {

// The four attention layouts, numbered by increasing factorization: a single
// joint stage over everything; time-then-space stages each spanning all
// modalities; time / cross-modal / space stages each confined to or crossing
// one axis; and the windowed version of the latter with inter-window convs.
enum class Variant { Joint = 1, FactorTimeSpace = 2, FactorThreeWay = 3, LocalWindow = 4 };

// Cross-modal stage flavor for the three-way and windowed variants.
enum class McaKind { Merged, Co, ShiftMerge };

const char* variant_name(Variant v);
const char* mca_name(McaKind m);
Variant parse_variant(const std::string& s);   // "1".."4" or "I".."IV"
McaKind parse_mca(const std::string& s);       // merged | co | shift_merge

struct ModelConfig {
    Variant variant = Variant::FactorThreeWay;
    McaKind mca = McaKind::Merged;
    std::string order = "TMS";  // stage execution order, a permutation of T, M, S

    int T = 4, H = 32, W = 32, P = 16;
    int d = 16, h = 2, L = 2;
    int mlp_ratio = 4;
    int num_classes = 8;
    int window_m = 0, window_f = 0;  // 0 picks N/4 and T/2
    std::uint64_t seed = 1;

    bool cls_every_stage = true;  // false keeps CLS out of all but the spatial stage
    bool conv_full = false;       // channel-mixing inter-window kernels instead of depthwise
    bool wo_identity = false;     // identity attention output projections (debug)
    std::array<bool, kNumModalities> modalities{true, true, true, true};

    int grid_h() const { return H / P; }
    int grid_w() const { return W / P; }
    int patches() const { return grid_h() * grid_w(); }
    int active_modalities() const;
    int resolved_window_m() const { return window_m > 0 ? window_m : std::max(1, patches() / 4); }
    int resolved_window_f() const { return window_f > 0 ? window_f : std::max(1, T / 2); }

    FieldDims field_dims() const;
    WindowGeometry windows() const;  // resolved tile and temporal extent

    void validate() const;  // throws ConfigError on any inconsistency
};

// Named parameter tensors with matching gradient buffers. Parameters live
// outside any tape; each forward pass re-enters them as leaves, and the
// trainer pulls leaf gradients back by node id.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
    };
    std::vector<Entry> entries;
    std::unordered_map<std::string, int> index;

    int add(std::string name, Tensor init);
    int find(const std::string& name) const;  // -1 when absent
    Entry& at(const std::string& name);       // throws ContractError when absent
    const Entry& at(const std::string& name) const;
    void zero_grads();
    long long scalar_count() const;
};

// One attention-or-mixing stage of a layer, shared by all layers.
struct StageSpec {
    char tag = 0;          // 'J', 'T', 'M', or 'S'
    std::string name;      // joint | time | modality | space
    AttentionScope scope;  // unused for the shift-merge stage
    bool attention = true; // false = parameter-free shift-merge mixing
    bool conv_after = false;
};

// Head-averaged attention matrices captured during a forward pass, one per
// attention-like stage per layer, for attention-flow rollout.
struct StageTrace {
    std::string name;
    Tensor attn;  // [rows x rows], rows sum to 1 over in-scope keys
};
struct ForwardTrace {
    std::vector<std::vector<StageTrace>> layers;
};

// Stage sequence one layer of this configuration executes, without building
// the model (no parameters or masks are allocated).
std::vector<StageSpec> model_stages(const ModelConfig& cfg);

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'V', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

class MmvitModel {
  public:
    explicit MmvitModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const FieldDims& dims() const { return dims_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const std::vector<StageSpec>& stages() const { return stages_; }

    struct ForwardResult {
        Value logits;                   // [1 x num_classes]
        std::vector<NodeId> param_ids;  // leaf node per store entry, same order
    };
    // Runs one clip through the network on the given tape. `keep` zeroes the
    // content of dropped modalities (their tokens stay as position
    // embeddings). `score_shift` adds a constant to every attention score.
    ForwardResult forward(Tape& tape, const PreparedClip& clip, const ModalityMask& keep = kKeepAll,
                          ForwardTrace* trace = nullptr, double score_shift = 0.0) const;

    void save(const std::string& path) const;
    static MmvitModel load(const std::string& path);

  private:
    void register_params();
    void init_param(ParamStore::Entry& e) const;

    ModelConfig cfg_;
    FieldDims dims_;
    WindowGeometry win_;
    std::vector<StageSpec> stages_;
    std::vector<ScopeMask> masks_;  // one per stage
    ParamStore store_;
};

}  // namespace mmvit
