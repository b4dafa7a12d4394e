#pragma once

#include <string>
#include <vector>

#include "mmvit/model.hpp"

namespace mmvit {

// Clips ready for the embedding layer, cached once per dataset because the
// patch matrices never change during training.
struct Dataset {
    std::vector<PreparedClip> clips;
    int num_classes = 0;
};
Dataset prepare_dataset(const std::vector<CompressedClip>& clips, int P, int num_classes);
Dataset load_dataset(const std::string& manifest_path, int P, int num_classes);

struct TrainConfig {
    int epochs = 30;
    int batch = 8;
    double lr = 0.1;
    double lr_decay = 0.5;      // applied when validation accuracy plateaus
    int plateau_patience = 3;   // epochs without >0.1-point improvement
    double val_fraction = 0.2;  // per-class tail held out for validation
    std::uint64_t shuffle_seed = 7;
    std::string metrics_csv;    // per-epoch metrics written here when non-empty
    bool quiet = false;         // suppress per-epoch stdout lines

    void validate() const;
};

struct EpochMetrics {
    int epoch;
    double loss;       // mean training cross-entropy
    double train_acc;  // running accuracy over the epoch's training passes
    double val_acc;
    double lr;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    double final_val_acc = 0.0;
};

// Plain SGD with sequential gradient accumulation over each batch (one tape
// per clip), deterministic per-epoch shuffles, and plateau-triggered learning
// rate decay.
TrainResult train(MmvitModel& model, const Dataset& data, const TrainConfig& cfg);

// Argmax class; ties resolve to the lowest index.
int predict(const MmvitModel& model, const PreparedClip& clip, const ModalityMask& keep = kKeepAll);
double evaluate(const MmvitModel& model, const Dataset& data, const ModalityMask& keep = kKeepAll);
std::vector<double> per_class_accuracy(const MmvitModel& model, const Dataset& data,
                                       const ModalityMask& keep = kKeepAll);

// Accuracy under each single-modality drop next to the all-kept baseline,
// as CSV rows "mask,accuracy".
std::string modality_ablation_csv(const MmvitModel& model, const Dataset& data);

// CLS attribution over the input token lattice via attention rollout: each
// attention-like stage contributes 0.5*A + 0.5*I with rows renormalized,
// matrices composed in execution order across all layers. MLPs and the
// inter-window convolutions act per token or outside the attention graph and
// are not part of the flow.
struct RolloutMap {
    std::vector<int> modality_ids;   // active modalities, ascending
    std::vector<Tensor> maps;        // one [T x N] per entry of modality_ids
    double cls_mass = 0.0;           // attribution the CLS token keeps
};
RolloutMap rollout_from_trace(const ForwardTrace& trace, const FieldDims& dims,
                              const std::vector<int>& active_modalities);
RolloutMap attention_rollout(const MmvitModel& model, const PreparedClip& clip,
                             const ModalityMask& keep = kKeepAll);

// One P5 8-bit PGM per modality (frames stacked vertically, gh rows each),
// all scaled by the same global maximum so brightness is comparable across
// modalities; plus a flat CSV "modality,t,p,value".
void write_rollout_pgms(const RolloutMap& map, const FieldDims& dims, const std::string& dir);
std::string rollout_csv(const RolloutMap& map, const FieldDims& dims);

}  // namespace mmvit
