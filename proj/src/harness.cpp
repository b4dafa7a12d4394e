#include "mmvit/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

#include "mmvit/clip.hpp"
#include "mmvit/errors.hpp"
#include "mmvit/rng.hpp"

namespace mmvit {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Dataset prepare_dataset(const std::vector<CompressedClip>& clips, int P, int num_classes) {
    Dataset d;
    d.num_classes = num_classes;
    d.clips.reserve(clips.size());
    for (const CompressedClip& c : clips) {
        if (c.label < 0 || c.label >= num_classes)
            throw DataError("clip label " + std::to_string(c.label) + " outside 0.." +
                            std::to_string(num_classes - 1));
        d.clips.push_back(prepare_clip(c, P));
    }
    return d;
}

Dataset load_dataset(const std::string& manifest_path, int P, int num_classes) {
    std::vector<CompressedClip> clips;
    for (const ManifestEntry& e : read_manifest(manifest_path)) clips.push_back(read_clip_file(e.path));
    return prepare_dataset(clips, P, num_classes);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("lr_decay must be in (0, 1)");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be at least 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
}

namespace {

int argmax_logits(const Tensor& logits) {
    int best = 0;
    for (int c = 1; c < int(logits.data.size()); ++c)
        if (logits.data[size_t(c)] > logits.data[size_t(best)]) best = c;
    return best;
}

// Per-class tail split so train/val composition is independent of clip file
// order within a class.
void split_indices(const Dataset& data, double val_fraction, std::vector<int>& train_idx,
                   std::vector<int>& val_idx) {
    std::vector<std::vector<int>> by_class(size_t(data.num_classes));
    for (int i = 0; i < int(data.clips.size()); ++i)
        by_class[size_t(data.clips[size_t(i)].label)].push_back(i);
    for (const std::vector<int>& cls : by_class) {
        const int val_n = int(double(cls.size()) * val_fraction);
        for (int i = 0; i < int(cls.size()) - val_n; ++i) train_idx.push_back(cls[size_t(i)]);
        for (int i = int(cls.size()) - val_n; i < int(cls.size()); ++i) val_idx.push_back(cls[size_t(i)]);
    }
}

double accuracy_on(const MmvitModel& model, const Dataset& data, const std::vector<int>& idx,
                   const ModalityMask& keep) {
    if (idx.empty()) return 0.0;
    int correct = 0;
    for (int i : idx)
        if (predict(model, data.clips[size_t(i)], keep) == data.clips[size_t(i)].label) ++correct;
    return double(correct) / double(idx.size());
}

}  // namespace

TrainResult train(MmvitModel& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.clips.empty()) throw DataError("training set is empty");

    std::vector<int> train_idx, val_idx;
    split_indices(data, cfg.val_fraction, train_idx, val_idx);
    if (train_idx.empty()) throw DataError("validation split leaves no training clips");

    ParamStore& store = model.params();
    double lr = cfg.lr;
    double best_val = -1.0;
    int stall = 0;
    TrainResult result;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Rng shuffle = Rng(cfg.shuffle_seed).fork(uint64_t(epoch));
        for (int i = int(order.size()) - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(shuffle.below(uint64_t(i) + 1))]);

        double loss_sum = 0.0;
        int correct = 0;
        size_t done = 0;
        while (done < order.size()) {
            const size_t batch_end = std::min(done + size_t(cfg.batch), order.size());
            const int batch_n = int(batch_end - done);
            store.zero_grads();
            for (size_t bi = done; bi < batch_end; ++bi) {
                const PreparedClip& clip = data.clips[size_t(order[bi])];
                Tape tape;
                MmvitModel::ForwardResult fwd = model.forward(tape, clip);
                if (argmax_logits(fwd.logits.val()) == clip.label) ++correct;
                Value loss = cross_entropy_logits(fwd.logits, clip.label);
                loss_sum += loss.val().data[0];
                tape.backward(loss);
                for (size_t p = 0; p < store.entries.size(); ++p) {
                    const Tensor& g = tape.grad(fwd.param_ids[p]);
                    Tensor& acc = store.entries[p].grad;
                    for (size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += g.data[j];
                }
            }
            const double step = lr / batch_n;
            for (ParamStore::Entry& e : store.entries)
                for (size_t j = 0; j < e.value.data.size(); ++j) e.value.data[j] -= step * e.grad.data[j];
            done = batch_end;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.loss = loss_sum / double(order.size());
        m.train_acc = double(correct) / double(order.size());
        m.val_acc = accuracy_on(model, data, val_idx.empty() ? train_idx : val_idx, kKeepAll);
        m.lr = lr;
        result.history.push_back(m);
        if (!cfg.quiet)
            std::printf("epoch %d loss %.4f train_acc %.4f val_acc %.4f lr %g\n", epoch, m.loss,
                        m.train_acc, m.val_acc, lr);

        if (m.val_acc > best_val + 0.001) {
            best_val = m.val_acc;
            stall = 0;
        } else if (++stall >= cfg.plateau_patience) {
            lr *= cfg.lr_decay;
            stall = 0;
        }
    }

    result.final_val_acc = result.history.empty() ? 0.0 : result.history.back().val_acc;
    if (!cfg.metrics_csv.empty()) {
        std::ofstream f(cfg.metrics_csv);
        if (!f) throw DataError("cannot open for writing: " + cfg.metrics_csv);
        f << "epoch,loss,train_acc,val_acc,lr\n";
        char line[160];
        for (const EpochMetrics& m : result.history) {
            std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.loss, m.train_acc,
                          m.val_acc, m.lr);
            f << line;
        }
    }
    return result;
}

int predict(const MmvitModel& model, const PreparedClip& clip, const ModalityMask& keep) {
    Tape tape;
    return argmax_logits(model.forward(tape, clip, keep).logits.val());
}

double evaluate(const MmvitModel& model, const Dataset& data, const ModalityMask& keep) {
    bool any = false;
    for (int m = 0; m < kNumModalities; ++m) any = any || (model.config().modalities[size_t(m)] && keep[size_t(m)]);
    if (!any) throw ConfigError("evaluation requires at least one kept active modality");
    std::vector<int> all(data.clips.size());
    for (int i = 0; i < int(all.size()); ++i) all[size_t(i)] = i;
    return accuracy_on(model, data, all, keep);
}

std::vector<double> per_class_accuracy(const MmvitModel& model, const Dataset& data,
                                       const ModalityMask& keep) {
    std::vector<int> correct(size_t(data.num_classes), 0), total(size_t(data.num_classes), 0);
    for (const PreparedClip& clip : data.clips) {
        ++total[size_t(clip.label)];
        if (predict(model, clip, keep) == clip.label) ++correct[size_t(clip.label)];
    }
    std::vector<double> acc(size_t(data.num_classes), 0.0);
    for (int c = 0; c < data.num_classes; ++c)
        acc[size_t(c)] = total[size_t(c)] ? double(correct[size_t(c)]) / total[size_t(c)] : 0.0;
    return acc;
}

std::string modality_ablation_csv(const MmvitModel& model, const Dataset& data) {
    std::ostringstream out;
    out << "mask,accuracy\n";
    char line[96];
    std::snprintf(line, sizeof line, "all,%.17g\n", evaluate(model, data, kKeepAll));
    out << line;
    for (int m = 0; m < kNumModalities; ++m) {
        if (!model.config().modalities[size_t(m)]) continue;
        ModalityMask keep = kKeepAll;
        keep[size_t(m)] = false;
        std::snprintf(line, sizeof line, "drop_%s,%.17g\n", kModalityNames[m], evaluate(model, data, keep));
        out << line;
    }
    return out.str();
}

RolloutMap rollout_from_trace(const ForwardTrace& trace, const FieldDims& dims,
                              const std::vector<int>& active_modalities) {
    if (active_modalities.size() != size_t(dims.S))
        throw ContractError("rollout: active modality list does not match field dims");
    const int rows = dims.rows();
    MatR total = MatR::Identity(rows, rows);
    for (const std::vector<StageTrace>& layer : trace.layers)
        for (const StageTrace& stage : layer) {
            if (int(stage.attn.rows()) != rows || int(stage.attn.cols()) != rows)
                throw DimensionError("rollout: captured attention has wrong shape " + stage.attn.shape_str());
            MatR hat(rows, rows);
            for (int r = 0; r < rows; ++r) {
                double sum = 0.0;
                for (int c = 0; c < rows; ++c) {
                    double v = 0.5 * stage.attn.at(r, c) + (r == c ? 0.5 : 0.0);
                    hat(r, c) = v;
                    sum += v;
                }
                hat.row(r) /= sum;
            }
            total = hat * total;
        }

    RolloutMap map;
    map.modality_ids = active_modalities;
    map.cls_mass = total(dims.cls(), dims.cls());
    for (int s = 0; s < dims.S; ++s) {
        Tensor m({dims.T, dims.N});
        for (int t = 0; t < dims.T; ++t)
            for (int p = 0; p < dims.N; ++p)
                m.data[size_t(t) * dims.N + p] = total(dims.cls(), dims.row(s, t, p));
        map.maps.push_back(std::move(m));
    }
    return map;
}

RolloutMap attention_rollout(const MmvitModel& model, const PreparedClip& clip, const ModalityMask& keep) {
    Tape tape;
    ForwardTrace trace;
    model.forward(tape, clip, keep, &trace);
    std::vector<int> active;
    for (int m = 0; m < kNumModalities; ++m)
        if (model.config().modalities[size_t(m)]) active.push_back(m);
    return rollout_from_trace(trace, model.dims(), active);
}

void write_rollout_pgms(const RolloutMap& map, const FieldDims& dims, const std::string& dir) {
    std::filesystem::create_directories(dir);
    double global_max = 0.0;
    for (const Tensor& m : map.maps)
        for (double v : m.data) global_max = std::max(global_max, v);
    for (size_t i = 0; i < map.maps.size(); ++i) {
        const std::string path =
            (std::filesystem::path(dir) / ("rollout_" + std::string(kModalityNames[map.modality_ids[i]]) + ".pgm"))
                .string();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open for writing: " + path);
        f << "P5\n" << dims.gw << " " << dims.T * dims.gh << "\n255\n";
        for (int t = 0; t < dims.T; ++t)
            for (int y = 0; y < dims.gh; ++y)
                for (int x = 0; x < dims.gw; ++x) {
                    const double v = map.maps[i].data[size_t(t) * dims.N + y * dims.gw + x];
                    const int px = global_max > 0.0 ? int(std::lround(255.0 * v / global_max)) : 0;
                    f.put(char(std::clamp(px, 0, 255)));
                }
        if (!f) throw DataError("write failed: " + path);
    }
}

std::string rollout_csv(const RolloutMap& map, const FieldDims& dims) {
    std::ostringstream out;
    out << "modality,t,p,value\n";
    char line[96];
    for (size_t i = 0; i < map.maps.size(); ++i)
        for (int t = 0; t < dims.T; ++t)
            for (int p = 0; p < dims.N; ++p) {
                std::snprintf(line, sizeof line, "%s,%d,%d,%.17g\n", kModalityNames[map.modality_ids[i]], t,
                              p, map.maps[i].data[size_t(t) * dims.N + p]);
                out << line;
            }
    return out.str();
}

}  // namespace mmvit
