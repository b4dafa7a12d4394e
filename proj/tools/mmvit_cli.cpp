// Command-line front end: dataset generation, training, evaluation, the two
// ablation drivers, the compute accountant, and rollout heatmaps. All
// subcommands read a flat key=value config file (--config) which positional
// key=value arguments override. Exit codes: 0 success, 2 configuration
// error, 3 data/format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mmvit/datagen.hpp"
#include "mmvit/errors.hpp"
#include "mmvit/flops.hpp"
#include "mmvit/harness.hpp"
#include "mmvit/model.hpp"

using namespace mmvit;

namespace {

// Flat key=value settings with unknown-key detection.
class Settings {
  public:
    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            size_t a = line.find_first_not_of(" \t\r");
            if (a == std::string::npos) continue;
            size_t b = line.find_last_not_of(" \t\r");
            set_pair(line.substr(a, b - a + 1), path + ":" + std::to_string(lineno));
        }
    }

    void set_pair(const std::string& kv, const std::string& where) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("expected key=value at " + where + ", got '" + kv + "'");
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        const auto trim = [](std::string& s) {
            const size_t a = s.find_first_not_of(" \t");
            const size_t b = s.find_last_not_of(" \t");
            s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
        };
        trim(key);
        trim(val);
        vals_[key] = val;
    }

    std::string gets(const std::string& key, const std::string& def) {
        used_.insert(key);
        auto it = vals_.find(key);
        return it == vals_.end() ? def : it->second;
    }
    long long getll(const std::string& key, long long def) {
        const std::string s = gets(key, "");
        if (s.empty()) return def;
        try {
            size_t pos = 0;
            const long long v = std::stoll(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("trail");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' needs an integer, got '" + s + "'");
        }
    }
    int geti(const std::string& key, int def) { return int(getll(key, def)); }
    std::uint64_t getu(const std::string& key, std::uint64_t def) {
        return std::uint64_t(getll(key, (long long)def));
    }
    double getd(const std::string& key, double def) {
        const std::string s = gets(key, "");
        if (s.empty()) return def;
        try {
            size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("trail");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' needs a number, got '" + s + "'");
        }
    }
    bool getb(const std::string& key, bool def) {
        const std::string s = gets(key, "");
        if (s.empty()) return def;
        if (s == "1" || s == "true" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "no") return false;
        throw ConfigError("key '" + key + "' needs a boolean, got '" + s + "'");
    }

    // Call after all reads: any key never consumed is a typo.
    void reject_unknown() const {
        for (const auto& [k, v] : vals_)
            if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }

  private:
    std::map<std::string, std::string> vals_;
    std::set<std::string> used_;
};

ModelConfig model_config(Settings& s) {
    ModelConfig cfg;
    cfg.variant = parse_variant(s.gets("variant", "III"));
    cfg.mca = parse_mca(s.gets("mca", "merged"));
    cfg.order = s.gets("order", "TMS");
    cfg.T = s.geti("T", cfg.T);
    cfg.H = s.geti("H", cfg.H);
    cfg.W = s.geti("W", cfg.W);
    cfg.P = s.geti("P", cfg.P);
    cfg.d = s.geti("d", cfg.d);
    cfg.h = s.geti("h", cfg.h);
    cfg.L = s.geti("L", cfg.L);
    cfg.mlp_ratio = s.geti("mlp_ratio", cfg.mlp_ratio);
    cfg.num_classes = s.geti("num_classes", cfg.num_classes);
    cfg.window_m = s.geti("window_m", cfg.window_m);
    cfg.window_f = s.geti("window_f", cfg.window_f);
    cfg.seed = s.getu("seed", cfg.seed);
    cfg.cls_every_stage = s.getb("cls_every_stage", cfg.cls_every_stage);
    cfg.conv_full = s.getb("conv_full", cfg.conv_full);
    cfg.validate();
    return cfg;
}

TrainConfig train_config(Settings& s) {
    TrainConfig t;
    t.epochs = s.geti("epochs", t.epochs);
    t.batch = s.geti("batch", t.batch);
    t.lr = s.getd("lr", t.lr);
    t.lr_decay = s.getd("lr_decay", t.lr_decay);
    t.plateau_patience = s.geti("plateau_patience", t.plateau_patience);
    t.val_fraction = s.getd("val_fraction", t.val_fraction);
    t.shuffle_seed = s.getu("shuffle_seed", t.shuffle_seed);
    t.metrics_csv = s.gets("metrics", "");
    t.quiet = s.getb("quiet", false);
    t.validate();
    return t;
}

DatasetSpec dataset_spec(Settings& s) {
    DatasetSpec spec;
    spec.num_classes = s.geti("num_classes", spec.num_classes);
    spec.clips_per_class = s.geti("clips_per_class", spec.clips_per_class);
    spec.T = s.geti("T", spec.T);
    spec.H = s.geti("H", spec.H);
    spec.W = s.geti("W", spec.W);
    spec.sigma = s.getd("sigma", spec.sigma);
    spec.audio_phi = s.getb("audio_phi", spec.audio_phi);
    spec.seed = s.getu("seed", spec.seed);
    spec.validate();
    return spec;
}

int modality_by_name(const std::string& name) {
    for (int m = 0; m < kNumModalities; ++m)
        if (name == kModalityNames[m]) return m;
    throw ConfigError("unknown modality '" + name + "' (iframe, motion, residual, audio)");
}

ModalityMask mask_from(Settings& s) {
    const std::string drop = s.gets("drop", ""), keep = s.gets("keep", "");
    if (!drop.empty() && !keep.empty()) throw ConfigError("give either drop= or keep=, not both");
    ModalityMask mask = kKeepAll;
    const auto each = [](const std::string& list, auto fn) {
        std::stringstream ss(list);
        std::string item;
        while (std::getline(ss, item, ',')) fn(item);
    };
    if (!drop.empty()) each(drop, [&](const std::string& n) { mask[size_t(modality_by_name(n))] = false; });
    if (!keep.empty()) {
        mask = {false, false, false, false};
        each(keep, [&](const std::string& n) { mask[size_t(modality_by_name(n))] = true; });
    }
    return mask;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << text;
    if (!f) throw DataError("write failed: " + path);
}

int cmd_datagen(Settings& s) {
    DatasetSpec spec = dataset_spec(s);
    const std::string out = s.gets("out", "data");
    s.reject_unknown();
    const std::string manifest = write_dataset(spec, out);
    std::printf("wrote %d clips, manifest %s\n", spec.num_classes * spec.clips_per_class, manifest.c_str());
    return 0;
}

int cmd_train(Settings& s) {
    ModelConfig mc = model_config(s);
    TrainConfig tc = train_config(s);
    const std::string data = s.gets("data", "data/manifest.tsv");
    const std::string out = s.gets("out", "model.ckpt");
    s.reject_unknown();

    Dataset ds = load_dataset(data, mc.P, mc.num_classes);
    MmvitModel model(mc);
    TrainResult r = train(model, ds, tc);
    model.save(out);
    std::printf("final_val_acc %.17g\ncheckpoint %s\n", r.final_val_acc, out.c_str());
    return 0;
}

int cmd_eval(Settings& s) {
    const std::string ckpt = s.gets("model", "model.ckpt");
    const std::string data = s.gets("data", "data/manifest.tsv");
    ModalityMask mask = mask_from(s);
    const bool per_class = s.getb("per_class", false);
    s.reject_unknown();

    MmvitModel model = MmvitModel::load(ckpt);
    Dataset ds = load_dataset(data, model.config().P, model.config().num_classes);
    std::printf("accuracy %.17g\n", evaluate(model, ds, mask));
    if (per_class) {
        std::vector<double> acc = per_class_accuracy(model, ds, mask);
        for (size_t c = 0; c < acc.size(); ++c) std::printf("class%zu %.17g\n", c, acc[c]);
    }
    return 0;
}

int cmd_ablate_modality(Settings& s, bool retrain) {
    const std::string data = s.gets("data", "data/manifest.tsv");
    const std::string out = s.gets("out", "");
    std::string csv;
    if (!retrain) {
        const std::string ckpt = s.gets("model", "model.ckpt");
        s.reject_unknown();
        MmvitModel model = MmvitModel::load(ckpt);
        Dataset ds = load_dataset(data, model.config().P, model.config().num_classes);
        csv = modality_ablation_csv(model, ds);
    } else {
        // Fidelity mode: train one model per drop with the modality absent
        // from the token field entirely, not just zeroed.
        ModelConfig base = model_config(s);
        TrainConfig tc = train_config(s);
        s.reject_unknown();
        Dataset ds = load_dataset(data, base.P, base.num_classes);
        std::ostringstream rows;
        rows << "mask,accuracy\n";
        char line[96];
        {
            MmvitModel model(base);
            train(model, ds, tc);
            std::snprintf(line, sizeof line, "all,%.17g\n", evaluate(model, ds));
            rows << line;
        }
        for (int m = 0; m < kNumModalities; ++m) {
            ModelConfig cfg = base;
            cfg.modalities[size_t(m)] = false;
            if (cfg.variant != Variant::Joint && cfg.variant != Variant::FactorTimeSpace &&
                cfg.mca == McaKind::ShiftMerge)
                throw ConfigError("retrain ablation cannot drop modalities under shift-merge");
            MmvitModel model(cfg);
            train(model, ds, tc);
            std::snprintf(line, sizeof line, "drop_%s,%.17g\n", kModalityNames[m], evaluate(model, ds));
            rows << line;
        }
        csv = rows.str();
    }
    if (out.empty())
        std::fputs(csv.c_str(), stdout);
    else
        write_text(out, csv);
    return 0;
}

int cmd_ablate_order(Settings& s) {
    ModelConfig base = model_config(s);
    TrainConfig tc = train_config(s);
    const std::string data = s.gets("data", "data/manifest.tsv");
    const std::string out = s.gets("out", "");
    s.reject_unknown();
    if (base.variant != Variant::FactorThreeWay && base.variant != Variant::LocalWindow)
        throw ConfigError("order ablation applies to the three-stage variants (III or IV)");

    Dataset ds = load_dataset(data, base.P, base.num_classes);
    static const char* kOrders[6] = {"TMS", "TSM", "MTS", "MST", "STM", "SMT"};
    std::ostringstream rows;
    rows << "order,val_acc\n";
    char line[64];
    for (const char* order : kOrders) {
        ModelConfig cfg = base;
        cfg.order = order;
        MmvitModel model(cfg);
        TrainResult r = train(model, ds, tc);
        std::snprintf(line, sizeof line, "%s,%.17g\n", order, r.final_val_acc);
        rows << line;
    }
    if (out.empty())
        std::fputs(rows.str().c_str(), stdout);
    else
        write_text(out, rows.str());
    return 0;
}

int cmd_flops(Settings& s) {
    ModelConfig base = model_config(s);
    const std::string out = s.gets("out", "");
    s.reject_unknown();

    std::vector<FlopsReport> reports;
    ModelConfig cfg = base;
    cfg.variant = Variant::Joint;
    reports.push_back(count_flops(cfg));
    cfg.variant = Variant::FactorTimeSpace;
    reports.push_back(count_flops(cfg));
    cfg.variant = Variant::FactorThreeWay;
    for (McaKind mca : {McaKind::Merged, McaKind::Co, McaKind::ShiftMerge}) {
        cfg.mca = mca;
        reports.push_back(count_flops(cfg));
    }
    cfg.variant = Variant::LocalWindow;
    cfg.mca = base.mca;
    reports.push_back(count_flops(cfg));

    const std::string csv = flops_csv(reports);
    if (out.empty())
        std::fputs(csv.c_str(), stdout);
    else
        write_text(out, csv);
    return 0;
}

int cmd_rollout(Settings& s) {
    const std::string ckpt = s.gets("model", "model.ckpt");
    const std::string data = s.gets("data", "data/manifest.tsv");
    const std::string clip_path = s.gets("clip", "");
    const int clip_index = s.geti("clip_index", 0);
    const std::string out = s.gets("out", "rollout");
    ModalityMask mask = mask_from(s);
    s.reject_unknown();

    MmvitModel model = MmvitModel::load(ckpt);
    CompressedClip clip;
    if (!clip_path.empty()) {
        clip = read_clip_file(clip_path);
    } else {
        std::vector<ManifestEntry> entries = read_manifest(data);
        if (clip_index < 0 || clip_index >= int(entries.size()))
            throw ConfigError("clip_index " + std::to_string(clip_index) + " outside the manifest's " +
                              std::to_string(entries.size()) + " clips");
        clip = read_clip_file(entries[size_t(clip_index)].path);
    }
    RolloutMap map = attention_rollout(model, prepare_clip(clip, model.config().P), mask);
    write_rollout_pgms(map, model.dims(), out);
    write_text((std::filesystem::path(out) / "rollout.csv").string(), rollout_csv(map, model.dims()));
    std::printf("cls_mass %.17g\nwrote %s\n", map.cls_mass, out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-modal video transformer workbench"};
    app.require_subcommand(1);

    struct SubArgs {
        std::string config;
        std::vector<std::string> overrides;
        bool retrain = false;
    };
    std::map<std::string, SubArgs> args;
    const std::vector<std::pair<std::string, std::string>> subs = {
        {"datagen", "generate the synthetic compressed-clip dataset"},
        {"train", "train a model on a dataset manifest"},
        {"eval", "evaluate a checkpoint, optionally dropping modalities"},
        {"ablate-modality", "accuracy under each single-modality drop"},
        {"ablate-order", "train all six stage orders and compare"},
        {"flops", "emit the per-variant compute/parameter table"},
        {"rollout", "emit attention-rollout heatmaps for one clip"},
    };
    for (const auto& [name, desc] : subs) {
        CLI::App* sub = app.add_subcommand(name, desc);
        SubArgs& sa = args[name];
        sub->add_option("-c,--config", sa.config, "key=value config file");
        sub->add_option("overrides", sa.overrides, "key=value settings overriding the config file");
        if (name == "ablate-modality")
            sub->add_flag("--retrain", sa.retrain, "retrain per drop instead of masking at inference");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n\n%s\n", e.what(), app.help().c_str());
        return 2;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    SubArgs& sa = args[name];
    try {
        Settings s;
        if (!sa.config.empty()) s.load_file(sa.config);
        for (const std::string& kv : sa.overrides) s.set_pair(kv, "command line");
        if (name == "datagen") return cmd_datagen(s);
        if (name == "train") return cmd_train(s);
        if (name == "eval") return cmd_eval(s);
        if (name == "ablate-modality") return cmd_ablate_modality(s, sa.retrain);
        if (name == "ablate-order") return cmd_ablate_order(s);
        if (name == "flops") return cmd_flops(s);
        if (name == "rollout") return cmd_rollout(s);
        throw ContractError("unhandled subcommand " + name);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
