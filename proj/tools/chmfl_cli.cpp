// Command-line front end for the volumetric dual-task experiment pipeline:
//   synth     generate a synthetic PET-CT phantom dataset
//   train     train a model on a dataset manifest
//   crossval  k-fold cross-validated training and evaluation
//   sweep     repeat crossval over a grid of segmentation-loss weights
//   predict   run a saved checkpoint on one PET/CT pair
//
// Options resolve as: built-in defaults < --config JSON file < command-line
// flags. Every run echoes its fully resolved configuration. Exit codes:
// 0 success, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chmfl/crossval.hpp"
#include "chmfl/network.hpp"
#include "chmfl/optim.hpp"
#include "chmfl/phantom.hpp"
#include "chmfl/preprocess.hpp"
#include "chmfl/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using Scalar = float;  // single-precision training/inference

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// option structs
// ---------------------------------------------------------------------------

struct NetOpts {
    std::vector<std::size_t> extents{112, 112, 144};
    std::size_t base_channels = 16;
    std::size_t levels = 5;
    std::size_t fc1 = 512, fc2 = 128;
    double dropout = 0.5;

    chmfl::NetworkConfig to_config() const {
        if (extents.size() != 3) throw UsageError("extents needs exactly 3 values");
        chmfl::NetworkConfig cfg;
        cfg.input_extents = {extents[0], extents[1], extents[2]};
        cfg.base_channels = base_channels;
        cfg.levels = levels;
        cfg.fc_hidden = {fc1, fc2};
        cfg.dropout_p = dropout;
        cfg.validate();
        return cfg;
    }
};

struct TrainOpts {
    double w = 0.5;
    double lr = 1e-4;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    double epsilon = 1e-4;
    std::uint64_t seed = 0;

    chmfl::TrainingConfig to_config() const {
        chmfl::TrainingConfig cfg;
        cfg.w = w;
        cfg.learning_rate = lr;
        cfg.max_epochs = max_epochs;
        cfg.plateau_patience = patience;
        cfg.plateau_epsilon = epsilon;
        cfg.seed = seed;
        cfg.validate();
        return cfg;
    }
};

struct DataOpts {
    std::string manifest;   // defaults to <data_dir>/manifest.json
    double target_mm = 1.0;
};

std::string default_data_dir() {
    const char* env = std::getenv("CHMFL_DATA_DIR");
    return env ? env : ".";
}

std::string resolved_manifest(const DataOpts& d) {
    if (!d.manifest.empty()) return d.manifest;
    return (fs::path(default_data_dir()) / "manifest.json").string();
}

// ---------------------------------------------------------------------------
// JSON config file support
// ---------------------------------------------------------------------------

using Setter = std::function<void(const json&)>;
using SetterMap = std::map<std::string, Setter>;

void apply_config_file(const std::string& path, const SetterMap& setters) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw UsageError("unknown config key \"" + key + "\"");
        try {
            it->second(value);
        } catch (const json::exception& e) {
            throw UsageError("config key \"" + key + "\": " + e.what());
        }
    }
}

template <typename T>
Setter set_to(T& dst) {
    return [&dst](const json& v) { dst = v.get<T>(); };
}

SetterMap net_setters(NetOpts& n) {
    return {{"extents", set_to(n.extents)},
            {"base_channels", set_to(n.base_channels)},
            {"levels", set_to(n.levels)},
            {"fc1", set_to(n.fc1)},
            {"fc2", set_to(n.fc2)},
            {"dropout", set_to(n.dropout)}};
}

SetterMap train_setters(TrainOpts& t) {
    return {{"w", set_to(t.w)},          {"lr", set_to(t.lr)},
            {"max_epochs", set_to(t.max_epochs)}, {"patience", set_to(t.patience)},
            {"epsilon", set_to(t.epsilon)},       {"seed", set_to(t.seed)}};
}

SetterMap data_setters(DataOpts& d) {
    return {{"manifest", set_to(d.manifest)}, {"target_mm", set_to(d.target_mm)}};
}

void merge(SetterMap& into, SetterMap more) {
    for (auto& [k, v] : more) into.emplace(k, std::move(v));
}

// Config files must apply before CLI11 writes flag values, so --config is
// pulled straight from argv ahead of the regular parse.
std::string prescan_config_path(int argc, char** argv) {
    for (int i = 1; i < argc - 1; ++i)
        if (std::string(argv[i]) == "--config") return argv[i + 1];
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return {};
}

// ---------------------------------------------------------------------------
// CLI option registration
// ---------------------------------------------------------------------------

void add_net_opts(CLI::App* app, NetOpts& n) {
    app->add_option("--extents", n.extents, "Input extents D H W (voxels)")
        ->expected(3);
    app->add_option("--base-channels", n.base_channels, "Encoder level-1 channels");
    app->add_option("--levels", n.levels, "Encoder levels (input transition + downsamplers)");
    app->add_option("--fc1", n.fc1, "First hidden width of the classification head");
    app->add_option("--fc2", n.fc2, "Second hidden width of the classification head");
    app->add_option("--dropout", n.dropout, "Dropout probability in the head");
}

void add_train_opts(CLI::App* app, TrainOpts& t) {
    app->add_option("--w", t.w, "Segmentation-loss weight in [0,1]");
    app->add_option("--lr", t.lr, "Adam learning rate");
    app->add_option("--max-epochs", t.max_epochs, "Epoch cap");
    app->add_option("--patience", t.patience, "Plateau patience (epochs)");
    app->add_option("--epsilon", t.epsilon, "Minimum loss improvement");
    app->add_option("--seed", t.seed, "RNG seed");
}

void add_data_opts(CLI::App* app, DataOpts& d) {
    app->add_option("--manifest", d.manifest,
                    "Dataset manifest (default: $CHMFL_DATA_DIR/manifest.json)");
    app->add_option("--target-mm", d.target_mm, "Isotropic resampling spacing (mm)");
}

json net_echo(const NetOpts& n) {
    return {{"extents", n.extents},       {"base_channels", n.base_channels},
            {"levels", n.levels},         {"fc1", n.fc1},
            {"fc2", n.fc2},               {"dropout", n.dropout}};
}

json train_echo(const TrainOpts& t) {
    return {{"w", t.w},           {"lr", t.lr},       {"max_epochs", t.max_epochs},
            {"patience", t.patience}, {"epsilon", t.epsilon}, {"seed", t.seed}};
}

void echo_config(const std::string& command, json j) {
    j["command"] = command;
    std::cout << "resolved config: " << j.dump() << "\n";
}

// ---------------------------------------------------------------------------
// shared pipeline steps
// ---------------------------------------------------------------------------

std::vector<chmfl::TrainingExample<Scalar>> load_examples(const DataOpts& data,
                                                          const chmfl::NetworkConfig& net) {
    const auto records = chmfl::load_manifest(resolved_manifest(data));
    std::array<double, 3> box_mm;
    for (int a = 0; a < 3; ++a)
        box_mm[a] = (double)net.input_extents[a] * data.target_mm;
    std::vector<chmfl::TrainingExample<Scalar>> examples;
    examples.reserve(records.size());
    for (const auto& r : records)
        examples.push_back(
            chmfl::make_example<Scalar>(chmfl::preprocess_record(r, data.target_mm, box_mm)));
    return examples;
}

void write_crossval_outputs(const chmfl::CrossValResult& res, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const fs::path out(out_dir);

    std::ofstream report(out / "report.txt");
    if (!report) throw std::runtime_error("cannot write " + (out / "report.txt").string());
    for (std::size_t f = 0; f < res.per_fold.size(); ++f) {
        chmfl::write_report_text(report, "fold " + std::to_string(f), res.per_fold[f]);
        chmfl::write_report_text(std::cout, "fold " + std::to_string(f), res.per_fold[f]);
    }
    chmfl::write_report_text(report, "pooled", res.pooled);
    chmfl::write_report_text(report, "mean over folds", res.mean_over_folds);
    chmfl::write_report_text(std::cout, "pooled", res.pooled);
    chmfl::write_report_text(std::cout, "mean over folds", res.mean_over_folds);

    chmfl::write_report_kv((out / "pooled.kv").string(), "pooled_", res.pooled);
    chmfl::write_report_kv((out / "mean.kv").string(), "mean_", res.mean_over_folds);
    chmfl::write_roc_points((out / "roc.txt").string(), res.pooled.roc_points);
    for (std::size_t f = 0; f < res.fold_histories.size(); ++f)
        chmfl::write_history_csv((out / ("history_fold" + std::to_string(f) + ".csv")).string(),
                                 res.fold_histories[f]);
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth(const chmfl::PhantomConfig& cfg, const std::string& out_dir) {
    if (cfg.n_patients == 0) {
        std::cerr << "warning: generating an empty dataset\n";
        const auto manifest = chmfl::export_phantoms({}, out_dir);
        std::cout << "manifest: " << manifest << "\n";
        return 0;
    }
    auto ds = chmfl::generate_phantoms(cfg);
    const auto manifest = chmfl::export_phantoms(ds, out_dir);
    std::cout << "patients: " << ds.size() << "\n";
    std::cout << "manifest: " << manifest << "\n";
    return 0;
}

int cmd_train(const DataOpts& data, const NetOpts& net_opts, const TrainOpts& train_opts,
              const std::string& checkpoint, const std::string& history_path) {
    const auto net = net_opts.to_config();
    const auto cfg = train_opts.to_config();
    auto examples = load_examples(data, net);
    if (examples.empty()) throw std::runtime_error("dataset is empty");

    std::mt19937_64 init_rng(cfg.seed ^ 0x1234567890abcdefull);
    auto params = chmfl::init_params<Scalar>(net, init_rng);
    const auto history = chmfl::train(params, net, examples, cfg);

    chmfl::save_checkpoint(params, net, checkpoint);
    if (!history_path.empty()) chmfl::write_history_csv(history_path, history);
    std::cout << "epochs: " << history.size() << "\n";
    std::cout << "final mean loss: " << history.back().mean_loss << "\n";
    std::cout << "checkpoint: " << checkpoint << "\n";
    return 0;
}

int cmd_crossval(const DataOpts& data, const NetOpts& net_opts, const TrainOpts& train_opts,
                 std::size_t k, const std::string& out_dir) {
    const auto net = net_opts.to_config();
    const auto cfg = train_opts.to_config();
    auto examples = load_examples(data, net);
    auto res = chmfl::cross_validate(examples, net, cfg, k, cfg.seed);
    write_crossval_outputs(res, out_dir);
    return 0;
}

int cmd_sweep(const DataOpts& data, const NetOpts& net_opts, const TrainOpts& train_opts,
              std::size_t k, const std::vector<double>& weights, const std::string& out_dir) {
    const auto net = net_opts.to_config();
    const auto cfg = train_opts.to_config();
    auto examples = load_examples(data, net);
    auto rows = chmfl::weight_sweep(examples, net, cfg, weights, k, cfg.seed);

    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "sweep.txt");
    if (!os) throw std::runtime_error("cannot write sweep table");
    auto emit = [&](std::ostream& s) {
        s << "w mean_acc mean_sen mean_spe pooled_auc mean_dsc\n";
        for (const auto& r : rows)
            s << r.w << " " << chmfl::report_detail::fmt(r.mean_acc) << " "
              << chmfl::report_detail::fmt(r.mean_sen) << " "
              << chmfl::report_detail::fmt(r.mean_spe) << " "
              << chmfl::report_detail::fmt(r.pooled_auc) << " "
              << chmfl::report_detail::fmt(r.mean_dsc) << "\n";
    };
    emit(os);
    emit(std::cout);
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& pet_path,
                const std::string& ct_path, const std::string& mask_out, double target_mm) {
    auto [params, net] = chmfl::load_checkpoint<Scalar>(checkpoint);
    auto pet = chmfl::resample_isotropic(chmfl::read_volume(pet_path), target_mm);
    auto ct = chmfl::resample_isotropic(chmfl::read_volume(ct_path), target_mm);
    for (const chmfl::Volume* v : {&pet, &ct})
        if (v->extents[0] != net.input_extents[0] || v->extents[1] != net.input_extents[1] ||
            v->extents[2] != net.input_extents[2])
            throw std::runtime_error("input extents do not match the checkpoint's network");

    auto pet_t = chmfl::volume_to_tensor<Scalar>(chmfl::normalize_intensity(pet));
    auto ct_t = chmfl::volume_to_tensor<Scalar>(chmfl::normalize_intensity(ct));
    // Match the evaluation protocol: per-sample normalization statistics
    // (batch size is 1 throughout training) with dropout disabled.
    chmfl::NetworkConfig eval_net = net;
    eval_net.dropout_p = 0.0;
    std::mt19937_64 rng(0);  // dropout disabled; never drawn from
    auto out = chmfl::forward(params, eval_net, pet_t, ct_t, true, rng);
    auto prob = chmfl::softmax(out.dm_logits, 1);
    std::cout << "dm_probability " << std::setprecision(17) << (double)prob->data[1] << "\n";

    const auto& sl = out.seg_logits;
    const std::size_t S = sl->shape[2] * sl->shape[3] * sl->shape[4];
    chmfl::Volume mask;
    mask.modality = chmfl::Modality::MASK;
    mask.extents = {sl->shape[2], sl->shape[3], sl->shape[4]};
    mask.spacing = {target_mm, target_mm, target_mm};
    mask.voxels.resize(S);
    for (std::size_t i = 0; i < S; ++i)
        mask.voxels[i] = sl->data[S + i] > sl->data[i] ? 1.0f : 0.0f;
    chmfl::write_volume(mask, mask_out);
    std::cout << "segmentation: " << mask_out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Volumetric dual-task (classification + segmentation) experiment tool"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags override its values)");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
    chmfl::PhantomConfig ph;
    std::vector<std::size_t> ph_extents{32, 32, 32};
    std::string synth_out = default_data_dir();
    synth->add_option("--n", ph.n_patients, "Number of patients");
    synth->add_option("--seed", ph.seed, "RNG seed");
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--extents", ph_extents, "Volume extents D H W")->expected(3);
    synth->add_option("--balance", ph.balance, "Fraction of positive labels");
    synth->add_option("--spacing", ph.spacing_mm, "Voxel spacing (mm)");
    synth->add_option("--tumor-contrast", ph.tumor_contrast, "Tumor uptake contrast");
    synth->add_option("--radius-min", ph.tumor_radius_min, "Minimum tumor radius (voxels)");
    synth->add_option("--radius-max", ph.tumor_radius_max, "Maximum tumor radius (voxels)");

    // train
    auto* train = app.add_subcommand("train", "Train a model on a dataset manifest");
    DataOpts tr_data;
    NetOpts tr_net;
    TrainOpts tr_cfg;
    std::string tr_checkpoint = "model.chck", tr_history = "history.csv";
    add_data_opts(train, tr_data);
    add_net_opts(train, tr_net);
    add_train_opts(train, tr_cfg);
    train->add_option("--checkpoint", tr_checkpoint, "Output checkpoint path");
    train->add_option("--history", tr_history, "Output loss-history CSV path");

    // crossval
    auto* crossval = app.add_subcommand("crossval", "k-fold cross-validated evaluation");
    DataOpts cv_data;
    NetOpts cv_net;
    TrainOpts cv_cfg;
    std::size_t cv_k = 6;
    std::string cv_out = "crossval_out";
    add_data_opts(crossval, cv_data);
    add_net_opts(crossval, cv_net);
    add_train_opts(crossval, cv_cfg);
    crossval->add_option("--folds", cv_k, "Number of folds");
    crossval->add_option("--out", cv_out, "Output directory for reports");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Cross-validate over a weight grid");
    DataOpts sw_data;
    NetOpts sw_net;
    TrainOpts sw_cfg;
    std::size_t sw_k = 6;
    std::vector<double> sw_weights{0.0, 0.25, 0.5, 0.75, 1.0};
    std::string sw_out = "sweep_out";
    add_data_opts(sweep, sw_data);
    add_net_opts(sweep, sw_net);
    add_train_opts(sweep, sw_cfg);
    sweep->add_option("--folds", sw_k, "Number of folds");
    sweep->add_option("--weights", sw_weights, "Weight grid")->expected(-1);
    sweep->add_option("--out", sw_out, "Output directory");

    // predict
    auto* predict = app.add_subcommand("predict", "Run a checkpoint on one PET/CT pair");
    std::string pr_checkpoint, pr_pet, pr_ct, pr_mask = "segmentation.chvl";
    double pr_target_mm = 1.0;
    predict->add_option("--checkpoint", pr_checkpoint, "Checkpoint path")->required();
    predict->add_option("--pet", pr_pet, "PET volume")->required();
    predict->add_option("--ct", pr_ct, "CT volume")->required();
    predict->add_option("--mask-out", pr_mask, "Output segmentation volume path");
    predict->add_option("--target-mm", pr_target_mm, "Isotropic resampling spacing (mm)");

    try {
        // config file applies before flags so that flags win
        const std::string pre = prescan_config_path(argc, argv);
        if (!pre.empty()) {
            SetterMap setters;
            bool has_cmd = false;
            for (int i = 1; i < argc; ++i) {
                const std::string a = argv[i];
                if (a == "synth") {
                    setters = {{"n", set_to(ph.n_patients)},
                               {"seed", set_to(ph.seed)},
                               {"out", set_to(synth_out)},
                               {"extents", set_to(ph_extents)},
                               {"balance", set_to(ph.balance)},
                               {"spacing", set_to(ph.spacing_mm)},
                               {"tumor_contrast", set_to(ph.tumor_contrast)},
                               {"radius_min", set_to(ph.tumor_radius_min)},
                               {"radius_max", set_to(ph.tumor_radius_max)}};
                    has_cmd = true;
                } else if (a == "train") {
                    setters = data_setters(tr_data);
                    merge(setters, net_setters(tr_net));
                    merge(setters, train_setters(tr_cfg));
                    merge(setters, {{"checkpoint", set_to(tr_checkpoint)},
                                    {"history", set_to(tr_history)}});
                    has_cmd = true;
                } else if (a == "crossval") {
                    setters = data_setters(cv_data);
                    merge(setters, net_setters(cv_net));
                    merge(setters, train_setters(cv_cfg));
                    merge(setters, {{"folds", set_to(cv_k)}, {"out", set_to(cv_out)}});
                    has_cmd = true;
                } else if (a == "sweep") {
                    setters = data_setters(sw_data);
                    merge(setters, net_setters(sw_net));
                    merge(setters, train_setters(sw_cfg));
                    merge(setters, {{"folds", set_to(sw_k)},
                                    {"weights", set_to(sw_weights)},
                                    {"out", set_to(sw_out)}});
                    has_cmd = true;
                } else if (a == "predict") {
                    setters = {{"checkpoint", set_to(pr_checkpoint)},
                               {"pet", set_to(pr_pet)},
                               {"ct", set_to(pr_ct)},
                               {"mask_out", set_to(pr_mask)},
                               {"target_mm", set_to(pr_target_mm)}};
                    has_cmd = true;
                }
                if (has_cmd) break;
            }
            if (!has_cmd) throw UsageError("--config requires a subcommand");
            apply_config_file(pre, setters);
        }

        app.parse(argc, argv);

        if (synth->parsed()) {
            if (ph_extents.size() != 3) throw UsageError("extents needs exactly 3 values");
            ph.extents = {ph_extents[0], ph_extents[1], ph_extents[2]};
            echo_config("synth",
                        {{"n", ph.n_patients},
                         {"seed", ph.seed},
                         {"out", synth_out},
                         {"extents", ph_extents},
                         {"balance", ph.balance},
                         {"spacing", ph.spacing_mm},
                         {"tumor_contrast", ph.tumor_contrast},
                         {"radius_min", ph.tumor_radius_min},
                         {"radius_max", ph.tumor_radius_max}});
            return cmd_synth(ph, synth_out);
        }
        if (train->parsed()) {
            json j = net_echo(tr_net);
            j.update(train_echo(tr_cfg));
            j["manifest"] = resolved_manifest(tr_data);
            j["target_mm"] = tr_data.target_mm;
            j["checkpoint"] = tr_checkpoint;
            j["history"] = tr_history;
            echo_config("train", j);
            return cmd_train(tr_data, tr_net, tr_cfg, tr_checkpoint, tr_history);
        }
        if (crossval->parsed()) {
            json j = net_echo(cv_net);
            j.update(train_echo(cv_cfg));
            j["manifest"] = resolved_manifest(cv_data);
            j["target_mm"] = cv_data.target_mm;
            j["folds"] = cv_k;
            j["out"] = cv_out;
            echo_config("crossval", j);
            return cmd_crossval(cv_data, cv_net, cv_cfg, cv_k, cv_out);
        }
        if (sweep->parsed()) {
            json j = net_echo(sw_net);
            j.update(train_echo(sw_cfg));
            j["manifest"] = resolved_manifest(sw_data);
            j["target_mm"] = sw_data.target_mm;
            j["folds"] = sw_k;
            j["weights"] = sw_weights;
            j["out"] = sw_out;
            echo_config("sweep", j);
            return cmd_sweep(sw_data, sw_net, sw_cfg, sw_k, sw_weights, sw_out);
        }
        if (predict->parsed()) {
            echo_config("predict", {{"checkpoint", pr_checkpoint},
                                    {"pet", pr_pet},
                                    {"ct", pr_ct},
                                    {"mask_out", pr_mask},
                                    {"target_mm", pr_target_mm}});
            return cmd_predict(pr_checkpoint, pr_pet, pr_ct, pr_mask, pr_target_mm);
        }
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
