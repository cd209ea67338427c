#include "vesselkit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "vesselkit/config.hpp"
#include "vesselkit/enhance.hpp"
#include "vesselkit/error.hpp"
#include "vesselkit/intensity.hpp"
#include "vesselkit/metrics.hpp"
#include "vesselkit/network.hpp"
#include "vesselkit/nifti.hpp"
#include "vesselkit/parallel.hpp"
#include "vesselkit/patching.hpp"
#include "vesselkit/phantom.hpp"
#include "vesselkit/trainer.hpp"

extern "C" void openblas_set_num_threads(int num_threads);

namespace vk::cli {

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string suggest(const std::string& word, const std::vector<std::string>& candidates) {
    std::string best;
    std::size_t best_d = std::string::npos;
    for (const auto& c : candidates) {
        const std::size_t d = edit_distance(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best_d <= std::max<std::size_t>(2, word.size() / 3) ? best : std::string{};
}

// A subcommand's settings: defaults, then the config file, then flags.
struct Command {
    std::string name;
    CLI::App* app = nullptr;
    KeyValues defaults;
    std::map<std::string, std::string> flag_values;  // key -> raw flag text
    std::map<std::string, CLI::Option*> flag_options;
    std::vector<std::string> flag_names;
    std::string config_path;
    bool dry_run = false;

    void option(const std::string& flag, const std::string& key, const std::string& help) {
        flag_options[key] = app->add_option("--" + flag, flag_values[key], help);
        flag_names.push_back("--" + flag);
    }

    [[nodiscard]] KeyValues resolve() const {
        KeyValues kv = defaults;
        if (!config_path.empty()) {
            for (auto& [k, v] : read_kv_file(config_path)) kv[k] = v;
        }
        for (const auto& [key, opt] : flag_options) {
            if (opt->count() > 0) kv[key] = flag_values.at(key);
        }
        return kv;
    }
};

std::string require(const KeyValues& kv, const std::string& key, const std::string& flag) {
    auto it = kv.find(key);
    if (it == kv.end() || it->second.empty()) throw UsageError("missing --" + flag + " (or '" + key + "' in --config)");
    return it->second;
}

std::string get(const KeyValues& kv, const std::string& key) {
    auto it = kv.find(key);
    return it == kv.end() ? std::string{} : it->second;
}

std::vector<double> parse_list(const std::string& text, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(kv_double({{key, item}}, key, 0.0));
    }
    if (out.empty()) fail(ErrorCode::config, key + " must list at least one value");
    return out;
}

Dims parse_dims(const std::string& text, const std::string& key) {
    const auto v = parse_list(text, key);
    auto side = [&](double x) {
        if (!(x >= 1.0) || x != std::floor(x)) fail(ErrorCode::config, key + " entries must be positive integers");
        return static_cast<std::size_t>(x);
    };
    if (v.size() == 1) return {side(v[0]), side(v[0]), side(v[0])};
    if (v.size() == 3) return {side(v[0]), side(v[1]), side(v[2])};
    fail(ErrorCode::config, key + " must be one side or three comma-separated sides");
}

std::string dims_text(const Dims& d) {
    return std::to_string(d.nx) + ',' + std::to_string(d.ny) + ',' + std::to_string(d.nz);
}

std::string list_text(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + exact_double(v[i]);
    return s;
}

Dims stride_for(const KeyValues& kv, const Dims& patch) {
    const std::string s = get(kv, "stride");
    return s.empty() || s == "half" ? default_stride(patch) : parse_dims(s, "stride");
}

FrangiParams frangi_from(const KeyValues& kv) {
    FrangiParams f;
    if (const auto s = get(kv, "scales"); !s.empty()) f.scales = parse_list(s, "scales");
    f.validate();
    return f;
}

void apply_threads(const KeyValues& kv) {
    std::size_t n = 0;
    if (const auto t = get(kv, "threads"); !t.empty()) {
        n = kv_size(kv, "threads", 0);
    } else if (const char* env = std::getenv("VESSELKIT_THREADS"); env != nullptr && *env != '\0') {
        n = kv_size({{"VESSELKIT_THREADS", env}}, "VESSELKIT_THREADS", 0);
    }
    if (n > 0) {
        set_max_threads(n);
        openblas_set_num_threads(static_cast<int>(n));
    }
}

void echo(std::ostream& out, const std::string& sub, const KeyValues& kv) {
    out << "# vesselkit " << sub << '\n';
    for (const auto& [k, v] : kv) out << "#   " << k << " = " << v << '\n';
    out << "# seed = " << get(kv, "seed") << '\n';
}

void require_exists(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p)) fail(ErrorCode::io, what + " '" + p.string() + "' does not exist");
}

void merge(KeyValues& into, const KeyValues& from) {
    for (const auto& [k, v] : from) into.emplace(k, v);
}

// ---- subcommands ----------------------------------------------------------------

int run_phantom(const KeyValues& kv, bool dry, std::ostream& out) {
    PhantomRanges r;
    const Dims d = parse_dims(require(kv, "size", "size"), "size");
    r.dims = d;
    r.min_radius = kv_double(kv, "min_radius", r.min_radius);
    r.max_radius = kv_double(kv, "max_radius", r.max_radius);
    r.min_noise = kv_double(kv, "min_noise", r.min_noise);
    r.max_noise = kv_double(kv, "max_noise", r.max_noise);
    r.min_curves = kv_size(kv, "min_curves", r.min_curves);
    r.max_curves = kv_size(kv, "max_curves", r.max_curves);
    const std::size_t n = kv_size(kv, "n", 0);
    if (n == 0) fail(ErrorCode::config, "n must be >= 1");
    const std::filesystem::path dir = require(kv, "out", "out");
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    const auto entries = generate_dataset(dir, n, r, kv_u64(kv, "seed", 0));
    const auto c = split_counts(n);
    out << "wrote " << entries.size() << " phantoms to " << dir.string() << " (train " << c[0] << ", val " << c[1]
        << ", test " << c[2] << ")\n";
    return kExitOk;
}

int run_enhance(const KeyValues& kv, bool dry, std::ostream& out) {
    const std::filesystem::path in = require(kv, "in", "in");
    const std::filesystem::path dst = require(kv, "out", "out");
    const FrangiParams f = frangi_from(kv);
    require_exists(in, "input");
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    const Volume3D v = preprocess(read_nifti(in), InputMode::frangi, f);
    write_nifti(v, dst);
    out << "wrote vesselness " << dst.string() << " checksum " << std::hex << checksum(v) << std::dec << '\n';
    return kExitOk;
}

int run_patchify(const KeyValues& kv, bool dry, std::ostream& out) {
    const std::filesystem::path in = require(kv, "in", "in");
    const std::filesystem::path label = require(kv, "label", "label");
    const std::filesystem::path dir = require(kv, "out", "out");
    const Dims patch = parse_dims(require(kv, "patch_size", "patch-size"), "patch_size");
    const std::size_t n = kv_size(kv, "n", 0);
    const double fg = kv_double(kv, "fg_fraction", 0.5);
    require_exists(in, "input");
    require_exists(label, "label");
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    const Volume3D image = read_nifti(in);
    const Volume3D truth = read_nifti(label);
    std::vector<PatchPair> pairs;
    if (n > 0) {
        pairs = sample_random_patches(image, truth, n, patch, kv_u64(kv, "seed", 0), fg);
    } else {
        const PatchGrid g = make_grid(image.dims(), patch, stride_for(kv, patch));
        for (const auto& o : g.origins) pairs.push_back({extract_patch(image, o, patch), extract_patch(truth, o, patch), o});
    }
    save_patch_dataset(dir, pairs);
    out << "wrote " << pairs.size() << " patch pairs to " << dir.string() << '\n';
    return kExitOk;
}

struct TrainSetup {
    ModelConfig model;
    TrainConfig train;
    FrangiParams frangi;
    InputMode input = InputMode::frangi;
    Dims patch{};
    Dims stride{};
    std::size_t per_volume = 0;
    double fg_fraction = 0.5;
    bool resample = false;
    std::uint64_t seed = 0;
    std::filesystem::path data;
    std::filesystem::path out;
};

TrainSetup train_setup(const KeyValues& kv) {
    TrainSetup s;
    s.model = ModelConfig::from_kv(kv);
    s.model.validate();
    s.train = TrainConfig::from_kv(kv);
    s.seed = kv_u64(kv, "seed", 0);
    s.train.seed = fan_out(s.seed).shuffle;
    s.train.validate();
    s.frangi = frangi_from(kv);
    s.input = input_mode_from_string(get(kv, "input"));
    s.patch = parse_dims(require(kv, "patch_size", "patch-size"), "patch_size");
    s.stride = stride_for(kv, s.patch);
    s.per_volume = kv_size(kv, "patches_per_volume", 0);
    if (s.per_volume == 0) fail(ErrorCode::config, "patches_per_volume must be >= 1");
    s.fg_fraction = kv_double(kv, "fg_fraction", 0.5);
    s.resample = kv_bool(kv, "resample", false);
    s.data = require(kv, "data", "data");
    s.out = require(kv, "out", "out");
    require_exists(s.data, "dataset");
    return s;
}

int run_training(const KeyValues& kv, bool dry, std::ostream& out, bool finetune) {
    TrainSetup s = train_setup(kv);
    std::optional<Checkpoint> start;
    if (finetune) {
        const std::filesystem::path model = require(kv, "model", "model");
        require_exists(model, "model");
        start = load_checkpoint(model);
    }
    const auto entries = load_manifest(s.data);
    for (const auto& e : entries) {
        require_exists(e.image, "image");
        require_exists(e.label, "label");
    }
    if (dry) {
        out << "dry-run ok (" << entries.size() << " volumes listed)\n";
        return kExitOk;
    }
    const auto train_vols = load_split(entries, Split::train, s.input, s.frangi);
    const auto val_vols = load_split(entries, Split::val, s.input, s.frangi);
    if (train_vols.empty()) fail(ErrorCode::config, "dataset has no training volumes");
    const RunSeeds seeds = fan_out(s.seed);
    auto patches = sample_training_set(train_vols, s.per_volume, s.patch, seeds.patches, s.fg_fraction);

    TrainOptions opt;
    opt.checkpoint_dir = s.out;
    opt.val_patch = s.patch;
    opt.val_stride = s.stride;
    opt.checkpoint_meta = {{"input", std::string(to_string(s.input))},
                           {"scales", list_text(s.frangi.scales)},
                           {"patch_size", dims_text(s.patch)},
                           {"stride", dims_text(s.stride)},
                           {"seed", std::to_string(s.seed)}};
    if (s.resample) {
        opt.resample = [&](std::size_t epoch) {
            return sample_training_set(train_vols, s.per_volume, s.patch, derive_seed(seeds.patches, epoch),
                                       s.fg_fraction);
        };
    }
    opt.on_epoch = [&](const EpochRecord& r) { out << TrainLog::format(r) << std::endl; };
    out << TrainLog::header() << '\n';

    TrainResult res;
    if (finetune) {
        res = fine_tune(start->model, std::move(patches), val_vols, s.train, opt);
    } else {
        res = train(build_model<float>(s.model, seeds.model), std::move(patches), val_vols, s.train, opt);
    }
    res.log.append_to(s.out / "train_log.tsv");
    Metadata meta = opt.checkpoint_meta;
    meta["stage"] = finetune ? "finetune" : "train";
    meta["epoch"] = std::to_string(res.best_epoch);
    meta["val_dsc"] = exact_double(res.best_dsc);
    save_checkpoint(res.best, s.out / "best.cvau", meta);
    out << "best val_dsc " << res.best_dsc << " at epoch " << res.best_epoch << "; checkpoint "
        << (s.out / "best.cvau").string() << '\n';
    return kExitOk;
}

int run_predict(const KeyValues& kv, bool dry, std::ostream& out) {
    const std::filesystem::path model = require(kv, "model", "model");
    const std::filesystem::path in = require(kv, "in", "in");
    const std::filesystem::path dst = require(kv, "out", "out");
    require_exists(model, "model");
    require_exists(in, "input");
    const Checkpoint ck = load_checkpoint(model);
    // Preprocessing and tiling follow the checkpoint unless overridden.
    KeyValues eff = kv;
    for (const char* k : {"input", "scales", "patch_size", "stride"}) {
        if (get(eff, k).empty()) {
            if (auto it = ck.meta.find(k); it != ck.meta.end()) eff[k] = it->second;
        }
    }
    const InputMode mode = input_mode_from_string(get(eff, "input").empty() ? "frangi" : get(eff, "input"));
    const FrangiParams f = frangi_from(eff);
    const Dims patch = parse_dims(require(eff, "patch_size", "patch-size"), "patch_size");
    const Dims stride = stride_for(eff, patch);
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    const Volume3D v = preprocess(read_nifti(in), mode, f);
    const Prediction p = predict_volume(ck.model, v, patch, stride);
    write_nifti(p.mask, dst);
    if (const auto prob = get(kv, "prob"); !prob.empty()) write_nifti(p.probability, prob);
    out << "wrote mask " << dst.string() << " (" << count_foreground(p.mask) << " vessel voxels, checksum "
        << std::hex << checksum(p.mask) << std::dec << ")\n";
    return kExitOk;
}

std::vector<std::string> split_paths(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int run_eval(const KeyValues& kv, bool dry, std::ostream& out) {
    const auto preds = split_paths(require(kv, "pred", "pred"));
    const auto truths = split_paths(require(kv, "truth", "truth"));
    if (preds.size() != truths.size()) {
        throw UsageError("--pred and --truth need the same number of paths");
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
        require_exists(preds[i], "prediction");
        require_exists(truths[i], "truth");
    }
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    std::vector<MetricsReport> reports(preds.size());
    parallel_for(preds.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            reports[i] = evaluate(std::filesystem::path(preds[i]).filename().string(), read_nifti(preds[i]),
                                  read_nifti(truths[i]));
        }
    });
    std::ostringstream text;
    text << MetricsReport::record_header() << '\n';
    for (const auto& r : reports) text << r.to_record() << '\n';
    for (const auto& [k, v] : summarize(reports)) text << k << '=' << v << '\n';
    out << text.str();
    if (const auto dst = get(kv, "out"); !dst.empty()) {
        std::ofstream f(dst);
        if (!f) fail(ErrorCode::io, "cannot write report '" + dst + "'");
        f << text.str();
    }
    return kExitOk;
}

int run_info(const KeyValues& kv, bool dry, std::ostream& out) {
    const std::filesystem::path model = require(kv, "model", "model");
    require_exists(model, "model");
    if (dry) {
        out << "dry-run ok\n";
        return kExitOk;
    }
    const Checkpoint ck = load_checkpoint(model);
    for (const auto& [k, v] : ck.model.config.to_kv()) out << k << '=' << v << '\n';
    for (const auto& [k, v] : ck.meta) out << "meta." << k << '=' << v << '\n';
    out << "parameters=" << count_parameters(ck.model) << '\n';
    return kExitOk;
}

KeyValues training_defaults() {
    KeyValues kv = TrainConfig{}.to_kv();
    kv.erase("seed");
    merge(kv, ModelConfig{}.to_kv());
    merge(kv, {{"input", "frangi"},
               {"scales", list_text(FrangiParams{}.scales)},
               {"patch_size", "64"},
               {"stride", "half"},
               {"patches_per_volume", "190"},
               {"fg_fraction", "0.5"},
               {"resample", "false"},
               {"out", "run"},
               {"seed", "0"}});
    return kv;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cerebrovascular segmentation toolkit", "vesselkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    std::vector<Command> cmds;
    cmds.reserve(8);
    auto add = [&](const std::string& name, const std::string& help, KeyValues defaults) -> Command& {
        Command& c = cmds.emplace_back();
        c.name = name;
        c.app = app.add_subcommand(name, help);
        c.defaults = std::move(defaults);
        c.app->add_option("--config", c.config_path, "key=value settings file");
        c.app->add_flag("--dry-run", c.dry_run, "validate settings and paths, then stop");
        c.flag_names = {"--config", "--dry-run", "--help", "-h"};
        c.option("seed", "seed", "run seed");
        c.option("threads", "threads", "worker thread cap (falls back to VESSELKIT_THREADS)");
        c.option("out", "out", "output path");
        return c;
    };

    {
        Command& c = add("phantom", "generate a synthetic phantom dataset",
                         {{"n", "20"}, {"size", "64"}, {"seed", "0"}});
        c.option("n", "n", "number of volumes");
        c.option("size", "size", "volume side(s) in voxels");
    }
    {
        Command& c = add("enhance", "normalize and compute multiscale vesselness",
                         {{"scales", list_text(FrangiParams{}.scales)}, {"seed", "0"}});
        c.option("in", "in", "input NIfTI");
        c.option("scales", "scales", "comma-separated sigmas in mm");
    }
    {
        Command& c = add("patchify", "cut an image/label pair into patches",
                         {{"patch_size", "64"}, {"stride", "half"}, {"n", "190"}, {"fg_fraction", "0.5"},
                          {"seed", "0"}});
        c.option("in", "in", "image NIfTI");
        c.option("label", "label", "label NIfTI");
        c.option("patch-size", "patch_size", "patch side(s)");
        c.option("stride", "stride", "grid stride (used when --n 0)");
        c.option("n", "n", "random patches to draw; 0 tiles a grid");
        c.option("fg-fraction", "fg_fraction", "share of patches forced to contain vessel");
    }
    for (const char* name : {"train", "finetune"}) {
        const bool ft = std::string(name) == "finetune";
        Command& c = add(name, ft ? "fine-tune a checkpoint on a new dataset" : "train a model on a phantom dataset",
                         training_defaults());
        c.option("data", "data", "dataset directory or manifest");
        c.option("input", "input", "raw or frangi");
        c.option("scales", "scales", "comma-separated sigmas in mm");
        c.option("patch-size", "patch_size", "training patch side(s)");
        c.option("stride", "stride", "validation stitching stride");
        c.option("tversky-alpha", "tversky_alpha", "false-positive weight");
        c.option("tversky-beta", "tversky_beta", "false-negative weight");
        c.option("epochs", ft ? "epochs_finetune" : "epochs_stage1", "epoch budget");
        if (ft) c.option("model", "model", "checkpoint to start from");
    }
    {
        Command& c = add("predict", "segment a volume with a checkpoint", {{"seed", "0"}});
        c.option("model", "model", "checkpoint");
        c.option("in", "in", "input NIfTI");
        c.option("prob", "prob", "optional probability map output");
        c.option("patch-size", "patch_size", "inference patch side(s)");
        c.option("stride", "stride", "inference stride");
        c.option("scales", "scales", "comma-separated sigmas in mm");
        c.option("input", "input", "raw or frangi");
    }
    {
        Command& c = add("eval", "score predicted masks against truth", {{"seed", "0"}});
        c.option("pred", "pred", "predicted mask(s), comma-separated");
        c.option("truth", "truth", "truth mask(s), comma-separated");
    }
    {
        Command& c = add("info", "print checkpoint config and parameter count", {{"seed", "0"}});
        c.option("model", "model", "checkpoint");
    }
    auto find = [&](const std::string& n) -> Command& {
        return *std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == n; });
    };

    std::vector<std::string> names;
    for (const auto& c : cmds) names.push_back(c.name);
    try {
        if (!args.empty() && args[0].rfind('-', 0) != 0 &&
            std::find(names.begin(), names.end(), args[0]) == names.end()) {
            std::string msg = "unknown subcommand '" + args[0] + "'";
            if (const auto s = suggest(args[0], names); !s.empty()) msg += "; did you mean '" + s + "'?";
            throw UsageError(msg);
        }
        if (!args.empty()) {
            if (auto it = std::find(names.begin(), names.end(), args[0]); it != names.end()) {
                const Command& c = find(args[0]);
                for (std::size_t i = 1; i < args.size(); ++i) {
                    if (args[i].rfind("--", 0) != 0) continue;
                    const std::string flag = args[i].substr(0, args[i].find('='));
                    if (std::find(c.flag_names.begin(), c.flag_names.end(), flag) == c.flag_names.end() &&
                        flag != "--help-all") {
                        std::string msg = "unknown flag '" + flag + "' for " + c.name;
                        if (const auto s = suggest(flag, c.flag_names); !s.empty()) msg += "; did you mean '" + s + "'?";
                        throw UsageError(msg);
                    }
                }
            }
        }
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    }

    Command* selected = nullptr;
    for (auto& c : cmds) {
        if (c.app->parsed()) selected = &c;
    }
    if (selected == nullptr) {
        err << "usage error: no subcommand given\n";
        return kExitUsage;
    }
    try {
        const KeyValues kv = selected->resolve();
        echo(out, selected->name, kv);
        apply_threads(kv);
        const std::string& n = selected->name;
        const bool dry = selected->dry_run;
        if (n == "phantom") return run_phantom(kv, dry, out);
        if (n == "enhance") return run_enhance(kv, dry, out);
        if (n == "patchify") return run_patchify(kv, dry, out);
        if (n == "train") return run_training(kv, dry, out, false);
        if (n == "finetune") return run_training(kv, dry, out, true);
        if (n == "predict") return run_predict(kv, dry, out);
        if (n == "eval") return run_eval(kv, dry, out);
        return run_info(kv, dry, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Error& e) {
        err << e.what() << '\n';
        return kExitError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitError;
    }
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args, out, err);
}

}  // namespace vk::cli
