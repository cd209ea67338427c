#include "vesselkit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "vesselkit/adam.hpp"
#include "vesselkit/error.hpp"
#include "vesselkit/intensity.hpp"
#include "vesselkit/metrics.hpp"
#include "vesselkit/nifti.hpp"
#include "vesselkit/ops.hpp"
#include "vesselkit/parallel.hpp"
#include "vesselkit/phantom.hpp"

namespace vk {

using ad::Tensor;

// ---- TrainConfig ------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(std::isfinite(lr0) && lr0 >= 0.0)) fail(ErrorCode::config, "lr0 must be finite and >= 0");
    if (!(lr_factor > 0.0 && lr_factor < 1.0)) fail(ErrorCode::config, "lr_factor must lie in (0,1)");
    if (plateau_patience < 1) fail(ErrorCode::config, "plateau_patience must be >= 1");
    if (batch_size < 1) fail(ErrorCode::config, "batch_size must be >= 1");
    if (!(min_delta >= 0.0)) fail(ErrorCode::config, "min_delta must be >= 0");
    tversky.validate();
}

KeyValues TrainConfig::to_kv() const {
    return {
        {"lr0", exact_double(lr0)},
        {"plateau_patience", std::to_string(plateau_patience)},
        {"lr_factor", exact_double(lr_factor)},
        {"min_delta", exact_double(min_delta)},
        {"batch_size", std::to_string(batch_size)},
        {"epochs_stage1", std::to_string(epochs_stage1)},
        {"epochs_finetune", std::to_string(epochs_finetune)},
        {"tversky_alpha", exact_double(tversky.alpha)},
        {"tversky_beta", exact_double(tversky.beta)},
        {"tversky_eps", exact_double(tversky.eps)},
        {"seed", std::to_string(seed)},
    };
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.lr0 = kv_double(kv, "lr0", c.lr0);
    c.plateau_patience = kv_size(kv, "plateau_patience", c.plateau_patience);
    c.lr_factor = kv_double(kv, "lr_factor", c.lr_factor);
    c.min_delta = kv_double(kv, "min_delta", c.min_delta);
    c.batch_size = kv_size(kv, "batch_size", c.batch_size);
    c.epochs_stage1 = kv_size(kv, "epochs_stage1", c.epochs_stage1);
    c.epochs_finetune = kv_size(kv, "epochs_finetune", c.epochs_finetune);
    c.tversky.alpha = kv_double(kv, "tversky_alpha", c.tversky.alpha);
    c.tversky.beta = kv_double(kv, "tversky_beta", c.tversky.beta);
    c.tversky.eps = kv_double(kv, "tversky_eps", c.tversky.eps);
    c.seed = kv_u64(kv, "seed", c.seed);
    return c;
}

// ---- TrainLog ---------------------------------------------------------------

std::string TrainLog::header() { return "stage\tepoch\ttrain_loss\tval_dsc\tlr\twall_s"; }

std::string TrainLog::format(const EpochRecord& r) {
    return r.stage + '\t' + std::to_string(r.epoch) + '\t' + exact_double(r.train_loss) + '\t' +
           exact_double(r.val_dsc) + '\t' + exact_double(r.lr) + '\t' + exact_double(r.wall_s);
}

std::string TrainLog::to_text() const {
    std::string out = header() + '\n';
    for (const auto& r : records) out += format(r) + '\n';
    return out;
}

TrainLog TrainLog::parse(const std::string& text) {
    TrainLog log;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.rfind("stage\t", 0) == 0) continue;
        std::istringstream ss(line);
        EpochRecord r;
        if (!(ss >> r.stage >> r.epoch >> r.train_loss >> r.val_dsc >> r.lr >> r.wall_s)) {
            fail(ErrorCode::format, "train log line " + std::to_string(line_no) + " is malformed");
        }
        log.records.push_back(r);
    }
    return log;
}

void TrainLog::append_to(const std::filesystem::path& path) const {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) fail(ErrorCode::io, "cannot append to log '" + path.string() + "'");
    if (fresh) out << header() << '\n';
    for (const auto& r : records) out << format(r) << '\n';
}

std::optional<double> TrainLog::max_val_dsc() const {
    std::optional<double> best;
    for (const auto& r : records) {
        if (!best || r.val_dsc > *best) best = r.val_dsc;
    }
    return best;
}

// ---- PlateauScheduler -------------------------------------------------------

PlateauScheduler::PlateauScheduler(double lr0, std::size_t patience, double factor, double min_delta)
    : lr_(lr0), patience_(patience), factor_(factor), min_delta_(min_delta),
      best_(-std::numeric_limits<double>::infinity()) {}

bool PlateauScheduler::step(double metric) {
    if (metric > best_ + min_delta_) {
        best_ = metric;
        bad_ = 0;
        return false;
    }
    if (++bad_ >= patience_) {
        lr_ *= factor_;
        bad_ = 0;
        return true;
    }
    return false;
}

std::optional<std::string> check_plateau_rule(const TrainLog& log, const TrainConfig& cfg) {
    std::optional<PlateauScheduler> sched;
    std::string stage;
    double prev_lr = 0.0;
    for (std::size_t i = 0; i < log.records.size(); ++i) {
        const auto& r = log.records[i];
        if (!sched || r.stage != stage) {
            sched.emplace(cfg.lr0, cfg.plateau_patience, cfg.lr_factor, cfg.min_delta);
            stage = r.stage;
        } else if (r.lr > prev_lr) {
            return "record " + std::to_string(i) + ": lr increased within stage " + stage;
        }
        if (r.lr != sched->lr()) {
            return "record " + std::to_string(i) + " (" + r.stage + " epoch " + std::to_string(r.epoch) +
                   "): lr " + exact_double(r.lr) + " but the plateau rule gives " + exact_double(sched->lr());
        }
        prev_lr = r.lr;
        sched->step(r.val_dsc);
    }
    return std::nullopt;
}

// ---- preprocessing and inference ---------------------------------------------

std::string_view to_string(InputMode m) noexcept { return m == InputMode::raw ? "raw" : "frangi"; }

InputMode input_mode_from_string(std::string_view s) {
    if (s == "raw") return InputMode::raw;
    if (s == "frangi") return InputMode::frangi;
    fail(ErrorCode::config, "input mode must be raw or frangi, got '" + std::string(s) + "'");
}

Volume3D preprocess(const Volume3D& v, InputMode mode, const FrangiParams& frangi) {
    Volume3D n = normalize_intensity(v);
    if (mode == InputMode::raw) return n;
    return frangi_multiscale(n, frangi);
}

double dice(const Volume3D& pred, const Volume3D& truth) {
    const auto c = confusion(pred, truth);
    const auto m = segmentation_metrics(c);
    return m.dsc.value_or(1.0);
}

std::vector<LabeledVolume> load_split(const std::vector<DatasetEntry>& entries, Split split, InputMode mode,
                                      const FrangiParams& frangi) {
    std::vector<const DatasetEntry*> picked;
    for (const auto& e : entries) {
        if (e.split == split) picked.push_back(&e);
    }
    std::vector<LabeledVolume> out(picked.size());
    parallel_for(picked.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            out[i] = {preprocess(read_nifti(picked[i]->image), mode, frangi), read_nifti(picked[i]->label)};
        }
    });
    return out;
}

std::vector<PatchPair> sample_training_set(const std::vector<LabeledVolume>& volumes, std::size_t per_volume,
                                           const Dims& size, std::uint64_t seed, double fg_fraction) {
    std::vector<PatchPair> out;
    out.reserve(volumes.size() * per_volume);
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        auto p = sample_random_patches(volumes[i].image, volumes[i].truth, per_volume, size, derive_seed(seed, i),
                                       fg_fraction);
        std::move(p.begin(), p.end(), std::back_inserter(out));
    }
    return out;
}

RunSeeds fan_out(std::uint64_t seed) { return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3)}; }

namespace {

Tensor<float> volume_tensor(const Volume3D& v) {
    const Dims& d = v.dims();
    return Tensor<float>::from({1, 1, d.nz, d.ny, d.nx}, std::vector<float>(v.data().begin(), v.data().end()));
}

void check_divisible(const ModelConfig& mc, const Dims& size, const char* what) {
    const std::size_t m = mc.size_multiple();
    for (std::size_t a = 0; a < 3; ++a) {
        if (size[a] == 0 || size[a] % m != 0) {
            fail(ErrorCode::dimension, std::string(what) + " sides must be positive multiples of " +
                                           std::to_string(m) + " for " + std::to_string(mc.levels) + " levels");
        }
    }
}

}  // namespace

Volume3D predict_patch(const Model<float>& m, const Volume3D& patch) {
    ad::NoGradGuard guard;
    check_divisible(m.config, patch.dims(), "patch");
    auto probs = ad::softmax_channels(forward(m, volume_tensor(patch)).logits);
    const std::size_t n = patch.size();
    std::vector<float> p0(probs.data().begin(), probs.data().begin() + static_cast<std::ptrdiff_t>(n));
    // Softmax output can round to exactly 1 + ulp; keep the probability invariant.
    for (auto& x : p0) x = std::clamp(x, 0.0F, 1.0F);
    return patch.with_data(std::move(p0), VolumeKind::probability);
}

Prediction predict_volume(const Model<float>& m, const Volume3D& v, const Dims& patch_size, const Dims& stride) {
    const Dims& d = v.dims();
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch_size[a] > d[a]) {
            char msg[256];
            std::snprintf(msg, sizeof msg,
                          "volume (%zu,%zu,%zu) is smaller than patch (%zu,%zu,%zu); pad it to at least "
                          "(%zu,%zu,%zu) before inference",
                          d.nx, d.ny, d.nz, patch_size.nx, patch_size.ny, patch_size.nz,
                          std::max(d.nx, patch_size.nx), std::max(d.ny, patch_size.ny),
                          std::max(d.nz, patch_size.nz));
            fail(ErrorCode::dimension, msg);
        }
    }
    check_divisible(m.config, patch_size, "patch");
    const PatchGrid grid = make_grid(d, patch_size, stride);
    std::vector<Volume3D> outs(grid.origins.size());
    parallel_for(grid.origins.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t k = b; k < e; ++k) outs[k] = predict_patch(m, extract_patch(v, grid.origins[k], patch_size));
    });
    Volume3D prob = stitch(grid, outs);
    // Two classes: argmax picks vessel when p_vessel > 1 - p_vessel.
    Volume3D mask = threshold(prob, 0.5F);
    return {std::move(prob), std::move(mask)};
}

// ---- training -----------------------------------------------------------------

namespace {

struct Batch {
    Tensor<float> x;
    Tensor<float> y;
};

Batch make_batch(const std::vector<PatchPair>& patches, std::span<const std::size_t> idx) {
    const Dims& d = patches[idx[0]].image.dims();
    const std::size_t n = d.count();
    std::vector<float> x(n * idx.size());
    std::vector<float> y(n * idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& p = patches[idx[b]];
        std::copy(p.image.data().begin(), p.image.data().end(), x.begin() + static_cast<std::ptrdiff_t>(b * n));
        std::copy(p.label.data().begin(), p.label.data().end(), y.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return {Tensor<float>::from({idx.size(), 1, d.nz, d.ny, d.nx}, std::move(x)),
            Tensor<float>::from({idx.size(), 1, d.nz, d.ny, d.nx}, std::move(y))};
}

void check_patches(const std::vector<PatchPair>& patches, const ModelConfig& mc) {
    if (patches.empty()) fail(ErrorCode::config, "training set is empty");
    const Dims size = patches.front().image.dims();
    check_divisible(mc, size, "training patch");
    for (const auto& p : patches) {
        if (p.image.dims() != size || p.label.dims() != size) {
            fail(ErrorCode::shape, "training patches must share one size");
        }
    }
}

double stitched_val_dsc(const Model<float>& m, const std::vector<LabeledVolume>& val, const Dims& patch,
                        const Dims& stride) {
    double total = 0.0;
    for (const auto& lv : val) total += dice(predict_volume(m, lv.image, patch, stride).mask, lv.truth);
    return total / static_cast<double>(val.size());
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, const std::string& stage, std::size_t epoch,
                                      double dsc) {
    char name[96];
    std::snprintf(name, sizeof name, "%s_epoch%03zu_dsc%.4f.cvau", stage.c_str(), epoch, dsc);
    return dir / name;
}

TrainResult run_stage(const std::string& stage, const Model<float>& init, std::vector<PatchPair> patches,
                      const std::vector<LabeledVolume>& val, const TrainConfig& cfg, std::size_t epochs,
                      const TrainOptions& opt) {
    cfg.validate();
    if (val.empty()) fail(ErrorCode::config, "validation set is empty");
    check_patches(patches, init.config);
    const Dims patch_size = patches.front().image.dims();
    const Dims val_patch = opt.val_patch.count() == 0 ? patch_size : opt.val_patch;
    const Dims val_stride = opt.val_stride.count() == 0 ? default_stride(val_patch) : opt.val_stride;
    if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

    TrainResult res;
    Model<float> model = init.clone();
    res.best = init.clone();
    res.best_dsc = -std::numeric_limits<double>::infinity();
    auto params = model.parameter_list();
    ad::AdamState<float> adam;
    PlateauScheduler sched(cfg.lr0, cfg.plateau_patience, cfg.lr_factor, cfg.min_delta);

    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        if (epoch > 1 && opt.resample) {
            patches = opt.resample(epoch);
            check_patches(patches, init.config);
        }
        std::vector<std::size_t> order(patches.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(derive_seed(cfg.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        const double lr = sched.lr();
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const Batch batch = make_batch(patches, std::span(order).subspan(b0, b1 - b0));
            auto probs = ad::softmax_channels(forward(model, batch.x).logits);
            auto loss = tversky_loss(probs, batch.y, cfg.tversky);
            const double l = loss.item();
            if (!std::isfinite(l)) {
                fail(ErrorCode::non_finite, stage + " epoch " + std::to_string(epoch) + " batch " +
                                                std::to_string(batches + 1) + ": loss is not finite");
            }
            loss.backward();
            ad::adam_step(std::span(params), adam, lr);
            model.zero_grad();
            for (const auto& [name, t] : model.params) {
                for (float v : t.data()) {
                    if (!std::isfinite(v)) {
                        fail(ErrorCode::non_finite, stage + " epoch " + std::to_string(epoch) + " batch " +
                                                        std::to_string(batches + 1) + ": parameter " + name +
                                                        " is not finite");
                    }
                }
            }
            loss_sum += l;
            ++batches;
        }

        const double dsc = opt.validate ? opt.validate(model, epoch)
                                        : stitched_val_dsc(model, val, val_patch, val_stride);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochRecord rec{stage, epoch, loss_sum / static_cast<double>(batches), dsc, lr, wall};
        res.log.records.push_back(rec);

        if (dsc > res.best_dsc) {
            res.best_dsc = dsc;
            res.best_epoch = epoch;
            res.best = model.clone();
            if (!opt.checkpoint_dir.empty()) {
                Metadata meta = opt.checkpoint_meta;
                meta["stage"] = stage;
                meta["epoch"] = std::to_string(epoch);
                meta["val_dsc"] = exact_double(dsc);
                res.best_path = checkpoint_path(opt.checkpoint_dir, stage, epoch, dsc);
                save_checkpoint(res.best, res.best_path, meta);
            }
        }
        sched.step(dsc);
        if (opt.on_epoch) opt.on_epoch(rec);
    }
    if (res.best_epoch == 0) res.best_dsc = 0.0;
    res.last = std::move(model);
    return res;
}

}  // namespace

TrainResult train(const Model<float>& init, std::vector<PatchPair> train_patches,
                  const std::vector<LabeledVolume>& val, const TrainConfig& cfg, const TrainOptions& opt) {
    return run_stage("train", init, std::move(train_patches), val, cfg, cfg.epochs_stage1, opt);
}

TrainResult fine_tune(const Model<float>& checkpoint, std::vector<PatchPair> train_patches,
                      const std::vector<LabeledVolume>& val, const TrainConfig& cfg, const TrainOptions& opt) {
    std::string bad;
    if (checkpoint.config.in_channels != 1) {
        bad += " in_channels=" + std::to_string(checkpoint.config.in_channels) + " (data has 1)";
    }
    if (checkpoint.config.num_classes != 2) {
        bad += " num_classes=" + std::to_string(checkpoint.config.num_classes) + " (data has 2)";
    }
    if (!train_patches.empty()) {
        const Dims s = train_patches.front().image.dims();
        const std::size_t m = checkpoint.config.size_multiple();
        if (s.nx % m != 0 || s.ny % m != 0 || s.nz % m != 0) {
            bad += " levels=" + std::to_string(checkpoint.config.levels) + " (patch sides not multiples of " +
                   std::to_string(m) + ")";
        }
    }
    if (!bad.empty()) fail(ErrorCode::incompatible, "checkpoint does not fit the fine-tuning data:" + bad);
    return run_stage("finetune", checkpoint, std::move(train_patches), val, cfg, cfg.epochs_finetune, opt);
}

}  // namespace vk
