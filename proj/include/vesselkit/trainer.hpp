#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vesselkit/config.hpp"
#include "vesselkit/enhance.hpp"
#include "vesselkit/losses.hpp"
#include "vesselkit/network.hpp"
#include "vesselkit/patching.hpp"
#include "vesselkit/phantom.hpp"
#include "vesselkit/volume.hpp"

namespace vk {

struct TrainConfig {
    double lr0 = 1e-4;
    std::size_t plateau_patience = 10;
    double lr_factor = 0.1;
    double min_delta = 1e-4;
    std::size_t batch_size = 8;
    std::size_t epochs_stage1 = 70;
    std::size_t epochs_finetune = 30;
    TverskyParams tversky{};
    std::uint64_t seed = 0;

    /// lr0 = 0 is accepted as a null-update control.
    void validate() const;

    [[nodiscard]] KeyValues to_kv() const;
    /// Missing keys keep their defaults; unknown keys are ignored.
    static TrainConfig from_kv(const KeyValues& kv);
};

struct EpochRecord {
    std::string stage;  // "train" or "finetune"
    std::size_t epoch = 0;  // 1-based within the stage
    double train_loss = 0.0;
    double val_dsc = 0.0;
    double lr = 0.0;  // rate in effect during the epoch
    double wall_s = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> records;

    static std::string header();
    /// Tab separated; doubles are written so they parse back exactly.
    static std::string format(const EpochRecord& r);
    [[nodiscard]] std::string to_text() const;
    static TrainLog parse(const std::string& text);
    void append_to(const std::filesystem::path& path) const;
    [[nodiscard]] std::optional<double> max_val_dsc() const;
};

/// Reduce-on-plateau on a maximized metric.
class PlateauScheduler {
public:
    PlateauScheduler(double lr0, std::size_t patience, double factor, double min_delta);

    [[nodiscard]] double lr() const { return lr_; }
    /// Feeds one epoch's metric; returns true when the rate was just reduced.
    bool step(double metric);

private:
    double lr_;
    std::size_t patience_;
    double factor_;
    double min_delta_;
    double best_;
    std::size_t bad_ = 0;
};

/// Replays the scheduler over each stage of the log. Returns a description of
/// the first record whose lr disagrees, or nullopt when the log is consistent.
std::optional<std::string> check_plateau_rule(const TrainLog& log, const TrainConfig& cfg);

struct LabeledVolume {
    Volume3D image;
    Volume3D truth;
};

struct TrainOptions {
    /// Best checkpoints are written here when non-empty.
    std::filesystem::path checkpoint_dir;
    Metadata checkpoint_meta;
    /// Replaces the training patches before every epoch after the first; receives the 1-based epoch.
    std::function<std::vector<PatchPair>(std::size_t epoch)> resample;
    /// Overrides the stitched validation DSC (used to inject plateaus).
    std::function<double(const Model<float>&, std::size_t epoch)> validate;
    std::function<void(const EpochRecord&)> on_epoch;
    /// Patch size and stride for stitched validation; zero dims mean "use the training patch size, half stride".
    Dims val_patch{};
    Dims val_stride{};
};

struct TrainResult {
    Model<float> best;
    Model<float> last;
    TrainLog log;
    double best_dsc = 0.0;
    std::size_t best_epoch = 0;  // 0 when no epoch ran
    std::filesystem::path best_path;
};

TrainResult train(const Model<float>& init, std::vector<PatchPair> train_patches,
                  const std::vector<LabeledVolume>& val, const TrainConfig& cfg, const TrainOptions& opt = {});

/// Second stage: fresh optimizer and schedule from the given weights, cfg.epochs_finetune epochs.
TrainResult fine_tune(const Model<float>& checkpoint, std::vector<PatchPair> train_patches,
                      const std::vector<LabeledVolume>& val, const TrainConfig& cfg, const TrainOptions& opt = {});

struct Prediction {
    Volume3D probability;  // vessel probability
    Volume3D mask;
};

Prediction predict_volume(const Model<float>& m, const Volume3D& v, const Dims& patch_size, const Dims& stride);

/// Vessel-class softmax probability of one forward pass on a whole patch.
Volume3D predict_patch(const Model<float>& m, const Volume3D& patch);

enum class InputMode { raw, frangi };
std::string_view to_string(InputMode m) noexcept;
InputMode input_mode_from_string(std::string_view s);

/// Input preparation shared by training and inference: percentile
/// normalization, then (for frangi) the vesselness map alone.
Volume3D preprocess(const Volume3D& v, InputMode mode, const FrangiParams& frangi = {});

/// Reads the entries of one split and preprocesses every image.
std::vector<LabeledVolume> load_split(const std::vector<DatasetEntry>& entries, Split split, InputMode mode,
                                      const FrangiParams& frangi = {});

/// `per_volume` patches from each volume, volume i sampled with derive_seed(seed, i).
std::vector<PatchPair> sample_training_set(const std::vector<LabeledVolume>& volumes, std::size_t per_volume,
                                           const Dims& size, std::uint64_t seed, double fg_fraction = 0.5);

/// Per-purpose seeds fanned out from one run seed.
struct RunSeeds {
    std::uint64_t model;
    std::uint64_t patches;
    std::uint64_t shuffle;
};
RunSeeds fan_out(std::uint64_t seed);

/// DSC of the predicted mask against the truth (1 when both are empty).
double dice(const Volume3D& pred, const Volume3D& truth);

}  // namespace vk
