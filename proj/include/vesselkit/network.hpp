#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vesselkit/tensor.hpp"

namespace vk {

/// Layer widths C_l = base_channels * 2^l for l in [0, levels).
struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t num_classes = 2;
    std::size_t levels = 5;
    std::size_t base_channels = 16;
    std::size_t gn_groups = 8;
    /// Kernel sizes of the two encoder convs per level. Empty selects
    /// {7,3} at level 0 and {3,3} below it.
    std::vector<std::array<std::size_t, 2>> kernel_plan;
    bool deep_supervision = true;

    [[nodiscard]] std::size_t channels(std::size_t level) const { return base_channels << level; }
    [[nodiscard]] std::array<std::size_t, 2> kernels(std::size_t level) const;
    /// Spatial sides must be multiples of this.
    [[nodiscard]] std::size_t size_multiple() const { return std::size_t{1} << (levels - 1); }

    /// Throws a config error on any violated invariant.
    void validate() const;

    [[nodiscard]] std::map<std::string, std::string> to_kv() const;
    static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct Model {
    ModelConfig config;
    /// Name-ordered parameter map; names are stable across save/load.
    std::map<std::string, ad::Tensor<T>> params;

    [[nodiscard]] const ad::Tensor<T>& at(const std::string& name) const;
    /// Parameter handles in name order (they share storage with the model).
    [[nodiscard]] std::vector<ad::Tensor<T>> parameter_list() const;
    void zero_grad();
    /// Deep copy of every parameter.
    [[nodiscard]] Model clone() const;

    template <class U>
    [[nodiscard]] Model<U> cast() const {
        Model<U> out;
        out.config = config;
        for (const auto& [name, t] : params) {
            std::vector<U> data(t.data().begin(), t.data().end());
            out.params.emplace(name, ad::Tensor<U>::from(t.shape(), std::move(data), true));
        }
        return out;
    }
};

template <class T>
struct GateOutput {
    ad::Tensor<T> gated;
    /// Coefficients at the resolution of f, one channel.
    ad::Tensor<T> alpha;
};

template <class T>
struct ForwardResult {
    ad::Tensor<T> logits;
    /// One attention map per decoder level, finest first.
    std::vector<ad::Tensor<T>> alphas;
};

/// Kaiming-uniform (fan-in) conv weights, zero biases, unit/zero GN affine.
template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Additive attention gate named `prefix` in the model's parameter map.
template <class T>
GateOutput<T> attention_gate(const Model<T>& m, const std::string& prefix, const ad::Tensor<T>& f,
                             const ad::Tensor<T>& g);

template <class T>
ForwardResult<T> forward(const Model<T>& m, const ad::Tensor<T>& x);

template <class T>
std::size_t count_parameters(const Model<T>& m);

/// Parameter count of the default configuration.
std::size_t default_parameter_count();

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
    Model<float> model;
    /// Free-form entries stored next to the config (epoch, validation DSC, preprocessing).
    Metadata meta;
};

std::vector<std::uint8_t> encode_checkpoint(const Model<float>& m, const Metadata& meta = {});
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Model<float>& m, const std::filesystem::path& path, const Metadata& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vk
