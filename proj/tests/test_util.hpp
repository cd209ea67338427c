#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vesselkit/error.hpp"
#include "vesselkit/volume.hpp"

namespace vk::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("vesselkit_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

inline Volume3D random_volume(const Dims& d, std::uint64_t seed, float lo = 0.0F, float hi = 1.0F,
                              VolumeKind kind = VolumeKind::intensity, Spacing s = {}) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> data(d.count());
    for (auto& x : data) x = u(rng);
    return Volume3D(d, s, std::move(data), kind);
}

inline Volume3D random_mask(const Dims& d, std::uint64_t seed, double p_on, Spacing s = {}) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(p_on);
    std::vector<float> data(d.count());
    for (auto& x : data) x = b(rng) ? 1.0F : 0.0F;
    return Volume3D(d, s, std::move(data), VolumeKind::binary_mask);
}

/// Code of the vk::Error thrown by fn, or nullopt when it returns normally.
template <class F>
std::optional<ErrorCode> code_of(F&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

template <class T>
void put(std::vector<std::uint8_t>& buf, std::size_t offset, T value) {
    std::memcpy(buf.data() + offset, &value, sizeof(T));
}

}  // namespace vk::test
