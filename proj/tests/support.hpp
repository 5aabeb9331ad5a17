#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "calcquant/rng.hpp"
#include "calcquant/volgrid.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("calcquant-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const noexcept { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline calcquant::Grid3 cube(std::int32_t nx, std::int32_t ny, std::int32_t nz, double spacing = 0.5) {
    calcquant::Grid3 g;
    g.dims = {nx, ny, nz};
    g.spacing = {spacing, spacing, spacing};
    return g;
}

inline calcquant::Mask random_mask(const calcquant::Grid3& g, double density, std::uint64_t seed) {
    calcquant::Rng rng(seed);
    std::vector<std::uint8_t> m(g.voxel_count());
    for (auto& v : m) v = rng.uniform() < density ? 1 : 0;
    return {g, std::move(m)};
}

} // namespace testutil
