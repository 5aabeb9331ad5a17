#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "calcquant/error.hpp"

namespace calcquant {

using Point3 = std::array<double, 3>;

/// Geometry of a regular voxel lattice. `origin` is the physical position (mm)
/// of the center of voxel (0, 0, 0); axis 2 is the longitudinal (slice) axis.
struct Grid3 {
    std::array<std::int32_t, 3> dims{1, 1, 1};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::array<double, 3> origin{0.0, 0.0, 0.0};

    [[nodiscard]] std::size_t voxel_count() const noexcept {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }
    [[nodiscard]] double voxel_volume() const noexcept {
        return spacing[0] * spacing[1] * spacing[2];
    }
    [[nodiscard]] std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
        return static_cast<std::size_t>(i + dims[0] * (j + static_cast<std::int64_t>(dims[1]) * k));
    }
    [[nodiscard]] Point3 position(double i, double j, double k) const noexcept {
        return {origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2]};
    }
    [[nodiscard]] Point3 continuous_index(const Point3& mm) const noexcept {
        return {(mm[0] - origin[0]) / spacing[0], (mm[1] - origin[1]) / spacing[1],
                (mm[2] - origin[2]) / spacing[2]};
    }
    /// Physical center of the lattice (mean of the extreme voxel centers).
    [[nodiscard]] Point3 center() const noexcept {
        return position((dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0, (dims[2] - 1) / 2.0);
    }

    /// Throws ErrorCode::invalid_argument unless dims >= 1 and spacings > 0.
    void validate() const;

    friend bool operator==(const Grid3&, const Grid3&) = default;
};

enum class SampleKind { volume, probability, mask };
enum class Interpolation { nearest, linear };

/// Attenuation image in HU. Held as double so that smoothing and resampling
/// stay exact; samples must fit the signed 16-bit range and are rounded to
/// the nearest integer when written to disk.
struct HuTraits {
    using value_type = double;
    static constexpr SampleKind kind = SampleKind::volume;
    static constexpr double fill = -1024.0;
    static constexpr std::string_view dtype = "i16";
    static constexpr std::string_view name = "volume";
    static void check(std::span<const double> samples);
};

struct ProbabilityTraits {
    using value_type = double;
    static constexpr SampleKind kind = SampleKind::probability;
    static constexpr double fill = 0.0;
    static constexpr std::string_view dtype = "f32";
    static constexpr std::string_view name = "probability map";
    static void check(std::span<const double> samples);
};

struct MaskTraits {
    using value_type = std::uint8_t;
    static constexpr SampleKind kind = SampleKind::mask;
    static constexpr std::uint8_t fill = 0;
    static constexpr std::string_view dtype = "u8";
    static constexpr std::string_view name = "mask";
    static void check(std::span<const std::uint8_t> samples);
};

/// Immutable grid of samples, x-fastest. Invariants are checked once at
/// construction; use `release()` on an rvalue to take the buffer for edits.
template <class Traits>
class VoxelGrid {
public:
    using traits = Traits;
    using value_type = typename Traits::value_type;

    VoxelGrid(Grid3 grid, std::vector<value_type> samples)
        : grid_(grid), samples_(std::move(samples)) {
        grid_.validate();
        require(samples_.size() == grid_.voxel_count(), ErrorCode::invalid_argument,
                "sample-count mismatch: expected " + std::to_string(grid_.voxel_count()) +
                    ", got " + std::to_string(samples_.size()));
        Traits::check(samples_);
    }

    static VoxelGrid filled(const Grid3& grid, value_type value) {
        grid.validate();
        return VoxelGrid(grid, std::vector<value_type>(grid.voxel_count(), value));
    }

    [[nodiscard]] const Grid3& grid() const noexcept { return grid_; }
    [[nodiscard]] std::span<const value_type> samples() const noexcept { return samples_; }
    [[nodiscard]] std::size_t size() const noexcept { return samples_.size(); }
    [[nodiscard]] value_type operator[](std::size_t n) const noexcept { return samples_[n]; }
    [[nodiscard]] value_type operator()(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
        return samples_[grid_.index(i, j, k)];
    }

    [[nodiscard]] std::vector<value_type> release() && { return std::move(samples_); }

    friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

private:
    Grid3 grid_;
    std::vector<value_type> samples_;
};

using Volume = VoxelGrid<HuTraits>;
using ProbMap = VoxelGrid<ProbabilityTraits>;
using Mask = VoxelGrid<MaskTraits>;
using AnyGrid = std::variant<Volume, ProbMap, Mask>;

[[nodiscard]] const Grid3& grid_of(const AnyGrid& g);
[[nodiscard]] SampleKind kind_of(const AnyGrid& g);

// VGF serialization. Header lines are `VGF1`, `dims=`, `spacing=`, `origin=`,
// `dtype=`, `end`, each "\n"-terminated, followed by little-endian samples.
[[nodiscard]] std::string encode_grid(const AnyGrid& g);
[[nodiscard]] AnyGrid decode_grid(std::string_view bytes);

[[nodiscard]] AnyGrid read_grid_file(const std::filesystem::path& path);
void write_grid_file(const AnyGrid& g, const std::filesystem::path& path);

/// Reads a file and requires it to hold the given kind.
template <class G>
[[nodiscard]] G read_grid_file_as(const std::filesystem::path& path) {
    AnyGrid any = read_grid_file(path);
    if (auto* g = std::get_if<G>(&any)) return std::move(*g);
    fail(ErrorCode::format, path.string() + ": expected a " + std::string(G::traits::name));
}

// Point sampling in mm. Points outside the voxel-cell bounding box return
// `fill` (-1024 HU for volumes, 0 for probability maps by default).
[[nodiscard]] double sample_at(const Volume& v, const Point3& mm, Interpolation mode,
                               double fill = HuTraits::fill);
[[nodiscard]] double sample_at(const ProbMap& p, const Point3& mm, Interpolation mode,
                               double fill = ProbabilityTraits::fill);
[[nodiscard]] std::uint8_t sample_at(const Mask& m, const Point3& mm);

/// True when `c` (continuous voxel index) lies within the voxel-cell extents.
[[nodiscard]] bool inside_cells(const Grid3& grid, const Point3& c) noexcept;

/// Trilinear interpolation at a continuous index, clamping to edge voxels.
/// Caller guarantees `inside_cells`.
[[nodiscard]] double interpolate_linear(const Grid3& grid, std::span<const double> samples,
                                        const Point3& c) noexcept;

void require_same_grid(const Grid3& a, const Grid3& b, std::string_view what);

} // namespace calcquant
