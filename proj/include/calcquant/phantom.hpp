#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calcquant/volgrid.hpp"

namespace calcquant::phantom {

/// Synthetic head CT: air, skull shell, brain, asymmetric ventricles,
/// sinuses, orbits, oblique petrous ridges, two carotid siphons, and
/// hard-edged calcifications next to the vessel walls.
struct PhantomSpec {
    Grid3 grid;
    std::uint64_t seed = 7;
    int calcifications = 8;
    int ensemble_members = 4;
    double noise_hu = 0.0;
    /// Fraction of calcifications the simulated observer misses and the
    /// simulated method misses (each drawn independently).
    double observer_miss_rate = 0.2;
    double method_miss_rate = 0.2;
    /// Extra bright non-calcium blobs the simulated method picks up.
    int method_false_positives = 2;
};

struct Calcification {
    Point3 center_mm;
    Point3 radii_mm;
    double hu = 0.0;
    bool observed = true;   ///< present in the manual mask
    bool detected = true;   ///< present in the automated mask
    std::size_t voxels = 0; ///< voxels covered on the grid
};

struct Phantom {
    Volume image;
    Mask truth;     ///< every calcification voxel (all above 130 HU)
    Mask manual;    ///< truth minus observer misses
    Mask automated; ///< truth minus method misses plus method false positives
    /// Per-member probability maps whose mean exceeds 0.5 exactly on `automated`.
    std::vector<ProbMap> members;
    std::vector<Calcification> calcifications;
};

[[nodiscard]] Grid3 default_grid();

/// Head phantom only (no lesions), used for registration.
[[nodiscard]] Volume head(const Grid3& grid, double noise_hu = 0.0, std::uint64_t seed = 0);

[[nodiscard]] Phantom generate(const PhantomSpec& spec);

} // namespace calcquant::phantom
