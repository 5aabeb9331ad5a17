#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <Eigen/Core>

#include "calcquant/volgrid.hpp"

namespace calcquant::preprocess {

/// x -> linear * x + translation, mapping fixed-space mm to moving-space mm.
class AffineTransform {
public:
    AffineTransform() : linear_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
    AffineTransform(const Eigen::Matrix3d& linear, const Eigen::Vector3d& translation);

    static AffineTransform identity() { return {}; }
    static AffineTransform translation(const Eigen::Vector3d& t) {
        return {Eigen::Matrix3d::Identity(), t};
    }
    /// Rotation (ZYX Euler angles, radians) followed by translation, about `center`.
    static AffineTransform rigid(const Eigen::Vector3d& angles, const Eigen::Vector3d& t,
                                 const Eigen::Vector3d& center);

    [[nodiscard]] const Eigen::Matrix3d& linear() const noexcept { return linear_; }
    [[nodiscard]] const Eigen::Vector3d& offset() const noexcept { return translation_; }

    [[nodiscard]] Point3 apply(const Point3& p) const noexcept;
    [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& p) const noexcept {
        return linear_ * p + translation_;
    }

    /// (this ∘ inner)(x) = this(inner(x)).
    [[nodiscard]] AffineTransform compose(const AffineTransform& inner) const;
    [[nodiscard]] AffineTransform inverse() const;
    [[nodiscard]] bool invertible() const noexcept;

private:
    Eigen::Matrix3d linear_;
    Eigen::Vector3d translation_;
};

/// Mean over grid voxel centers of |a(x) - b(x)|, expressed in voxel units
/// of the grid's smallest spacing.
[[nodiscard]] double mean_displacement_voxels(const AffineTransform& a, const AffineTransform& b,
                                              const Grid3& grid);

/// Output value at target voxel x is the source sampled at transform(x).
/// Linear interpolation for volumes and probability maps, nearest for masks.
[[nodiscard]] Volume resample(const Volume& v, const AffineTransform& t, const Grid3& target);
[[nodiscard]] ProbMap resample(const ProbMap& p, const AffineTransform& t, const Grid3& target);
[[nodiscard]] Mask resample(const Mask& m, const AffineTransform& t, const Grid3& target);

struct RegistrationConfig {
    int pyramid_levels = 3;
    int iterations_per_level = 128;
    int histogram_bins = 32;
    double sample_fraction = 0.05;
    /// Lower bound on samples per iteration for small images.
    int min_samples = 2048;
    std::uint64_t rng_seed = 0;
    /// Step length (in voxels of the current level) at the start of each
    /// level. The gain is a ((A + 1) / (A + t + 1))^alpha, where the time t
    /// advances only while successive gradients disagree.
    double initial_step = 1.0;
    double step_offset = 20.0;
    double step_decay = 0.602;
    bool center_of_mass_init = true;
    void validate() const;
};

struct RegistrationReport {
    AffineTransform transform;
    double final_metric = 0.0; ///< negated mutual information at the result
    double mae_hu = 0.0;
    bool failed = false;
    int iterations = 0;
};

inline constexpr double kDefaultFailureThresholdHu = 300.0;

/// Affine registration maximising Mattes mutual information.
[[nodiscard]] RegistrationReport register_affine(const Volume& moving, const Volume& fixed,
                                                 const RegistrationConfig& cfg,
                                                 double failure_threshold_hu = kDefaultFailureThresholdHu);

/// Mattes mutual information between fixed and transformed moving, evaluated
/// over every fixed voxel that maps inside the moving image.
[[nodiscard]] double mattes_mutual_information(const Volume& moving, const Volume& fixed,
                                               const AffineTransform& t, int bins = 32);

struct FailureCheck {
    double mae_hu = 0.0;
    bool failed = false;
};

/// Strict rule: failed iff mae > threshold.
[[nodiscard]] FailureCheck detect_failure(const Volume& fixed, const Volume& registered,
                                          double threshold_hu = kDefaultFailureThresholdHu);

/// Translates the axial plane so the centroid of voxels above 0 HU lands on
/// the axial center of the grid.
[[nodiscard]] Volume recenter_axial(const Volume& v);

/// Per-slice 2D Gaussian, sigma in voxels, kernel radius ceil(3 sigma),
/// edge samples replicated.
[[nodiscard]] Volume gaussian_smooth(const Volume& v, double sigma);

/// Normalized 1D Gaussian taps for offsets -r..r.
[[nodiscard]] std::vector<double> gaussian_kernel_1d(double sigma);

inline constexpr std::array<std::int32_t, 3> kCanonicalDims{240, 240, 100};
inline constexpr double kCanonicalSpacingMm = 0.5;

/// Reference-space configuration (JSON file).
struct ReferenceSpace {
    std::filesystem::path reference_path;
    double crop_z_min_mm = 0.0;
    double crop_z_max_mm = 0.0;
    std::array<std::int32_t, 3> canonical_dims = kCanonicalDims;
    std::array<double, 3> canonical_spacing{kCanonicalSpacingMm, kCanonicalSpacingMm, kCanonicalSpacingMm};
    double failure_threshold_hu = kDefaultFailureThresholdHu;
    RegistrationConfig registration;

    /// Canonical lattice: axially centered on the reference grid, centered
    /// longitudinally on the crop window.
    [[nodiscard]] Grid3 canonical_grid(const Grid3& reference) const;
};

[[nodiscard]] ReferenceSpace load_reference_space(const std::filesystem::path& path);
[[nodiscard]] ReferenceSpace parse_reference_space(const std::string& json_text,
                                                   const std::filesystem::path& base_dir = {});

/// Resamples a scan (through the registration transform) onto the canonical grid.
[[nodiscard]] Volume standardize_grid(const Volume& v, const AffineTransform& t, const Grid3& canonical);
[[nodiscard]] Mask standardize_grid(const Mask& m, const AffineTransform& t, const Grid3& canonical);

} // namespace calcquant::preprocess
