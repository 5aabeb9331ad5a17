#pragma once

#include <string>
#include <vector>

#include "calcquant/volgrid.hpp"

namespace calcquant::quantify {

inline constexpr double kCandidateHu = 130.0;
inline constexpr double kProbabilityThreshold = 0.5;

struct EnsembleOutput {
    std::vector<ProbMap> maps;
    std::vector<std::string> labels; ///< optional, one per map
};

struct QuantResult {
    ProbMap fused;
    Mask segmentation;
    double volume_mm3 = 0.0;
};

/// Per-voxel arithmetic mean of the member maps.
[[nodiscard]] ProbMap fuse_mean(const std::vector<ProbMap>& maps);
[[nodiscard]] ProbMap fuse_mean(const EnsembleOutput& ensemble);

/// 1 where HU > threshold (strict).
[[nodiscard]] Mask candidate_mask(const Volume& v, double hu_threshold = kCandidateHu);

/// 1 where both the original and the smoothed scan exceed the threshold.
[[nodiscard]] Mask dual_candidate_mask(const Volume& original, const Volume& smoothed,
                                       double hu_threshold = kCandidateHu);

/// 1 where prob > threshold (strict) and the candidate mask is set.
[[nodiscard]] Mask binarize(const ProbMap& prob, const Mask& candidates,
                            double threshold = kProbabilityThreshold);

[[nodiscard]] std::size_t count_foreground(const Mask& m) noexcept;

/// Foreground voxel count times voxel volume, in mm^3.
[[nodiscard]] double measure_volume(const Mask& m) noexcept;

/// fuse -> binarize -> measure.
[[nodiscard]] QuantResult quantify(const EnsembleOutput& ensemble, const Mask& candidates,
                                   double threshold = kProbabilityThreshold);

} // namespace calcquant::quantify
