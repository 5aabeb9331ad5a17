#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calcquant/volgrid.hpp"

namespace calcquant::evaluate {

struct VoxelCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    friend bool operator==(const VoxelCounts&, const VoxelCounts&) = default;
};

[[nodiscard]] VoxelCounts voxel_counts(const Mask& pred, const Mask& ref);

/// Undefined ratios (zero denominators) are empty optionals.
struct ScanMetrics {
    std::optional<double> recall;
    std::optional<double> precision;
    double fpv_mm3 = 0.0;
    double reference_mm3 = 0.0;
    bool has_icac = false;
};

[[nodiscard]] ScanMetrics scan_metrics(const VoxelCounts& c, double voxel_volume);

/// Mean and sample SD; sd is empty for fewer than two values.
struct Summary {
    std::size_t n = 0;
    double mean = 0.0;
    std::optional<double> sd;
};

[[nodiscard]] std::optional<Summary> summarize(std::span<const double> values);

struct MetricsReport {
    std::optional<double> dataset_recall;
    std::optional<double> dataset_precision;
    std::optional<Summary> participant_recall;    ///< scans with calcification
    std::optional<Summary> participant_precision; ///< scans where precision is defined
    std::optional<Summary> fpv_with_icac;
    std::optional<Summary> fpv_icac_free;
    std::size_t scans_with_icac = 0;
    std::size_t scans_icac_free = 0;
    std::vector<ScanMetrics> per_scan;
};

[[nodiscard]] MetricsReport aggregate_metrics(std::span<const VoxelCounts> counts, double voxel_volume);

/// One scan for threshold sweeps; all spans share one length.
struct SweepInput {
    std::span<const double> prob;
    std::span<const std::uint8_t> candidates;
    std::span<const std::uint8_t> reference;
    double voxel_volume = 0.0;
};

struct CurvePoint {
    double threshold = 0.0;
    std::optional<double> recall;
    std::optional<double> precision;
    std::optional<double> mean_fpv_mm3; ///< among scans with calcification
};

/// Dataset-wise recall and precision (PRC) and mean false-positive volume
/// (FROC) at each threshold, with prediction = prob > t within candidates.
[[nodiscard]] std::vector<CurvePoint> sweep_curves(std::span<const SweepInput> scans,
                                                   std::span<const double> thresholds);

[[nodiscard]] std::vector<double> uniform_thresholds(std::size_t count);

struct Pair {
    std::string id;
    double a = 0.0;
    double b = 0.0;
};

void validate_pairs(std::span<const Pair> pairs);

/// Average ranks (1-based), ties share the mean of their positions.
[[nodiscard]] std::vector<double> midranks(std::span<const double> values);
[[nodiscard]] double pearson(std::span<const double> x, std::span<const double> y);

/// Two-way random, single-measure, absolute-agreement ICC with two raters.
[[nodiscard]] double icc21(std::span<const Pair> pairs);
[[nodiscard]] double spearman(std::span<const Pair> pairs);

enum class BlandAltmanTransform { identity, cube_root };

struct BlandAltman {
    std::size_t n = 0;
    double mean_difference = 0.0; ///< f(a) - f(b)
    double sd = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

[[nodiscard]] BlandAltman bland_altman(std::span<const Pair> pairs,
                                       BlandAltmanTransform transform = BlandAltmanTransform::identity);

/// Linear-interpolated quantile of sorted data, q in [0, 1].
[[nodiscard]] double quantile_sorted(std::span<const double> sorted, double q);

/// Statistic over a resample, given as participant indices. An empty result
/// marks an unusable resample, which is redrawn.
using ResampleStatistic = std::function<std::optional<double>(std::span<const std::size_t>)>;

struct BootstrapInterval {
    double estimate = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

struct BootstrapResult {
    std::vector<BootstrapInterval> intervals; ///< one per statistic
    /// Two-sided paired p for statistic[0] - statistic[1]; set with two statistics.
    std::optional<double> difference_p;
    int replications = 0;
    std::uint64_t seed = 0;
    std::size_t redraws = 0;
};

struct BootstrapOptions {
    int replications = 10000;
    std::uint64_t seed = 0;
    int jobs = 1;
};

/// Percentile bootstrap (2.5 / 97.5) over participants resampled with
/// replacement. All statistics are evaluated on the same resamples. The
/// replication r stream is seeded from (seed, r), so results do not depend
/// on `jobs`.
[[nodiscard]] BootstrapResult bootstrap(std::size_t n, const std::vector<ResampleStatistic>& statistics,
                                        const BootstrapOptions& options);

/// 2 min(P(d <= 0), P(d >= 0)), at most 1.
[[nodiscard]] double paired_difference_p(std::span<const double> differences);

struct WilcoxonResult {
    std::size_t n = 0; ///< non-zero grades
    double w_plus = 0.0;
    double z = 0.0;
    double p = 1.0;
};

/// Zeros are dropped, ranks of |grade| use midranks, the normal
/// approximation uses the tie-corrected variance.
[[nodiscard]] WilcoxonResult wilcoxon_signed_rank(std::span<const int> grades);

/// Grades from category counts for +2, +1, 0, -1, -2.
[[nodiscard]] std::vector<int> grades_from_counts(const std::array<std::size_t, 5>& counts);

struct AgreementReport {
    std::size_t n = 0;
    double icc = 0.0;
    BootstrapInterval icc_ci;
    double spearman = 0.0;
    BootstrapInterval spearman_ci;
    BlandAltman raw;
    BlandAltman cube_root;
    int replications = 0;
    std::uint64_t seed = 0;
};

[[nodiscard]] AgreementReport agreement(std::span<const Pair> pairs, const BootstrapOptions& options);

/// CSV readers: pairs (id, manual_mm3, auto_mm3), grades (region_id, grade).
[[nodiscard]] std::vector<Pair> parse_pairs_csv(std::string_view text);
[[nodiscard]] std::vector<int> parse_grades_csv(std::string_view text);
[[nodiscard]] std::string format_curve_csv(std::span<const CurvePoint> points);

} // namespace calcquant::evaluate
