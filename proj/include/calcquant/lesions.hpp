#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calcquant/volgrid.hpp"

namespace calcquant::lesions {

/// Connected-component labels: 0 is background, lesions are 1..count in
/// order of their first voxel in x-fastest scan order.
struct Labeling {
    Grid3 grid;
    std::vector<std::int32_t> labels;
    std::vector<std::size_t> sizes; ///< sizes[l - 1] = voxel count of lesion l
    [[nodiscard]] std::size_t count() const noexcept { return sizes.size(); }
};

[[nodiscard]] Labeling label_components(const Mask& mask, int connectivity = 26);

struct LesionSummary {
    std::size_t voxel_count = 0;
    double volume_mm3 = 0.0;
    double median_hu = 0.0;
};

/// Median of an even-sized set is the mean of the middle pair.
[[nodiscard]] double median(std::vector<double> values);

/// Summary of lesion `label` (1-based).
[[nodiscard]] LesionSummary summarize_lesion(const Labeling& lab, std::int32_t label, const Volume& hu);
/// Summaries of every lesion, index l - 1.
[[nodiscard]] std::vector<LesionSummary> summarize_lesions(const Labeling& lab, const Volume& hu);

enum class Source { manual, automated };
enum class LesionClass { overlapping, false_positive, false_negative };

[[nodiscard]] const char* to_string(Source s) noexcept;
[[nodiscard]] const char* to_string(LesionClass c) noexcept;
[[nodiscard]] Source parse_source(std::string_view s);
[[nodiscard]] LesionClass parse_class(std::string_view s);

struct LesionRecord {
    std::string participant_id;
    Source source = Source::manual;
    std::int32_t lesion_id = 0;
    std::size_t voxel_count = 0;
    double volume_mm3 = 0.0;
    double median_hu = 0.0;
    std::size_t overlap_voxels = 0; ///< voxels shared with the other source's mask
    LesionClass cls = LesionClass::overlapping;
    friend bool operator==(const LesionRecord&, const LesionRecord&) = default;
};

/// Lesions of `lesion_mask` classified against `other`: zero shared voxels
/// makes an automated lesion a false positive and a manual one a false
/// negative.
[[nodiscard]] std::vector<LesionRecord> classify_lesions(const std::string& participant, Source source,
                                                         const Mask& lesion_mask, const Mask& other,
                                                         const Volume& hu, int connectivity = 26);

/// Manual lesions (against the automated mask) followed by automated ones.
[[nodiscard]] std::vector<LesionRecord> extract_lesions(const std::string& participant, const Mask& manual,
                                                        const Mask& automated, const Volume& hu,
                                                        int connectivity = 26);

enum class Attribute { volume, attenuation };
[[nodiscard]] const char* to_string(Attribute a) noexcept;
[[nodiscard]] Attribute parse_attribute(std::string_view s);
[[nodiscard]] double attribute_of(const LesionRecord& r, Attribute a) noexcept;

struct VolumeAdjustedBins {
    Attribute attribute = Attribute::volume;
    std::vector<double> percentiles;
    std::vector<double> edges; ///< edges[i] belongs to percentiles[i]
    std::vector<std::string> labels;
};

/// Edge for p is the smallest attribute value at which the cumulative
/// volume of lesions with attribute <= value reaches p% of the total.
[[nodiscard]] VolumeAdjustedBins volume_adjusted_percentiles(const std::vector<LesionRecord>& lesions,
                                                             Attribute attribute,
                                                             const std::vector<double>& percentiles);

/// Bin index for edges e_0..e_{m-1}: bin i covers [e_i, e_{i+1}), with the
/// first bin open below and the last open above.
[[nodiscard]] std::size_t bin_index(const std::vector<double>& edges, double value) noexcept;

struct VolumeHistogram {
    std::vector<double> volume_edges;
    std::vector<double> attenuation_edges;
    /// percent[v][a]: share of total subset volume, in percent.
    std::vector<std::vector<double>> percent;
};

[[nodiscard]] VolumeHistogram hist2d_volume_fraction(const std::vector<LesionRecord>& subset,
                                                     const std::vector<double>& volume_edges,
                                                     const std::vector<double>& attenuation_edges);

/// Lesion table CSV with columns participant_id, source, lesion_id,
/// voxel_count, volume_mm3, median_hu, overlap_voxels, class.
[[nodiscard]] std::string format_lesion_csv(const std::vector<LesionRecord>& records);
[[nodiscard]] std::vector<LesionRecord> parse_lesion_csv(std::string_view text);
[[nodiscard]] std::vector<LesionRecord> read_lesion_csv(const std::filesystem::path& path);

/// Histogram JSON: {"volume_edges", "attenuation_edges", "volume_labels",
/// "attenuation_labels", "percent"}.
[[nodiscard]] std::string histogram_json(const VolumeHistogram& h, const VolumeAdjustedBins* volume_bins = nullptr,
                                         const VolumeAdjustedBins* attenuation_bins = nullptr);

} // namespace calcquant::lesions
