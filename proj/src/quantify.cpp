#include "calcquant/quantify.hpp"

#include <algorithm>

namespace calcquant::quantify {

ProbMap fuse_mean(const std::vector<ProbMap>& maps) {
    require(!maps.empty(), ErrorCode::invalid_argument, "ensemble is empty");
    const Grid3& g = maps.front().grid();
    for (std::size_t m = 1; m < maps.size(); ++m)
        require_same_grid(g, maps[m].grid(), "ensemble members must share one grid");
    std::vector<double> out(g.voxel_count(), 0.0);
    for (const auto& map : maps) {
        auto s = map.samples();
        for (std::size_t n = 0; n < out.size(); ++n) out[n] += s[n];
    }
    const double k = static_cast<double>(maps.size());
    for (double& v : out) v = std::clamp(v / k, 0.0, 1.0);
    return {g, std::move(out)};
}

ProbMap fuse_mean(const EnsembleOutput& ensemble) {
    require(ensemble.labels.empty() || ensemble.labels.size() == ensemble.maps.size(),
            ErrorCode::invalid_argument, "ensemble labels must match the member count");
    return fuse_mean(ensemble.maps);
}

Mask candidate_mask(const Volume& v, double hu_threshold) {
    std::vector<std::uint8_t> out(v.size());
    auto s = v.samples();
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = s[n] > hu_threshold ? 1 : 0;
    return {v.grid(), std::move(out)};
}

Mask dual_candidate_mask(const Volume& original, const Volume& smoothed, double hu_threshold) {
    require_same_grid(original.grid(), smoothed.grid(), "original and smoothed scans differ");
    std::vector<std::uint8_t> out(original.size());
    for (std::size_t n = 0; n < out.size(); ++n)
        out[n] = original[n] > hu_threshold && smoothed[n] > hu_threshold ? 1 : 0;
    return {original.grid(), std::move(out)};
}

Mask binarize(const ProbMap& prob, const Mask& candidates, double threshold) {
    require_same_grid(prob.grid(), candidates.grid(), "probability map and candidate mask differ");
    std::vector<std::uint8_t> out(prob.size());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = prob[n] > threshold && candidates[n] ? 1 : 0;
    return {prob.grid(), std::move(out)};
}

std::size_t count_foreground(const Mask& m) noexcept {
    auto s = m.samples();
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), std::uint8_t{1}));
}

double measure_volume(const Mask& m) noexcept {
    return static_cast<double>(count_foreground(m)) * m.grid().voxel_volume();
}

QuantResult quantify(const EnsembleOutput& ensemble, const Mask& candidates, double threshold) {
    ProbMap fused = fuse_mean(ensemble);
    Mask seg = binarize(fused, candidates, threshold);
    const double volume = measure_volume(seg);
    return {std::move(fused), std::move(seg), volume};
}

} // namespace calcquant::quantify
