#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "calcquant/lesions.hpp"
#include "calcquant/rng.hpp"
#include "calcquant/survival.hpp"

namespace sim {

struct Study {
    calcquant::survival::Cohort cohort;
    std::vector<calcquant::lesions::LesionRecord> lesions; ///< manual lesions
};

/// Cohort with covariates, per-participant lesions, and exponential event
/// times whose log hazard rises by `log_hr_per_sd` per SD of total volume.
inline Study simulate_study(std::size_t n, std::uint64_t seed, double log_hr_per_sd = std::log(1.4)) {
    using namespace calcquant;
    Rng rng(seed);
    Study s;
    s.cohort.exposure_names = {"volume"};
    std::vector<double> volume(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string id = "s" + std::to_string(i);
        const std::size_t k = rng.uniform() < 0.3 ? 0 : 1 + rng.index(5);
        for (std::size_t l = 0; l < k; ++l) {
            lesions::LesionRecord r;
            r.participant_id = id;
            r.lesion_id = static_cast<std::int32_t>(l + 1);
            r.voxel_count = 1 + static_cast<std::size_t>(std::floor(rng.exponential(1.0 / 40.0)));
            r.volume_mm3 = static_cast<double>(r.voxel_count) * 0.125;
            r.median_hu = std::round(rng.uniform(135.0, 700.0));
            r.cls = rng.uniform() < 0.3 ? lesions::LesionClass::false_negative : lesions::LesionClass::overlapping;
            r.overlap_voxels = r.cls == lesions::LesionClass::overlapping ? 1 : 0;
            volume[i] += r.volume_mm3;
            s.lesions.push_back(r);
        }
    }
    double mean = 0.0, var = 0.0;
    for (double v : volume) mean += v / static_cast<double>(n);
    for (double v : volume) var += (v - mean) * (v - mean) / static_cast<double>(n - 1);
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < n; ++i) {
        survival::SurvivalRecord r;
        r.id = "s" + std::to_string(i);
        r.covariates[0] = std::round(rng.uniform(55.0, 90.0));
        for (std::size_t c = 1; c < 9; ++c) r.covariates[c] = rng.uniform() < 0.35 ? 1.0 : 0.0;
        const double eta = log_hr_per_sd * volume[i] / sd + 0.04 * (r.covariates[0] - 70.0) + 0.3 * r.covariates[5];
        const double t_event = rng.exponential(1.0 / 3000.0 * std::exp(eta));
        const double t_censor = rng.uniform(500.0, 5000.0);
        r.event = t_event <= t_censor;
        r.time_days = std::ceil(std::min(t_event, t_censor));
        r.exposures = {volume[i]};
        s.cohort.records.push_back(std::move(r));
    }
    return s;
}

} // namespace sim
