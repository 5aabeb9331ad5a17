#include "calcquant/lesions.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "calcquant/csv.hpp"

namespace calcquant::lesions {

namespace {

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) parent_[b] = a;
        else parent_[a] = b;
    }

private:
    std::vector<std::size_t> parent_;
};

struct Offset {
    int di, dj, dk;
};

/// Neighbors that precede a voxel in x-fastest scan order.
std::vector<Offset> backward_neighbors(int connectivity) {
    if (connectivity == 6) return {{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}};
    std::vector<Offset> out;
    for (int dk = -1; dk <= 0; ++dk)
        for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
                if (dk == 0 && (dj > 0 || (dj == 0 && di >= 0))) continue;
                out.push_back({di, dj, dk});
            }
    return out;
}

} // namespace

Labeling label_components(const Mask& mask, int connectivity) {
    require(connectivity == 6 || connectivity == 26, ErrorCode::invalid_argument,
            "connectivity must be 6 or 26");
    const Grid3& g = mask.grid();
    const auto offsets = backward_neighbors(connectivity);
    const std::size_t n = g.voxel_count();
    DisjointSets sets(n);
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (std::int32_t j = 0; j < g.dims[1]; ++j)
            for (std::int32_t i = 0; i < g.dims[0]; ++i) {
                const std::size_t idx = g.index(i, j, k);
                if (!mask[idx]) continue;
                for (const Offset& o : offsets) {
                    const std::int32_t ii = i + o.di, jj = j + o.dj, kk = k + o.dk;
                    if (ii < 0 || jj < 0 || kk < 0 || ii >= g.dims[0] || jj >= g.dims[1]) continue;
                    const std::size_t nb = g.index(ii, jj, kk);
                    if (mask[nb]) sets.unite(idx, nb);
                }
            }
    Labeling lab;
    lab.grid = g;
    lab.labels.assign(n, 0);
    std::vector<std::int32_t> root_label(n, 0);
    for (std::size_t idx = 0; idx < n; ++idx) {
        if (!mask[idx]) continue;
        const std::size_t r = sets.find(idx);
        if (root_label[r] == 0) {
            lab.sizes.push_back(0);
            root_label[r] = static_cast<std::int32_t>(lab.sizes.size());
        }
        lab.labels[idx] = root_label[r];
        ++lab.sizes[root_label[r] - 1];
    }
    return lab;
}

double median(std::vector<double> values) {
    require(!values.empty(), ErrorCode::invalid_argument, "median of an empty set");
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

std::vector<LesionSummary> summarize_lesions(const Labeling& lab, const Volume& hu) {
    require_same_grid(lab.grid, hu.grid(), "lesion labeling and HU volume differ");
    std::vector<std::vector<double>> values(lab.count());
    for (std::size_t l = 0; l < lab.count(); ++l) values[l].reserve(lab.sizes[l]);
    for (std::size_t idx = 0; idx < lab.labels.size(); ++idx)
        if (lab.labels[idx] > 0) values[lab.labels[idx] - 1].push_back(hu[idx]);
    std::vector<LesionSummary> out(lab.count());
    const double vv = lab.grid.voxel_volume();
    for (std::size_t l = 0; l < lab.count(); ++l) {
        out[l].voxel_count = lab.sizes[l];
        out[l].volume_mm3 = static_cast<double>(lab.sizes[l]) * vv;
        out[l].median_hu = median(std::move(values[l]));
    }
    return out;
}

LesionSummary summarize_lesion(const Labeling& lab, std::int32_t label, const Volume& hu) {
    require_same_grid(lab.grid, hu.grid(), "lesion labeling and HU volume differ");
    require(label >= 1 && static_cast<std::size_t>(label) <= lab.count(), ErrorCode::not_found,
            "no lesion with label " + std::to_string(label));
    std::vector<double> values;
    values.reserve(lab.sizes[label - 1]);
    for (std::size_t idx = 0; idx < lab.labels.size(); ++idx)
        if (lab.labels[idx] == label) values.push_back(hu[idx]);
    LesionSummary s;
    s.voxel_count = values.size();
    s.volume_mm3 = static_cast<double>(values.size()) * lab.grid.voxel_volume();
    s.median_hu = median(std::move(values));
    return s;
}

const char* to_string(Source s) noexcept { return s == Source::manual ? "manual" : "automated"; }

const char* to_string(LesionClass c) noexcept {
    switch (c) {
    case LesionClass::false_positive:
        return "false_positive";
    case LesionClass::false_negative:
        return "false_negative";
    default:
        return "overlapping";
    }
}

Source parse_source(std::string_view s) {
    if (s == "manual") return Source::manual;
    if (s == "automated") return Source::automated;
    fail(ErrorCode::format, "unknown lesion source '" + std::string(s) + "'");
}

LesionClass parse_class(std::string_view s) {
    if (s == "overlapping") return LesionClass::overlapping;
    if (s == "false_positive") return LesionClass::false_positive;
    if (s == "false_negative") return LesionClass::false_negative;
    fail(ErrorCode::format, "unknown lesion class '" + std::string(s) + "'");
}

std::vector<LesionRecord> classify_lesions(const std::string& participant, Source source, const Mask& lesion_mask,
                                           const Mask& other, const Volume& hu, int connectivity) {
    require_same_grid(lesion_mask.grid(), other.grid(), "manual and automated masks differ");
    const Labeling lab = label_components(lesion_mask, connectivity);
    const auto summaries = summarize_lesions(lab, hu);
    std::vector<std::size_t> overlap(lab.count(), 0);
    for (std::size_t idx = 0; idx < lab.labels.size(); ++idx)
        if (lab.labels[idx] > 0 && other[idx]) ++overlap[lab.labels[idx] - 1];
    std::vector<LesionRecord> out(lab.count());
    for (std::size_t l = 0; l < lab.count(); ++l) {
        auto& r = out[l];
        r.participant_id = participant;
        r.source = source;
        r.lesion_id = static_cast<std::int32_t>(l + 1);
        r.voxel_count = summaries[l].voxel_count;
        r.volume_mm3 = summaries[l].volume_mm3;
        r.median_hu = summaries[l].median_hu;
        r.overlap_voxels = overlap[l];
        if (overlap[l] > 0) r.cls = LesionClass::overlapping;
        else r.cls = source == Source::automated ? LesionClass::false_positive : LesionClass::false_negative;
    }
    return out;
}

std::vector<LesionRecord> extract_lesions(const std::string& participant, const Mask& manual, const Mask& automated,
                                          const Volume& hu, int connectivity) {
    auto out = classify_lesions(participant, Source::manual, manual, automated, hu, connectivity);
    auto autos = classify_lesions(participant, Source::automated, automated, manual, hu, connectivity);
    out.insert(out.end(), std::make_move_iterator(autos.begin()), std::make_move_iterator(autos.end()));
    return out;
}

const char* to_string(Attribute a) noexcept { return a == Attribute::volume ? "volume" : "attenuation"; }

Attribute parse_attribute(std::string_view s) {
    if (s == "volume") return Attribute::volume;
    if (s == "attenuation") return Attribute::attenuation;
    fail(ErrorCode::invalid_argument, "unknown lesion attribute '" + std::string(s) + "'");
}

double attribute_of(const LesionRecord& r, Attribute a) noexcept {
    return a == Attribute::volume ? r.volume_mm3 : r.median_hu;
}

VolumeAdjustedBins volume_adjusted_percentiles(const std::vector<LesionRecord>& lesions, Attribute attribute,
                                               const std::vector<double>& percentiles) {
    require(!lesions.empty(), ErrorCode::invalid_argument, "lesion table is empty");
    std::vector<std::pair<double, double>> items; // (attribute, volume)
    items.reserve(lesions.size());
    double total = 0.0;
    for (const auto& r : lesions) {
        require(std::isfinite(r.volume_mm3) && r.volume_mm3 >= 0.0, ErrorCode::invalid_argument,
                "lesion volume must be non-negative");
        items.emplace_back(attribute_of(r, attribute), r.volume_mm3);
        total += r.volume_mm3;
    }
    require(total > 0.0, ErrorCode::domain, "lesion table has zero total volume");
    std::sort(items.begin(), items.end());
    // Distinct attribute values with the cumulative volume up to and including each.
    std::vector<double> values, cumulative;
    double acc = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        acc += items[i].second;
        if (i + 1 < items.size() && items[i + 1].first == items[i].first) continue;
        values.push_back(items[i].first);
        cumulative.push_back(acc);
    }
    cumulative.back() = total;
    VolumeAdjustedBins bins;
    bins.attribute = attribute;
    for (double p : percentiles) {
        require(std::isfinite(p) && p >= 0.0 && p <= 100.0, ErrorCode::invalid_argument,
                "percentiles must lie in [0, 100]");
        std::size_t at = 0;
        while (at + 1 < values.size() && cumulative[at] * 100.0 < p * total) ++at;
        bins.percentiles.push_back(p);
        bins.edges.push_back(values[at]);
        bins.labels.push_back("p" + csv::format_number(p));
    }
    return bins;
}

std::size_t bin_index(const std::vector<double>& edges, double value) noexcept {
    const auto it = std::upper_bound(edges.begin(), edges.end(), value);
    const auto pos = static_cast<std::size_t>(it - edges.begin());
    return pos == 0 ? 0 : pos - 1;
}

VolumeHistogram hist2d_volume_fraction(const std::vector<LesionRecord>& subset, const std::vector<double>& volume_edges,
                                       const std::vector<double>& attenuation_edges) {
    require(!volume_edges.empty() && !attenuation_edges.empty(), ErrorCode::invalid_argument,
            "histogram needs at least one edge per axis");
    require(std::is_sorted(volume_edges.begin(), volume_edges.end()) &&
                std::is_sorted(attenuation_edges.begin(), attenuation_edges.end()),
            ErrorCode::invalid_argument, "histogram edges must be non-decreasing");
    VolumeHistogram h{volume_edges, attenuation_edges,
                      std::vector<std::vector<double>>(volume_edges.size(),
                                                       std::vector<double>(attenuation_edges.size(), 0.0))};
    double total = 0.0;
    for (const auto& r : subset) {
        h.percent[bin_index(volume_edges, r.volume_mm3)][bin_index(attenuation_edges, r.median_hu)] += r.volume_mm3;
        total += r.volume_mm3;
    }
    require(total > 0.0, ErrorCode::domain, "lesion subset has zero total volume");
    for (auto& row : h.percent)
        for (double& c : row) c = c / total * 100.0;
    return h;
}

namespace {

const std::vector<std::string> kLesionColumns{"participant_id", "source",         "lesion_id", "voxel_count",
                                              "volume_mm3",     "median_hu",      "overlap_voxels", "class"};

} // namespace

std::string format_lesion_csv(const std::vector<LesionRecord>& records) {
    std::string out = csv::join_row(kLesionColumns);
    for (const auto& r : records)
        out += csv::join_row({r.participant_id, to_string(r.source), std::to_string(r.lesion_id),
                              std::to_string(r.voxel_count), csv::format_number(r.volume_mm3),
                              csv::format_number(r.median_hu), std::to_string(r.overlap_voxels), to_string(r.cls)});
    return out;
}

std::vector<LesionRecord> parse_lesion_csv(std::string_view text) {
    const csv::Table t = csv::parse(text);
    std::size_t col[8];
    for (std::size_t c = 0; c < kLesionColumns.size(); ++c) col[c] = t.column(kLesionColumns[c]);
    std::vector<LesionRecord> out;
    out.reserve(t.rows.size());
    for (const auto& row : t.rows) {
        LesionRecord r;
        r.participant_id = row[col[0]];
        r.source = parse_source(row[col[1]]);
        r.lesion_id = static_cast<std::int32_t>(csv::parse_integer(row[col[2]], "lesion_id"));
        const long long voxels = csv::parse_integer(row[col[3]], "voxel_count");
        const long long overlap = csv::parse_integer(row[col[6]], "overlap_voxels");
        require(voxels >= 0 && overlap >= 0, ErrorCode::format, "lesion counts must be non-negative");
        r.voxel_count = static_cast<std::size_t>(voxels);
        r.volume_mm3 = csv::parse_double(row[col[4]], "volume_mm3");
        r.median_hu = csv::parse_double(row[col[5]], "median_hu");
        r.overlap_voxels = static_cast<std::size_t>(overlap);
        r.cls = parse_class(row[col[7]]);
        require(std::isfinite(r.volume_mm3) && r.volume_mm3 >= 0.0, ErrorCode::format,
                "lesion volume must be non-negative");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<LesionRecord> read_lesion_csv(const std::filesystem::path& path) {
    return parse_lesion_csv(csv::read_text_file(path));
}

std::string histogram_json(const VolumeHistogram& h, const VolumeAdjustedBins* volume_bins,
                           const VolumeAdjustedBins* attenuation_bins) {
    nlohmann::json j;
    j["volume_edges"] = h.volume_edges;
    j["attenuation_edges"] = h.attenuation_edges;
    if (volume_bins) j["volume_labels"] = volume_bins->labels;
    if (attenuation_bins) j["attenuation_labels"] = attenuation_bins->labels;
    j["percent"] = h.percent;
    return j.dump();
}

} // namespace calcquant::lesions
