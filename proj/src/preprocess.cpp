#include "calcquant/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <json.hpp>

namespace calcquant::preprocess {

AffineTransform::AffineTransform(const Eigen::Matrix3d& linear, const Eigen::Vector3d& translation)
    : linear_(linear), translation_(translation) {
    require(linear_.allFinite() && translation_.allFinite(), ErrorCode::invalid_argument,
            "affine transform must be finite");
}

AffineTransform AffineTransform::rigid(const Eigen::Vector3d& angles, const Eigen::Vector3d& t,
                                       const Eigen::Vector3d& center) {
    const Eigen::Matrix3d r = (Eigen::AngleAxisd(angles[2], Eigen::Vector3d::UnitZ()) *
                               Eigen::AngleAxisd(angles[1], Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(angles[0], Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();
    return {r, center - r * center + t};
}

Point3 AffineTransform::apply(const Point3& p) const noexcept {
    const Eigen::Vector3d q = apply(Eigen::Vector3d(p[0], p[1], p[2]));
    return {q[0], q[1], q[2]};
}

AffineTransform AffineTransform::compose(const AffineTransform& inner) const {
    return {linear_ * inner.linear_, linear_ * inner.translation_ + translation_};
}

bool AffineTransform::invertible() const noexcept {
    const double det = linear_.determinant();
    return std::isfinite(det) && std::abs(det) > 1e-12 * std::max(1.0, linear_.cwiseAbs().maxCoeff());
}

AffineTransform AffineTransform::inverse() const {
    require(invertible(), ErrorCode::domain, "singular transform");
    const Eigen::Matrix3d inv = linear_.inverse();
    return {inv, -inv * translation_};
}

double mean_displacement_voxels(const AffineTransform& a, const AffineTransform& b, const Grid3& grid) {
    const double unit = std::min({grid.spacing[0], grid.spacing[1], grid.spacing[2]});
    const Eigen::Matrix3d dl = a.linear() - b.linear();
    const Eigen::Vector3d dt = a.offset() - b.offset();
    double total = 0.0;
    for (std::int32_t k = 0; k < grid.dims[2]; ++k)
        for (std::int32_t j = 0; j < grid.dims[1]; ++j)
            for (std::int32_t i = 0; i < grid.dims[0]; ++i) {
                const Point3 p = grid.position(i, j, k);
                total += (dl * Eigen::Vector3d(p[0], p[1], p[2]) + dt).norm();
            }
    return total / static_cast<double>(grid.voxel_count()) / unit;
}

namespace {

template <class G, class Sampler>
std::vector<typename G::value_type> resample_samples(const G&, const AffineTransform& t,
                                                     const Grid3& target, Sampler&& sample) {
    require(t.invertible(), ErrorCode::domain, "singular transform");
    target.validate();
    std::vector<typename G::value_type> out(target.voxel_count());
    const Eigen::Matrix3d& a = t.linear();
    std::size_t n = 0;
    for (std::int32_t k = 0; k < target.dims[2]; ++k)
        for (std::int32_t j = 0; j < target.dims[1]; ++j) {
            const Point3 row = target.position(0, j, k);
            Eigen::Vector3d p = t.apply(Eigen::Vector3d(row[0], row[1], row[2]));
            const Eigen::Vector3d step = a.col(0) * target.spacing[0];
            for (std::int32_t i = 0; i < target.dims[0]; ++i, ++n) {
                const Eigen::Vector3d q = p + step * static_cast<double>(i);
                out[n] = sample(Point3{q[0], q[1], q[2]});
            }
        }
    return out;
}

} // namespace

Volume resample(const Volume& v, const AffineTransform& t, const Grid3& target) {
    auto samples = resample_samples(v, t, target, [&](const Point3& p) {
        return sample_at(v, p, Interpolation::linear);
    });
    return {target, std::move(samples)};
}

ProbMap resample(const ProbMap& pm, const AffineTransform& t, const Grid3& target) {
    auto samples = resample_samples(pm, t, target, [&](const Point3& p) {
        return std::clamp(sample_at(pm, p, Interpolation::linear), 0.0, 1.0);
    });
    return {target, std::move(samples)};
}

Mask resample(const Mask& m, const AffineTransform& t, const Grid3& target) {
    auto samples = resample_samples(m, t, target, [&](const Point3& p) { return sample_at(m, p); });
    return {target, std::move(samples)};
}

FailureCheck detect_failure(const Volume& fixed, const Volume& registered, double threshold_hu) {
    require_same_grid(fixed.grid(), registered.grid(), "failure check needs images on one grid");
    double total = 0.0;
    for (std::size_t n = 0; n < fixed.size(); ++n) total += std::abs(fixed[n] - registered[n]);
    FailureCheck out;
    out.mae_hu = total / static_cast<double>(fixed.size());
    out.failed = out.mae_hu > threshold_hu;
    return out;
}

Volume recenter_axial(const Volume& v) {
    const Grid3& g = v.grid();
    double si = 0.0, sj = 0.0;
    std::size_t count = 0;
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (std::int32_t j = 0; j < g.dims[1]; ++j)
            for (std::int32_t i = 0; i < g.dims[0]; ++i)
                if (v(i, j, k) > 0.0) {
                    si += i;
                    sj += j;
                    ++count;
                }
    require(count > 0, ErrorCode::domain, "no positive-HU voxels");
    const double di = si / static_cast<double>(count) - (g.dims[0] - 1) / 2.0;
    const double dj = sj / static_cast<double>(count) - (g.dims[1] - 1) / 2.0;
    return resample(v, AffineTransform::translation({di * g.spacing[0], dj * g.spacing[1], 0.0}), g);
}

std::vector<double> gaussian_kernel_1d(double sigma) {
    require(std::isfinite(sigma) && sigma > 0.0, ErrorCode::invalid_argument,
            "smoothing sigma must be positive");
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(2 * r + 1);
    double sum = 0.0;
    for (int d = -r; d <= r; ++d) {
        w[d + r] = std::exp(-0.5 * d * d / (sigma * sigma));
        sum += w[d + r];
    }
    for (double& x : w) x /= sum;
    return w;
}

Volume gaussian_smooth(const Volume& v, double sigma) {
    const std::vector<double> w = gaussian_kernel_1d(sigma);
    const int r = static_cast<int>(w.size() / 2);
    const Grid3& g = v.grid();
    const std::int32_t nx = g.dims[0], ny = g.dims[1];
    std::vector<double> tmp(v.size()), out(v.size());
    auto src = v.samples();
    // The normalized square 2D kernel is the outer product of the 1D taps.
    for (std::int32_t k = 0; k < g.dims[2]; ++k) {
        for (std::int32_t j = 0; j < ny; ++j)
            for (std::int32_t i = 0; i < nx; ++i) {
                double acc = 0.0;
                for (int d = -r; d <= r; ++d) {
                    const std::int32_t ii = std::clamp(i + d, 0, nx - 1);
                    acc += w[d + r] * src[g.index(ii, j, k)];
                }
                tmp[g.index(i, j, k)] = acc;
            }
        for (std::int32_t j = 0; j < ny; ++j)
            for (std::int32_t i = 0; i < nx; ++i) {
                double acc = 0.0;
                for (int d = -r; d <= r; ++d) {
                    const std::int32_t jj = std::clamp(j + d, 0, ny - 1);
                    acc += w[d + r] * tmp[g.index(i, jj, k)];
                }
                out[g.index(i, j, k)] = acc;
            }
    }
    return {g, std::move(out)};
}

Grid3 ReferenceSpace::canonical_grid(const Grid3& reference) const {
    Grid3 out;
    out.dims = canonical_dims;
    out.spacing = canonical_spacing;
    const Point3 rc = reference.center();
    const Point3 center{rc[0], rc[1], 0.5 * (crop_z_min_mm + crop_z_max_mm)};
    for (int a = 0; a < 3; ++a) out.origin[a] = center[a] - 0.5 * (out.dims[a] - 1) * out.spacing[a];
    out.validate();
    return out;
}

namespace {

template <class T, std::size_t N>
std::array<T, N> json_array(const nlohmann::json& j, const char* key) {
    require(j.is_array() && j.size() == N, ErrorCode::format,
            std::string("reference config: '") + key + "' needs " + std::to_string(N) + " values");
    std::array<T, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = j[i].get<T>();
    return out;
}

} // namespace

ReferenceSpace parse_reference_space(const std::string& json_text, const std::filesystem::path& base_dir) {
    ReferenceSpace rs;
    try {
        const auto j = nlohmann::json::parse(json_text);
        std::filesystem::path ref = j.at("reference").get<std::string>();
        rs.reference_path = ref.is_absolute() || base_dir.empty() ? ref : base_dir / ref;
        const auto crop = json_array<double, 2>(j.at("crop_z_mm"), "crop_z_mm");
        rs.crop_z_min_mm = crop[0];
        rs.crop_z_max_mm = crop[1];
        require(crop[1] >= crop[0], ErrorCode::format, "reference config: crop_z_mm must be ascending");
        if (j.contains("canonical")) {
            const auto& c = j["canonical"];
            if (c.contains("dims")) rs.canonical_dims = json_array<std::int32_t, 3>(c["dims"], "dims");
            if (c.contains("spacing")) rs.canonical_spacing = json_array<double, 3>(c["spacing"], "spacing");
        }
        rs.failure_threshold_hu = j.value("failure_threshold_hu", kDefaultFailureThresholdHu);
        if (j.contains("registration")) {
            const auto& r = j["registration"];
            auto& cfg = rs.registration;
            cfg.pyramid_levels = r.value("pyramid_levels", cfg.pyramid_levels);
            cfg.iterations_per_level = r.value("iterations_per_level", cfg.iterations_per_level);
            cfg.histogram_bins = r.value("histogram_bins", cfg.histogram_bins);
            cfg.sample_fraction = r.value("sample_fraction", cfg.sample_fraction);
            cfg.min_samples = r.value("min_samples", cfg.min_samples);
            cfg.rng_seed = r.value("rng_seed", cfg.rng_seed);
            cfg.initial_step = r.value("initial_step", cfg.initial_step);
            cfg.step_offset = r.value("step_offset", cfg.step_offset);
            cfg.step_decay = r.value("step_decay", cfg.step_decay);
            cfg.center_of_mass_init = r.value("center_of_mass_init", cfg.center_of_mass_init);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format, std::string("reference config: ") + e.what());
    }
    rs.registration.validate();
    Grid3 probe;
    probe.dims = rs.canonical_dims;
    probe.spacing = rs.canonical_spacing;
    probe.validate();
    return rs;
}

ReferenceSpace load_reference_space(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_reference_space(ss.str(), path.parent_path());
}

Volume standardize_grid(const Volume& v, const AffineTransform& t, const Grid3& canonical) {
    return resample(v, t, canonical);
}

Mask standardize_grid(const Mask& m, const AffineTransform& t, const Grid3& canonical) {
    return resample(m, t, canonical);
}

} // namespace calcquant::preprocess
