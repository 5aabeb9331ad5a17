// Affine registration by stochastic gradient ascent on Mattes mutual
// information, coarse to fine over a Gaussian pyramid.
//
// Joint histogram: fixed intensities use a zero-order (box) Parzen window,
// moving intensities a cubic B-spline window, so the metric is
// differentiable in the transform parameters.

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/LU>

#include "calcquant/preprocess.hpp"
#include "calcquant/rng.hpp"

namespace calcquant::preprocess {

void RegistrationConfig::validate() const {
    require(pyramid_levels >= 1, ErrorCode::invalid_argument, "pyramid_levels must be positive");
    require(iterations_per_level >= 1, ErrorCode::invalid_argument, "iterations_per_level must be positive");
    require(histogram_bins >= 8, ErrorCode::invalid_argument, "histogram_bins must be at least 8");
    require(sample_fraction > 0.0 && sample_fraction <= 1.0, ErrorCode::invalid_argument,
            "sample_fraction must lie in (0, 1]");
    require(min_samples >= 1, ErrorCode::invalid_argument, "min_samples must be positive");
    require(initial_step > 0.0 && std::isfinite(initial_step), ErrorCode::invalid_argument,
            "initial_step must be positive");
    require(step_offset >= 0.0 && step_decay >= 0.0, ErrorCode::invalid_argument,
            "step schedule parameters must be non-negative");
}

namespace {

constexpr int kPad = 2;
constexpr double kTimeMin = -0.8;
constexpr double kTimeMax = 1.0;
constexpr double kTimeOmega = 0.3;
constexpr double kRmsDecay = 0.9;

double bspline3(double u) {
    u = std::abs(u);
    if (u < 1.0) return (4.0 - 6.0 * u * u + 3.0 * u * u * u) / 6.0;
    if (u < 2.0) {
        const double v = 2.0 - u;
        return v * v * v / 6.0;
    }
    return 0.0;
}

double bspline3_derivative(double u) {
    const double a = std::abs(u);
    if (a < 1.0) return -2.0 * u + 1.5 * u * a;
    if (a < 2.0) {
        const double v = 2.0 - a;
        return u > 0 ? -0.5 * v * v : 0.5 * v * v;
    }
    return 0.0;
}

/// One pyramid level: smoothed, decimated samples plus central-difference
/// gradients (per mm), interleaved as [value, gx, gy, gz].
struct LevelImage {
    Grid3 grid;
    std::vector<double> values;
    std::vector<std::array<double, 4>> field;
    double min = 0.0, max = 0.0;
};

void smooth_axis(std::vector<double>& data, const Grid3& g, int axis, double sigma) {
    if (sigma <= 0.0 || g.dims[axis] == 1) return;
    const std::vector<double> w = gaussian_kernel_1d(sigma);
    const int r = static_cast<int>(w.size() / 2);
    std::vector<double> out(data.size());
    const std::int32_t n = g.dims[axis];
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (std::int32_t j = 0; j < g.dims[1]; ++j)
            for (std::int32_t i = 0; i < g.dims[0]; ++i) {
                std::array<std::int32_t, 3> idx{i, j, k};
                const std::int32_t c = idx[axis];
                double acc = 0.0;
                for (int d = -r; d <= r; ++d) {
                    idx[axis] = std::clamp(c + d, 0, n - 1);
                    acc += w[d + r] * data[g.index(idx[0], idx[1], idx[2])];
                }
                out[g.index(i, j, k)] = acc;
            }
    data.swap(out);
}

LevelImage make_level(const Volume& v, int factor) {
    LevelImage level;
    const Grid3& src = v.grid();
    std::vector<double> data(v.samples().begin(), v.samples().end());
    Grid3 grid = src;
    if (factor > 1) {
        for (int a = 0; a < 3; ++a) smooth_axis(data, src, a, 0.5 * factor);
        const Volume smoothed(src, data);
        for (int a = 0; a < 3; ++a) {
            grid.dims[a] = std::max<std::int32_t>(1, static_cast<std::int32_t>(std::lround(
                                                         static_cast<double>(src.dims[a]) / factor)));
            grid.spacing[a] = src.spacing[a] * src.dims[a] / grid.dims[a];
        }
        const Point3 c = src.center();
        for (int a = 0; a < 3; ++a) grid.origin[a] = c[a] - 0.5 * (grid.dims[a] - 1) * grid.spacing[a];
        data = resample(smoothed, AffineTransform::identity(), grid).release();
    }
    level.grid = grid;
    level.values = std::move(data);
    level.field.resize(level.values.size());
    const auto& g = level.grid;
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (std::int32_t j = 0; j < g.dims[1]; ++j)
            for (std::int32_t i = 0; i < g.dims[0]; ++i) {
                const std::array<std::int32_t, 3> idx{i, j, k};
                auto& f = level.field[g.index(i, j, k)];
                f[0] = level.values[g.index(i, j, k)];
                for (int a = 0; a < 3; ++a) {
                    auto lo = idx, hi = idx;
                    lo[a] = std::max(0, idx[a] - 1);
                    hi[a] = std::min(g.dims[a] - 1, idx[a] + 1);
                    const int span = hi[a] - lo[a];
                    f[a + 1] = span == 0 ? 0.0
                                         : (level.values[g.index(hi[0], hi[1], hi[2])] -
                                            level.values[g.index(lo[0], lo[1], lo[2])]) /
                                               (span * g.spacing[a]);
                }
            }
    const auto [mn, mx] = std::minmax_element(level.values.begin(), level.values.end());
    level.min = *mn;
    level.max = *mx;
    return level;
}

/// Trilinear fetch of value and gradient. Returns false outside the cells.
bool fetch(const LevelImage& img, const Eigen::Vector3d& mm, std::array<double, 4>& out) {
    const Grid3& g = img.grid;
    double w[3];
    std::int64_t lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        const double c = (mm[a] - g.origin[a]) / g.spacing[a];
        if (!(c >= -0.5 && c < g.dims[a] - 0.5)) return false;
        const std::int64_t last = g.dims[a] - 1;
        const double x = std::clamp(c, 0.0, static_cast<double>(last));
        auto f = static_cast<std::int64_t>(x);
        if (f >= last) f = std::max<std::int64_t>(last - 1, 0);
        lo[a] = f;
        hi[a] = std::min(f + 1, last);
        w[a] = x - static_cast<double>(f);
    }
    out = {0.0, 0.0, 0.0, 0.0};
    for (int corner = 0; corner < 8; ++corner) {
        const std::int64_t i = (corner & 1) ? hi[0] : lo[0];
        const std::int64_t j = (corner & 2) ? hi[1] : lo[1];
        const std::int64_t k = (corner & 4) ? hi[2] : lo[2];
        const double weight = ((corner & 1) ? w[0] : 1 - w[0]) * ((corner & 2) ? w[1] : 1 - w[1]) *
                              ((corner & 4) ? w[2] : 1 - w[2]);
        const auto& f = img.field[g.index(i, j, k)];
        for (int c = 0; c < 4; ++c) out[c] += weight * f[c];
    }
    return true;
}

using Params = Eigen::Matrix<double, 12, 1>;

/// T(x) = A (x - c) + c + t with A = I + L / scale; p = [L row-major, t].
struct Parameterization {
    Eigen::Vector3d center;
    double scale = 1.0;

    [[nodiscard]] AffineTransform to_transform(const Params& p) const {
        Eigen::Matrix3d a = Eigen::Matrix3d::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) a(r, c) += p[3 * r + c] / scale;
        const Eigen::Vector3d t(p[9], p[10], p[11]);
        return {a, center - a * center + t};
    }

    [[nodiscard]] Params from_transform(const AffineTransform& tr) const {
        Params p;
        const Eigen::Matrix3d l = (tr.linear() - Eigen::Matrix3d::Identity()) * scale;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) p[3 * r + c] = l(r, c);
        const Eigen::Vector3d t = tr.apply(center) - center;
        p.tail<3>() = t;
        return p;
    }
};

struct FixedSample {
    Eigen::Vector3d position;
    int bin = 0;
};

class MattesMetric {
public:
    MattesMetric(const LevelImage& fixed, const LevelImage& moving, int bins)
        : fixed_(fixed), moving_(moving), bins_(bins) {
        fixed_width_ = (fixed.max - fixed.min) / (bins - 2 * kPad);
        moving_width_ = (moving.max - moving.min) / (bins - 2 * kPad);
        joint_.assign(static_cast<std::size_t>(bins) * bins, 0.0);
        moving_marginal_.assign(bins, 0.0);
        log_ratio_.assign(static_cast<std::size_t>(bins) * bins, 0.0);
    }

    [[nodiscard]] int fixed_bin(double v) const {
        const double eta = (v - fixed_.min) / fixed_width_ + kPad;
        return std::clamp(static_cast<int>(eta), kPad, bins_ - kPad - 1);
    }

    [[nodiscard]] double moving_eta(double v) const {
        const double eta = (v - moving_.min) / moving_width_ + kPad;
        return std::clamp(eta, static_cast<double>(kPad), bins_ - kPad - 1e-9);
    }

    /// MI and its gradient with respect to the 12 parameters.
    struct Result {
        double mi = 0.0;
        Params gradient = Params::Zero();
        std::size_t valid = 0;
    };

    Result evaluate(const std::vector<FixedSample>& samples, const AffineTransform& t,
                    const Parameterization& param, bool want_gradient) {
        std::fill(joint_.begin(), joint_.end(), 0.0);
        std::fill(moving_marginal_.begin(), moving_marginal_.end(), 0.0);
        cache_.clear();
        std::vector<double> fixed_marginal(bins_, 0.0);

        for (const auto& s : samples) {
            const Eigen::Vector3d mapped = t.apply(s.position);
            std::array<double, 4> f;
            if (!fetch(moving_, mapped, f)) continue;
            const double eta = moving_eta(f[0]);
            const int base = static_cast<int>(eta) - 1;
            for (int j = base; j < base + 4; ++j) {
                const double w = bspline3(j - eta);
                joint_[static_cast<std::size_t>(s.bin) * bins_ + j] += w;
            }
            fixed_marginal[s.bin] += 1.0;
            cache_.push_back({&s, eta, {f[1], f[2], f[3]}});
        }

        Result res;
        res.valid = cache_.size();
        if (res.valid < 16) return res;
        const double inv_n = 1.0 / static_cast<double>(res.valid);
        for (double& p : joint_) p *= inv_n;
        for (double& p : fixed_marginal) p *= inv_n;
        for (int i = 0; i < bins_; ++i)
            for (int j = 0; j < bins_; ++j) moving_marginal_[j] += joint_[static_cast<std::size_t>(i) * bins_ + j];

        for (int i = 0; i < bins_; ++i)
            for (int j = 0; j < bins_; ++j) {
                const std::size_t ij = static_cast<std::size_t>(i) * bins_ + j;
                const double p = joint_[ij];
                if (p > 1e-16 && moving_marginal_[j] > 1e-16) {
                    res.mi += p * std::log(p / (fixed_marginal[i] * moving_marginal_[j]));
                    log_ratio_[ij] = std::log(p / moving_marginal_[j]);
                } else {
                    log_ratio_[ij] = 0.0;
                }
            }
        if (!want_gradient) return res;

        const double coeff_scale = -inv_n / moving_width_;
        for (const auto& c : cache_) {
            const int i = c.sample->bin;
            const int base = static_cast<int>(c.eta) - 1;
            double dsum = 0.0;
            for (int j = base; j < base + 4; ++j)
                dsum += bspline3_derivative(j - c.eta) * log_ratio_[static_cast<std::size_t>(i) * bins_ + j];
            // d eta / d mapped = grad / width; d beta(j - eta) / d eta = -beta'.
            const double coeff = coeff_scale * dsum;
            const Eigen::Vector3d rel = (c.sample->position - param.center) / param.scale;
            for (int r = 0; r < 3; ++r) {
                const double g = coeff * c.gradient[r];
                res.gradient[3 * r + 0] += g * rel[0];
                res.gradient[3 * r + 1] += g * rel[1];
                res.gradient[3 * r + 2] += g * rel[2];
                res.gradient[9 + r] += g;
            }
        }
        return res;
    }

private:
    struct Cached {
        const FixedSample* sample;
        double eta;
        Eigen::Vector3d gradient;
    };

    const LevelImage& fixed_;
    const LevelImage& moving_;
    int bins_;
    double fixed_width_ = 1.0;
    double moving_width_ = 1.0;
    std::vector<double> joint_;
    std::vector<double> moving_marginal_;
    std::vector<double> log_ratio_;
    std::vector<Cached> cache_;
};

Eigen::Vector3d center_of_mass(const Volume& v) {
    const auto [mn, mx] = std::minmax_element(v.samples().begin(), v.samples().end());
    const double base = *mn;
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    double mass = 0.0;
    const Grid3& g = v.grid();
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (std::int32_t j = 0; j < g.dims[1]; ++j)
            for (std::int32_t i = 0; i < g.dims[0]; ++i) {
                const double w = v(i, j, k) - base;
                if (w <= 0.0) continue;
                const Point3 p = g.position(i, j, k);
                acc += w * Eigen::Vector3d(p[0], p[1], p[2]);
                mass += w;
            }
    const Point3 c = g.center();
    return mass > 0.0 ? Eigen::Vector3d(acc / mass) : Eigen::Vector3d(c[0], c[1], c[2]);
}

void draw_samples(const LevelImage& fixed, const MattesMetric& metric, std::size_t count, Rng& rng,
                  std::vector<FixedSample>& out) {
    out.resize(count);
    const Grid3& g = fixed.grid;
    const std::size_t n = g.voxel_count();
    for (auto& s : out) {
        const std::size_t lin = rng.index(n);
        const auto i = static_cast<std::int32_t>(lin % g.dims[0]);
        const auto j = static_cast<std::int32_t>((lin / g.dims[0]) % g.dims[1]);
        const auto k = static_cast<std::int32_t>(lin / (static_cast<std::size_t>(g.dims[0]) * g.dims[1]));
        const Point3 p = g.position(i, j, k);
        s.position = Eigen::Vector3d(p[0], p[1], p[2]);
        s.bin = metric.fixed_bin(fixed.values[lin]);
    }
}

bool degenerate(const Volume& v) {
    const auto [mn, mx] = std::minmax_element(v.samples().begin(), v.samples().end());
    return !(*mx > *mn);
}

} // namespace

double mattes_mutual_information(const Volume& moving, const Volume& fixed, const AffineTransform& t, int bins) {
    require(!degenerate(moving) && !degenerate(fixed), ErrorCode::domain,
            "degenerate input: constant image");
    const LevelImage f = make_level(fixed, 1);
    const LevelImage m = make_level(moving, 1);
    MattesMetric metric(f, m, bins);
    std::vector<FixedSample> samples(f.grid.voxel_count());
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const Grid3& g = f.grid;
        const auto i = static_cast<std::int32_t>(n % g.dims[0]);
        const auto j = static_cast<std::int32_t>((n / g.dims[0]) % g.dims[1]);
        const auto k = static_cast<std::int32_t>(n / (static_cast<std::size_t>(g.dims[0]) * g.dims[1]));
        const Point3 p = g.position(i, j, k);
        samples[n] = {Eigen::Vector3d(p[0], p[1], p[2]), metric.fixed_bin(f.values[n])};
    }
    Parameterization param{Eigen::Vector3d::Zero(), 1.0};
    return metric.evaluate(samples, t, param, false).mi;
}

RegistrationReport register_affine(const Volume& moving, const Volume& fixed, const RegistrationConfig& cfg,
                                   double failure_threshold_hu) {
    cfg.validate();
    require(!degenerate(moving) && !degenerate(fixed), ErrorCode::domain,
            "degenerate input: constant image");

    Parameterization param;
    {
        param.center = center_of_mass(fixed);
        const Grid3& g = fixed.grid();
        double acc = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double half = 0.5 * (g.dims[a] - 1) * g.spacing[a];
            acc += half * half / 3.0;
        }
        param.scale = std::max(std::sqrt(acc), 1.0);
    }

    Params p = Params::Zero();
    if (cfg.center_of_mass_init) p.tail<3>() = center_of_mass(moving) - param.center;

    Rng rng(cfg.rng_seed);
    int total_iterations = 0;
    std::vector<FixedSample> samples;

    for (int level = 0; level < cfg.pyramid_levels; ++level) {
        const int factor = 1 << (cfg.pyramid_levels - 1 - level);
        const LevelImage f = make_level(fixed, factor);
        const LevelImage m = make_level(moving, factor);
        if (!(f.max > f.min) || !(m.max > m.min)) continue;
        MattesMetric metric(f, m, cfg.histogram_bins);
        const auto n_samples = std::max<std::size_t>(
            static_cast<std::size_t>(cfg.min_samples),
            static_cast<std::size_t>(std::ceil(cfg.sample_fraction * static_cast<double>(f.grid.voxel_count()))));
        const double unit = *std::min_element(f.grid.spacing.begin(), f.grid.spacing.end());
        const double max_step = cfg.initial_step * unit;

        // Gradient scale: mean norm at translations of one initial step along
        // each axis, so steps stay proportional to the gradient near the optimum.
        double grad_scale = 0.0;
        int probes = 0;
        for (int a = 0; a < 3; ++a)
            for (double sgn : {-1.0, 1.0}) {
                Params q = p;
                q[9 + a] += sgn * max_step;
                draw_samples(f, metric, n_samples, rng, samples);
                const auto r = metric.evaluate(samples, param.to_transform(q), param, true);
                if (r.valid >= 16) {
                    grad_scale += r.gradient.norm();
                    ++probes;
                }
            }
        require(probes > 0 && std::isfinite(grad_scale), ErrorCode::numeric,
                "registration diverged: no overlap between images");
        grad_scale /= probes;
        if (!(grad_scale > 0.0)) continue;

        // Adaptive step schedule: the schedule's time only advances while
        // successive gradients disagree, so the gain stays large on the way
        // to the optimum and decays once the iterates oscillate around it.
        // Each parameter is normalized by a running RMS of its gradient, and
        // the last quarter of the iterates is averaged.
        const int average_from = cfg.iterations_per_level - std::max(1, cfg.iterations_per_level / 4);
        Params average = Params::Zero();
        int averaged = 0;
        double time = 0.0;
        Params previous = Params::Zero();
        Params second_moment = Params::Zero();
        for (int k = 0; k < cfg.iterations_per_level; ++k, ++total_iterations) {
            draw_samples(f, metric, n_samples, rng, samples);
            const auto r = metric.evaluate(samples, param.to_transform(p), param, true);
            require(r.valid >= 16, ErrorCode::numeric, "registration diverged: images no longer overlap");
            require(std::isfinite(r.mi) && r.gradient.allFinite(), ErrorCode::numeric,
                    "registration diverged: non-finite metric");
            const Params g = r.gradient / grad_scale;
            if (k > 0) {
                const double x = -g.dot(previous);
                time = std::max(0.0, time + kTimeMin + (kTimeMax - kTimeMin) /
                                                           (1.0 - (kTimeMax / kTimeMin) * std::exp(-x / kTimeOmega)));
                second_moment = kRmsDecay * second_moment + (1.0 - kRmsDecay) * g.cwiseAbs2();
            } else {
                second_moment = g.cwiseAbs2();
            }
            previous = g;
            const double gain =
                max_step * std::pow((cfg.step_offset + 1.0) / (cfg.step_offset + time + 1.0), cfg.step_decay);
            Params delta = gain * g.cwiseQuotient((second_moment.array().sqrt() + 1e-12).matrix());
            const double norm = delta.norm();
            if (norm > 2.0 * gain) delta *= 2.0 * gain / norm;
            p += delta;
            if (k >= average_from) {
                average += p;
                ++averaged;
            }
        }
        p = average / averaged;
    }

    RegistrationReport report;
    report.transform = param.to_transform(p);
    require(report.transform.invertible(), ErrorCode::numeric, "registration diverged: singular transform");
    report.iterations = total_iterations;
    report.final_metric = -mattes_mutual_information(moving, fixed, report.transform, cfg.histogram_bins);
    require(std::isfinite(report.final_metric), ErrorCode::numeric, "registration diverged: non-finite metric");
    const Volume registered = resample(moving, report.transform, fixed.grid());
    const FailureCheck check = detect_failure(fixed, registered, failure_threshold_hu);
    report.mae_hu = check.mae_hu;
    report.failed = check.failed;
    return report;
}

} // namespace calcquant::preprocess
