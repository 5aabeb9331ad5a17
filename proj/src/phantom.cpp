#include "calcquant/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "calcquant/rng.hpp"

namespace calcquant::phantom {

namespace {

struct Ellipsoid {
    Point3 center;
    Point3 radii;
    /// Rows are the ellipsoid's principal axes in grid coordinates.
    std::array<Point3, 3> axes{Point3{1, 0, 0}, Point3{0, 1, 0}, Point3{0, 0, 1}};
};

Ellipsoid oriented(const Point3& center, const Point3& radii, double yaw, double pitch) {
    const double cy = std::cos(yaw), sy = std::sin(yaw), cp = std::cos(pitch), sp = std::sin(pitch);
    // Rz(yaw) * Ry(pitch), stored transposed (rows = rotated axes).
    Ellipsoid e{center, radii};
    e.axes = {Point3{cy * cp, sy * cp, -sp}, Point3{-sy, cy, 0.0}, Point3{cy * sp, sy * sp, cp}};
    return e;
}

double normalized_radius2(const Ellipsoid& e, const Point3& p) {
    const Point3 d{p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]};
    double r2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double u = (d[0] * e.axes[a][0] + d[1] * e.axes[a][1] + d[2] * e.axes[a][2]) / e.radii[a];
        r2 += u * u;
    }
    return r2;
}

/// Approximate signed distance (mm) to an ellipsoid surface, negative inside.
double signed_distance(const Ellipsoid& e, const Point3& p) {
    const double rmin = std::min({e.radii[0], e.radii[1], e.radii[2]});
    return (std::sqrt(normalized_radius2(e, p)) - 1.0) * rmin;
}

double soft_inside(double sd, double width) { return 0.5 - 0.5 * std::tanh(sd / width); }

bool inside(const Ellipsoid& e, const Point3& p) { return normalized_radius2(e, p) <= 1.0; }

struct Structure {
    Ellipsoid shape;
    double hu;
};

struct Anatomy {
    Ellipsoid head, brain;
    std::vector<Structure> interior; // painted in order inside the head
    Point3 carotid_left, carotid_right; // axial positions (z ignored)
    double carotid_radius;
};

Anatomy anatomy(const Grid3& g) {
    const Point3 c = g.center();
    Point3 e;
    for (int a = 0; a < 3; ++a) e[a] = g.dims[a] * g.spacing[a];
    auto at = [&](double fx, double fy, double fz) {
        return Point3{c[0] + fx * e[0], c[1] + fy * e[1], c[2] + fz * e[2]};
    };
    auto size = [&](double fx, double fy, double fz) { return Point3{fx * e[0], fy * e[1], fz * e[2]}; };
    Anatomy an;
    an.head = {c, size(0.40, 0.44, 0.40)};
    const double shell = 0.06 * std::min(e[0], e[1]);
    an.brain = {c, {an.head.radii[0] - shell, an.head.radii[1] - shell, an.head.radii[2] - shell}};
    an.interior = {
        {oriented(at(-0.07, -0.06, 0.05), size(0.05, 0.13, 0.08), 0.2, 0.1), 5.0},     // ventricles
        {oriented(at(0.06, -0.03, 0.07), size(0.04, 0.10, 0.06), -0.3, 0.0), 8.0},
        {oriented(at(-0.10, 0.30, -0.12), size(0.08, 0.05, 0.07), 0.4, 0.0), -900.0}, // sinuses
        {oriented(at(0.12, 0.27, -0.20), size(0.05, 0.04, 0.05), 0.0, 0.3), -850.0},
        {oriented(at(-0.15, 0.34, 0.02), size(0.06, 0.05, 0.06), 0.0, 0.0), -90.0},   // orbits
        {oriented(at(0.14, 0.33, 0.04), size(0.05, 0.05, 0.05), 0.0, 0.0), -90.0},
        {oriented(at(-0.15, 0.35, 0.02), size(0.035, 0.035, 0.035), 0.0, 0.0), 15.0},
        {oriented(at(0.14, 0.34, 0.04), size(0.03, 0.03, 0.03), 0.0, 0.0), 15.0},
        {oriented(at(-0.20, -0.02, -0.18), size(0.14, 0.03, 0.04), 0.6, 0.5), 1100.0}, // petrous ridges
        {oriented(at(0.21, 0.01, -0.16), size(0.13, 0.03, 0.04), -0.7, -0.3), 1100.0},
        {oriented(at(0.02, -0.25, 0.18), size(0.03, 0.03, 0.03), 0.0, 0.0), 250.0},   // pineal-like focus
    };
    an.carotid_left = at(-0.17, 0.05, 0.0);
    an.carotid_right = at(0.17, 0.04, 0.0);
    an.carotid_radius = 0.035 * std::min(e[0], e[1]);
    return an;
}

double head_value(const Anatomy& an, const Point3& p, double edge) {
    double v = -1024.0;
    auto layer = [&](const Ellipsoid& e, double hu) {
        const double s = soft_inside(signed_distance(e, p), edge);
        if (s > 1e-12) v = v * (1.0 - s) + hu * s;
    };
    layer(an.head, 900.0);
    layer(an.brain, 35.0);
    for (const auto& st : an.interior) layer(st.shape, st.hu);
    for (const Point3& axis : {an.carotid_left, an.carotid_right}) {
        const double d = std::hypot(p[0] - axis[0], p[1] - axis[1]) - an.carotid_radius;
        const double s = soft_inside(d, edge) * soft_inside(signed_distance(an.brain, p), edge);
        v = v * (1.0 - s) + 55.0 * s;
    }
    return v;
}

} // namespace

Grid3 default_grid() {
    Grid3 g;
    g.dims = {96, 96, 40};
    g.spacing = {0.5, 0.5, 0.5};
    g.origin = {0.0, 0.0, 0.0};
    return g;
}

Volume head(const Grid3& grid, double noise_hu, std::uint64_t seed) {
    grid.validate();
    const Anatomy an = anatomy(grid);
    const double edge = 0.75 * std::min({grid.spacing[0], grid.spacing[1], grid.spacing[2]});
    Rng rng(seed);
    std::vector<double> s(grid.voxel_count());
    std::size_t n = 0;
    for (std::int32_t k = 0; k < grid.dims[2]; ++k)
        for (std::int32_t j = 0; j < grid.dims[1]; ++j)
            for (std::int32_t i = 0; i < grid.dims[0]; ++i, ++n) {
                double v = head_value(an, grid.position(i, j, k), edge);
                if (noise_hu > 0.0) v += noise_hu * rng.normal();
                s[n] = std::clamp(v, -1024.0, 3071.0);
            }
    return {grid, std::move(s)};
}

Phantom generate(const PhantomSpec& spec) {
    const Grid3& g = spec.grid;
    g.validate();
    require(spec.calcifications >= 0 && spec.ensemble_members >= 1 && spec.method_false_positives >= 0,
            ErrorCode::invalid_argument, "phantom counts must be non-negative with at least one member");
    Rng rng(spec.seed);
    const Anatomy an = anatomy(g);
    std::vector<double> hu = std::move(head(g, spec.noise_hu, stream_seed(spec.seed, 1))).release();

    const double unit = std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
    const Point3 c = g.center();
    const double zext = g.dims[2] * g.spacing[2];

    auto place = [&](const Point3& axis, double offset_scale) {
        const double angle = rng.uniform(0.0, 6.283185307179586);
        const double rr = an.carotid_radius * offset_scale;
        Calcification calc;
        calc.center_mm = {axis[0] + rr * std::cos(angle), axis[1] + rr * std::sin(angle),
                          c[2] + rng.uniform(-0.3, 0.3) * zext};
        for (int a = 0; a < 3; ++a) calc.radii_mm[a] = unit * rng.uniform(0.8, 2.6);
        calc.hu = rng.uniform(250.0, 750.0);
        return calc;
    };

    Phantom ph{Volume::filled(g, 0.0), Mask::filled(g, 0), Mask::filled(g, 0), Mask::filled(g, 0), {}, {}};
    std::vector<std::uint8_t> truth(g.voxel_count(), 0), manual(truth), automated(truth);

    auto rasterize = [&](const Calcification& calc, auto&& visit) {
        const Ellipsoid e{calc.center_mm, calc.radii_mm};
        const Point3 lo_c = g.continuous_index({e.center[0] - e.radii[0], e.center[1] - e.radii[1],
                                                e.center[2] - e.radii[2]});
        const Point3 hi_c = g.continuous_index({e.center[0] + e.radii[0], e.center[1] + e.radii[1],
                                                e.center[2] + e.radii[2]});
        std::int64_t lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(lo_c[a])));
            hi[a] = std::min<std::int64_t>(g.dims[a] - 1, static_cast<std::int64_t>(std::ceil(hi_c[a])));
        }
        for (std::int64_t k = lo[2]; k <= hi[2]; ++k)
            for (std::int64_t j = lo[1]; j <= hi[1]; ++j)
                for (std::int64_t i = lo[0]; i <= hi[0]; ++i)
                    if (inside(e, g.position(static_cast<double>(i), static_cast<double>(j),
                                             static_cast<double>(k))))
                        visit(g.index(i, j, k));
    };

    for (int n = 0; n < spec.calcifications; ++n) {
        Calcification calc = place(n % 2 == 0 ? an.carotid_left : an.carotid_right, 1.0);
        calc.observed = rng.uniform() >= spec.observer_miss_rate;
        calc.detected = rng.uniform() >= spec.method_miss_rate;
        rasterize(calc, [&](std::size_t idx) {
            hu[idx] = calc.hu;
            truth[idx] = 1;
            if (calc.observed) manual[idx] = 1;
            if (calc.detected) automated[idx] = 1;
        });
        ph.calcifications.push_back(calc);
    }
    // Bright non-calcium structures (bone fragments) that only the method marks.
    for (int n = 0; n < spec.method_false_positives; ++n) {
        Calcification calc = place(n % 2 == 0 ? an.carotid_right : an.carotid_left, 2.2);
        calc.hu = rng.uniform(140.0, 260.0);
        calc.observed = false;
        calc.detected = true;
        rasterize(calc, [&](std::size_t idx) {
            if (truth[idx]) return;
            hu[idx] = calc.hu;
            automated[idx] = 1;
        });
    }
    for (auto& calc : ph.calcifications) {
        calc.voxels = 0;
        rasterize(calc, [&](std::size_t idx) { calc.voxels += truth[idx]; });
    }

    // Member maps: mean above 0.5 exactly on the automated mask, a low halo
    // around it, zero elsewhere.
    std::vector<std::uint8_t> halo(automated);
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<std::uint8_t> next(halo);
        for (std::int32_t k = 0; k < g.dims[2]; ++k)
            for (std::int32_t j = 0; j < g.dims[1]; ++j)
                for (std::int32_t i = 0; i < g.dims[0]; ++i) {
                    if (!halo[g.index(i, j, k)]) continue;
                    for (int d = 0; d < 6; ++d) {
                        std::int32_t q[3] = {i, j, k};
                        q[d / 2] += (d % 2) ? 1 : -1;
                        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= g.dims[0] || q[1] >= g.dims[1] ||
                            q[2] >= g.dims[2])
                            continue;
                        next[g.index(q[0], q[1], q[2])] = 1;
                    }
                }
        halo.swap(next);
    }
    for (int m = 0; m < spec.ensemble_members; ++m) {
        Rng mr(stream_seed(spec.seed, 100 + m));
        std::vector<double> p(g.voxel_count(), 0.0);
        for (std::size_t idx = 0; idx < p.size(); ++idx) {
            if (automated[idx])
                p[idx] = 0.55 + 0.45 * mr.uniform();
            else if (halo[idx])
                p[idx] = 0.45 * mr.uniform();
        }
        ph.members.emplace_back(g, std::move(p));
    }

    ph.image = Volume(g, std::move(hu));
    ph.truth = Mask(g, std::move(truth));
    ph.manual = Mask(g, std::move(manual));
    ph.automated = Mask(g, std::move(automated));
    return ph;
}

} // namespace calcquant::phantom
