#include <doctest.h>

#include <cmath>

#include "calcquant/evaluate.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace calcquant;
using namespace calcquant::evaluate;

namespace {

std::vector<Pair> random_pairs(std::uint64_t seed, std::size_t n, bool quantized = false) {
    Rng rng(seed);
    std::vector<Pair> out;
    for (std::size_t i = 0; i < n; ++i) {
        double a = rng.uniform(0.0, 200.0), b = a * rng.uniform(0.8, 1.2) + rng.normal() * 5.0;
        if (quantized) {
            a = std::round(a * 8.0) / 8.0;
            b = std::round(b * 8.0) / 8.0;
        }
        out.push_back({"p" + std::to_string(i), a, b});
    }
    return out;
}

} // namespace

TEST_CASE("voxel counts and per-scan metrics") {
    const Grid3 g = testutil::cube(6, 1, 1, 0.5);
    const Mask pred(g, {1, 1, 0, 0, 1, 0}), ref(g, {1, 0, 1, 0, 1, 0});
    const VoxelCounts c = voxel_counts(pred, ref);
    CHECK(c == VoxelCounts{2, 1, 1, 2});
    const ScanMetrics m = scan_metrics(c, g.voxel_volume());
    CHECK(*m.recall == doctest::Approx(2.0 / 3.0));
    CHECK(*m.precision == doctest::Approx(2.0 / 3.0));
    CHECK(m.fpv_mm3 == 0.125);
    CHECK(m.has_icac);

    const ScanMetrics empty = scan_metrics(VoxelCounts{0, 0, 0, 6}, 0.125);
    CHECK_FALSE(empty.recall.has_value());
    CHECK_FALSE(empty.precision.has_value());
    CHECK_FALSE(empty.has_icac);
}

TEST_CASE("aggregate metrics split scans by calcification") {
    const std::vector<VoxelCounts> counts{{8, 2, 2, 100}, {0, 4, 0, 100}, {1, 0, 3, 100}};
    const MetricsReport r = aggregate_metrics(counts, 0.125);
    CHECK(*r.dataset_recall == doctest::Approx(9.0 / 14.0));
    CHECK(*r.dataset_precision == doctest::Approx(9.0 / 15.0));
    CHECK(r.scans_with_icac == 2);
    CHECK(r.scans_icac_free == 1);
    CHECK(r.participant_recall->mean == doctest::Approx((0.8 + 0.25) / 2.0));
    CHECK(r.participant_precision->n == 3);
    CHECK(r.fpv_icac_free->mean == 0.5);
    CHECK_FALSE(r.fpv_icac_free->sd.has_value());
    CHECK(r.fpv_with_icac->mean == 0.125);
}

TEST_CASE("ICC(2,1) matches the ANOVA table") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto pairs = random_pairs(seed, 10 + seed * 7);
        std::vector<std::vector<double>> y;
        for (const auto& p : pairs) y.push_back({p.a, p.b});
        CHECK(std::abs(icc21(pairs) - oracle::icc21_anova(y)) <= 1e-12);
    }
    // Shrout and Fleiss style fixed table (subjects x two raters).
    const std::vector<Pair> fixed{{"1", 9, 2}, {"2", 6, 1}, {"3", 8, 4}, {"4", 7, 1}, {"5", 10, 5}, {"6", 6, 2}};
    std::vector<std::vector<double>> y;
    for (const auto& p : fixed) y.push_back({p.a, p.b});
    CHECK(std::abs(icc21(fixed) - oracle::icc21_anova(y)) <= 1e-12);
    const std::vector<Pair> identical{{"1", 1, 1}, {"2", 2, 2}, {"3", 5, 5}};
    CHECK(icc21(identical) == 1.0);
    const std::vector<Pair> flat{{"1", 1, 1}, {"2", 1, 1}, {"3", 1, 1}};
    CHECK_THROWS_AS((void)icc21(flat), Error);
}

TEST_CASE("Spearman correlation") {
    std::vector<Pair> up, down;
    for (int i = 0; i < 30; ++i) {
        up.push_back({std::to_string(i), std::exp(0.1 * i), std::pow(i, 3.0)});
        down.push_back({std::to_string(i), static_cast<double>(i), -std::sqrt(i + 1.0)});
    }
    CHECK(spearman(up) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(spearman(down) == doctest::Approx(-1.0).epsilon(1e-15));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        // Heavy ties from coarse quantization.
        Rng rng(seed);
        std::vector<Pair> pairs;
        std::vector<double> a, b;
        for (int i = 0; i < 40; ++i) {
            const double x = std::floor(rng.uniform(0.0, 6.0)), y = std::floor(x + rng.uniform(-2.0, 2.0));
            pairs.push_back({std::to_string(i), x, y});
            a.push_back(x);
            b.push_back(y);
        }
        const double expected = oracle::pearson_textbook(oracle::ranks_by_counting(a), oracle::ranks_by_counting(b));
        CHECK(spearman(pairs) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(midranks(a) == oracle::ranks_by_counting(a));
    }
}

TEST_CASE("Bland-Altman of a constant offset has zero spread") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto pairs = random_pairs(seed, 50, true);
        for (auto& p : pairs) p.b = p.a + 0.375;
        const BlandAltman ba = bland_altman(pairs);
        CHECK(ba.sd == 0.0);
        CHECK(ba.mean_difference == -0.375);
        CHECK(ba.lower == ba.upper);
    }
    const std::vector<Pair> pairs{{"1", 8, 1}, {"2", 27, 8}, {"3", 64, 27}};
    const BlandAltman cr = bland_altman(pairs, BlandAltmanTransform::cube_root);
    CHECK(cr.mean_difference == doctest::Approx(1.0));
    CHECK(cr.sd == doctest::Approx(0.0).epsilon(1e-12));
    const BlandAltman raw = bland_altman(pairs);
    CHECK(raw.mean_difference == doctest::Approx(21.0));
    CHECK(raw.sd == doctest::Approx(std::sqrt(((7 - 21.0) * (7 - 21.0) + (19 - 21.0) * (19 - 21.0) +
                                               (37 - 21.0) * (37 - 21.0)) / 2.0)));
    CHECK(raw.upper - raw.mean_difference == doctest::Approx(1.96 * raw.sd));
}

TEST_CASE("bootstrap is deterministic and independent of the job count") {
    const auto pairs = random_pairs(4, 60);
    BootstrapOptions o{500, 17, 1};
    const AgreementReport a = agreement(pairs, o);
    o.jobs = 4;
    const AgreementReport b = agreement(pairs, o);
    CHECK(a.icc_ci.lower == b.icc_ci.lower);
    CHECK(a.icc_ci.upper == b.icc_ci.upper);
    CHECK(a.spearman_ci.lower == b.spearman_ci.lower);
    CHECK(a.spearman_ci.upper == b.spearman_ci.upper);
    CHECK(a.icc_ci.lower <= a.icc);
    CHECK(a.icc <= a.icc_ci.upper);
    o.seed = 18;
    const AgreementReport c = agreement(pairs, o);
    CHECK((c.icc_ci.lower != a.icc_ci.lower || c.icc_ci.upper != a.icc_ci.upper));
    CHECK_THROWS_AS((void)agreement(pairs, BootstrapOptions{99, 0, 1}), Error);
}

TEST_CASE("bootstrap redraws unusable resamples") {
    // The statistic rejects resamples that contain participant 0.
    const ResampleStatistic stat = [](std::span<const std::size_t> idx) -> std::optional<double> {
        for (std::size_t i : idx)
            if (i == 0) return std::nullopt;
        return static_cast<double>(idx.size());
    };
    // Full sample must be usable, so give the full-sample call a pass.
    bool first = true;
    const ResampleStatistic guarded = [&](std::span<const std::size_t> idx) -> std::optional<double> {
        if (first) {
            first = false;
            return 1.0;
        }
        return stat(idx);
    };
    const auto r = bootstrap(8, {guarded}, {200, 3, 1});
    CHECK(r.redraws > 0);
    CHECK(r.intervals[0].lower == 8.0);
}

TEST_CASE("paired difference p") {
    const std::vector<double> positive(100, 0.5);
    CHECK(paired_difference_p(positive) == 0.0);
    std::vector<double> mixed;
    for (int i = 0; i < 100; ++i) mixed.push_back(i < 30 ? -1.0 : 1.0);
    CHECK(paired_difference_p(mixed) == doctest::Approx(0.6));
    const std::vector<double> zeros(10, 0.0);
    CHECK(paired_difference_p(zeros) == 1.0);
}

TEST_CASE("Wilcoxon signed-rank on the reader-study counts") {
    const auto grades = grades_from_counts({14, 117, 69, 86, 8});
    CHECK(grades.size() == 294);
    const WilcoxonResult w = wilcoxon_signed_rank(grades);
    // Hand computation: |g| = 1 holds ranks 1..203 (midrank 102), |g| = 2
    // holds ranks 204..225 (midrank 214.5).
    const double n = 225.0, w_plus = 117.0 * 102.0 + 14.0 * 214.5;
    const double var = n * (n + 1) * (2 * n + 1) / 24.0 - ((203.0 * 203 * 203 - 203) + (22.0 * 22 * 22 - 22)) / 48.0;
    const double z = (w_plus - n * (n + 1) / 4.0) / std::sqrt(var);
    CHECK(w.n == 225);
    CHECK(w.w_plus == w_plus);
    CHECK(w.z == doctest::Approx(z).epsilon(1e-14));
    CHECK(w.p == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-14));
    CHECK(std::abs(w.p - 0.012) <= 0.005);

    // Mirrored grades flip z and keep p.
    const WilcoxonResult m = wilcoxon_signed_rank(grades_from_counts({8, 86, 69, 117, 14}));
    CHECK(m.z == doctest::Approx(-w.z));
    CHECK(m.p == doctest::Approx(w.p));
}

TEST_CASE("Wilcoxon edge cases") {
    const std::vector<int> zeros(10, 0);
    try {
        (void)wilcoxon_signed_rank(zeros);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()) == "no non-zero grades");
    }
    const std::vector<int> bad{3};
    CHECK_THROWS_AS((void)wilcoxon_signed_rank(bad), Error);
    const std::vector<int> balanced{1, -1, 2, -2};
    const auto b = wilcoxon_signed_rank(balanced);
    CHECK(b.z == 0.0);
    CHECK(b.p == 1.0);
    const auto parsed = parse_grades_csv("region_id,grade\nr001,2\nr002,-1\nr003,0\n");
    CHECK(parsed == std::vector<int>{2, -1, 0});
    CHECK_THROWS_AS((void)parse_grades_csv("region_id,grade\nr001,5\n"), Error);
}

TEST_CASE("curve sweep equals per-threshold counting") {
    // Ten voxels, two scans.
    const std::vector<double> p1{0.05, 0.15, 0.35, 0.5, 0.65, 0.75, 0.95, 0.2, 0.8, 0.4};
    const std::vector<std::uint8_t> c1{1, 1, 1, 1, 1, 1, 1, 0, 1, 1}, r1{0, 1, 0, 1, 1, 0, 1, 1, 0, 0};
    const std::vector<double> p2{0.1, 0.3, 0.5, 0.7, 0.9, 0.6, 0.0, 1.0, 0.45, 0.55};
    const std::vector<std::uint8_t> c2{1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, r2(10, 0);
    const std::vector<SweepInput> scans{{p1, c1, r1, 0.125}, {p2, c2, r2, 0.125}};
    const auto thresholds = uniform_thresholds(11);
    REQUIRE(thresholds.size() == 11);
    const auto curve = sweep_curves(scans, thresholds);
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const auto a = oracle::confusion_at(p1, c1, r1, thresholds[t]);
        const auto b = oracle::confusion_at(p2, c2, r2, thresholds[t]);
        const std::uint64_t tp = a.tp + b.tp, fp = a.fp + b.fp, fn = a.fn + b.fn;
        REQUIRE(curve[t].recall.has_value());
        CHECK(*curve[t].recall == static_cast<double>(tp) / static_cast<double>(tp + fn));
        if (tp + fp > 0) {
            REQUIRE(curve[t].precision.has_value());
            CHECK(*curve[t].precision == static_cast<double>(tp) / static_cast<double>(tp + fp));
        } else {
            CHECK_FALSE(curve[t].precision.has_value());
        }
        // Only the first scan has calcification, so the mean is its FP volume.
        CHECK(*curve[t].mean_fpv_mm3 == static_cast<double>(a.fp) * 0.125);
    }
}

TEST_CASE("recall is non-increasing in the threshold") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        std::vector<std::vector<double>> probs(3);
        std::vector<std::vector<std::uint8_t>> cands(3), refs(3);
        std::vector<SweepInput> scans;
        for (int s = 0; s < 3; ++s) {
            for (int i = 0; i < 200; ++i) {
                probs[s].push_back(rng.uniform());
                cands[s].push_back(rng.uniform() < 0.8);
                refs[s].push_back(rng.uniform() < 0.2);
            }
            scans.push_back({probs[s], cands[s], refs[s], 0.125});
        }
        const auto curve = sweep_curves(scans, uniform_thresholds(101));
        for (std::size_t t = 1; t < curve.size(); ++t) CHECK(*curve[t].recall <= *curve[t - 1].recall);
    }
    const std::vector<double> unsorted{0.5, 0.2};
    const std::vector<double> p{0.5};
    const std::vector<std::uint8_t> c{1}, r{1};
    const std::vector<SweepInput> one{{p, c, r, 0.125}};
    CHECK_THROWS_AS((void)sweep_curves(one, unsorted), Error);
}

TEST_CASE("pairs CSV") {
    const auto p = parse_pairs_csv("id,manual_mm3,auto_mm3\na,1.5,2\nb,0,0.125\n");
    REQUIRE(p.size() == 2);
    CHECK(p[1].b == 0.125);
    CHECK_THROWS_AS((void)parse_pairs_csv("id,manual_mm3,auto_mm3\na,1,2\na,1,2\n"), Error);
    CHECK_THROWS_AS((void)parse_pairs_csv("id,manual_mm3\na,1\n"), Error);
}
