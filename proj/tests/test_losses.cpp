#include <doctest.h>

#include <cmath>

#include "calcquant/lesions.hpp"
#include "calcquant/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace calcquant;
using namespace calcquant::losses;

namespace {

constexpr double kFdTolerance = 1e-5;

Grid3 patch_grid() { return testutil::cube(8, 8, 1); }

Mask patch_target(const oracle::Patch& p) { return {patch_grid(), p.target}; }

} // namespace

TEST_CASE("analytic gradients match central differences") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const oracle::Patch p = oracle::random_patch(seed);
        const auto lab = lesions::label_components(patch_target(p), 26);
        CHECK(oracle::max_relative_gradient_error(p, [](const LossInput& x) { return cross_entropy(x); }) <
              kFdTolerance);
        CHECK(oracle::max_relative_gradient_error(p, [](const LossInput& x) { return soft_dice(x); }) <
              kFdTolerance);
        CHECK(oracle::max_relative_gradient_error(p, [](const LossInput& x) { return focal(x); }) < kFdTolerance);
        CHECK(oracle::max_relative_gradient_error(
                  p, [&](const LossInput& x) { return weighted_cross_entropy(x, lab); }) < kFdTolerance);
    }
}

TEST_CASE("gradients vanish outside the candidates") {
    const oracle::Patch p = oracle::random_patch(3);
    const LossInput x{p.pred, p.target, p.candidates};
    for (const auto& g : {cross_entropy(x), soft_dice(x), focal(x)})
        for (std::size_t n = 0; n < p.pred.size(); ++n)
            if (!p.candidates[n]) CHECK(g.grad[n] == 0.0);
}

TEST_CASE("focal loss with gamma 0 is cross-entropy") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const oracle::Patch p = oracle::random_patch(100 + seed);
        const LossInput x{p.pred, p.target, p.candidates};
        const auto f = focal(x, 0.0), ce = cross_entropy(x);
        CHECK(std::abs(f.value - ce.value) <= 1e-12);
        for (std::size_t n = 0; n < p.pred.size(); ++n) CHECK(std::abs(f.grad[n] - ce.grad[n]) <= 1e-12);
    }
}

TEST_CASE("loss values against hand computation") {
    const std::vector<double> pred{0.8, 0.3, 0.6, 0.9};
    const std::vector<std::uint8_t> target{1, 0, 1, 0}, cand{1, 1, 1, 0};
    const LossInput x{pred, target, cand};
    const double ce = -(std::log(0.8) + std::log(0.7) + std::log(0.6)) / 3.0;
    CHECK(cross_entropy(x).value == doctest::Approx(ce).epsilon(1e-14));
    const double dice = 1.0 - (2.0 * (0.8 + 0.6) + 1.0) / ((0.8 + 0.3 + 0.6) + 2.0 + 1.0);
    CHECK(soft_dice(x).value == doctest::Approx(dice).epsilon(1e-14));
    const double fl = -(0.04 * std::log(0.8) + 0.09 * std::log(0.7) + 0.16 * std::log(0.6)) / 3.0;
    CHECK(focal(x).value == doctest::Approx(fl).epsilon(1e-14));
}

TEST_CASE("predictions are clamped away from 0 and 1") {
    const std::vector<double> pred{0.0, 1.0};
    const std::vector<std::uint8_t> target{1, 0}, cand{1, 1};
    const auto r = cross_entropy({pred, target, cand});
    CHECK(std::isfinite(r.value));
    CHECK(r.value == doctest::Approx(-std::log(kClampEps)));
    CHECK(r.grad[0] == 0.0);
    CHECK(r.grad[1] == 0.0);
}

TEST_CASE("lesion weights") {
    CHECK(lesion_weight(1) == 10.0);
    CHECK(lesion_weight(10) == 10.0);
    CHECK(lesion_weight(55) == 5.5);
    CHECK(lesion_weight(100) == 1.0);
    CHECK(lesion_weight(1000) == 1.0);
    for (std::size_t s = 10; s < 100; ++s) CHECK(lesion_weight(s + 1) < lesion_weight(s));

    // A 10-voxel and a 100-voxel lesion on one grid.
    const Grid3 g = testutil::cube(20, 12, 1);
    std::vector<std::uint8_t> m(g.voxel_count(), 0);
    for (std::int32_t i = 0; i < 10; ++i) m[g.index(i, 0, 0)] = 1;
    for (std::int32_t j = 2; j < 12; ++j)
        for (std::int32_t i = 10; i < 20; ++i) m[g.index(i, j, 0)] = 1;
    const auto lab = lesions::label_components(Mask(g, m), 26);
    REQUIRE(lab.count() == 2);
    const auto w = lesion_weights(lab);
    CHECK(w[g.index(0, 0, 0)] == 10.0);
    CHECK(w[g.index(15, 5, 0)] == 1.0);
    CHECK(w[g.index(0, 5, 0)] == 1.0);
}

TEST_CASE("weighted CE rejects a labeling that disagrees with the target") {
    const oracle::Patch p = oracle::random_patch(1);
    auto lab = lesions::label_components(patch_target(p), 26);
    lab.labels[0] = 0;
    CHECK_THROWS_AS((void)weighted_cross_entropy({p.pred, p.target, p.candidates}, lab), Error);
}

TEST_CASE("toy fit lowers every loss and is deterministic") {
    const auto patches = make_toy_patches(16, 5);
    for (LossKind k : {LossKind::cross_entropy, LossKind::soft_dice, LossKind::focal,
                       LossKind::weighted_cross_entropy}) {
        const auto r = toy_fit(patches, k, 200);
        CHECK(r.trace.size() == 201);
        CHECK(r.trace.back() < r.trace.front());
        CHECK(r.accuracy > 0.95);
        CHECK(format_trace_csv(r, k) == format_trace_csv(toy_fit(patches, k, 200), k));
    }
    CHECK(parse_loss_kind("wce") == LossKind::weighted_cross_entropy);
    CHECK_THROWS_AS((void)parse_loss_kind("hinge"), Error);
}
