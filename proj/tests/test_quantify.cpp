#include <doctest.h>

#include "calcquant/phantom.hpp"
#include "calcquant/quantify.hpp"
#include "support.hpp"

using namespace calcquant;
using namespace calcquant::quantify;

TEST_CASE("single voxel volume") {
    const Grid3 g = testutil::cube(3, 3, 3, 0.5);
    std::vector<std::uint8_t> m(g.voxel_count(), 0);
    m[13] = 1;
    CHECK(measure_volume(Mask(g, m)) == 0.125);
    CHECK(count_foreground(Mask(g, m)) == 1);
}

TEST_CASE("thresholds are strict") {
    const Grid3 g = testutil::cube(4, 1, 1);
    const Volume hu(g, {129.0, 130.0, 131.0, 500.0});
    const Mask cand = candidate_mask(hu);
    CHECK(std::vector<std::uint8_t>(cand.samples().begin(), cand.samples().end()) ==
          std::vector<std::uint8_t>{0, 0, 1, 1});
    const ProbMap p(g, {0.9, 0.9, 0.5, 0.5000001});
    const Mask seg = binarize(p, cand);
    CHECK(std::vector<std::uint8_t>(seg.samples().begin(), seg.samples().end()) ==
          std::vector<std::uint8_t>{0, 0, 0, 1});

    const Volume smooth(g, {200.0, 200.0, 120.0, 131.0});
    const Mask dual = dual_candidate_mask(hu, smooth);
    CHECK(std::vector<std::uint8_t>(dual.samples().begin(), dual.samples().end()) ==
          std::vector<std::uint8_t>{0, 0, 0, 1});
}

TEST_CASE("fusion is the voxel mean") {
    const Grid3 g = testutil::cube(3, 1, 1);
    const ProbMap a(g, {0.0, 0.5, 1.0}), b(g, {1.0, 0.25, 1.0});
    const ProbMap f = fuse_mean({a, b});
    CHECK(f[0] == 0.5);
    CHECK(f[1] == 0.375);
    CHECK(f[2] == 1.0);
    CHECK_THROWS_AS((void)fuse_mean(std::vector<ProbMap>{}), Error);
    CHECK_THROWS_AS((void)fuse_mean({a, ProbMap::filled(testutil::cube(2, 1, 1), 0.0)}), Error);
}

TEST_CASE("phantom volumes are reproduced exactly") {
    for (std::uint64_t seed : {1u, 7u, 42u}) {
        phantom::PhantomSpec spec;
        spec.grid = phantom::default_grid();
        spec.seed = seed;
        spec.noise_hu = 10.0;
        const phantom::Phantom ph = phantom::generate(spec);
        EnsembleOutput ens{ph.members, {}};
        const QuantResult r = quantify::quantify(ens, candidate_mask(ph.image));
        CHECK(r.segmentation == ph.automated);
        CHECK(r.volume_mm3 == static_cast<double>(count_foreground(ph.automated)) * 0.125);

        // Indicator maps of the truth give the truth volume.
        std::vector<double> ind(ph.truth.size());
        for (std::size_t n = 0; n < ind.size(); ++n) ind[n] = ph.truth[n];
        const QuantResult t = quantify::quantify({{ProbMap(ph.truth.grid(), ind)}, {}}, candidate_mask(ph.image));
        CHECK(t.segmentation == ph.truth);
        CHECK(t.volume_mm3 == static_cast<double>(count_foreground(ph.truth)) * 0.125);
    }
}
