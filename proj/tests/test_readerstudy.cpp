#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "calcquant/phantom.hpp"
#include "calcquant/readerstudy.hpp"
#include "support.hpp"

using namespace calcquant;
using namespace calcquant::readerstudy;
using nlohmann::json;

namespace {

/// Scan with identical masks except for `extra` automated-only pixels in the
/// left half of slice 1.
Scan scan_with_symdiff(const std::string& id, std::size_t extra) {
    const Grid3 g = testutil::cube(16, 16, 3, 0.5);
    std::vector<std::uint8_t> manual(g.voxel_count(), 0);
    for (std::int32_t i = 2; i < 6; ++i) manual[g.index(i, 4, 1)] = 1;
    std::vector<std::uint8_t> automated = manual;
    for (std::size_t e = 0; e < extra; ++e) automated[g.index(static_cast<std::int32_t>(e % 8), 8 + static_cast<std::int32_t>(e / 8), 1)] = 1;
    return {id, Volume::filled(g, 40.0), Mask(g, manual), Mask(g, automated)};
}

std::vector<Scan> random_scans(std::size_t count, std::uint64_t seed) {
    std::vector<Scan> scans;
    Rng rng(seed);
    for (std::size_t s = 0; s < count; ++s) {
        const Grid3 g = testutil::cube(16, 16, 4, 0.5);
        const double density = rng.uniform(0.0, 0.06);
        // Several scans per participant.
        scans.push_back({"p" + std::to_string(s / 3), Volume::filled(g, 0.0), testutil::random_mask(g, density, rng.next()),
                         testutil::random_mask(g, density, rng.next())});
    }
    return scans;
}

/// Symmetric difference area of a region, recomputed from the masks.
double symdiff_area(const Scan& scan, const Region& r) {
    const Grid3& g = scan.image.grid();
    const std::int32_t lo = r.side == Side::left ? 0 : g.dims[0] / 2, hi = r.side == Side::left ? g.dims[0] / 2 : g.dims[0];
    std::size_t n = 0;
    for (std::int32_t j = 0; j < g.dims[1]; ++j)
        for (std::int32_t i = lo; i < hi; ++i) n += scan.manual(i, j, r.slice) != scan.automated(i, j, r.slice);
    return static_cast<double>(n) * g.spacing[0] * g.spacing[1];
}

std::vector<Scan> phantom_scans(std::size_t count) {
    std::vector<Scan> scans;
    for (std::size_t s = 0; s < count; ++s) {
        phantom::PhantomSpec spec;
        spec.grid = testutil::cube(64, 64, 24, 0.5);
        spec.seed = 100 + s;
        spec.calcifications = 6;
        spec.ensemble_members = 1;
        const phantom::Phantom ph = phantom::generate(spec);
        scans.push_back({"part" + std::to_string(s), ph.image, ph.manual, ph.automated});
    }
    return scans;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

/// True when a served body mentions contour provenance or the key.
bool leaks(const std::string& body) {
    const std::string b = lower(body);
    for (const char* word : {"manual", "automated", "automatic", "blue_on_left", "automated_is_blue", "key.json"})
        if (b.find(word) != std::string::npos) return true;
    return false;
}

} // namespace

TEST_CASE("grayscale window") {
    CHECK(gray_level(40.0) == 0.5);
    CHECK(gray_level(40.0 - 425.0) == 0.0);
    CHECK(gray_level(40.0 + 425.0) == 1.0);
    CHECK(gray_level(-3000.0) == 0.0);
    CHECK(gray_level(3000.0) == 1.0);
    for (double hu = -1000.0; hu < 1000.0; hu += 0.5) CHECK(gray_level(hu) <= gray_level(hu + 0.5));
}

TEST_CASE("eligibility floor is 2 mm squared, inclusive") {
    // 0.5 mm pixels: 8 pixels are exactly 2.0 mm^2.
    const auto at8 = eligible_regions(scan_with_symdiff("a", 8), 0);
    REQUIRE(at8.size() == 1);
    CHECK(at8[0].symdiff_mm2 == 2.0);
    CHECK(at8[0].side == Side::left);
    CHECK(at8[0].slice == 1);
    CHECK(at8[0].fp_pixels == 8);
    CHECK(at8[0].fn_pixels == 0);
    CHECK(eligible_regions(scan_with_symdiff("a", 7), 0).empty());
    CHECK(eligible_regions(scan_with_symdiff("a", 0), 0).empty());
}

TEST_CASE("region window is centred on the union of both masks") {
    const auto r = eligible_regions(scan_with_symdiff("a", 8), 0).at(0);
    // Union: manual pixels (2..5, 4) and automated extras (0..7, 8).
    const double ci = (2 + 3 + 4 + 5 + 28) / 12.0, cj = (4 * 4 + 8 * 8) / 12.0;
    CHECK(r.center_mm[0] == doctest::Approx(ci * 0.5));
    CHECK(r.center_mm[1] == doctest::Approx(cj * 0.5));
    CHECK(r.window_size == std::array<std::int32_t, 2>{100, 100});
    CHECK(r.window_origin[0] == static_cast<std::int32_t>(std::lround(ci)) - 50);
}

TEST_CASE("identical masks offer nothing to sample") {
    std::vector<Scan> scans{scan_with_symdiff("a", 0), scan_with_symdiff("b", 0)};
    CHECK_THROWS_WITH_AS((void)sample_regions(scans, 1, 0), doctest::Contains("fewer than"), Error);
}

TEST_CASE("sampling respects the floor and the per-participant cap") {
    const auto scans = random_scans(36, 9);
    std::vector<Region> pool;
    for (std::size_t s = 0; s < scans.size(); ++s) {
        auto e = eligible_regions(scans[s], s);
        pool.insert(pool.end(), e.begin(), e.end());
    }
    std::set<std::string> eligible_participants;
    for (const auto& r : pool) eligible_participants.insert(r.participant_id);
    REQUIRE(eligible_participants.size() >= 8);
    std::set<std::string> seen_regions;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto draw = sample_from_pool(pool, 8, seed);
        REQUIRE(draw.size() == 8);
        std::set<std::string> participants;
        for (const auto& r : draw) {
            CHECK(symdiff_area(scans[r.scan], r) >= kMinSymdiffMm2);
            CHECK(scans[r.scan].participant_id == r.participant_id);
            participants.insert(r.participant_id);
            seen_regions.insert(std::to_string(r.scan) + "/" + std::to_string(r.slice) + to_string(r.side));
        }
        CHECK(participants.size() == 8);
        CHECK(draw.front().id == "r001");
        if (seed % 100 == 0) {
            const auto again = sample_from_pool(pool, 8, seed);
            for (std::size_t i = 0; i < 8; ++i) {
                CHECK(again[i].scan == draw[i].scan);
                CHECK(again[i].slice == draw[i].slice);
                CHECK(again[i].side == draw[i].side);
            }
        }
    }
    // The draw reaches a wide part of the pool.
    CHECK(seen_regions.size() > pool.size() / 2);
}

TEST_CASE("blinding assignments are balanced and seeded") {
    std::vector<Region> regions(10000);
    for (std::size_t i = 0; i < regions.size(); ++i) regions[i].id = "r" + std::to_string(i);
    const BlindingKey key = assign_blinding(regions, 77);
    std::size_t blue_auto = 0, blue_left = 0, both = 0;
    for (const auto& r : regions) {
        const KeyEntry& e = key.at(r.id);
        blue_auto += e.automated_is_blue;
        blue_left += e.blue_on_left;
        both += e.automated_is_blue && e.blue_on_left;
    }
    // Binomial(10000, 1/2) has SD 50; 4 SD bounds.
    CHECK(blue_auto > 4800);
    CHECK(blue_auto < 5200);
    CHECK(blue_left > 4800);
    CHECK(blue_left < 5200);
    CHECK(both > 2500 - 175);
    CHECK(both < 2500 + 175);
    const BlindingKey same = assign_blinding(regions, 77);
    CHECK(same.entries.at("r123").automated_is_blue == key.entries.at("r123").automated_is_blue);
    CHECK_THROWS_AS((void)key.at("missing"), Error);
}

TEST_CASE("unblinding then re-blinding is the identity") {
    for (bool auto_blue : {false, true})
        for (BlindGrade g : {BlindGrade::blue_substantially_better, BlindGrade::blue_slightly_better, BlindGrade::equal,
                             BlindGrade::red_slightly_better, BlindGrade::red_substantially_better}) {
            const KeyEntry key{auto_blue, false};
            const int s = unblinded_score(g, key);
            const int reblinded = auto_blue ? s : -s;
            CHECK(reblinded == blue_score(g));
            CHECK(parse_blind_grade(to_string(g)) == g);
        }
    CHECK(blue_score(BlindGrade::blue_substantially_better) == 2);
    CHECK(blue_score(BlindGrade::red_substantially_better) == -2);
}

TEST_CASE("summary counts are invariant to colour swaps") {
    std::vector<Region> regions(40);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        regions[i].id = "r" + std::to_string(i);
        regions[i].fp_pixels = i % 3 == 0 ? 0 : 5;
        regions[i].fn_pixels = i % 3 == 1 ? 0 : 5;
    }
    const BlindingKey key = assign_blinding(regions, 5);
    BlindingKey swapped = key;
    for (auto& [id, e] : swapped.entries) e.automated_is_blue = !e.automated_is_blue;
    // The reader prefers one provenance with a fixed pattern of strengths.
    std::map<std::string, GradeRecord> grades, grades_swapped;
    const std::array<int, 5> pattern{2, 1, 0, -1, 1};
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const int score = pattern[i % 5];
        auto blind = [&](const KeyEntry& e) {
            const int blue = e.automated_is_blue ? score : -score;
            return static_cast<BlindGrade>(2 - blue);
        };
        grades[regions[i].id] = {regions[i].id, blind(key.at(regions[i].id)), true, i % 7 != 0, ""};
        grades_swapped[regions[i].id] = {regions[i].id, blind(swapped.at(regions[i].id)), true, i % 7 != 0, ""};
    }
    const SessionSummary a = summarize(regions, grades, key), b = summarize(regions, grades_swapped, swapped);
    CHECK(a.all.counts == std::array<std::size_t, 5>{8, 16, 8, 8, 0});
    CHECK(a.all.counts == b.all.counts);
    CHECK(a.false_positive.counts == b.false_positive.counts);
    CHECK(a.false_negative.counts == b.false_negative.counts);
    CHECK(a.both_inaccurate == 6);
    REQUIRE(a.all.wilcoxon.has_value());
    CHECK(a.all.wilcoxon->p == b.all.wilcoxon->p);
}

TEST_CASE("all-equal grades surface the Wilcoxon error") {
    std::vector<Region> regions(3);
    std::map<std::string, GradeRecord> grades;
    for (std::size_t i = 0; i < 3; ++i) {
        regions[i].id = "r" + std::to_string(i);
        grades[regions[i].id] = {regions[i].id, BlindGrade::equal, true, true, ""};
    }
    const SessionSummary s = summarize(regions, grades, assign_blinding(regions, 1));
    CHECK_FALSE(s.all.wilcoxon.has_value());
    CHECK(s.all.wilcoxon_error == "no non-zero grades");
    CHECK(summary_json(s).find("no non-zero grades") != std::string::npos);
}

TEST_CASE("frame rendering") {
    const Scan scan = scan_with_symdiff("a", 8);
    const Region r = eligible_regions(scan, 0).at(0);
    const Crop crop = extract_crop(scan, r);
    CHECK(crop.image.grid().dims == std::array<std::int32_t, 3>{100, 100, 21});
    // Outside the scan is air.
    CHECK(crop.image(0, 0, 0) == HuTraits::fill);
    for (bool auto_blue : {false, true}) {
        const KeyEntry key{auto_blue, true};
        const RgbImage plain = render_frame(crop, 0, Variant::plain, key);
        CHECK(plain.width == 400);
        CHECK(plain.height == 400);
        CHECK(plain.pixels.size() == 400u * 400u * 3u);
        // The left panel shows blue only; its colour appears and red does not.
        const RgbImage left = render_frame(crop, 0, Variant::left, key);
        bool blue = false, red = false;
        for (std::size_t p = 0; p + 2 < left.pixels.size(); p += 3) {
            blue = blue || (left.pixels[p] == 40 && left.pixels[p + 1] == 120 && left.pixels[p + 2] == 255);
            red = red || (left.pixels[p] == 255 && left.pixels[p + 1] == 40 && left.pixels[p + 2] == 40);
        }
        CHECK(blue);
        CHECK_FALSE(red);
        const std::string png = encode_png(left);
        CHECK(png.substr(1, 3) == "PNG");
        CHECK(encode_png(left) == png);
    }
    CHECK_THROWS_AS((void)render_frame(crop, 11, Variant::plain, {}), Error);
}

TEST_CASE("session lifecycle and blinded service") {
    testutil::TempDir dir("session");
    const auto scans = phantom_scans(6);
    const auto session_dir = dir / "s";
    {
        Session s = Session::create(session_dir, scans, 4, 21);
        CHECK(s.regions().size() == 4);
        CHECK(s.has_key());
        CHECK_THROWS_AS((void)Session::create(session_dir, scans, 4, 21), Error);
    }
    Session s = Session::open(session_dir);
    Service svc(s);
    std::vector<std::string> bodies;
    auto get = [&](const std::string& path, const std::map<std::string, std::string>& q = {}) {
        HttpResponse r = svc.handle("GET", path, q, "", true);
        bodies.push_back(r.body);
        return r;
    };
    auto post = [&](const std::string& path, const json& body) {
        HttpResponse r = svc.handle("POST", path, {}, body.dump(), true);
        bodies.push_back(r.body);
        return r;
    };

    const json meta = json::parse(get("/session").body);
    CHECK(meta["regions"] == 4);
    CHECK(meta["graded"] == 0);
    CHECK(meta["window_level"] == 40.0);
    std::vector<std::string> ids;
    const json listing = json::parse(get("/regions").body);
    for (const auto& r : listing["regions"]) ids.push_back(r["id"]);
    REQUIRE(ids.size() == 4);
    for (const auto& id : ids) {
        const HttpResponse fr = get("/regions/" + id + "/frames");
        REQUIRE(fr.status == 200);
        const json manifest = json::parse(fr.body);
        CHECK(manifest["frames"].size() == 21);
        const std::string left = manifest["panels"]["left"], right = manifest["panels"]["right"];
        CHECK(left != right);
        for (const auto& f : manifest["frames"]) {
            if (f["offset"] != 0 && f["offset"] != 10) continue;
            for (const char* v : {"plain", "overlay", "left", "right"}) {
                const HttpResponse png = get(f[v].get<std::string>());
                CHECK(png.status == 200);
                CHECK(png.content_type == "image/png");
            }
        }
    }
    // Error paths are blinded too.
    CHECK(get("/regions/r999/frames").status == 404);
    CHECK(get("/regions/" + ids[0] + "/frames/11/plain.png").status == 400);
    CHECK(get("/regions/" + ids[0] + "/frames/0/sepia.png").status == 400);
    CHECK(get("/nowhere").status == 404);

    CHECK(json::parse(get("/regions/next").body)["region_id"] == ids[0]);
    const HttpResponse ack = post("/regions/" + ids[0] + "/grade", {{"grade", "blue_slightly_better"}, {"gradable", true}});
    CHECK(ack.status == 200);
    CHECK(json::parse(ack.body)["replaced"] == false);
    const HttpResponse dup = post("/regions/" + ids[0] + "/grade", {{"grade", "equal"}});
    CHECK(dup.status == 409);
    CHECK(dup.body.find("already graded") != std::string::npos);
    CHECK(json::parse(post("/regions/" + ids[0] + "/grade", {{"grade", "equal"}, {"overwrite", true}}).body)["replaced"] ==
          true);
    CHECK(post("/regions/" + ids[1] + "/grade", {{"gradable", true}}).status == 400);
    CHECK(post("/regions/" + ids[1] + "/grade", {{"grade", "purple"}}).status == 400);
    CHECK(svc.handle("POST", "/regions/" + ids[1] + "/grade", {}, "{oops", true).status == 400);
    const HttpResponse ungradable = post("/regions/" + ids[1] + "/grade", {{"grade", nullptr}, {"gradable", false}});
    CHECK(ungradable.status == 200);
    CHECK(post("/regions/r999/grade", {{"grade", "equal"}}).status == 404);
    CHECK(json::parse(get("/regions/next").body)["region_id"] == ids[2]);

    const json blinded = json::parse(get("/summary").body);
    CHECK(blinded["counts"]["equal"] == 1);
    CHECK(blinded["ungradable"] == 1);

    for (const auto& b : bodies) CHECK_FALSE(leaks(b));

    // Unblinding is local-only and needs the key.
    CHECK(svc.handle("GET", "/summary", {{"unblind", "true"}}, "", false).status == 403);
    const HttpResponse unblinded = svc.handle("GET", "/summary", {{"unblind", "true"}}, "", true);
    CHECK(unblinded.status == 200);
    const json summary = json::parse(unblinded.body);
    CHECK(summary["graded"] == 2);
    CHECK(summary["ungradable"] == 1);
    CHECK(summary["partial"] == true);

    // The log replays: the overwrite is kept, the graded set survives reopening.
    {
        Session again = Session::open(session_dir);
        CHECK(again.graded_count() == 2);
        CHECK(again.grades().at(ids[0]).grade == BlindGrade::equal);
        CHECK_FALSE(again.grades().at(ids[1]).gradable);
    }
    std::filesystem::remove(session_dir / "key.json");
    Session keyless = Session::open(session_dir);
    Service svc2(keyless);
    CHECK(svc2.handle("GET", "/summary", {{"unblind", "true"}}, "", true).status == 409);
}

TEST_CASE("HTTP server round trip") {
    testutil::TempDir dir("http");
    const auto scans = phantom_scans(3);
    Session s = Session::create(dir / "s", scans, 2, 3);
    HttpServer server(s);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread t([&] { server.listen(); });
    httplib::Client client("127.0.0.1", port);
    client.set_connection_timeout(5);
    for (int attempt = 0; attempt < 100; ++attempt) {
        if (auto r = client.Get("/session")) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    const auto meta = client.Get("/session");
    REQUIRE(meta);
    CHECK(meta->status == 200);
    CHECK(meta->get_header_value("Cache-Control") == "no-store");
    const std::string id = json::parse(client.Get("/regions/next")->body)["region_id"];
    const auto manifest = json::parse(client.Get(("/regions/" + id + "/frames").c_str())->body);
    const auto png = client.Get(manifest["frames"][10]["overlay"].get<std::string>().c_str());
    REQUIRE(png);
    CHECK(png->status == 200);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    const auto ack = client.Post(("/regions/" + id + "/grade").c_str(), R"({"grade": "red_slightly_better"})",
                                 "application/json");
    REQUIRE(ack);
    CHECK(ack->status == 200);
    const auto dup = client.Post(("/regions/" + id + "/grade").c_str(), R"({"grade": "equal"})", "application/json");
    CHECK(dup->status == 409);
    const auto summary = client.Get("/summary?unblind=true");
    REQUIRE(summary);
    CHECK(summary->status == 200);
    CHECK(json::parse(summary->body)["graded"] == 1);
    server.stop();
    t.join();
}
