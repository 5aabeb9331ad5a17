// Exercises the shared library through its C header only.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <unistd.h>

#include "calcquant/calcquant.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Str {
    char* p = nullptr;
    ~Str() { cq_free(p); }
    [[nodiscard]] json parse() const { return json::parse(p); }
};

fs::path temp_dir(const std::string& tag) {
    const fs::path d = fs::temp_directory_path() / ("calcquant-capi-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

} // namespace

TEST_CASE("status names and errors") {
    CHECK(std::string(cq_version()).size() > 0);
    CHECK(std::string(cq_status_name(CQ_OK)) == "ok");
    CHECK(std::string(cq_status_name(CQ_ERR_NOT_FOUND)) == "not_found");
    cq_grid* g = nullptr;
    CHECK(cq_grid_read("/nonexistent/file.vgf", &g) == CQ_ERR_IO);
    CHECK(g == nullptr);
    CHECK(std::string(cq_last_error()).find("nonexistent") != std::string::npos);
    CHECK(cq_grid_read(nullptr, &g) == CQ_ERR_INVALID_ARGUMENT);
    Str r;
    CHECK(cq_losses_demo("{not json", nullptr, &r.p) == CQ_ERR_FORMAT);
    CHECK(cq_losses_demo(R"({"loss": "hinge"})", nullptr, &r.p) == CQ_ERR_INVALID_ARGUMENT);
    cq_free(nullptr);
}

TEST_CASE("phantom, fuse and grid handles") {
    const fs::path d = temp_dir("phantom");
    Str rep;
    REQUIRE(cq_phantom_write(R"({"seed": 7, "members": 3})", d.c_str(), &rep.p) == CQ_OK);
    const json ph = rep.parse();
    CHECK(ph["files"]["members"].size() == 3);

    cq_grid* g = nullptr;
    REQUIRE(cq_grid_read((d / "truth.vgf").c_str(), &g) == CQ_OK);
    Str desc;
    REQUIRE(cq_grid_describe(g, &desc.p) == CQ_OK);
    const json dj = desc.parse();
    CHECK(dj["kind"] == "mask");
    CHECK(dj["volume_mm3"] == ph["truth_mm3"]);
    CHECK(cq_grid_write(g, (d / "copy.vgf").c_str()) == CQ_OK);
    cq_grid_free(g);

    std::vector<std::string> members;
    for (const auto& m : ph["files"]["members"]) members.push_back((d / m.get<std::string>()).string());
    std::vector<const char*> ptrs;
    for (const auto& m : members) ptrs.push_back(m.c_str());
    Str fr;
    REQUIRE(cq_fuse(ptrs.data(), ptrs.size(), (d / "image.vgf").c_str(), nullptr, (d / "seg.vgf").c_str(), &fr.p) ==
            CQ_OK);
    const json fj = fr.parse();
    CHECK(fj["volume_mm3"] == ph["automated_mm3"]);
    CHECK(fj["voxels"] == ph["automated_voxels"]);
    fs::remove_all(d);
}

TEST_CASE("preprocess") {
    const fs::path d = temp_dir("pre");
    Str rep;
    REQUIRE(cq_phantom_write(R"({"seed": 3, "members": 1, "noise_hu": 5})", d.c_str(), &rep.p) == CQ_OK);
    write_text(d / "ref.json", R"({"reference": "image.vgf", "crop_z_mm": [0, 19.5],
                                   "canonical": {"dims": [48, 48, 20], "spacing": [1, 1, 1]},
                                   "registration": {"iterations_per_level": 48}})");
    Str pr;
    const std::string opts = R"({"smooth_sigma": 0.6, "smoothed_out": ")" + (d / "sm.vgf").string() + R"("})";
    REQUIRE(cq_preprocess((d / "image.vgf").c_str(), (d / "ref.json").c_str(), opts.c_str(), (d / "pre.vgf").c_str(),
                          &pr.p) == CQ_OK);
    const json pj = pr.parse();
    CHECK(pj["written"] == true);
    CHECK(pj["failed"] == false);
    CHECK(fs::exists(d / "pre.vgf"));
    CHECK(fs::exists(d / "sm.vgf"));

    // An all-air scan is rejected before registration.
    {
        std::ofstream out(d / "air.vgf", std::ios::binary);
        out << "VGF1\ndims=4 4 2\nspacing=0.5 0.5 0.5\norigin=0 0 0\ndtype=i16\nend\n";
        const std::int16_t air = -1000;
        for (int i = 0; i < 32; ++i) out.write(reinterpret_cast<const char*>(&air), 2);
    }
    Str ar;
    CHECK(cq_preprocess((d / "air.vgf").c_str(), (d / "ref.json").c_str(), nullptr, (d / "x.vgf").c_str(), &ar.p) ==
          CQ_ERR_DOMAIN);
    CHECK(std::string(cq_last_error()) == "no positive-HU voxels");
    CHECK_FALSE(fs::exists(d / "x.vgf"));

    // A threshold below any achievable MAE marks the registration failed and writes nothing.
    Str fr;
    REQUIRE(cq_preprocess((d / "image.vgf").c_str(), (d / "ref.json").c_str(), R"({"failure_threshold_hu": -1})",
                          (d / "fail.vgf").c_str(), &fr.p) == CQ_OK);
    CHECK(fr.parse()["failed"] == true);
    CHECK(fr.parse()["written"] == false);
    CHECK_FALSE(fs::exists(d / "fail.vgf"));
    fs::remove_all(d);
}

TEST_CASE("statistics entry points") {
    const size_t counts[5] = {14, 117, 69, 86, 8};
    Str w;
    REQUIRE(cq_eval_wilcoxon_counts(counts, &w.p) == CQ_OK);
    CHECK(std::abs(w.parse()["p"].get<double>() - 0.012) <= 0.005);
    Str w2;
    REQUIRE(cq_eval_wilcoxon("region_id,grade\nr1,1\nr2,2\nr3,-1\nr4,1\n", &w2.p) == CQ_OK);
    CHECK(w2.parse()["n"] == 4);
    Str w3;
    CHECK(cq_eval_wilcoxon("region_id,grade\nr1,0\n", &w3.p) == CQ_ERR_DOMAIN);
    CHECK(std::string(cq_last_error()) == "no non-zero grades");

    std::string pairs = "id,manual_mm3,auto_mm3\n";
    for (int i = 0; i < 30; ++i) pairs += "p" + std::to_string(i) + "," + std::to_string(i * 1.5) + "," + std::to_string(i * 1.5 + (i % 3) * 0.25) + "\n";
    Str a, b;
    REQUIRE(cq_eval_agreement(pairs.c_str(), R"({"replications": 200, "seed": 4})", &a.p) == CQ_OK);
    REQUIRE(cq_eval_agreement(pairs.c_str(), R"({"replications": 200, "seed": 4, "jobs": 3})", &b.p) == CQ_OK);
    CHECK(std::string(a.p) == std::string(b.p));
    CHECK(a.parse()["icc21"]["estimate"].get<double>() > 0.99);

    Str tr, lr;
    REQUIRE(cq_losses_demo(R"({"loss": "focal", "steps": 20})", &tr.p, &lr.p) == CQ_OK);
    CHECK(lr.parse()["final_loss"].get<double>() < lr.parse()["initial_loss"].get<double>());
    CHECK(std::string(tr.p).rfind("step,loss,objective\n", 0) == 0);
}

TEST_CASE("lesions and survival") {
    const fs::path d = temp_dir("lesions");
    Str rep;
    REQUIRE(cq_phantom_write(R"({"seed": 11, "members": 1})", d.c_str(), &rep.p) == CQ_OK);
    Str table;
    REQUIRE(cq_lesions_extract("p1", (d / "image.vgf").c_str(), (d / "manual.vgf").c_str(),
                               (d / "automated.vgf").c_str(), 26, &table.p) == CQ_OK);
    CHECK(std::string(table.p).rfind("participant_id,source,lesion_id", 0) == 0);
    Str hist;
    REQUIRE(cq_lesions_histogram(table.p, R"({"source": "manual", "percentiles": [0, 50]})", &hist.p) == CQ_OK);
    CHECK(hist.parse()["percent"].size() == 2);
    Str bad;
    CHECK(cq_lesions_extract("p1", (d / "image.vgf").c_str(), (d / "manual.vgf").c_str(), (d / "automated.vgf").c_str(),
                             18, &bad.p) == CQ_ERR_INVALID_ARGUMENT);

    // A small cohort with one exposure column.
    std::string cohort = "id,time_days,event,age,sex,scanner64,obesity,hypertension,diabetes,hypercholesterolemia,"
                         "low_hdl,smoker,icac_mm3\n";
    for (int i = 0; i < 60; ++i) {
        const double vol = (i * 37 % 11) * 2.5;
        const double t = 3000.0 / (1.0 + vol / 10.0) + (i * 53 % 17) * 20.0;
        cohort += "s" + std::to_string(i) + "," + std::to_string(t) + "," + (i % 4 ? "1" : "0") + "," +
                  std::to_string(60 + i % 25) + "," + std::to_string(i % 2) + "," + std::to_string(i / 3 % 2) +
                  ",0,1,0,1,0," + std::to_string(i / 5 % 2) + "," + std::to_string(vol) + "\n";
    }
    write_text(d / "cohort.csv", cohort);
    Str fit;
    REQUIRE(cq_cox_fit((d / "cohort.csv").c_str(), R"({"exposure": "icac_mm3", "adjust": false})", &fit.p) == CQ_OK);
    CHECK(fit.parse()["hr"].get<double>() > 1.0);
    Str adj;
    // Constant covariate columns make the adjusted design rank deficient.
    CHECK(cq_cox_fit((d / "cohort.csv").c_str(), R"({"exposure": "icac_mm3"})", &adj.p) == CQ_ERR_DOMAIN);
    CHECK(std::string(cq_last_error()).find("rank deficiency") != std::string::npos);
    Str missing;
    CHECK(cq_cox_fit((d / "cohort.csv").c_str(), R"({"exposure": "nope"})", &missing.p) == CQ_ERR_NOT_FOUND);
    fs::remove_all(d);
}

TEST_CASE("reader-study session through requests") {
    const fs::path d = temp_dir("session");
    std::string listing = "participant_id,image,manual,automated\n";
    for (int s = 0; s < 3; ++s) {
        const fs::path p = d / ("p" + std::to_string(s));
        Str rep;
        REQUIRE(cq_phantom_write((R"({"seed": )" + std::to_string(20 + s) + R"(, "members": 1})").c_str(), p.c_str(),
                                 &rep.p) == CQ_OK);
        const std::string rel = "p" + std::to_string(s);
        listing += "part" + std::to_string(s) + "," + rel + "/image.vgf," + rel + "/manual.vgf," + rel + "/automated.vgf\n";
    }
    write_text(d / "scans.csv", listing);
    Str created;
    REQUIRE(cq_session_create((d / "session").c_str(), (d / "scans.csv").c_str(), 2, 5, &created.p) == CQ_OK);
    CHECK(created.parse()["regions"] == 2);

    cq_session* s = nullptr;
    REQUIRE(cq_session_open((d / "session").c_str(), &s) == CQ_OK);
    int status = 0;
    Str type, body;
    size_t len = 0;
    REQUIRE(cq_session_request(s, "GET", "/regions/next", nullptr, nullptr, 1, &status, &type.p, &body.p, &len) == CQ_OK);
    CHECK(status == 200);
    CHECK(std::string(type.p) == "application/json");
    const std::string id = body.parse()["region_id"];
    Str t2, b2;
    REQUIRE(cq_session_request(s, "POST", ("/regions/" + id + "/grade").c_str(), nullptr, R"({"grade": "equal"})", 1,
                               &status, &t2.p, &b2.p, &len) == CQ_OK);
    CHECK(status == 200);
    Str t3, b3;
    REQUIRE(cq_session_request(s, "GET", ("/regions/" + id + "/frames/0/overlay.png").c_str(), nullptr, nullptr, 1,
                               &status, &t3.p, &b3.p, &len) == CQ_OK);
    CHECK(status == 200);
    CHECK(len > 8);
    CHECK(std::memcmp(b3.p + 1, "PNG", 3) == 0);
    Str t4, b4;
    REQUIRE(cq_session_request(s, "GET", "/summary", "unblind=true", nullptr, 0, &status, &t4.p, &b4.p, &len) == CQ_OK);
    CHECK(status == 403);
    Str sum;
    REQUIRE(cq_session_summary(s, &sum.p) == CQ_OK);
    CHECK(sum.parse()["all"]["counts"]["equal"] == 1);
    cq_session_free(s);
    fs::remove_all(d);
}
