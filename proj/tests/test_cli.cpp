// Drives the installed command-line tool as a subprocess.

#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <sys/wait.h>
#include <unistd.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int exit_code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Workdir {
public:
    explicit Workdir(const std::string& tag)
        : path_(fs::temp_directory_path() / ("calcquant-cli-" + tag + "-" + std::to_string(::getpid()))) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~Workdir() { fs::remove_all(path_); }
    Workdir(const Workdir&) = delete;
    Workdir& operator=(const Workdir&) = delete;

    [[nodiscard]] fs::path operator/(const std::string& s) const { return path_ / s; }

    /// Runs the tool inside the directory with a clean manifest environment.
    Run run(const std::string& args) const {
        const fs::path err = path_ / ".stderr";
        const std::string cmd = "cd '" + path_.string() + "' && env -u CALCQUANT_MANIFEST '" CALCQUANT_CLI "' " + args +
                                " 2>'" + err.string() + "'";
        Run r;
        FILE* pipe = ::popen(cmd.c_str(), "r");
        REQUIRE(pipe != nullptr);
        std::array<char, 4096> buf{};
        std::size_t n = 0;
        while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
        const int status = ::pclose(pipe);
        r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.err = slurp(err);
        return r;
    }

private:
    fs::path path_;
};

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

} // namespace

TEST_CASE("phantom then fuse reproduces the automated volume") {
    Workdir w("fuse");
    const Run ph = w.run("phantom --seed 7 --out ph");
    REQUIRE(ph.exit_code == 0);
    const json pj = json::parse(ph.out);
    std::string members;
    for (const auto& m : pj["files"]["members"]) members += " ph/" + m.get<std::string>();
    const Run fu = w.run("fuse --members" + members + " --image ph/image.vgf --out seg.vgf");
    REQUIRE(fu.exit_code == 0);
    CHECK(json::parse(fu.out)["volume_mm3"] == pj["automated_mm3"]);
    CHECK(fs::exists(w / "seg.vgf"));
}

TEST_CASE("reruns are byte-identical") {
    Workdir w("rerun");
    REQUIRE(w.run("phantom --seed 3 --members 2 --noise 4 --out a").exit_code == 0);
    REQUIRE(w.run("phantom --seed 3 --members 2 --noise 4 --out b").exit_code == 0);
    for (const char* f : {"image.vgf", "truth.vgf", "manual.vgf", "automated.vgf", "member_0.vgf", "member_1.vgf"})
        CHECK_MESSAGE(slurp(w / "a" / f) == slurp(w / "b" / f), f);
    const Run d1 = w.run("demo-losses --loss soft_dice --steps 30 --trace t1.csv");
    const Run d2 = w.run("demo-losses --loss soft_dice --steps 30 --trace t2.csv");
    REQUIRE(d1.exit_code == 0);
    CHECK(d1.out == d2.out);
    CHECK(slurp(w / "t1.csv") == slurp(w / "t2.csv"));
}

TEST_CASE("all-air scan is rejected") {
    Workdir w("air");
    {
        std::ofstream out(w / "air.vgf", std::ios::binary);
        out << "VGF1\ndims=4 4 2\nspacing=0.5 0.5 0.5\norigin=0 0 0\ndtype=i16\nend\n";
        const std::int16_t air = -1000;
        for (int i = 0; i < 32; ++i) out.write(reinterpret_cast<const char*>(&air), 2);
    }
    REQUIRE(w.run("phantom --seed 1 --members 1 --out ref").exit_code == 0);
    write_text(w / "ref.json", R"({"reference": "ref/image.vgf", "crop_z_mm": [0, 19.5]})");
    const Run r = w.run("--manifest m.json preprocess --config ref.json --image air.vgf");
    CHECK(r.exit_code != 0);
    const json e = json::parse(r.err);
    CHECK(e["error"] == "domain");
    CHECK(e["message"] == "no positive-HU voxels");
}

TEST_CASE("grade statistics from a grade file") {
    Workdir w("grades");
    // Reader-study counts for grades +2, +1, 0, -1, -2.
    const std::array<int, 5> counts{14, 117, 69, 86, 8};
    const std::array<int, 5> grade{2, 1, 0, -1, -2};
    std::string csv = "region_id,grade\n";
    int id = 0;
    for (int c = 0; c < 5; ++c)
        for (int k = 0; k < counts[c]; ++k) csv += "r" + std::to_string(id++) + "," + std::to_string(grade[c]) + "\n";
    write_text(w / "grades.csv", csv);
    const Run r = w.run("eval --grades grades.csv");
    REQUIRE(r.exit_code == 0);
    const json j = json::parse(r.out)["wilcoxon"];
    CHECK(std::abs(j["p"].get<double>() - 0.012) <= 0.005);
    CHECK(j["grades"] == 294);
    const Run c = w.run("eval --counts 14 117 69 86 8");
    REQUIRE(c.exit_code == 0);
    CHECK(json::parse(c.out)["wilcoxon_counts"]["p"] == j["p"]);
}

TEST_CASE("usage errors exit with status 2") {
    Workdir w("usage");
    const Run none = w.run("");
    CHECK(none.exit_code == 2);
    const Run bad = w.run("fuse --threshold notanumber");
    CHECK(bad.exit_code == 2);
    CHECK(json::parse(bad.err)["error"] == "usage");
    const Run conn = w.run("lesions extract --connectivity 18");
    CHECK(conn.exit_code == 2);
    const Run missing = w.run("fuse --members nothere.vgf --image x.vgf --out y.vgf");
    CHECK(missing.exit_code == 1);
    CHECK(json::parse(missing.err)["error"] == "not_found");
}

TEST_CASE("manifest holds one volume per scan after preprocess and fuse") {
    Workdir w("manifest");
    REQUIRE(w.run("--manifest m.json phantom --seed 5 --members 2 --out p5").exit_code == 0);
    REQUIRE(w.run("--manifest m.json phantom --seed 6 --members 2 --out p6").exit_code == 0);
    write_text(w / "ref.json", R"({"reference": "p5/image.vgf", "crop_z_mm": [0, 19.5],
                                   "canonical": {"dims": [96, 96, 40]}})");
    write_text(w / "scans.csv", "scan_id,image,members\n"
                                "phantom-5,p5/image.vgf,p5/member_0.vgf;p5/member_1.vgf\n"
                                "phantom-6,p6/image.vgf,p6/member_0.vgf;p6/member_1.vgf\n");
    const Run pre = w.run("--manifest m.json preprocess --config ref.json --scans scans.csv --jobs 2");
    REQUIRE_MESSAGE(pre.exit_code == 0, pre.err);
    CHECK(json::parse(pre.out)["failed"] == 0);
    // Fusing twice must not duplicate records.
    REQUIRE(w.run("--manifest m.json fuse").exit_code == 0);
    const Run fu = w.run("--manifest m.json fuse --jobs 2");
    REQUIRE_MESSAGE(fu.exit_code == 0, fu.err);
    const json m = json::parse(slurp(w / "m.json"));
    REQUIRE(m["scans"].size() == 2);
    for (const auto& s : m["scans"]) {
        CHECK(s["volume_mm3"].is_number());
        CHECK(s["registration"]["written"] == true);
        CHECK(fs::exists(w / s["segmentation"].get<std::string>()));
    }
    CHECK(m["scans"][0]["scan_id"] != m["scans"][1]["scan_id"]);
}

TEST_CASE("lesion, survival and sampling commands") {
    Workdir w("downstream");
    std::string listing = "participant_id,image,manual,automated\n";
    for (int s = 0; s < 3; ++s) {
        const std::string d = "s" + std::to_string(s);
        REQUIRE(w.run("phantom --seed " + std::to_string(30 + s) + " --members 1 --out " + d).exit_code == 0);
        listing += "p" + std::to_string(s) + "," + d + "/image.vgf," + d + "/manual.vgf," + d + "/automated.vgf\n";
    }
    write_text(w / "scans.csv", listing);
    const Run ex = w.run("lesions extract --scans scans.csv --out lesions.csv --jobs 2");
    REQUIRE_MESSAGE(ex.exit_code == 0, ex.err);
    const Run hi = w.run("lesions histogram --table lesions.csv --source manual --percentiles 0 50");
    REQUIRE(hi.exit_code == 0);
    const json hj = json::parse(hi.out);
    double total = 0.0;
    for (const auto& row : hj["percent"])
        for (const auto& v : row) total += v.get<double>();
    CHECK(total == doctest::Approx(100.0).epsilon(1e-9));

    std::string cohort = "id,time_days,event,age,sex,scanner64,obesity,hypertension,diabetes,hypercholesterolemia,"
                         "low_hdl,smoker,v\n";
    for (int i = 0; i < 40; ++i)
        cohort += "c" + std::to_string(i) + "," + std::to_string(100 + (i * 97) % 1000) + "," + (i % 3 ? "1" : "0") +
                  ",70,0,0,0,0,0,0,0,0," + std::to_string((i * 31) % 7) + "\n";
    write_text(w / "cohort.csv", cohort);
    const Run fit = w.run("cox fit --cohort cohort.csv --exposure v --no-adjust --ties breslow");
    REQUIRE_MESSAGE(fit.exit_code == 0, fit.err);
    CHECK(json::parse(fit.out)["hr"].get<double>() > 0.0);

    const Run sa = w.run("sample --scans scans.csv --session sess -n 2 --seed 9");
    REQUIRE_MESSAGE(sa.exit_code == 0, sa.err);
    CHECK(json::parse(sa.out)["regions"] == 2);
    CHECK(fs::exists(w / "sess"));
}
