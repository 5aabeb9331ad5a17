// Command-line front end. Links only the C API.

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "calcquant/calcquant.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliError : std::runtime_error {
    CliError(std::string code, const std::string& message) : std::runtime_error(message), code(std::move(code)) {}
    std::string code;
};

void check(cq_status s) {
    if (s != CQ_OK) throw CliError(cq_status_name(s), cq_last_error());
}

/// Owns a string handed out by the library.
struct Owned {
    char* p = nullptr;
    ~Owned() { cq_free(p); }
    [[nodiscard]] std::string str() const { return p ? std::string(p) : std::string(); }
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CliError("io", "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CliError("io", "cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw CliError("io", "cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

/// Reports are pretty-printed JSON, to a file or stdout.
void emit(const std::string& report, const std::string& out) {
    const std::string text = json::parse(report).dump(2) + "\n";
    if (out.empty())
        std::cout << text << std::flush;
    else
        write_atomic(out, text);
}

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw CliError("not_found", "missing file: " + path);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

/// Minimal reader for the listing CSVs the CLI consumes (no quoting needed
/// for paths; fields are trimmed of a trailing carriage return).
struct Listing {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] std::size_t column(const std::string& name, bool required = true) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (!required) return header.size();
            throw CliError("format", "listing has no column '" + name + "'");
        }
        return static_cast<std::size_t>(it - header.begin());
    }
};

Listing read_listing(const fs::path& path) {
    Listing t;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string f;
        std::istringstream ls(line);
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (line.back() == ',') fields.emplace_back();
        if (t.header.empty()) {
            t.header = std::move(fields);
        } else {
            if (fields.size() != t.header.size())
                throw CliError("format", path.string() + ": row has " + std::to_string(fields.size()) +
                                             " fields, header has " + std::to_string(t.header.size()));
            t.rows.push_back(std::move(fields));
        }
    }
    if (t.header.empty()) throw CliError("format", path.string() + ": empty listing");
    return t;
}

std::string relative_to(const fs::path& listing, const std::string& p) {
    const fs::path path(p);
    if (path.is_absolute() || listing.parent_path().empty()) return p;
    return (listing.parent_path() / path).string();
}

/// Runs body(i) for i in [0, n) on up to `jobs` threads; the first failure is
/// rethrown after all workers finish.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& body) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 256));
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// Project manifest: one JSON file, rewritten through a temporary file.
class Manifest {
public:
    explicit Manifest(fs::path path) : path_(std::move(path)) {
        if (fs::exists(path_)) {
            try {
                data_ = json::parse(read_text(path_));
            } catch (const json::exception& e) {
                throw CliError("format", path_.string() + ": " + e.what());
            }
            if (!data_.is_object() || !data_.contains("scans") || !data_["scans"].is_array())
                throw CliError("format", path_.string() + ": manifest needs a scans array");
        } else {
            data_ = {{"version", 1},
                     {"config",
                      {{"reference", nullptr},
                       {"threshold", 0.5},
                       {"hu_threshold", 130.0},
                       {"failure_threshold_hu", 300.0},
                       {"smooth_sigma", nullptr},
                       {"seed", 0}}},
                     {"scans", json::array()}};
        }
    }

    json& config() { return data_["config"]; }

    /// Entry for scan_id, created (in insertion order) when absent.
    json& scan(const std::string& id) {
        for (auto& s : data_["scans"])
            if (s.at("scan_id") == id) return s;
        data_["scans"].push_back({{"scan_id", id}});
        return data_["scans"].back();
    }

    json& scans() { return data_["scans"]; }

    void update(const std::function<void(Manifest&)>& f) {
        std::lock_guard lock(mutex_);
        f(*this);
        save();
    }

    void save() { write_atomic(path_, data_.dump(2) + "\n"); }

private:
    fs::path path_;
    json data_;
    std::mutex mutex_;
};

std::string manifest_path(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("CALCQUANT_MANIFEST"); env && *env) return env;
    return {};
}

std::string need_manifest(const std::string& flag) {
    const auto p = manifest_path(flag);
    if (p.empty()) throw CliError("invalid_argument", "no manifest: pass --manifest or set CALCQUANT_MANIFEST");
    return p;
}

struct PhantomArgs {
    std::uint64_t seed = 7;
    std::string out;
    std::vector<int> dims;
    std::vector<double> spacing;
    int calcifications = 8;
    int members = 4;
    double noise = 0.0;
    std::string manifest;
};

void run_phantom(const PhantomArgs& a) {
    json o{{"seed", a.seed}, {"calcifications", a.calcifications}, {"members", a.members}, {"noise_hu", a.noise}};
    if (!a.dims.empty()) o["dims"] = a.dims;
    if (!a.spacing.empty()) o["spacing"] = a.spacing;
    Owned report;
    check(cq_phantom_write(o.dump().c_str(), a.out.c_str(), &report.p));
    const json r = json::parse(report.str());
    if (const auto mp = manifest_path(a.manifest); !mp.empty()) {
        Manifest m(mp);
        const fs::path dir(a.out);
        json members = json::array();
        for (const auto& f : r["files"]["members"]) members.push_back((dir / f.get<std::string>()).string());
        json& s = m.scan("phantom-" + std::to_string(a.seed));
        s["raw"] = (dir / "image.vgf").string();
        s["preprocessed"] = (dir / "image.vgf").string();
        s["members"] = members;
        s["registration"] = nullptr;
        s.erase("segmentation");
        s.erase("volume_mm3");
        m.save();
    }
    emit(report.str(), "");
}

struct PreprocessArgs {
    std::string manifest, config, scans, image, scan_id, out_dir = "preprocessed";
    bool recenter = false;
    std::optional<double> smooth;
    std::optional<double> failure_threshold;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
};

void run_preprocess(const PreprocessArgs& a) {
    Manifest m(need_manifest(a.manifest));
    std::string config = a.config;
    if (config.empty() && m.config()["reference"].is_string()) config = m.config()["reference"].get<std::string>();
    if (config.empty()) throw CliError("invalid_argument", "no reference config: pass --config");
    require_file(config);
    m.config()["reference"] = config;
    if (a.smooth) m.config()["smooth_sigma"] = *a.smooth;
    if (a.failure_threshold) m.config()["failure_threshold_hu"] = *a.failure_threshold;
    if (a.seed) m.config()["seed"] = *a.seed;

    struct Job {
        std::string id, image;
        std::vector<std::string> members;
    };
    std::vector<Job> jobs;
    if (!a.scans.empty()) {
        const Listing t = read_listing(a.scans);
        const std::size_t c_id = t.column("scan_id"), c_img = t.column("image");
        const std::size_t c_mem = t.column("members", false);
        for (const auto& row : t.rows) {
            Job j{row[c_id], relative_to(a.scans, row[c_img]), {}};
            if (c_mem < row.size())
                for (const auto& p : split(row[c_mem], ';')) j.members.push_back(relative_to(a.scans, p));
            jobs.push_back(std::move(j));
        }
    } else {
        if (a.image.empty()) throw CliError("invalid_argument", "pass --scans or --image");
        jobs.push_back({a.scan_id.empty() ? fs::path(a.image).stem().string() : a.scan_id, a.image, {}});
    }
    for (const auto& j : jobs) {
        require_file(j.image);
        for (const auto& p : j.members) require_file(p);
    }
    m.save();
    json options{{"recenter", a.recenter}, {"failure_threshold_hu", m.config()["failure_threshold_hu"]},
                 {"seed", m.config()["seed"]}};
    const json sigma = m.config()["smooth_sigma"];
    fs::create_directories(a.out_dir);
    std::vector<json> reports(jobs.size());
    parallel_for(jobs.size(), a.jobs, [&](std::size_t i) {
        const Job& j = jobs[i];
        const std::string out = (fs::path(a.out_dir) / (j.id + ".vgf")).string();
        json o = options;
        std::string smoothed;
        if (sigma.is_number()) {
            smoothed = (fs::path(a.out_dir) / (j.id + ".smoothed.vgf")).string();
            o["smooth_sigma"] = sigma;
            o["smoothed_out"] = smoothed;
        }
        Owned report;
        check(cq_preprocess(j.image.c_str(), config.c_str(), o.dump().c_str(), out.c_str(), &report.p));
        json r = json::parse(report.str());
        m.update([&](Manifest& mm) {
            json& s = mm.scan(j.id);
            s["raw"] = j.image;
            s["registration"] = r;
            s.erase("segmentation");
            s.erase("volume_mm3");
            if (r["written"].get<bool>()) {
                s["preprocessed"] = out;
                if (!smoothed.empty()) s["smoothed"] = smoothed;
            } else {
                s.erase("preprocessed");
                s.erase("smoothed");
            }
            if (!j.members.empty()) s["members"] = j.members;
        });
        r["scan_id"] = j.id;
        reports[i] = std::move(r);
    });
    std::size_t failed = 0;
    for (const auto& r : reports) failed += r["failed"].get<bool>();
    emit(json{{"scans", reports}, {"failed", failed}}.dump(), "");
}

struct FuseArgs {
    std::string manifest, image, smoothed, out, out_dir = "segmentations", scan_id;
    std::vector<std::string> members;
    std::optional<double> threshold, hu;
    int jobs = 1;
};

void run_fuse(const FuseArgs& a) {
    auto fuse_one = [&](const std::vector<std::string>& members, const std::string& image, const std::string& smoothed,
                        const std::string& out, double threshold, double hu) {
        std::vector<const char*> paths;
        for (const auto& p : members) {
            require_file(p);
            paths.push_back(p.c_str());
        }
        require_file(image);
        json o{{"threshold", threshold}, {"hu_threshold", hu}};
        if (!smoothed.empty()) {
            require_file(smoothed);
            o["smoothed_image"] = smoothed;
        }
        Owned report;
        check(cq_fuse(paths.data(), paths.size(), image.c_str(), o.dump().c_str(), out.c_str(), &report.p));
        return json::parse(report.str());
    };

    if (!a.members.empty()) {
        if (a.image.empty() || a.out.empty()) throw CliError("invalid_argument", "--members needs --image and --out");
        json r = fuse_one(a.members, a.image, a.smoothed, a.out, a.threshold.value_or(0.5), a.hu.value_or(130.0));
        r["scan_id"] = a.scan_id.empty() ? fs::path(a.image).stem().string() : a.scan_id;
        emit(json{{"scan_id", r["scan_id"]}, {"volume_mm3", r["volume_mm3"]}, {"threshold", r["threshold"]},
                  {"hu_threshold", r["hu_threshold"]}, {"voxels", r["voxels"]}}
                 .dump(),
             "");
        return;
    }
    Manifest m(need_manifest(a.manifest));
    if (a.threshold) m.config()["threshold"] = *a.threshold;
    if (a.hu) m.config()["hu_threshold"] = *a.hu;
    const double threshold = m.config()["threshold"].get<double>(), hu = m.config()["hu_threshold"].get<double>();
    std::vector<json> todo;
    for (const auto& s : m.scans())
        if (s.contains("preprocessed") && s.contains("members") && !s["members"].empty()) todo.push_back(s);
    if (todo.empty()) throw CliError("state", "no preprocessed scans with ensemble members in the manifest");
    m.save();
    fs::create_directories(a.out_dir);
    std::vector<json> records(todo.size());
    parallel_for(todo.size(), a.jobs, [&](std::size_t i) {
        const json& s = todo[i];
        const std::string id = s["scan_id"].get<std::string>();
        const std::string out = (fs::path(a.out_dir) / (id + ".seg.vgf")).string();
        const json r = fuse_one(s["members"].get<std::vector<std::string>>(), s["preprocessed"].get<std::string>(),
                                s.value("smoothed", std::string()), out, threshold, hu);
        m.update([&](Manifest& mm) {
            json& e = mm.scan(id);
            e["segmentation"] = out;
            e["volume_mm3"] = r["volume_mm3"];
        });
        records[i] = {{"scan_id", id}, {"volume_mm3", r["volume_mm3"]}, {"threshold", threshold},
                      {"hu_threshold", hu}, {"voxels", r["voxels"]}};
    });
    emit(json{{"scans", records}}.dump(), "");
}

struct EvalArgs {
    std::string pairs, grades, scans, curve, out;
    std::vector<std::size_t> counts;
    int replications = 10000;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::optional<double> threshold, hu;
    std::size_t curve_points = 101;
};

void run_eval(const EvalArgs& a) {
    json report = json::object();
    const json boot{{"replications", a.replications}, {"seed", a.seed}, {"jobs", a.jobs}};
    if (!a.pairs.empty()) {
        Owned r;
        check(cq_eval_agreement(read_text(a.pairs).c_str(), boot.dump().c_str(), &r.p));
        report["agreement"] = json::parse(r.str());
    }
    if (!a.grades.empty()) {
        Owned r;
        check(cq_eval_wilcoxon(read_text(a.grades).c_str(), &r.p));
        report["wilcoxon"] = json::parse(r.str());
    }
    if (!a.counts.empty()) {
        if (a.counts.size() != 5) throw CliError("invalid_argument", "--counts needs five values (+2 +1 0 -1 -2)");
        Owned r;
        check(cq_eval_wilcoxon_counts(a.counts.data(), &r.p));
        report["wilcoxon_counts"] = json::parse(r.str());
    }
    if (!a.scans.empty()) {
        json o{{"curve_points", a.curve_points}};
        if (a.threshold) o["threshold"] = *a.threshold;
        if (a.hu) o["hu_threshold"] = *a.hu;
        Owned r, curve;
        check(cq_eval_segmentation(a.scans.c_str(), o.dump().c_str(), &r.p, a.curve.empty() ? nullptr : &curve.p));
        report["segmentation"] = json::parse(r.str());
        if (!a.curve.empty()) write_atomic(a.curve, curve.str());
    }
    if (report.empty()) throw CliError("invalid_argument", "nothing to evaluate: pass --pairs, --grades, --counts or --scans");
    emit(report.dump(), a.out);
}

struct LesionArgs {
    std::string participant, image, manual, automated, scans, out, table;
    int connectivity = 26;
    int jobs = 1;
    std::string source, cls;
    std::vector<double> percentiles;
};

void run_lesions_extract(const LesionArgs& a) {
    struct Job {
        std::string participant, image, manual, automated;
    };
    std::vector<Job> jobs;
    if (!a.scans.empty()) {
        const Listing t = read_listing(a.scans);
        const std::size_t c_id = t.column("participant_id"), c_img = t.column("image"), c_man = t.column("manual"),
                          c_aut = t.column("automated");
        for (const auto& row : t.rows)
            jobs.push_back({row[c_id], relative_to(a.scans, row[c_img]), relative_to(a.scans, row[c_man]),
                            relative_to(a.scans, row[c_aut])});
    } else {
        if (a.participant.empty() || a.image.empty() || a.manual.empty() || a.automated.empty())
            throw CliError("invalid_argument", "pass --scans, or --participant with --image, --manual and --automated");
        jobs.push_back({a.participant, a.image, a.manual, a.automated});
    }
    for (const auto& j : jobs) {
        require_file(j.image);
        require_file(j.manual);
        require_file(j.automated);
    }
    std::vector<std::string> tables(jobs.size());
    parallel_for(jobs.size(), a.jobs, [&](std::size_t i) {
        const Job& j = jobs[i];
        Owned csv;
        check(cq_lesions_extract(j.participant.c_str(), j.image.c_str(), j.manual.c_str(), j.automated.c_str(),
                                 a.connectivity, &csv.p));
        tables[i] = csv.str();
    });
    std::string merged;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        const std::string& t = tables[i];
        const auto nl = t.find('\n');
        merged += i == 0 ? t : (nl == std::string::npos ? std::string() : t.substr(nl + 1));
    }
    if (a.out.empty())
        std::cout << merged << std::flush;
    else
        write_atomic(a.out, merged);
}

void run_lesions_histogram(const LesionArgs& a) {
    json o = json::object();
    if (!a.source.empty()) o["source"] = a.source;
    if (!a.cls.empty()) o["class"] = a.cls;
    if (!a.percentiles.empty()) o["percentiles"] = a.percentiles;
    Owned r;
    check(cq_lesions_histogram(read_text(a.table).c_str(), o.dump().c_str(), &r.p));
    emit(r.str(), a.out);
}

struct CoxArgs {
    std::string cohort, exposure, mode = "volume_per_sd", ties = "efron", compare, lesions, grid = "exclusion",
                                  source = "manual", out;
    bool no_adjust = false, either = false, no_bootstrap = false;
    int bootstrap = 0, replications = 1000, jobs = 1;
    std::uint64_t seed = 0;
    std::vector<double> percentiles;
};

void run_cox_fit(const CoxArgs& a) {
    require_file(a.cohort);
    json o{{"exposure", a.exposure}, {"mode", a.mode},       {"ties", a.ties},
           {"adjust", !a.no_adjust}, {"bootstrap", a.bootstrap}, {"seed", a.seed}, {"jobs", a.jobs}};
    if (!a.compare.empty()) o["compare"] = a.compare;
    Owned r;
    check(cq_cox_fit(a.cohort.c_str(), o.dump().c_str(), &r.p));
    emit(r.str(), a.out);
}

void run_cox_grid(const CoxArgs& a) {
    require_file(a.cohort);
    require_file(a.lesions);
    json o{{"grid", a.grid},          {"source", a.source},          {"ties", a.ties},
           {"adjust", !a.no_adjust},  {"replications", a.replications}, {"seed", a.seed},
           {"jobs", a.jobs},          {"exclude_either", a.either},   {"bootstrap", !a.no_bootstrap}};
    if (!a.percentiles.empty()) o["percentiles"] = a.percentiles;
    Owned r;
    check(cq_cox_grid(a.cohort.c_str(), a.lesions.c_str(), o.dump().c_str(), &r.p));
    emit(r.str(), a.out);
}

struct SessionArgs {
    std::string scans, session, host = "127.0.0.1", ui;
    std::size_t n = 300;
    std::uint64_t seed = 0;
    int port = 8080;
};

void run_sample(const SessionArgs& a) {
    require_file(a.scans);
    Owned r;
    check(cq_session_create(a.session.c_str(), a.scans.c_str(), a.n, a.seed, &r.p));
    emit(r.str(), "");
}

void run_serve(const SessionArgs& a) {
    cq_session* s = nullptr;
    check(cq_session_open(a.session.c_str(), &s));
    std::unique_ptr<cq_session, void (*)(cq_session*)> guard(s, cq_session_free);
    std::cout << std::flush;
    check(cq_session_serve(s, a.host.c_str(), a.port, a.ui.empty() ? nullptr : a.ui.c_str(), STDOUT_FILENO));
}

struct LossArgs {
    std::string loss = "cross_entropy", trace;
    int steps = 200;
    std::size_t patches = 16;
    double lr = 0.1;
    std::uint64_t seed = 0;
};

void run_demo_losses(const LossArgs& a) {
    json o{{"loss", a.loss}, {"steps", a.steps}, {"patches", a.patches}, {"learning_rate", a.lr}, {"seed", a.seed}};
    Owned trace, report;
    check(cq_losses_demo(o.dump().c_str(), &trace.p, &report.p));
    if (!a.trace.empty()) write_atomic(a.trace, trace.str());
    emit(report.str(), "");
}

void print_error(const std::string& code, const std::string& message) {
    std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Intracranial calcification quantification toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", std::string(cq_version()));
    std::string manifest;
    app.add_option("--manifest", manifest, "Project manifest (default: $CALCQUANT_MANIFEST)");

    PhantomArgs ph;
    auto* phantom = app.add_subcommand("phantom", "Write a synthetic head phantom with ensemble maps");
    phantom->add_option("--seed", ph.seed, "Phantom seed");
    phantom->add_option("--out", ph.out, "Output directory")->required();
    phantom->add_option("--dims", ph.dims, "Grid size nx ny nz")->expected(3);
    phantom->add_option("--spacing", ph.spacing, "Voxel spacing in mm")->expected(3);
    phantom->add_option("--calcifications", ph.calcifications, "Number of calcifications");
    phantom->add_option("--members", ph.members, "Ensemble members");
    phantom->add_option("--noise", ph.noise, "Gaussian noise SD in HU");

    PreprocessArgs pp;
    auto* pre = app.add_subcommand("preprocess", "Register scans to the reference and resample to the canonical grid");
    pre->add_option("--config", pp.config, "Reference-space JSON");
    pre->add_option("--scans", pp.scans, "CSV with scan_id, image[, members (';'-separated)]");
    pre->add_option("--image", pp.image, "Single raw scan");
    pre->add_option("--scan-id", pp.scan_id, "Scan id for --image");
    pre->add_option("--out-dir", pp.out_dir, "Output directory");
    pre->add_flag("--recenter", pp.recenter, "Recenter the axial plane before registering");
    pre->add_option("--smooth", pp.smooth, "2D Gaussian sigma in voxels (also writes a smoothed copy)");
    pre->add_option("--failure-threshold", pp.failure_threshold, "MAE (HU) above which registration fails");
    pre->add_option("--seed", pp.seed, "Registration sampling seed");
    pre->add_option("--jobs", pp.jobs, "Concurrent scans")->check(CLI::PositiveNumber);

    FuseArgs fu;
    auto* fuse = app.add_subcommand("fuse", "Average ensemble maps, threshold inside the HU mask, measure volume");
    fuse->add_option("--members", fu.members, "Member probability maps (direct mode)");
    fuse->add_option("--image", fu.image, "Scan the maps belong to (direct mode)");
    fuse->add_option("--smoothed", fu.smoothed, "Smoothed scan for dual HU masking");
    fuse->add_option("--out", fu.out, "Segmentation output (direct mode)");
    fuse->add_option("--scan-id", fu.scan_id, "Scan id for the record (direct mode)");
    fuse->add_option("--out-dir", fu.out_dir, "Segmentation directory (manifest mode)");
    fuse->add_option("--threshold", fu.threshold, "Probability threshold (strict)");
    fuse->add_option("--hu", fu.hu, "Candidate HU threshold (strict)");
    fuse->add_option("--jobs", fu.jobs, "Concurrent scans")->check(CLI::PositiveNumber);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Segmentation metrics, curves, agreement and grade statistics");
    eval->add_option("--pairs", ev.pairs, "CSV with id, manual_mm3, auto_mm3");
    eval->add_option("--grades", ev.grades, "CSV with region_id, grade");
    eval->add_option("--counts", ev.counts, "Grade counts for +2 +1 0 -1 -2")->delimiter(',');
    eval->add_option("--scans", ev.scans, "CSV with scan_id, image, probability, reference");
    eval->add_option("--curve", ev.curve, "Curve CSV output (with --scans)");
    eval->add_option("--curve-points", ev.curve_points, "Number of uniform thresholds");
    eval->add_option("--threshold", ev.threshold, "Probability threshold");
    eval->add_option("--hu", ev.hu, "Candidate HU threshold");
    eval->add_option("--replications", ev.replications, "Bootstrap replications");
    eval->add_option("--seed", ev.seed, "Bootstrap seed");
    eval->add_option("--jobs", ev.jobs, "Bootstrap threads")->check(CLI::PositiveNumber);
    eval->add_option("--out", ev.out, "Report file (default stdout)");

    LesionArgs le;
    auto* lesions = app.add_subcommand("lesions", "Lesion tables and volume-fraction histograms");
    lesions->require_subcommand(1);
    auto* extract = lesions->add_subcommand("extract", "Label and classify lesions");
    extract->add_option("--participant", le.participant, "Participant id");
    extract->add_option("--image", le.image, "Scan");
    extract->add_option("--manual", le.manual, "Manual mask");
    extract->add_option("--automated", le.automated, "Automated mask");
    extract->add_option("--scans", le.scans, "CSV with participant_id, image, manual, automated");
    extract->add_option("--connectivity", le.connectivity, "6 or 26")->check(CLI::IsMember({6, 26}));
    extract->add_option("--jobs", le.jobs, "Concurrent scans")->check(CLI::PositiveNumber);
    extract->add_option("--out", le.out, "Lesion CSV (default stdout)");
    auto* hist = lesions->add_subcommand("histogram", "Volume-adjusted percentile bins and 2D histogram");
    hist->add_option("--table", le.table, "Lesion CSV")->required();
    hist->add_option("--source", le.source, "manual or automated");
    hist->add_option("--class", le.cls, "overlapping, false_positive or false_negative");
    hist->add_option("--percentiles", le.percentiles, "Percentile edges")->delimiter(',');
    hist->add_option("--out", le.out, "Report file (default stdout)");

    CoxArgs cx;
    auto* cox = app.add_subcommand("cox", "Cox models and HR grids");
    cox->require_subcommand(1);
    auto* fit = cox->add_subcommand("fit", "Fit one exposure");
    fit->add_option("--cohort", cx.cohort, "Survival CSV")->required();
    fit->add_option("--exposure", cx.exposure, "Exposure column")->required();
    fit->add_option("--mode", cx.mode, "presence or volume_per_sd");
    fit->add_option("--ties", cx.ties, "efron or breslow");
    fit->add_flag("--no-adjust", cx.no_adjust, "Exposure only, no covariates");
    fit->add_option("--bootstrap", cx.bootstrap, "Bootstrap replications (0: none)");
    fit->add_option("--compare", cx.compare, "Second exposure for a paired HR difference");
    fit->add_option("--seed", cx.seed, "Bootstrap seed");
    fit->add_option("--jobs", cx.jobs, "Bootstrap threads")->check(CLI::PositiveNumber);
    fit->add_option("--out", cx.out, "Report file (default stdout)");
    auto* grid = cox->add_subcommand("grid", "Lesion exclusion or inclusion HR grid");
    grid->add_option("--cohort", cx.cohort, "Survival CSV")->required();
    grid->add_option("--lesions", cx.lesions, "Lesion CSV")->required();
    grid->add_option("--grid", cx.grid, "exclusion or inclusion");
    grid->add_option("--source", cx.source, "Lesion source for exclusion grids");
    grid->add_option("--percentiles", cx.percentiles, "Percentile edges")->delimiter(',');
    grid->add_option("--ties", cx.ties, "efron or breslow");
    grid->add_flag("--no-adjust", cx.no_adjust, "Exposure only, no covariates");
    grid->add_flag("--either", cx.either, "Exclude lesions below either minimum");
    grid->add_flag("--no-bootstrap", cx.no_bootstrap, "Skip CIs and difference p-values");
    grid->add_option("--replications", cx.replications, "Bootstrap replications per cell");
    grid->add_option("--seed", cx.seed, "Bootstrap seed");
    grid->add_option("--jobs", cx.jobs, "Bootstrap threads")->check(CLI::PositiveNumber);
    grid->add_option("--out", cx.out, "Report file (default stdout)");

    SessionArgs se;
    auto* sample = app.add_subcommand("sample", "Sample reader-study regions into a session directory");
    sample->add_option("--scans", se.scans, "CSV with participant_id, image, manual, automated")->required();
    sample->add_option("--session", se.session, "Session directory")->required();
    sample->add_option("-n,--regions", se.n, "Regions to sample");
    sample->add_option("--seed", se.seed, "Sampling and blinding seed");
    auto* serve = app.add_subcommand("serve", "Serve a grading session over HTTP");
    serve->add_option("--session", se.session, "Session directory")->required();
    serve->add_option("--host", se.host, "Bind address");
    serve->add_option("--port", se.port, "Port (0: any free port)");
    serve->add_option("--ui", se.ui, "Static files for the grading client");

    LossArgs lo;
    auto* demo = app.add_subcommand("demo-losses", "Toy logistic fit under one training loss");
    demo->add_option("--loss", lo.loss, "cross_entropy, soft_dice, focal or weighted_cross_entropy");
    demo->add_option("--steps", lo.steps, "Gradient steps");
    demo->add_option("--patches", lo.patches, "Toy patches");
    demo->add_option("--lr", lo.lr, "Learning rate");
    demo->add_option("--seed", lo.seed, "Patch seed");
    demo->add_option("--trace", lo.trace, "Loss trace CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        pp.manifest = fu.manifest = ph.manifest = manifest;
        if (*phantom) run_phantom(ph);
        else if (*pre) run_preprocess(pp);
        else if (*fuse) run_fuse(fu);
        else if (*eval) run_eval(ev);
        else if (*extract) run_lesions_extract(le);
        else if (*hist) run_lesions_histogram(le);
        else if (*fit) run_cox_fit(cx);
        else if (*grid) run_cox_grid(cx);
        else if (*sample) run_sample(se);
        else if (*serve) run_serve(se);
        else if (*demo) run_demo_losses(lo);
    } catch (const CliError& e) {
        print_error(e.code, e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}
