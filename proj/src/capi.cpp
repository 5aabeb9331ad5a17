#include "calcquant/calcquant.h"

#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <new>
#include <set>
#include <string>

#include <json.hpp>

#include "calcquant/csv.hpp"
#include "calcquant/evaluate.hpp"
#include "calcquant/lesions.hpp"
#include "calcquant/losses.hpp"
#include "calcquant/phantom.hpp"
#include "calcquant/preprocess.hpp"
#include "calcquant/quantify.hpp"
#include "calcquant/readerstudy.hpp"
#include "calcquant/survival.hpp"
#include "calcquant/volgrid.hpp"

using nlohmann::json;
using namespace calcquant;

struct cq_grid {
    AnyGrid grid;
};

struct cq_session {
    readerstudy::Session session;
};

namespace {

thread_local std::string last_error;

cq_status status_of(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument: return CQ_ERR_INVALID_ARGUMENT;
    case ErrorCode::io: return CQ_ERR_IO;
    case ErrorCode::format: return CQ_ERR_FORMAT;
    case ErrorCode::domain: return CQ_ERR_DOMAIN;
    case ErrorCode::numeric: return CQ_ERR_NUMERIC;
    case ErrorCode::state: return CQ_ERR_STATE;
    case ErrorCode::not_found: return CQ_ERR_NOT_FOUND;
    }
    return CQ_ERR_INTERNAL;
}

template <class F>
cq_status guard(F&& f) noexcept {
    try {
        f();
        return CQ_OK;
    } catch (const Error& e) {
        last_error = e.what();
        return status_of(e.code());
    } catch (const json::exception& e) {
        last_error = e.what();
        return CQ_ERR_FORMAT;
    } catch (const std::filesystem::filesystem_error& e) {
        last_error = e.what();
        return CQ_ERR_IO;
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return CQ_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return CQ_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown error";
        return CQ_ERR_INTERNAL;
    }
}

char* dup(const std::string& s) {
    auto* p = static_cast<char*>(std::malloc(s.size() + 1));
    if (!p) throw std::bad_alloc();
    std::memcpy(p, s.data(), s.size());
    p[s.size()] = '\0';
    return p;
}

void set_out(char** out, const std::string& s) {
    if (out) *out = dup(s);
}

void need(const void* p, const char* what) {
    require(p != nullptr, ErrorCode::invalid_argument, std::string(what) + " must not be null");
}

json options(const char* text) {
    if (!text || !*text) return json::object();
    json j = json::parse(text);
    require(j.is_object(), ErrorCode::format, "options must be a JSON object");
    return j;
}

/// Paths in a listing CSV are relative to the listing's directory.
std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

json interval_json(const evaluate::BootstrapInterval& i) {
    return {{"estimate", i.estimate}, {"ci_lower", i.lower}, {"ci_upper", i.upper}};
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json summary_json(const std::optional<evaluate::Summary>& s) {
    if (!s) return nullptr;
    return {{"n", s->n}, {"mean", s->mean}, {"sd", opt_json(s->sd)}};
}

json bland_altman_json(const evaluate::BlandAltman& b) {
    return {{"n", b.n}, {"mean_difference", b.mean_difference}, {"sd", b.sd}, {"lower", b.lower}, {"upper", b.upper}};
}

json wilcoxon_json(const evaluate::WilcoxonResult& w) {
    return {{"n", w.n}, {"w_plus", w.w_plus}, {"z", w.z}, {"p", w.p}};
}

json grid_meta(const Grid3& g) {
    return {{"dims", g.dims}, {"spacing", g.spacing}, {"origin", g.origin}, {"voxel_volume_mm3", g.voxel_volume()}};
}

Grid3 grid_from_options(const json& o, const Grid3& fallback) {
    Grid3 g = fallback;
    if (o.contains("dims")) g.dims = o["dims"].get<std::array<std::int32_t, 3>>();
    if (o.contains("spacing")) g.spacing = o["spacing"].get<std::array<double, 3>>();
    if (o.contains("origin")) g.origin = o["origin"].get<std::array<double, 3>>();
    g.validate();
    return g;
}

evaluate::BootstrapOptions bootstrap_options(const json& o, int default_reps) {
    evaluate::BootstrapOptions b;
    b.replications = o.value("replications", default_reps);
    b.seed = o.value("seed", std::uint64_t{0});
    b.jobs = o.value("jobs", 1);
    return b;
}

survival::ModelSpec model_spec(const json& o) {
    survival::ModelSpec spec;
    spec.exposure = o.value("exposure", std::string{});
    spec.mode = survival::parse_exposure_mode(o.value("mode", std::string("volume_per_sd")));
    spec.adjust = o.value("adjust", true);
    spec.cox.ties = survival::parse_ties(o.value("ties", std::string("efron")));
    return spec;
}

std::vector<double> percentiles_of(const json& o) {
    if (o.contains("percentiles")) return o["percentiles"].get<std::vector<double>>();
    return {0, 10, 20, 30, 40, 50, 60, 70, 80, 90};
}

std::vector<lesions::LesionRecord> filter(const std::vector<lesions::LesionRecord>& all, lesions::Source source,
                                          std::optional<lesions::LesionClass> cls = std::nullopt) {
    std::vector<lesions::LesionRecord> out;
    for (const auto& l : all)
        if (l.source == source && (!cls || l.cls == *cls)) out.push_back(l);
    return out;
}

std::map<std::string, std::string> parse_query(const char* q) {
    std::map<std::string, std::string> out;
    if (!q) return out;
    std::string_view s(q);
    if (!s.empty() && s.front() == '?') s.remove_prefix(1);
    while (!s.empty()) {
        const auto amp = s.find('&');
        const std::string_view item = s.substr(0, amp);
        const auto eq = item.find('=');
        if (!item.empty())
            out[std::string(item.substr(0, eq))] = eq == std::string_view::npos ? "" : std::string(item.substr(eq + 1));
        if (amp == std::string_view::npos) break;
        s.remove_prefix(amp + 1);
    }
    return out;
}

} // namespace

extern "C" {

const char* cq_version(void) { return "0.1.0"; }

const char* cq_status_name(cq_status status) {
    switch (status) {
    case CQ_OK: return "ok";
    case CQ_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case CQ_ERR_IO: return "io";
    case CQ_ERR_FORMAT: return "format";
    case CQ_ERR_DOMAIN: return "domain";
    case CQ_ERR_NUMERIC: return "numeric";
    case CQ_ERR_STATE: return "state";
    case CQ_ERR_NOT_FOUND: return "not_found";
    case CQ_ERR_INTERNAL: return "internal";
    }
    return "internal";
}

const char* cq_last_error(void) { return last_error.c_str(); }

void cq_free(void* p) { std::free(p); }

cq_status cq_grid_read(const char* path, cq_grid** out) {
    return guard([&] {
        need(path, "path");
        need(out, "out");
        *out = nullptr;
        *out = new cq_grid{read_grid_file(path)};
    });
}

cq_status cq_grid_write(const cq_grid* grid, const char* path) {
    return guard([&] {
        need(grid, "grid");
        need(path, "path");
        write_grid_file(grid->grid, path);
    });
}

void cq_grid_free(cq_grid* grid) { delete grid; }

cq_status cq_grid_describe(const cq_grid* grid, char** out) {
    return guard([&] {
        need(grid, "grid");
        json j = grid_meta(grid_of(grid->grid));
        switch (kind_of(grid->grid)) {
        case SampleKind::volume: j["kind"] = "volume"; break;
        case SampleKind::probability: j["kind"] = "probability"; break;
        case SampleKind::mask: {
            const Mask& m = std::get<Mask>(grid->grid);
            j["kind"] = "mask";
            j["foreground"] = quantify::count_foreground(m);
            j["volume_mm3"] = quantify::measure_volume(m);
            break;
        }
        }
        set_out(out, j.dump());
    });
}

cq_status cq_phantom_write(const char* options_json, const char* out_dir, char** report_json) {
    return guard([&] {
        need(out_dir, "out_dir");
        const json o = options(options_json);
        phantom::PhantomSpec spec;
        spec.grid = grid_from_options(o, phantom::default_grid());
        spec.seed = o.value("seed", spec.seed);
        spec.calcifications = o.value("calcifications", spec.calcifications);
        spec.ensemble_members = o.value("members", spec.ensemble_members);
        spec.noise_hu = o.value("noise_hu", spec.noise_hu);
        spec.observer_miss_rate = o.value("observer_miss_rate", spec.observer_miss_rate);
        spec.method_miss_rate = o.value("method_miss_rate", spec.method_miss_rate);
        spec.method_false_positives = o.value("false_positives", spec.method_false_positives);
        const phantom::Phantom ph = phantom::generate(spec);
        const std::filesystem::path dir(out_dir);
        std::filesystem::create_directories(dir);
        write_grid_file(ph.image, dir / "image.vgf");
        write_grid_file(ph.truth, dir / "truth.vgf");
        write_grid_file(ph.manual, dir / "manual.vgf");
        write_grid_file(ph.automated, dir / "automated.vgf");
        json members = json::array();
        for (std::size_t m = 0; m < ph.members.size(); ++m) {
            const std::string name = "member_" + std::to_string(m) + ".vgf";
            write_grid_file(ph.members[m], dir / name);
            members.push_back(name);
        }
        json calcs = json::array();
        for (const auto& c : ph.calcifications)
            calcs.push_back({{"center_mm", c.center_mm},
                             {"radii_mm", c.radii_mm},
                             {"hu", c.hu},
                             {"observed", c.observed},
                             {"detected", c.detected},
                             {"voxels", c.voxels}});
        json r{{"seed", spec.seed},
               {"grid", grid_meta(spec.grid)},
               {"files",
                {{"image", "image.vgf"}, {"truth", "truth.vgf"}, {"manual", "manual.vgf"},
                 {"automated", "automated.vgf"}, {"members", members}}},
               {"truth_voxels", quantify::count_foreground(ph.truth)},
               {"truth_mm3", quantify::measure_volume(ph.truth)},
               {"manual_mm3", quantify::measure_volume(ph.manual)},
               {"automated_voxels", quantify::count_foreground(ph.automated)},
               {"automated_mm3", quantify::measure_volume(ph.automated)},
               {"calcifications", calcs}};
        set_out(report_json, r.dump());
    });
}

cq_status cq_preprocess(const char* image_path, const char* config_path, const char* options_json,
                        const char* out_path, char** report_json) {
    return guard([&] {
        need(image_path, "image_path");
        need(config_path, "config_path");
        need(out_path, "out_path");
        const json o = options(options_json);
        Volume moving = read_grid_file_as<Volume>(image_path);
        require(std::any_of(moving.samples().begin(), moving.samples().end(), [](double v) { return v > 0.0; }),
                ErrorCode::domain, "no positive-HU voxels");
        const preprocess::ReferenceSpace rs = preprocess::load_reference_space(config_path);
        const Volume fixed = read_grid_file_as<Volume>(rs.reference_path);
        preprocess::RegistrationConfig cfg = rs.registration;
        cfg.rng_seed = o.value("seed", cfg.rng_seed);
        cfg.validate();
        const double threshold = o.value("failure_threshold_hu", rs.failure_threshold_hu);
        const bool recenter = o.value("recenter", false);
        if (recenter) moving = preprocess::recenter_axial(moving);
        const auto reg = preprocess::register_affine(moving, fixed, cfg, threshold);
        const Eigen::Matrix3d& a = reg.transform.linear();
        const Eigen::Vector3d& t = reg.transform.offset();
        json r{{"linear", {{a(0, 0), a(0, 1), a(0, 2)}, {a(1, 0), a(1, 1), a(1, 2)}, {a(2, 0), a(2, 1), a(2, 2)}}},
               {"translation", {t[0], t[1], t[2]}},
               {"final_metric", reg.final_metric},
               {"mae_hu", reg.mae_hu},
               {"failure_threshold_hu", threshold},
               {"failed", reg.failed},
               {"iterations", reg.iterations},
               {"recentered", recenter},
               {"seed", cfg.rng_seed}};
        if (reg.failed) {
            r["written"] = false;
        } else {
            const Grid3 canonical = rs.canonical_grid(fixed.grid());
            const Volume standard = preprocess::standardize_grid(moving, reg.transform, canonical);
            write_grid_file(standard, out_path);
            r["written"] = true;
            r["grid"] = grid_meta(canonical);
            if (o.contains("smooth_sigma") && !o["smooth_sigma"].is_null()) {
                const double sigma = o["smooth_sigma"].get<double>();
                require(o.contains("smoothed_out"), ErrorCode::invalid_argument, "smooth_sigma needs smoothed_out");
                write_grid_file(preprocess::gaussian_smooth(standard, sigma), o["smoothed_out"].get<std::string>());
                r["smooth_sigma"] = sigma;
            }
        }
        set_out(report_json, r.dump());
    });
}

cq_status cq_fuse(const char* const* member_paths, size_t member_count, const char* image_path,
                  const char* options_json, const char* out_path, char** report_json) {
    return guard([&] {
        need(member_paths, "member_paths");
        need(image_path, "image_path");
        need(out_path, "out_path");
        const json o = options(options_json);
        const double threshold = o.value("threshold", quantify::kProbabilityThreshold);
        const double hu = o.value("hu_threshold", quantify::kCandidateHu);
        quantify::EnsembleOutput ensemble;
        for (std::size_t m = 0; m < member_count; ++m) {
            need(member_paths[m], "member path");
            ensemble.maps.push_back(read_grid_file_as<ProbMap>(member_paths[m]));
            ensemble.labels.emplace_back(member_paths[m]);
        }
        const Volume image = read_grid_file_as<Volume>(image_path);
        const bool dual = o.contains("smoothed_image") && !o["smoothed_image"].is_null();
        const Mask candidates =
            dual ? quantify::dual_candidate_mask(image, read_grid_file_as<Volume>(o["smoothed_image"].get<std::string>()), hu)
                 : quantify::candidate_mask(image, hu);
        const auto result = quantify::quantify(ensemble, candidates, threshold);
        write_grid_file(result.segmentation, out_path);
        if (o.contains("fused_out") && !o["fused_out"].is_null())
            write_grid_file(result.fused, o["fused_out"].get<std::string>());
        json r{{"volume_mm3", result.volume_mm3},
               {"voxels", quantify::count_foreground(result.segmentation)},
               {"threshold", threshold},
               {"hu_threshold", hu},
               {"members", member_count},
               {"dual_masking", dual}};
        set_out(report_json, r.dump());
    });
}

cq_status cq_eval_segmentation(const char* scans_csv_path, const char* options_json, char** report_json,
                               char** curve_csv) {
    return guard([&] {
        need(scans_csv_path, "scans_csv_path");
        const json o = options(options_json);
        const double threshold = o.value("threshold", quantify::kProbabilityThreshold);
        const double hu = o.value("hu_threshold", quantify::kCandidateHu);
        const std::size_t points = o.value("curve_points", std::size_t{101});
        const std::filesystem::path base = std::filesystem::path(scans_csv_path).parent_path();
        const csv::Table t = csv::read_file(scans_csv_path);
        const std::size_t c_id = t.column("scan_id"), c_img = t.column("image"), c_prob = t.column("probability"),
                          c_ref = t.column("reference");
        require(!t.rows.empty(), ErrorCode::invalid_argument, "scan list is empty");
        std::vector<ProbMap> probs;
        std::vector<Mask> cands, refs;
        std::vector<evaluate::VoxelCounts> counts;
        std::vector<std::string> ids;
        for (const auto& row : t.rows) {
            const Volume image = read_grid_file_as<Volume>(resolve(base, row[c_img]));
            probs.push_back(read_grid_file_as<ProbMap>(resolve(base, row[c_prob])));
            refs.push_back(read_grid_file_as<Mask>(resolve(base, row[c_ref])));
            cands.push_back(quantify::candidate_mask(image, hu));
            counts.push_back(evaluate::voxel_counts(quantify::binarize(probs.back(), cands.back(), threshold), refs.back()));
            ids.push_back(row[c_id]);
        }
        const double vv = refs.front().grid().voxel_volume();
        for (const auto& r : refs)
            require(r.grid().voxel_volume() == vv, ErrorCode::invalid_argument, "scans must share one voxel volume");
        const auto m = evaluate::aggregate_metrics(counts, vv);
        json per_scan = json::array();
        for (std::size_t i = 0; i < m.per_scan.size(); ++i) {
            const auto& s = m.per_scan[i];
            per_scan.push_back({{"scan_id", ids[i]},
                                {"recall", opt_json(s.recall)},
                                {"precision", opt_json(s.precision)},
                                {"fpv_mm3", s.fpv_mm3},
                                {"reference_mm3", s.reference_mm3},
                                {"has_icac", s.has_icac}});
        }
        json r{{"threshold", threshold},
               {"hu_threshold", hu},
               {"dataset_recall", opt_json(m.dataset_recall)},
               {"dataset_precision", opt_json(m.dataset_precision)},
               {"participant_recall", summary_json(m.participant_recall)},
               {"participant_precision", summary_json(m.participant_precision)},
               {"fpv_with_icac_mm3", summary_json(m.fpv_with_icac)},
               {"fpv_icac_free_mm3", summary_json(m.fpv_icac_free)},
               {"scans_with_icac", m.scans_with_icac},
               {"scans_icac_free", m.scans_icac_free},
               {"per_scan", per_scan}};
        if (curve_csv) {
            std::vector<evaluate::SweepInput> in;
            for (std::size_t i = 0; i < probs.size(); ++i)
                in.push_back({probs[i].samples(), cands[i].samples(), refs[i].samples(), vv});
            const auto curve = evaluate::sweep_curves(in, evaluate::uniform_thresholds(points));
            *curve_csv = dup(evaluate::format_curve_csv(curve));
        }
        set_out(report_json, r.dump());
    });
}

cq_status cq_eval_agreement(const char* pairs_csv, const char* options_json, char** report_json) {
    return guard([&] {
        need(pairs_csv, "pairs_csv");
        const json o = options(options_json);
        const auto pairs = evaluate::parse_pairs_csv(pairs_csv);
        const auto a = evaluate::agreement(pairs, bootstrap_options(o, 10000));
        json r{{"n", a.n},
               {"icc21", interval_json(a.icc_ci)},
               {"spearman", interval_json(a.spearman_ci)},
               {"bland_altman", bland_altman_json(a.raw)},
               {"bland_altman_cube_root", bland_altman_json(a.cube_root)},
               {"replications", a.replications},
               {"seed", a.seed}};
        r["icc21"]["estimate"] = a.icc;
        r["spearman"]["estimate"] = a.spearman;
        set_out(report_json, r.dump());
    });
}

cq_status cq_eval_wilcoxon(const char* grades_csv, char** report_json) {
    return guard([&] {
        need(grades_csv, "grades_csv");
        const auto grades = evaluate::parse_grades_csv(grades_csv);
        json r = wilcoxon_json(evaluate::wilcoxon_signed_rank(grades));
        r["grades"] = grades.size();
        set_out(report_json, r.dump());
    });
}

cq_status cq_eval_wilcoxon_counts(const size_t counts[5], char** report_json) {
    return guard([&] {
        need(counts, "counts");
        const std::array<std::size_t, 5> c{counts[0], counts[1], counts[2], counts[3], counts[4]};
        json r = wilcoxon_json(evaluate::wilcoxon_signed_rank(evaluate::grades_from_counts(c)));
        r["counts"] = c;
        set_out(report_json, r.dump());
    });
}

cq_status cq_lesions_extract(const char* participant_id, const char* image_path, const char* manual_path,
                             const char* automated_path, int connectivity, char** lesion_csv) {
    return guard([&] {
        need(participant_id, "participant_id");
        need(image_path, "image_path");
        need(manual_path, "manual_path");
        need(automated_path, "automated_path");
        const auto records = lesions::extract_lesions(participant_id, read_grid_file_as<Mask>(manual_path),
                                                      read_grid_file_as<Mask>(automated_path),
                                                      read_grid_file_as<Volume>(image_path), connectivity);
        set_out(lesion_csv, lesions::format_lesion_csv(records));
    });
}

cq_status cq_lesions_histogram(const char* lesion_csv, const char* options_json, char** report_json) {
    return guard([&] {
        need(lesion_csv, "lesion_csv");
        const json o = options(options_json);
        auto subset = lesions::parse_lesion_csv(lesion_csv);
        if (o.contains("source")) {
            const auto src = lesions::parse_source(o["source"].get<std::string>());
            std::erase_if(subset, [&](const auto& l) { return l.source != src; });
        }
        if (o.contains("class")) {
            const auto cls = lesions::parse_class(o["class"].get<std::string>());
            std::erase_if(subset, [&](const auto& l) { return l.cls != cls; });
        }
        const auto p = percentiles_of(o);
        const auto vb = lesions::volume_adjusted_percentiles(subset, lesions::Attribute::volume, p);
        const auto ab = lesions::volume_adjusted_percentiles(subset, lesions::Attribute::attenuation, p);
        const auto h = lesions::hist2d_volume_fraction(subset, vb.edges, ab.edges);
        json r = json::parse(lesions::histogram_json(h, &vb, &ab));
        r["lesions"] = subset.size();
        r["percentiles"] = p;
        set_out(report_json, r.dump());
    });
}

cq_status cq_cox_fit(const char* cohort_csv_path, const char* options_json, char** report_json) {
    return guard([&] {
        need(cohort_csv_path, "cohort_csv_path");
        const json o = options(options_json);
        const auto cohort = survival::read_cohort_csv(cohort_csv_path);
        const auto spec = model_spec(o);
        require(!spec.exposure.empty(), ErrorCode::invalid_argument, "an exposure column is required");
        const int reps = o.value("bootstrap", 0);
        json r;
        if (reps <= 0) {
            r = json::parse(survival::fit_json(survival::cox_fit(cohort, spec), spec));
        } else {
            require(reps >= 100, ErrorCode::invalid_argument, "bootstrap needs at least 100 replications");
            auto boot = bootstrap_options(o, reps);
            boot.replications = reps;
            std::optional<survival::ModelSpec> other;
            if (o.contains("compare")) {
                other = spec;
                other->exposure = o["compare"].get<std::string>();
            }
            const auto b = survival::bootstrap_hr(cohort, spec, other ? &*other : nullptr, boot);
            r = json::parse(survival::fit_json(b.fit_a, spec));
            r["bootstrap"] = {{"replications", reps}, {"seed", boot.seed}, {"redraws", b.redraws},
                              {"hr", interval_json(b.hr_a)}};
            if (other) {
                r["compare"] = json::parse(survival::fit_json(*b.fit_b, *other));
                r["compare"]["bootstrap_hr"] = interval_json(*b.hr_b);
                r["difference_p"] = opt_json(b.difference_p);
                r["marker"] = survival::significance_marker(b.difference_p);
            }
        }
        set_out(report_json, r.dump());
    });
}

cq_status cq_cox_grid(const char* cohort_csv_path, const char* lesion_csv_path, const char* options_json,
                      char** report_json) {
    return guard([&] {
        need(cohort_csv_path, "cohort_csv_path");
        need(lesion_csv_path, "lesion_csv_path");
        const json o = options(options_json);
        const auto cohort = survival::read_cohort_csv(cohort_csv_path);
        const auto table = lesions::read_lesion_csv(lesion_csv_path);
        survival::GridOptions go;
        go.model = model_spec(o);
        go.model.mode = survival::ExposureMode::volume_per_sd;
        go.bootstrap = bootstrap_options(o, 1000);
        go.exclude_either = o.value("exclude_either", false);
        go.with_bootstrap = o.value("bootstrap", true);
        if (go.with_bootstrap)
            require(go.bootstrap.replications >= 100, ErrorCode::invalid_argument,
                    "bootstrap needs at least 100 replications");
        const auto p = percentiles_of(o);
        const std::string kind = o.value("grid", std::string("exclusion"));
        survival::HRGrid grid;
        std::vector<lesions::LesionRecord> basis;
        if (kind == "exclusion") {
            basis = filter(table, lesions::parse_source(o.value("source", std::string("manual"))));
            require(!basis.empty(), ErrorCode::domain, "lesion table has no lesions of the chosen source");
        } else if (kind == "inclusion") {
            basis = filter(table, lesions::Source::manual, lesions::LesionClass::false_negative);
            require(!basis.empty(), ErrorCode::domain, "lesion table has no false-negative lesions");
        } else {
            fail(ErrorCode::invalid_argument, "grid must be exclusion or inclusion");
        }
        const auto vb = lesions::volume_adjusted_percentiles(basis, lesions::Attribute::volume, p);
        const auto ab = lesions::volume_adjusted_percentiles(basis, lesions::Attribute::attenuation, p);
        if (kind == "exclusion")
            grid = survival::exclusion_grid(cohort, basis, vb.edges, ab.edges, go);
        else
            grid = survival::inclusion_grid(cohort, filter(table, lesions::Source::automated), basis,
                                            filter(table, lesions::Source::manual), vb.edges, ab.edges, go);
        json r = json::parse(survival::grid_json(grid));
        r["grid"] = kind;
        r["percentiles"] = p;
        r["volume_labels"] = vb.labels;
        r["attenuation_labels"] = ab.labels;
        r["predicate"] = go.exclude_either ? "either" : "both";
        r["replications"] = go.with_bootstrap ? go.bootstrap.replications : 0;
        r["seed"] = go.bootstrap.seed;
        set_out(report_json, r.dump());
    });
}

cq_status cq_losses_demo(const char* options_json, char** trace_csv, char** report_json) {
    return guard([&] {
        const json o = options(options_json);
        const auto kind = losses::parse_loss_kind(o.value("loss", std::string("cross_entropy")));
        const auto patches = losses::make_toy_patches(o.value("patches", std::size_t{16}),
                                                      o.value("seed", std::uint64_t{0}));
        const int steps = o.value("steps", 200);
        const double lr = o.value("learning_rate", 0.1);
        const auto fit = losses::toy_fit(patches, kind, steps, lr);
        set_out(trace_csv, losses::format_trace_csv(fit, kind));
        json r{{"loss", losses::to_string(kind)},
               {"steps", steps},
               {"learning_rate", lr},
               {"initial_loss", fit.trace.front()},
               {"final_loss", fit.trace.back()},
               {"weight", fit.weight},
               {"bias", fit.bias},
               {"accuracy", fit.accuracy}};
        set_out(report_json, r.dump());
    });
}

cq_status cq_session_create(const char* dir, const char* scans_csv_path, size_t regions, uint64_t seed,
                            char** report_json) {
    return guard([&] {
        need(dir, "dir");
        need(scans_csv_path, "scans_csv_path");
        const std::filesystem::path base = std::filesystem::path(scans_csv_path).parent_path();
        const csv::Table t = csv::read_file(scans_csv_path);
        const std::size_t c_id = t.column("participant_id"), c_img = t.column("image"), c_man = t.column("manual"),
                          c_aut = t.column("automated");
        auto load = [&](std::size_t i) {
            const auto& row = t.rows.at(i);
            return readerstudy::Scan{row[c_id], read_grid_file_as<Volume>(resolve(base, row[c_img])),
                                     read_grid_file_as<Mask>(resolve(base, row[c_man])),
                                     read_grid_file_as<Mask>(resolve(base, row[c_aut]))};
        };
        const auto s = readerstudy::Session::create(dir, t.rows.size(), load, regions, seed);
        std::set<std::string> participants;
        for (const auto& r : s.regions()) participants.insert(r.participant_id);
        json r{{"dir", dir}, {"regions", s.regions().size()}, {"participants", participants.size()},
               {"scans", t.rows.size()}, {"seed", seed}};
        set_out(report_json, r.dump());
    });
}

cq_status cq_session_open(const char* dir, cq_session** out) {
    return guard([&] {
        need(dir, "dir");
        need(out, "out");
        *out = nullptr;
        *out = new cq_session{readerstudy::Session::open(dir)};
    });
}

void cq_session_free(cq_session* session) { delete session; }

cq_status cq_session_request(cq_session* session, const char* method, const char* path, const char* query_string,
                             const char* body, int is_local, int* http_status, char** content_type,
                             char** response_body, size_t* response_length) {
    return guard([&] {
        need(session, "session");
        need(method, "method");
        need(path, "path");
        need(http_status, "http_status");
        readerstudy::Service service(session->session);
        const auto r = service.handle(method, path, parse_query(query_string), body ? body : "", is_local != 0);
        *http_status = r.status;
        set_out(content_type, r.content_type);
        if (response_body) {
            auto* p = static_cast<char*>(std::malloc(r.body.size() + 1));
            if (!p) throw std::bad_alloc();
            std::memcpy(p, r.body.data(), r.body.size());
            p[r.body.size()] = '\0';
            *response_body = p;
        }
        if (response_length) *response_length = r.body.size();
    });
}

cq_status cq_session_summary(cq_session* session, char** report_json) {
    return guard([&] {
        need(session, "session");
        set_out(report_json, readerstudy::summary_json(session->session.summarize()));
    });
}

cq_status cq_session_serve(cq_session* session, const char* host, int port, const char* static_dir, int ready_fd) {
    return guard([&] {
        need(session, "session");
        readerstudy::HttpServer server(session->session);
        const int bound = server.bind(host ? host : "127.0.0.1", port);
        if (static_dir && *static_dir) server.mount(static_dir);
        if (ready_fd >= 0) {
            const std::string line = std::to_string(bound) + "\n";
            require(::write(ready_fd, line.data(), line.size()) == static_cast<ssize_t>(line.size()), ErrorCode::io,
                    "cannot report the bound port");
        }
        server.listen();
    });
}

} // extern "C"
