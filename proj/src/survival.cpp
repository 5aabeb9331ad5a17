#include "calcquant/survival.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <json.hpp>

#include "calcquant/csv.hpp"

namespace calcquant::survival {

namespace {

constexpr double kSeparationLimit = 20.0; // |beta| per SD of the covariate
constexpr double kStationaryStep = 1e-3;  // largest final Newton step, per SD

} // namespace

std::size_t Cohort::exposure_index(std::string_view name) const {
    for (std::size_t i = 0; i < exposure_names.size(); ++i)
        if (exposure_names[i] == name) return i;
    fail(ErrorCode::not_found, "cohort has no exposure column '" + std::string(name) + "'");
}

std::vector<double> Cohort::exposure(std::string_view name) const {
    const std::size_t e = exposure_index(name);
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.exposures[e]);
    return out;
}

void validate(const Cohort& c) {
    require(!c.records.empty(), ErrorCode::invalid_argument, "cohort is empty");
    for (const auto& r : c.records) {
        require(std::isfinite(r.time_days) && r.time_days > 0.0, ErrorCode::invalid_argument,
                "follow-up must be positive for participant '" + r.id + "'");
        require(std::isfinite(r.covariates[0]), ErrorCode::invalid_argument, "age must be finite");
        for (std::size_t k = 1; k < r.covariates.size(); ++k)
            require(r.covariates[k] == 0.0 || r.covariates[k] == 1.0, ErrorCode::invalid_argument,
                    std::string(kCovariateNames[k]) + " must be 0 or 1 for participant '" + r.id + "'");
        require(r.exposures.size() == c.exposure_names.size(), ErrorCode::invalid_argument,
                "exposure count mismatch for participant '" + r.id + "'");
        for (double e : r.exposures)
            require(std::isfinite(e) && e >= 0.0, ErrorCode::invalid_argument,
                    "exposures must be non-negative for participant '" + r.id + "'");
    }
}

Cohort parse_cohort_csv(std::string_view text) {
    const csv::Table t = csv::parse(text);
    const std::size_t id = t.column("id"), time = t.column("time_days"), event = t.column("event");
    std::array<std::size_t, 9> cov{};
    for (std::size_t k = 0; k < cov.size(); ++k) cov[k] = t.column(kCovariateNames[k]);
    Cohort c;
    std::vector<std::size_t> exposure_cols;
    for (std::size_t col = 0; col < t.header.size(); ++col) {
        if (col == id || col == time || col == event ||
            std::find(cov.begin(), cov.end(), col) != cov.end())
            continue;
        c.exposure_names.push_back(t.header[col]);
        exposure_cols.push_back(col);
    }
    for (const auto& row : t.rows) {
        SurvivalRecord r;
        r.id = row[id];
        r.time_days = csv::parse_double(row[time], "time_days");
        r.event = csv::parse_flag(row[event], "event");
        for (std::size_t k = 0; k < cov.size(); ++k) r.covariates[k] = csv::parse_double(row[cov[k]], kCovariateNames[k]);
        for (std::size_t col : exposure_cols) r.exposures.push_back(csv::parse_double(row[col], t.header[col]));
        c.records.push_back(std::move(r));
    }
    validate(c);
    return c;
}

Cohort read_cohort_csv(const std::filesystem::path& path) { return parse_cohort_csv(csv::read_text_file(path)); }

const char* to_string(Ties t) noexcept { return t == Ties::efron ? "efron" : "breslow"; }
const char* to_string(ExposureMode m) noexcept { return m == ExposureMode::presence ? "presence" : "volume_per_sd"; }

Ties parse_ties(std::string_view s) {
    if (s == "efron") return Ties::efron;
    if (s == "breslow") return Ties::breslow;
    fail(ErrorCode::invalid_argument, "unknown tie method '" + std::string(s) + "'");
}

ExposureMode parse_exposure_mode(std::string_view s) {
    if (s == "presence") return ExposureMode::presence;
    if (s == "volume_per_sd" || s == "volume") return ExposureMode::volume_per_sd;
    fail(ErrorCode::invalid_argument, "unknown exposure mode '" + std::string(s) + "'");
}

CoxEvaluation cox_evaluate(std::span<const double> time, std::span<const std::uint8_t> event, const Eigen::MatrixXd& x,
                           const Eigen::VectorXd& beta, Ties ties) {
    const auto n = static_cast<Eigen::Index>(time.size());
    const Eigen::Index p = x.cols();
    require(x.rows() == n && static_cast<Eigen::Index>(event.size()) == n && beta.size() == p,
            ErrorCode::invalid_argument, "cox inputs differ in size");
    const Eigen::VectorXd eta = x * beta;
    const double shift = n > 0 ? eta.maxCoeff() : 0.0;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return time[a] > time[b]; });

    CoxEvaluation ev;
    ev.gradient = Eigen::VectorXd::Zero(p);
    ev.information = Eigen::MatrixXd::Zero(p, p);
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && time[order[j]] == time[order[i]]) ++j;
        double d0 = 0.0;
        Eigen::VectorXd d1 = Eigen::VectorXd::Zero(p);
        Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(p, p);
        int d = 0;
        for (std::size_t k = i; k < j; ++k) {
            const Eigen::Index r = order[k];
            const double w = std::exp(eta[r] - shift);
            const Eigen::VectorXd xr = x.row(r).transpose();
            s0 += w;
            s1 += w * xr;
            s2.noalias() += w * xr * xr.transpose();
            if (event[r]) {
                ++d;
                d0 += w;
                d1 += w * xr;
                d2.noalias() += w * xr * xr.transpose();
                ev.log_likelihood += eta[r];
                ev.gradient += xr;
            }
        }
        for (int l = 0; l < d; ++l) {
            const double f = ties == Ties::efron ? static_cast<double>(l) / d : 0.0;
            const double den = s0 - f * d0;
            const Eigen::VectorXd num1 = s1 - f * d1;
            ev.log_likelihood -= shift + std::log(den);
            ev.gradient -= num1 / den;
            ev.information += (s2 - f * d2) / den - num1 * num1.transpose() / (den * den);
        }
        i = j;
    }
    return ev;
}

CoxFit cox_fit_matrix(std::span<const double> time, std::span<const std::uint8_t> event, const Eigen::MatrixXd& x,
                      const CoxOptions& options) {
    const auto n = static_cast<Eigen::Index>(time.size());
    require(n > 0 && x.rows() == n && static_cast<Eigen::Index>(event.size()) == n && x.cols() >= 1,
            ErrorCode::invalid_argument, "cox inputs differ in size");
    require(options.max_iterations >= 1, ErrorCode::invalid_argument, "max_iterations must be positive");
    require(x.allFinite(), ErrorCode::invalid_argument, "design matrix must be finite");
    std::size_t events = 0;
    for (std::size_t i = 0; i < time.size(); ++i) {
        require(std::isfinite(time[i]) && time[i] > 0.0, ErrorCode::invalid_argument, "follow-up must be positive");
        events += event[i] != 0;
    }
    require(events > 0, ErrorCode::domain, "zero events");
    require(events >= 2, ErrorCode::domain, "at least 2 events are required");

    // Centering leaves beta unchanged and keeps the risk-set sums well scaled.
    const Eigen::RowVectorXd means = x.colwise().mean();
    const Eigen::MatrixXd xc = x.rowwise() - means;
    const Eigen::Index p = x.cols();
    Eigen::VectorXd scale(p);
    for (Eigen::Index c = 0; c < p; ++c) scale[c] = std::sqrt(xc.col(c).squaredNorm() / static_cast<double>(n));
    {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
        qr.setThreshold(1e-10);
        require(qr.rank() == p && scale.minCoeff() > 0.0, ErrorCode::domain, "rank deficiency in the design matrix");
    }

    CoxFit fit;
    fit.beta = Eigen::VectorXd::Zero(p);
    CoxEvaluation ev = cox_evaluate(time, event, xc, fit.beta, options.ties);
    for (int it = 1; it <= options.max_iterations; ++it) {
        fit.iterations = it;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.information);
        Eigen::VectorXd step;
        if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all())
            step = ldlt.solve(ev.gradient);
        else
            step = ev.gradient / std::max(1.0, ev.information.diagonal().cwiseAbs().maxCoeff());
        Eigen::VectorXd candidate = fit.beta + step;
        CoxEvaluation next = cox_evaluate(time, event, xc, candidate, options.ties);
        // Near the optimum the gain falls below rounding in the likelihood.
        const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(ev.log_likelihood));
        auto acceptable = [&](const CoxEvaluation& e) { return e.log_likelihood >= ev.log_likelihood - noise; };
        for (int halving = 0; halving < 40 && !acceptable(next); ++halving) {
            step *= 0.5;
            candidate = fit.beta + step;
            next = cox_evaluate(time, event, xc, candidate, options.ties);
        }
        // A stalled line search at a stationary point is convergence, not failure.
        if (!std::isfinite(next.log_likelihood) || !acceptable(next)) {
            fit.converged = ev.gradient.cwiseAbs().maxCoeff() < options.gradient_tolerance;
            break;
        }
        const double change = std::abs(next.log_likelihood - ev.log_likelihood);
        fit.beta = candidate;
        ev = std::move(next);
        require(((fit.beta.array() * scale.array()).abs() < kSeparationLimit).all(), ErrorCode::numeric,
                "monotone likelihood (separation): coefficient diverging");
        if (change <= options.tolerance * std::max(1.0, std::abs(ev.log_likelihood)) &&
            ev.gradient.cwiseAbs().maxCoeff() < options.gradient_tolerance) {
            fit.converged = true;
            break;
        }
    }
    fit.log_likelihood = ev.log_likelihood;
    fit.gradient = ev.gradient;
    fit.information = ev.information;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.information);
    const bool definite = ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all();
    // Under separation the gradient and the information both vanish while
    // their ratio, the Newton step, stays near one per SD.
    require(definite && ((ldlt.solve(ev.gradient).array() * scale.array()).abs() < kStationaryStep).all(),
            ErrorCode::numeric, "monotone likelihood (separation): coefficient diverging");
    const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
    fit.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    return fit;
}

namespace {

double sample_sd(std::span<const double> v) {
    const auto s = evaluate::summarize(v);
    return s && s->sd ? *s->sd : 0.0;
}

} // namespace

ExposureFit fit_exposure(const Cohort& cohort, std::span<const double> exposure, const ModelSpec& spec,
                         std::span<const std::size_t> rows) {
    require(exposure.size() == cohort.records.size(), ErrorCode::invalid_argument,
            "exposure length differs from the cohort size");
    std::vector<std::size_t> all;
    if (rows.empty()) {
        all.resize(cohort.records.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        rows = all;
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index p = spec.adjust ? 1 + static_cast<Eigen::Index>(kCovariateNames.size()) : 1;
    std::vector<double> time(rows.size()), value(rows.size());
    std::vector<std::uint8_t> event(rows.size());
    Eigen::MatrixXd x(n, p);
    ExposureFit out;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = cohort.records[rows[static_cast<std::size_t>(i)]];
        time[static_cast<std::size_t>(i)] = r.time_days;
        event[static_cast<std::size_t>(i)] = r.event ? 1 : 0;
        out.events += r.event;
        value[static_cast<std::size_t>(i)] = exposure[rows[static_cast<std::size_t>(i)]];
        if (spec.adjust)
            for (std::size_t k = 0; k < kCovariateNames.size(); ++k)
                x(i, static_cast<Eigen::Index>(k) + 1) = r.covariates[k];
    }
    if (spec.mode == ExposureMode::presence) {
        for (Eigen::Index i = 0; i < n; ++i) x(i, 0) = value[static_cast<std::size_t>(i)] > 0.0 ? 1.0 : 0.0;
        out.exposure_sd = 1.0;
    } else {
        out.exposure_sd = sample_sd(value);
        require(out.exposure_sd > 0.0, ErrorCode::domain, "exposure is constant");
        for (Eigen::Index i = 0; i < n; ++i) x(i, 0) = value[static_cast<std::size_t>(i)] / out.exposure_sd;
    }
    out.fit = cox_fit_matrix(time, event, x, spec.cox);
    const double b = out.fit.beta[0], se = out.fit.se[0];
    out.hr = std::exp(b);
    out.hr_lower = std::exp(b - 1.96 * se);
    out.hr_upper = std::exp(b + 1.96 * se);
    return out;
}

ExposureFit cox_fit(const Cohort& cohort, const ModelSpec& spec) {
    const auto e = cohort.exposure(spec.exposure);
    return fit_exposure(cohort, e, spec);
}

HrBootstrap bootstrap_hr(const Cohort& cohort, std::span<const double> exposure_a, const ModelSpec& a,
                         std::span<const double> exposure_b, const ModelSpec* b,
                         const evaluate::BootstrapOptions& options) {
    HrBootstrap out;
    out.fit_a = fit_exposure(cohort, exposure_a, a);
    if (b) out.fit_b = fit_exposure(cohort, exposure_b, *b);
    auto statistic = [&](std::span<const double> exposure, const ModelSpec& spec) -> evaluate::ResampleStatistic {
        return [&cohort, exposure, &spec](std::span<const std::size_t> idx) -> std::optional<double> {
            try {
                const ExposureFit f = fit_exposure(cohort, exposure, spec, idx);
                if (!f.fit.converged) return std::nullopt;
                return f.hr;
            } catch (const Error&) {
                return std::nullopt;
            }
        };
    };
    std::vector<evaluate::ResampleStatistic> stats{statistic(exposure_a, a)};
    if (b) stats.push_back(statistic(exposure_b, *b));
    const auto res = evaluate::bootstrap(cohort.records.size(), stats, options);
    out.hr_a = res.intervals[0];
    if (b) {
        out.hr_b = res.intervals[1];
        out.difference_p = res.difference_p;
    }
    out.redraws = res.redraws;
    return out;
}

HrBootstrap bootstrap_hr(const Cohort& cohort, const ModelSpec& a, const ModelSpec* b,
                         const evaluate::BootstrapOptions& options) {
    const auto ea = cohort.exposure(a.exposure);
    const std::vector<double> eb = b ? cohort.exposure(b->exposure) : std::vector<double>{};
    return bootstrap_hr(cohort, ea, a, eb, b, options);
}

std::string significance_marker(std::optional<double> p) {
    if (!p) return "";
    if (*p < 0.05) return "**";
    if (*p < 0.1) return "*";
    return "";
}

namespace {

std::unordered_map<std::string, std::size_t> participant_index(const Cohort& cohort) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cohort.records.size(); ++i)
        require(index.emplace(cohort.records[i].id, i).second, ErrorCode::invalid_argument,
                "duplicate participant id '" + cohort.records[i].id + "'");
    return index;
}

/// Adds the volumes of kept lesions to `out`, in table order.
template <class Keep>
void add_lesion_volumes(const std::unordered_map<std::string, std::size_t>& index,
                        const std::vector<lesions::LesionRecord>& table, Keep&& keep, std::vector<double>& out) {
    for (const auto& l : table) {
        const auto it = index.find(l.participant_id);
        require(it != index.end(), ErrorCode::invalid_argument,
                "lesion table references unknown participant '" + l.participant_id + "'");
        if (keep(l)) out[it->second] += l.volume_mm3;
    }
}

bool constant(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

HRCell fit_cell(const Cohort& cohort, const std::vector<double>& exposure, const std::vector<double>& reference,
                const GridOptions& options, double vmin, double dmin) {
    HRCell cell;
    cell.volume_min = vmin;
    cell.attenuation_min = dmin;
    if (constant(exposure)) {
        cell.degenerate = true;
        cell.reason = "exposure is constant";
        return cell;
    }
    try {
        if (options.with_bootstrap) {
            const HrBootstrap b = bootstrap_hr(cohort, exposure, options.model, reference, &options.model, options.bootstrap);
            cell.hr = b.fit_a.hr;
            cell.ci = b.hr_a;
            cell.difference_p = b.difference_p;
        } else {
            const ExposureFit f = fit_exposure(cohort, exposure, options.model);
            cell.hr = f.hr;
            cell.ci = {f.hr, f.hr_lower, f.hr_upper};
        }
        cell.ci.estimate = cell.hr;
        cell.marker = significance_marker(cell.difference_p);
    } catch (const Error& e) {
        cell.degenerate = true;
        cell.reason = e.what();
    }
    return cell;
}

void check_edges(const std::vector<double>& v, const std::vector<double>& a) {
    require(!v.empty() && !a.empty(), ErrorCode::invalid_argument, "grid needs at least one edge per axis");
    for (double e : v) require(std::isfinite(e), ErrorCode::invalid_argument, "grid edges must be finite");
    for (double e : a) require(std::isfinite(e), ErrorCode::invalid_argument, "grid edges must be finite");
}

} // namespace

HRGrid exclusion_grid(const Cohort& cohort, const std::vector<lesions::LesionRecord>& table,
                      const std::vector<double>& volume_edges, const std::vector<double>& attenuation_edges,
                      const GridOptions& options) {
    check_edges(volume_edges, attenuation_edges);
    const auto index = participant_index(cohort);
    std::vector<double> reference(cohort.records.size(), 0.0);
    add_lesion_volumes(index, table, [](const lesions::LesionRecord&) { return true; }, reference);
    HRGrid grid;
    grid.volume_edges = volume_edges;
    grid.attenuation_edges = attenuation_edges;
    grid.reference = fit_exposure(cohort, reference, options.model);
    for (double vmin : volume_edges) {
        auto& row = grid.cells.emplace_back();
        for (double dmin : attenuation_edges) {
            std::vector<double> exposure(cohort.records.size(), 0.0);
            add_lesion_volumes(
                index, table,
                [&](const lesions::LesionRecord& l) {
                    const bool small = l.volume_mm3 < vmin, faint = l.median_hu < dmin;
                    return !(options.exclude_either ? (small || faint) : (small && faint));
                },
                exposure);
            row.push_back(fit_cell(cohort, exposure, reference, options, vmin, dmin));
        }
    }
    return grid;
}

HRGrid inclusion_grid(const Cohort& cohort, const std::vector<lesions::LesionRecord>& automated,
                      const std::vector<lesions::LesionRecord>& false_negatives,
                      const std::vector<lesions::LesionRecord>& manual, const std::vector<double>& volume_edges,
                      const std::vector<double>& attenuation_edges, const GridOptions& options) {
    check_edges(volume_edges, attenuation_edges);
    const auto index = participant_index(cohort);
    auto all = [](const lesions::LesionRecord&) { return true; };
    std::vector<double> reference(cohort.records.size(), 0.0), base(cohort.records.size(), 0.0);
    add_lesion_volumes(index, manual, all, reference);
    add_lesion_volumes(index, automated, all, base);
    HRGrid grid;
    grid.volume_edges = volume_edges;
    grid.attenuation_edges = attenuation_edges;
    grid.reference = fit_exposure(cohort, reference, options.model);
    for (double vmin : volume_edges) {
        auto& row = grid.cells.emplace_back();
        for (double dmin : attenuation_edges) {
            std::vector<double> exposure = base;
            add_lesion_volumes(
                index, false_negatives,
                [&](const lesions::LesionRecord& l) {
                    const bool big = l.volume_mm3 >= vmin, dense = l.median_hu >= dmin;
                    return options.exclude_either ? (big || dense) : (big && dense);
                },
                exposure);
            row.push_back(fit_cell(cohort, exposure, reference, options, vmin, dmin));
        }
    }
    return grid;
}

namespace {

nlohmann::json fit_to_json(const ExposureFit& f) {
    return {{"hr", f.hr},
            {"hr_lower", f.hr_lower},
            {"hr_upper", f.hr_upper},
            {"beta", std::vector<double>(f.fit.beta.data(), f.fit.beta.data() + f.fit.beta.size())},
            {"se", std::vector<double>(f.fit.se.data(), f.fit.se.data() + f.fit.se.size())},
            {"log_likelihood", f.fit.log_likelihood},
            {"iterations", f.fit.iterations},
            {"converged", f.fit.converged},
            {"exposure_sd", f.exposure_sd},
            {"events", f.events}};
}

} // namespace

std::string fit_json(const ExposureFit& fit, const ModelSpec& spec) {
    nlohmann::json j = fit_to_json(fit);
    j["exposure"] = spec.exposure;
    j["mode"] = to_string(spec.mode);
    j["ties"] = to_string(spec.cox.ties);
    j["adjusted"] = spec.adjust;
    std::vector<std::string> terms{spec.exposure};
    if (spec.adjust) terms.insert(terms.end(), kCovariateNames.begin(), kCovariateNames.end());
    j["terms"] = terms;
    return j.dump();
}

std::string grid_json(const HRGrid& grid) {
    nlohmann::json j;
    j["volume_edges"] = grid.volume_edges;
    j["attenuation_edges"] = grid.attenuation_edges;
    j["reference"] = fit_to_json(grid.reference);
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& row : grid.cells) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& c : row) {
            nlohmann::json cj{{"volume_min", c.volume_min}, {"attenuation_min", c.attenuation_min},
                              {"degenerate", c.degenerate}};
            if (c.degenerate) {
                cj["reason"] = c.reason;
            } else {
                cj["hr"] = c.hr;
                cj["ci_lower"] = c.ci.lower;
                cj["ci_upper"] = c.ci.upper;
                cj["p"] = c.difference_p ? nlohmann::json(*c.difference_p) : nlohmann::json(nullptr);
                cj["marker"] = c.marker;
            }
            r.push_back(std::move(cj));
        }
        cells.push_back(std::move(r));
    }
    j["cells"] = std::move(cells);
    return j.dump();
}

} // namespace calcquant::survival
