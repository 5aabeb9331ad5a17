#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "calcquant/evaluate.hpp"
#include "calcquant/lesions.hpp"

namespace calcquant::survival {

inline constexpr std::array<const char*, 9> kCovariateNames{
    "age", "sex", "scanner64", "obesity", "hypertension", "diabetes", "hypercholesterolemia", "low_hdl", "smoker"};

struct SurvivalRecord {
    std::string id;
    double time_days = 0.0;
    bool event = false;
    /// In kCovariateNames order; all binary except age.
    std::array<double, 9> covariates{};
    /// In Cohort::exposure_names order.
    std::vector<double> exposures;
};

struct Cohort {
    std::vector<std::string> exposure_names;
    std::vector<SurvivalRecord> records;

    [[nodiscard]] std::size_t exposure_index(std::string_view name) const;
    [[nodiscard]] std::vector<double> exposure(std::string_view name) const;
};

/// Columns id, time_days, event, the nine covariates, then exposure columns.
[[nodiscard]] Cohort parse_cohort_csv(std::string_view text);
[[nodiscard]] Cohort read_cohort_csv(const std::filesystem::path& path);
void validate(const Cohort& c);

enum class Ties { efron, breslow };
enum class ExposureMode { presence, volume_per_sd };

[[nodiscard]] const char* to_string(Ties t) noexcept;
[[nodiscard]] const char* to_string(ExposureMode m) noexcept;
[[nodiscard]] Ties parse_ties(std::string_view s);
[[nodiscard]] ExposureMode parse_exposure_mode(std::string_view s);

struct CoxOptions {
    Ties ties = Ties::efron;
    int max_iterations = 100;
    double tolerance = 1e-9;      ///< relative log-likelihood change
    double gradient_tolerance = 1e-8;
};

struct CoxFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd se;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd information; ///< observed information at beta
    double log_likelihood = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Partial log-likelihood, gradient and observed information at beta.
struct CoxEvaluation {
    double log_likelihood = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd information;
};

[[nodiscard]] CoxEvaluation cox_evaluate(std::span<const double> time, std::span<const std::uint8_t> event,
                                         const Eigen::MatrixXd& x, const Eigen::VectorXd& beta, Ties ties);

/// Damped Newton maximization of the partial likelihood.
[[nodiscard]] CoxFit cox_fit_matrix(std::span<const double> time, std::span<const std::uint8_t> event,
                                    const Eigen::MatrixXd& x, const CoxOptions& options = {});

struct ModelSpec {
    std::string exposure; ///< exposure column name (ignored with explicit values)
    ExposureMode mode = ExposureMode::volume_per_sd;
    bool adjust = true; ///< include the nine covariates
    CoxOptions cox;
};

struct ExposureFit {
    CoxFit fit;
    double hr = 1.0;       ///< exp(beta) of the exposure term (per SD for volume)
    double hr_lower = 1.0; ///< Wald 95% interval
    double hr_upper = 1.0;
    double exposure_sd = 1.0; ///< SD used for standardization (1 for presence)
    std::size_t events = 0;
};

/// Fits the exposure (first term) plus optional covariates on the records
/// selected by `rows` (all when empty), with exposure values given per record.
[[nodiscard]] ExposureFit fit_exposure(const Cohort& cohort, std::span<const double> exposure, const ModelSpec& spec,
                                       std::span<const std::size_t> rows = {});

[[nodiscard]] ExposureFit cox_fit(const Cohort& cohort, const ModelSpec& spec);

struct HrBootstrap {
    ExposureFit fit_a;
    evaluate::BootstrapInterval hr_a;
    std::optional<ExposureFit> fit_b;
    std::optional<evaluate::BootstrapInterval> hr_b;
    std::optional<double> difference_p; ///< paired, HR_a vs HR_b
    std::size_t redraws = 0;
};

/// Participant-level bootstrap of the HR; resamples whose fit fails (no
/// events, rank deficiency, separation) are redrawn.
[[nodiscard]] HrBootstrap bootstrap_hr(const Cohort& cohort, std::span<const double> exposure_a, const ModelSpec& a,
                                       std::span<const double> exposure_b, const ModelSpec* b,
                                       const evaluate::BootstrapOptions& options);
[[nodiscard]] HrBootstrap bootstrap_hr(const Cohort& cohort, const ModelSpec& a, const ModelSpec* b,
                                       const evaluate::BootstrapOptions& options);

struct HRCell {
    double volume_min = 0.0;
    double attenuation_min = 0.0;
    bool degenerate = false;
    std::string reason;
    double hr = 0.0;
    evaluate::BootstrapInterval ci;
    std::optional<double> difference_p;
    std::string marker; ///< "**" p < .05, "*" p < .1
};

struct HRGrid {
    std::vector<double> volume_edges;
    std::vector<double> attenuation_edges;
    ExposureFit reference;
    std::vector<std::vector<HRCell>> cells; ///< [volume][attenuation]
};

struct GridOptions {
    ModelSpec model;
    evaluate::BootstrapOptions bootstrap{1000, 0, 1};
    bool exclude_either = false; ///< exclude on volume OR attenuation instead of AND
    bool with_bootstrap = true;
};

[[nodiscard]] std::string significance_marker(std::optional<double> p);

/// Each cell drops lesions below both minimums (or either, when
/// `exclude_either`), refits, and compares with the unmodified volume model.
[[nodiscard]] HRGrid exclusion_grid(const Cohort& cohort, const std::vector<lesions::LesionRecord>& lesions,
                                    const std::vector<double>& volume_edges,
                                    const std::vector<double>& attenuation_edges, const GridOptions& options);

/// Each cell adds false-negative lesions at or above both minimums to the
/// automated volume and compares with the manual volume model.
[[nodiscard]] HRGrid inclusion_grid(const Cohort& cohort, const std::vector<lesions::LesionRecord>& automated,
                                    const std::vector<lesions::LesionRecord>& false_negatives,
                                    const std::vector<lesions::LesionRecord>& manual,
                                    const std::vector<double>& volume_edges,
                                    const std::vector<double>& attenuation_edges, const GridOptions& options);

[[nodiscard]] std::string grid_json(const HRGrid& grid);
[[nodiscard]] std::string fit_json(const ExposureFit& fit, const ModelSpec& spec);

} // namespace calcquant::survival
