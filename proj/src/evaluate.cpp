#include "calcquant/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>
#include <unordered_set>

#include "calcquant/csv.hpp"
#include "calcquant/rng.hpp"

namespace calcquant::evaluate {

VoxelCounts voxel_counts(const Mask& pred, const Mask& ref) {
    require_same_grid(pred.grid(), ref.grid(), "prediction and reference masks differ");
    VoxelCounts c;
    for (std::size_t n = 0; n < pred.size(); ++n) {
        const bool p = pred[n] != 0, r = ref[n] != 0;
        if (p && r) ++c.tp;
        else if (p) ++c.fp;
        else if (r) ++c.fn;
        else ++c.tn;
    }
    return c;
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

} // namespace

ScanMetrics scan_metrics(const VoxelCounts& c, double voxel_volume) {
    require(std::isfinite(voxel_volume) && voxel_volume > 0.0, ErrorCode::invalid_argument,
            "voxel volume must be positive");
    ScanMetrics m;
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.fpv_mm3 = static_cast<double>(c.fp) * voxel_volume;
    m.reference_mm3 = static_cast<double>(c.tp + c.fn) * voxel_volume;
    m.has_icac = c.tp + c.fn > 0;
    return m;
}

std::optional<Summary> summarize(std::span<const double> values) {
    if (values.empty()) return std::nullopt;
    Summary s;
    s.n = values.size();
    // Deviations from the first value keep constant inputs exactly constant.
    const double shift = values[0];
    double acc = 0.0;
    for (double v : values) acc += v - shift;
    const double m = acc / static_cast<double>(s.n);
    s.mean = shift + m;
    if (s.n >= 2) {
        double ss = 0.0;
        for (double v : values) {
            const double d = (v - shift) - m;
            ss += d * d;
        }
        s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

MetricsReport aggregate_metrics(std::span<const VoxelCounts> counts, double voxel_volume) {
    require(!counts.empty(), ErrorCode::invalid_argument, "no scans to aggregate");
    MetricsReport r;
    VoxelCounts total;
    std::vector<double> recalls, precisions, fpv_icac, fpv_free;
    for (const auto& c : counts) {
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn += c.fn;
        total.tn += c.tn;
        const ScanMetrics m = scan_metrics(c, voxel_volume);
        if (m.has_icac) {
            ++r.scans_with_icac;
            recalls.push_back(*m.recall);
            fpv_icac.push_back(m.fpv_mm3);
        } else {
            ++r.scans_icac_free;
            fpv_free.push_back(m.fpv_mm3);
        }
        if (m.precision) precisions.push_back(*m.precision);
        r.per_scan.push_back(m);
    }
    r.dataset_recall = ratio(total.tp, total.tp + total.fn);
    r.dataset_precision = ratio(total.tp, total.tp + total.fp);
    r.participant_recall = summarize(recalls);
    r.participant_precision = summarize(precisions);
    r.fpv_with_icac = summarize(fpv_icac);
    r.fpv_icac_free = summarize(fpv_free);
    return r;
}

std::vector<CurvePoint> sweep_curves(std::span<const SweepInput> scans, std::span<const double> thresholds) {
    require(!scans.empty(), ErrorCode::invalid_argument, "no scans to sweep");
    require(std::is_sorted(thresholds.begin(), thresholds.end()), ErrorCode::invalid_argument,
            "thresholds must be sorted ascending");
    for (double t : thresholds)
        require(std::isfinite(t) && t >= 0.0 && t <= 1.0, ErrorCode::invalid_argument,
                "thresholds must lie in [0, 1]");
    struct Tally {
        std::uint64_t tp = 0, fp = 0, ref = 0;
        double fpv_sum = 0.0;
        std::size_t icac_scans = 0;
    };
    std::vector<Tally> tally(thresholds.size());
    for (const auto& s : scans) {
        require(s.prob.size() == s.candidates.size() && s.prob.size() == s.reference.size(),
                ErrorCode::invalid_argument, "sweep inputs differ in size");
        require(s.voxel_volume > 0.0, ErrorCode::invalid_argument, "voxel volume must be positive");
        // Candidate probabilities in ascending order with their reference flags;
        // suffix sums give the positives above any threshold.
        std::vector<std::pair<double, std::uint8_t>> cand;
        std::uint64_t ref_total = 0;
        for (std::size_t n = 0; n < s.prob.size(); ++n) {
            ref_total += s.reference[n] != 0;
            if (s.candidates[n]) cand.emplace_back(s.prob[n], s.reference[n] != 0);
        }
        std::sort(cand.begin(), cand.end());
        std::vector<std::uint64_t> ref_above(cand.size() + 1, 0);
        for (std::size_t i = cand.size(); i-- > 0;) ref_above[i] = ref_above[i + 1] + cand[i].second;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            const auto first = std::upper_bound(cand.begin(), cand.end(), thresholds[t],
                                                [](double v, const auto& e) { return v < e.first; }) -
                               cand.begin();
            const std::uint64_t predicted = cand.size() - static_cast<std::size_t>(first);
            const std::uint64_t tp = ref_above[static_cast<std::size_t>(first)];
            tally[t].tp += tp;
            tally[t].fp += predicted - tp;
            tally[t].ref += ref_total;
            if (ref_total > 0) {
                tally[t].fpv_sum += static_cast<double>(predicted - tp) * s.voxel_volume;
                ++tally[t].icac_scans;
            }
        }
    }
    std::vector<CurvePoint> out(thresholds.size());
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        out[t].threshold = thresholds[t];
        out[t].recall = ratio(tally[t].tp, tally[t].ref);
        out[t].precision = ratio(tally[t].tp, tally[t].tp + tally[t].fp);
        if (tally[t].icac_scans > 0) out[t].mean_fpv_mm3 = tally[t].fpv_sum / static_cast<double>(tally[t].icac_scans);
    }
    return out;
}

std::vector<double> uniform_thresholds(std::size_t count) {
    require(count >= 2, ErrorCode::invalid_argument, "need at least two thresholds");
    std::vector<double> t(count);
    for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<double>(i) / static_cast<double>(count - 1);
    return t;
}

void validate_pairs(std::span<const Pair> pairs) {
    std::unordered_set<std::string> seen;
    for (const auto& p : pairs) {
        require(std::isfinite(p.a) && std::isfinite(p.b), ErrorCode::invalid_argument,
                "paired values must be finite");
        require(seen.insert(p.id).second, ErrorCode::invalid_argument, "duplicate participant id '" + p.id + "'");
    }
}

std::vector<double> midranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return values[x] < values[y]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument,
            "correlation needs two equal-length samples");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    require(sxx > 0.0 && syy > 0.0, ErrorCode::domain, "correlation undefined: constant vector");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double icc21(std::span<const Pair> pairs) {
    require(pairs.size() >= 3, ErrorCode::invalid_argument, "ICC needs at least 3 pairs");
    const double n = static_cast<double>(pairs.size());
    constexpr double k = 2.0;
    double ca = 0.0, cb = 0.0;
    for (const auto& p : pairs) {
        ca += p.a;
        cb += p.b;
    }
    ca /= n;
    cb /= n;
    const double grand = 0.5 * (ca + cb);
    double ssr = 0.0, sse = 0.0;
    for (const auto& p : pairs) {
        const double row = 0.5 * (p.a + p.b);
        ssr += (row - grand) * (row - grand);
        const double ea = p.a - row - ca + grand, eb = p.b - row - cb + grand;
        sse += ea * ea + eb * eb;
    }
    ssr *= k;
    const double ssc = n * ((ca - grand) * (ca - grand) + (cb - grand) * (cb - grand));
    const double msr = ssr / (n - 1.0);
    const double msc = ssc / (k - 1.0);
    const double mse = sse / ((n - 1.0) * (k - 1.0));
    const double den = msr + (k - 1.0) * mse + k / n * (msc - mse);
    require(den > 0.0, ErrorCode::domain, "ICC undefined: zero variance in both raters");
    return (msr - mse) / den;
}

double spearman(std::span<const Pair> pairs) {
    require(pairs.size() >= 3, ErrorCode::invalid_argument, "Spearman needs at least 3 pairs");
    std::vector<double> a, b;
    for (const auto& p : pairs) {
        a.push_back(p.a);
        b.push_back(p.b);
    }
    return pearson(midranks(a), midranks(b));
}

BlandAltman bland_altman(std::span<const Pair> pairs, BlandAltmanTransform transform) {
    require(pairs.size() >= 2, ErrorCode::invalid_argument, "Bland-Altman needs at least 2 pairs");
    std::vector<double> d;
    d.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (transform == BlandAltmanTransform::cube_root) d.push_back(std::cbrt(p.a) - std::cbrt(p.b));
        else d.push_back(p.a - p.b);
    }
    const Summary s = *summarize(d);
    BlandAltman ba;
    ba.n = s.n;
    ba.mean_difference = s.mean;
    ba.sd = *s.sd;
    ba.lower = s.mean - 1.96 * ba.sd;
    ba.upper = s.mean + 1.96 * ba.sd;
    return ba;
}

double quantile_sorted(std::span<const double> sorted, double q) {
    require(!sorted.empty(), ErrorCode::invalid_argument, "quantile of an empty sample");
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    if (sorted[lo] == sorted[hi]) return sorted[lo];
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double paired_difference_p(std::span<const double> d) {
    require(!d.empty(), ErrorCode::invalid_argument, "no bootstrap differences");
    std::size_t le = 0, ge = 0;
    for (double x : d) {
        le += x <= 0.0;
        ge += x >= 0.0;
    }
    const double n = static_cast<double>(d.size());
    return std::min(1.0, 2.0 * std::min(static_cast<double>(le) / n, static_cast<double>(ge) / n));
}

BootstrapResult bootstrap(std::size_t n, const std::vector<ResampleStatistic>& statistics,
                          const BootstrapOptions& options) {
    require(n >= 1, ErrorCode::invalid_argument, "bootstrap needs data");
    require(!statistics.empty(), ErrorCode::invalid_argument, "bootstrap needs a statistic");
    require(options.replications >= 100, ErrorCode::invalid_argument, "bootstrap needs at least 100 replications");
    const auto reps = static_cast<std::size_t>(options.replications);
    const std::size_t cap = 10 * reps;
    const std::size_t m = statistics.size();

    BootstrapResult res;
    res.replications = options.replications;
    res.seed = options.seed;
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    for (const auto& stat : statistics) {
        const auto v = stat(all);
        require(v.has_value() && std::isfinite(*v), ErrorCode::domain, "statistic undefined on the full sample");
        res.intervals.push_back({*v, 0.0, 0.0});
    }

    std::vector<double> values(reps * m);
    std::vector<std::size_t> redraws(reps, 0);
    auto run = [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> idx(n);
        std::vector<double> row(m);
        for (std::size_t r = begin; r < end; ++r) {
            const std::uint64_t base = stream_seed(options.seed, r);
            for (std::size_t attempt = 0;; ++attempt) {
                require(attempt <= cap, ErrorCode::numeric, "bootstrap: too many unusable resamples");
                Rng rng(stream_seed(base, attempt));
                for (auto& i : idx) i = rng.index(n);
                bool ok = true;
                for (std::size_t s = 0; s < m && ok; ++s) {
                    const auto v = statistics[s](idx);
                    ok = v.has_value() && std::isfinite(*v);
                    if (ok) row[s] = *v;
                }
                if (ok) break;
                ++redraws[r];
            }
            std::copy(row.begin(), row.end(), values.begin() + static_cast<std::ptrdiff_t>(r * m));
        }
    };
    const std::size_t jobs = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.jobs, 1)), 1, reps);
    if (jobs == 1) {
        run(0, reps);
    } else {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(jobs);
        for (std::size_t j = 0; j < jobs; ++j)
            threads.emplace_back([&, j] {
                try {
                    run(reps * j / jobs, reps * (j + 1) / jobs);
                } catch (...) {
                    errors[j] = std::current_exception();
                }
            });
        for (auto& t : threads) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    res.redraws = std::accumulate(redraws.begin(), redraws.end(), std::size_t{0});
    require(res.redraws <= cap, ErrorCode::numeric, "bootstrap: too many unusable resamples");

    std::vector<double> column(reps);
    for (std::size_t s = 0; s < m; ++s) {
        for (std::size_t r = 0; r < reps; ++r) column[r] = values[r * m + s];
        std::sort(column.begin(), column.end());
        res.intervals[s].lower = quantile_sorted(column, 0.025);
        res.intervals[s].upper = quantile_sorted(column, 0.975);
    }
    if (m >= 2) {
        for (std::size_t r = 0; r < reps; ++r) column[r] = values[r * m] - values[r * m + 1];
        res.difference_p = paired_difference_p(column);
    }
    return res;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const int> grades) {
    std::vector<double> magnitude;
    std::vector<int> sign;
    for (int g : grades) {
        require(g >= -2 && g <= 2, ErrorCode::invalid_argument, "grades must lie in {-2, ..., 2}");
        if (g == 0) continue;
        magnitude.push_back(std::abs(g));
        sign.push_back(g > 0 ? 1 : -1);
    }
    require(!magnitude.empty(), ErrorCode::domain, "no non-zero grades");
    WilcoxonResult r;
    r.n = magnitude.size();
    const auto ranks = midranks(magnitude);
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (sign[i] > 0) r.w_plus += ranks[i];
    const double n = static_cast<double>(r.n);
    double ties = 0.0;
    std::vector<double> sorted = magnitude;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i);
        ties += t * t * t - t;
        i = j;
    }
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if (!(var > 0.0)) {
        r.z = 0.0;
        r.p = 1.0;
        return r;
    }
    r.z = (r.w_plus - n * (n + 1.0) / 4.0) / std::sqrt(var);
    r.p = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
    return r;
}

std::vector<int> grades_from_counts(const std::array<std::size_t, 5>& counts) {
    std::vector<int> g;
    for (int c = 0; c < 5; ++c) g.insert(g.end(), counts[static_cast<std::size_t>(c)], 2 - c);
    return g;
}

AgreementReport agreement(std::span<const Pair> pairs, const BootstrapOptions& options) {
    validate_pairs(pairs);
    AgreementReport rep;
    rep.n = pairs.size();
    rep.icc = icc21(pairs);
    rep.spearman = spearman(pairs);
    rep.raw = bland_altman(pairs, BlandAltmanTransform::identity);
    rep.cube_root = bland_altman(pairs, BlandAltmanTransform::cube_root);
    auto gather = [&](std::span<const std::size_t> idx) {
        std::vector<Pair> v;
        v.reserve(idx.size());
        for (std::size_t i : idx) v.push_back(pairs[i]);
        return v;
    };
    auto guarded = [&](auto fn) -> ResampleStatistic {
        return [&, fn](std::span<const std::size_t> idx) -> std::optional<double> {
            try {
                return fn(gather(idx));
            } catch (const Error&) {
                return std::nullopt;
            }
        };
    };
    const auto result = bootstrap(pairs.size(),
                                  {guarded([](const std::vector<Pair>& v) { return icc21(v); }),
                                   guarded([](const std::vector<Pair>& v) { return spearman(v); })},
                                  options);
    rep.icc_ci = result.intervals[0];
    rep.spearman_ci = result.intervals[1];
    rep.replications = result.replications;
    rep.seed = result.seed;
    return rep;
}

std::vector<Pair> parse_pairs_csv(std::string_view text) {
    const csv::Table t = csv::parse(text);
    const std::size_t id = t.column("id"), a = t.column("manual_mm3"), b = t.column("auto_mm3");
    std::vector<Pair> out;
    for (const auto& row : t.rows)
        out.push_back({row[id], csv::parse_double(row[a], "manual_mm3"), csv::parse_double(row[b], "auto_mm3")});
    validate_pairs(out);
    return out;
}

std::vector<int> parse_grades_csv(std::string_view text) {
    const csv::Table t = csv::parse(text);
    const std::size_t g = t.column("grade");
    (void)t.column("region_id");
    std::vector<int> out;
    for (const auto& row : t.rows) {
        const long long v = csv::parse_integer(row[g], "grade");
        require(v >= -2 && v <= 2, ErrorCode::format, "grades must lie in {-2, ..., 2}");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

std::string format_curve_csv(std::span<const CurvePoint> points) {
    auto opt = [](const std::optional<double>& v) { return v ? csv::format_number(*v) : std::string(); };
    std::string out = csv::join_row({"threshold", "recall", "precision", "mean_fpv"});
    for (const auto& p : points)
        out += csv::join_row({csv::format_number(p.threshold), opt(p.recall), opt(p.precision), opt(p.mean_fpv_mm3)});
    return out;
}

} // namespace calcquant::evaluate
