#include "calcquant/losses.hpp"

#include <algorithm>
#include <cmath>

#include "calcquant/csv.hpp"
#include "calcquant/rng.hpp"

namespace calcquant::losses {

namespace {

void check_input(const LossInput& x) {
    require(x.pred.size() == x.target.size() && x.pred.size() == x.candidates.size(), ErrorCode::invalid_argument,
            "loss inputs differ in size");
    bool any = false;
    for (std::size_t n = 0; n < x.pred.size(); ++n) {
        if (!x.candidates[n]) continue;
        any = true;
        require(std::isfinite(x.pred[n]), ErrorCode::numeric, "non-finite prediction");
    }
    require(any, ErrorCode::invalid_argument, "empty candidate set");
}

struct Clamped {
    double p;
    bool active; ///< false on the flat clamped parts
};

Clamped clamp_pred(double p) {
    if (p < kClampEps) return {kClampEps, false};
    if (p > 1.0 - kClampEps) return {1.0 - kClampEps, false};
    return {p, true};
}

} // namespace

LossInput make_input(const ProbMap& pred, const Mask& target, const Mask& candidates) {
    require_same_grid(pred.grid(), target.grid(), "prediction and target differ");
    require_same_grid(pred.grid(), candidates.grid(), "prediction and candidates differ");
    return {pred.samples(), target.samples(), candidates.samples()};
}

const char* to_string(LossKind k) noexcept {
    switch (k) {
    case LossKind::soft_dice:
        return "soft_dice";
    case LossKind::focal:
        return "focal";
    case LossKind::weighted_cross_entropy:
        return "weighted_cross_entropy";
    default:
        return "cross_entropy";
    }
}

LossKind parse_loss_kind(std::string_view s) {
    if (s == "cross_entropy" || s == "ce") return LossKind::cross_entropy;
    if (s == "soft_dice" || s == "dice") return LossKind::soft_dice;
    if (s == "focal") return LossKind::focal;
    if (s == "weighted_cross_entropy" || s == "wce") return LossKind::weighted_cross_entropy;
    fail(ErrorCode::invalid_argument, "unknown loss '" + std::string(s) + "'");
}

LossValueGrad weighted_cross_entropy(const LossInput& x, std::span<const double> weights) {
    check_input(x);
    require(weights.size() == x.pred.size(), ErrorCode::invalid_argument, "weights differ in size from inputs");
    LossValueGrad out;
    out.grad.assign(x.pred.size(), 0.0);
    double wsum = 0.0, acc = 0.0;
    for (std::size_t n = 0; n < x.pred.size(); ++n) {
        if (!x.candidates[n]) continue;
        const double w = weights[n];
        require(std::isfinite(w) && w > 0.0, ErrorCode::invalid_argument, "weights must be positive");
        const auto [p, active] = clamp_pred(x.pred[n]);
        const bool t = x.target[n] != 0;
        acc += w * (t ? std::log(p) : std::log1p(-p));
        if (active) out.grad[n] = w * (t ? -1.0 / p : 1.0 / (1.0 - p));
        wsum += w;
    }
    out.value = -acc / wsum;
    for (double& g : out.grad) g /= wsum;
    return out;
}

LossValueGrad cross_entropy(const LossInput& x) {
    const std::vector<double> ones(x.pred.size(), 1.0);
    return weighted_cross_entropy(x, ones);
}

LossValueGrad soft_dice(const LossInput& x, double epsilon) {
    check_input(x);
    require(std::isfinite(epsilon) && epsilon > 0.0, ErrorCode::invalid_argument, "dice epsilon must be positive");
    double pt = 0.0, ps = 0.0, ts = 0.0;
    for (std::size_t n = 0; n < x.pred.size(); ++n) {
        if (!x.candidates[n]) continue;
        const double p = x.pred[n];
        const double t = x.target[n] ? 1.0 : 0.0;
        pt += p * t;
        ps += p;
        ts += t;
    }
    const double num = 2.0 * pt + epsilon;
    const double den = ps + ts + epsilon;
    LossValueGrad out;
    out.value = 1.0 - num / den;
    out.grad.assign(x.pred.size(), 0.0);
    for (std::size_t n = 0; n < x.pred.size(); ++n) {
        if (!x.candidates[n]) continue;
        const double t = x.target[n] ? 1.0 : 0.0;
        out.grad[n] = -(2.0 * t * den - num) / (den * den);
    }
    return out;
}

LossValueGrad focal(const LossInput& x, double gamma) {
    check_input(x);
    require(std::isfinite(gamma) && gamma >= 0.0, ErrorCode::invalid_argument, "focal gamma must be non-negative");
    LossValueGrad out;
    out.grad.assign(x.pred.size(), 0.0);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < x.pred.size(); ++n) {
        if (!x.candidates[n]) continue;
        ++count;
        const auto [p, active] = clamp_pred(x.pred[n]);
        if (x.target[n]) {
            const double q = 1.0 - p;
            const double lp = std::log(p);
            acc += std::pow(q, gamma) * lp;
            if (active) out.grad[n] = (gamma > 0.0 ? gamma * std::pow(q, gamma - 1.0) * lp : 0.0) - std::pow(q, gamma) / p;
        } else {
            const double lq = std::log1p(-p);
            acc += std::pow(p, gamma) * lq;
            if (active)
                out.grad[n] = (gamma > 0.0 ? -gamma * std::pow(p, gamma - 1.0) * lq : 0.0) + std::pow(p, gamma) / (1.0 - p);
        }
    }
    const double inv = 1.0 / static_cast<double>(count);
    out.value = -acc * inv;
    for (double& g : out.grad) g *= inv;
    return out;
}

double lesion_weight(std::size_t size) noexcept {
    if (size <= 10) return 10.0;
    if (size >= 100) return 1.0;
    return 10.0 - (static_cast<double>(size) - 10.0) / 10.0;
}

std::vector<double> lesion_weights(const lesions::Labeling& lab) {
    std::vector<double> w(lab.labels.size(), 1.0);
    for (std::size_t n = 0; n < w.size(); ++n)
        if (lab.labels[n] > 0) w[n] = lesion_weight(lab.sizes[lab.labels[n] - 1]);
    return w;
}

LossValueGrad weighted_cross_entropy(const LossInput& x, const lesions::Labeling& target_components) {
    require(target_components.labels.size() == x.pred.size(), ErrorCode::invalid_argument,
            "labeling differs in size from inputs");
    for (std::size_t n = 0; n < x.pred.size(); ++n)
        require((target_components.labels[n] > 0) == (x.target[n] != 0), ErrorCode::invalid_argument,
                "labeling does not match the target mask");
    const auto w = lesion_weights(target_components);
    return weighted_cross_entropy(x, w);
}

LossValueGrad evaluate(LossKind kind, const LossInput& x, const Grid3& grid, const lesions::Labeling* components) {
    switch (kind) {
    case LossKind::soft_dice:
        return soft_dice(x);
    case LossKind::focal:
        return focal(x);
    case LossKind::weighted_cross_entropy: {
        if (components) return weighted_cross_entropy(x, *components);
        const Mask target(grid, std::vector<std::uint8_t>(x.target.begin(), x.target.end()));
        return weighted_cross_entropy(x, lesions::label_components(target, 26));
    }
    default:
        return cross_entropy(x);
    }
}

std::vector<ToyPatch> make_toy_patches(std::size_t count, std::uint64_t seed, std::int32_t size) {
    require(count >= 1 && size >= 4, ErrorCode::invalid_argument, "toy patches need count >= 1 and size >= 4");
    Grid3 g;
    g.dims = {size, size, 1};
    g.spacing = {0.5, 0.5, 0.5};
    std::vector<ToyPatch> out;
    out.reserve(count);
    for (std::size_t p = 0; p < count; ++p) {
        Rng rng(stream_seed(seed, p));
        std::vector<double> hu(g.voxel_count());
        for (double& v : hu) v = rng.coin() ? rng.uniform(-100.0, 100.0) : rng.uniform(140.0, 260.0);
        const int blobs = 1 + static_cast<int>(rng.index(3));
        for (int b = 0; b < blobs; ++b) {
            const double ci = rng.uniform(1.0, size - 2.0), cj = rng.uniform(1.0, size - 2.0);
            const double r = rng.uniform(0.8, 2.5);
            for (std::int32_t j = 0; j < size; ++j)
                for (std::int32_t i = 0; i < size; ++i)
                    if (std::hypot(i - ci, j - cj) <= r) hu[g.index(i, j, 0)] = rng.uniform(300.0, 700.0);
        }
        std::vector<std::uint8_t> target(hu.size()), cand(hu.size());
        for (std::size_t n = 0; n < hu.size(); ++n) {
            target[n] = hu[n] >= 300.0 ? 1 : 0;
            cand[n] = hu[n] > 130.0 ? 1 : 0;
        }
        out.push_back({Volume(g, std::move(hu)), Mask(g, std::move(target)), Mask(g, std::move(cand))});
    }
    return out;
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double feature(double hu) { return (hu - 300.0) / 100.0; }

} // namespace

ToyFitResult toy_fit(const std::vector<ToyPatch>& patches, LossKind kind, int steps, double learning_rate) {
    require(!patches.empty(), ErrorCode::invalid_argument, "toy fit needs at least one patch");
    require(steps >= 0, ErrorCode::invalid_argument, "steps must be non-negative");
    require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorCode::invalid_argument,
            "learning rate must be non-negative");
    std::vector<lesions::Labeling> components;
    if (kind == LossKind::weighted_cross_entropy)
        for (const auto& p : patches) components.push_back(lesions::label_components(p.target, 26));

    ToyFitResult res;
    double w = 0.0, b = 0.0;
    std::vector<double> pred;
    // Mean over patches of the per-patch loss and its (w, b) gradient.
    auto loss_and_grad = [&](double& gw, double& gb) {
        double total = 0.0;
        gw = gb = 0.0;
        for (std::size_t i = 0; i < patches.size(); ++i) {
            const auto& pt = patches[i];
            auto hu = pt.hu.samples();
            pred.resize(hu.size());
            for (std::size_t n = 0; n < hu.size(); ++n) pred[n] = sigmoid(w * feature(hu[n]) + b);
            const LossInput x{pred, pt.target.samples(), pt.candidates.samples()};
            const LossValueGrad lg =
                evaluate(kind, x, pt.hu.grid(), components.empty() ? nullptr : &components[i]);
            total += lg.value;
            for (std::size_t n = 0; n < hu.size(); ++n) {
                if (lg.grad[n] == 0.0) continue;
                const double d = lg.grad[n] * pred[n] * (1.0 - pred[n]);
                gw += d * feature(hu[n]);
                gb += d;
            }
        }
        const double inv = 1.0 / static_cast<double>(patches.size());
        gw *= inv;
        gb *= inv;
        return total * inv;
    };

    for (int s = 0; s <= steps; ++s) {
        double gw = 0.0, gb = 0.0;
        const double value = loss_and_grad(gw, gb);
        require(std::isfinite(value), ErrorCode::numeric, "toy fit diverged: non-finite loss");
        res.trace.push_back(value);
        if (s == steps) break;
        w -= learning_rate * gw;
        b -= learning_rate * gb;
    }
    res.weight = w;
    res.bias = b;
    std::size_t right = 0, total = 0;
    for (const auto& pt : patches)
        for (std::size_t n = 0; n < pt.hu.size(); ++n) {
            if (!pt.candidates[n]) continue;
            ++total;
            const bool yes = sigmoid(w * feature(pt.hu[n]) + b) > 0.5;
            right += yes == (pt.target[n] != 0);
        }
    res.accuracy = static_cast<double>(right) / static_cast<double>(total);
    return res;
}

std::string format_trace_csv(const ToyFitResult& r, LossKind kind) {
    std::string out = csv::join_row({"step", "loss", "objective"});
    for (std::size_t s = 0; s < r.trace.size(); ++s)
        out += csv::join_row({std::to_string(s), csv::format_number(r.trace[s]), to_string(kind)});
    return out;
}

} // namespace calcquant::losses
