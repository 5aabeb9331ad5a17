#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calcquant/lesions.hpp"
#include "calcquant/volgrid.hpp"

namespace calcquant::losses {

inline constexpr double kClampEps = 1e-7;
inline constexpr double kDiceEpsilon = 1.0;
inline constexpr double kFocalGamma = 2.0;

/// Flat views of one patch; all three spans have the same length.
struct LossInput {
    std::span<const double> pred;
    std::span<const std::uint8_t> target;
    std::span<const std::uint8_t> candidates;
};

/// Checks the grids match and returns views into the three grids.
[[nodiscard]] LossInput make_input(const ProbMap& pred, const Mask& target, const Mask& candidates);

struct LossValueGrad {
    double value = 0.0;
    std::vector<double> grad; ///< d value / d pred, zero outside the candidates
};

enum class LossKind { cross_entropy, soft_dice, focal, weighted_cross_entropy };
[[nodiscard]] const char* to_string(LossKind k) noexcept;
[[nodiscard]] LossKind parse_loss_kind(std::string_view s);

// Sums run over candidate voxels. Cross-entropy style losses clamp
// predictions to [eps, 1 - eps]; the clamped flat regions have zero gradient.

[[nodiscard]] LossValueGrad cross_entropy(const LossInput& x);
[[nodiscard]] LossValueGrad soft_dice(const LossInput& x, double epsilon = kDiceEpsilon);
[[nodiscard]] LossValueGrad focal(const LossInput& x, double gamma = kFocalGamma);

/// Weight of a voxel in a target lesion of `size` voxels: 10 up to size 10,
/// linear down to 1 at size 100, 1 beyond.
[[nodiscard]] double lesion_weight(std::size_t size) noexcept;

/// Per-voxel weights from a labeling of the target; non-lesion voxels get 1.
[[nodiscard]] std::vector<double> lesion_weights(const lesions::Labeling& target_components);

[[nodiscard]] LossValueGrad weighted_cross_entropy(const LossInput& x, std::span<const double> weights);
[[nodiscard]] LossValueGrad weighted_cross_entropy(const LossInput& x, const lesions::Labeling& target_components);

/// Evaluates one loss; weighted CE labels the target with 26-connectivity
/// when `components` is null.
[[nodiscard]] LossValueGrad evaluate(LossKind kind, const LossInput& x, const Grid3& grid,
                                     const lesions::Labeling* components = nullptr);

struct ToyPatch {
    Volume hu;
    Mask target;
    Mask candidates;
};

/// Small 2D patches: bright calcified blobs (>= 300 HU) on soft-tissue and
/// bone-edge background (<= 260 HU), so candidates are separable by HU.
[[nodiscard]] std::vector<ToyPatch> make_toy_patches(std::size_t count, std::uint64_t seed, std::int32_t size = 16);

struct ToyFitResult {
    std::vector<double> trace; ///< loss before each step, then the final loss
    double weight = 0.0;
    double bias = 0.0;
    double accuracy = 0.0; ///< on candidate voxels, prediction p > 0.5
};

/// Gradient descent on a per-voxel logistic model p = sigmoid(w f + b) with
/// the normalized intensity f = (HU - 300) / 100 as the single feature.
[[nodiscard]] ToyFitResult toy_fit(const std::vector<ToyPatch>& patches, LossKind kind, int steps,
                                   double learning_rate = 0.1);

[[nodiscard]] std::string format_trace_csv(const ToyFitResult& r, LossKind kind);

} // namespace calcquant::losses
