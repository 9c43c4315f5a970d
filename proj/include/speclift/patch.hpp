// Patch-based recovery of damaged pixels from a search space of aligned
// prior frames.
//
// Damaged pixels are processed in onion-peel layers from the mask boundary
// inward. Within a layer a PatchMatch-style minimiser (propagation plus
// random search) assigns each pixel a source location in one prior; the
// layer's centre values are then committed so later layers see them as
// context. The final image blends all overlapping patch votes uniformly.

#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "json.hpp"
#include "speclift/video_model.hpp"

namespace speclift {

struct CoverageError : Error {
    using Error::Error;
};

struct SearchSpace {
    std::vector<Frame> priors;        // aligned into the current frame
    std::vector<SpecularMask> valid;  // 1 = usable source pixel
    double coverage = 0.0;            // fraction of damaged pixels usable in >= 1 prior

    [[nodiscard]] Size size() const { return priors.empty() ? Size{} : priors.front().size(); }
    [[nodiscard]] bool usable(int row, int col) const;
};

// `prior_unusable[z]` marks pixels of prior z that must not serve as sources
// (its own specular pixels and samples that came from outside the domain).
SearchSpace build_search_space(const std::vector<Frame>& aligned_priors,
                               const std::vector<SpecularMask>& prior_unusable,
                               const SpecularMask& current_mask);

inline constexpr double kInvalidDistance = std::numeric_limits<double>::infinity();

// Square RGB patch with per-pixel validity, row-major with channels
// interleaved.
struct Patch {
    int size = 0;
    std::vector<double> rgb;
    std::vector<std::uint8_t> valid;
};

Patch extract_patch(const Frame& frame, const SpecularMask* usable, int row, int col, int size);

// Sum of squared RGB differences over pixels valid in `validity`, divided by
// the number of such pixels; kInvalidDistance when there are none.
double patch_distance(const Patch& a, const Patch& b, const std::vector<std::uint8_t>& validity);

struct ShiftEntry {
    int row = 0;  // damaged pixel
    int col = 0;
    int prior = 0;  // source prior index
    int src_row = 0;
    int src_col = 0;
    double distance = kInvalidDistance;
};

struct ShiftMap {
    int patch_size = 7;
    std::vector<ShiftEntry> entries;
    // Aggregate distance after initialisation and after each sweep, per layer.
    std::vector<std::vector<double>> sweep_totals;

    [[nodiscard]] double total_distance() const;
};

struct ShiftMapOptions {
    int patch_size = 7;
    int sweeps = 5;
    int search_samples = 4;  // random candidates per radius, per prior
    std::uint64_t seed = 0;
};

// Target context for pixel (row, col): known pixels of `frame` (outside the
// mask plus previously committed layers). Exposed for oracles.
double candidate_distance(const Frame& target, const SpecularMask& known, int row, int col, const SearchSpace& space,
                          int prior, int src_row, int src_col, int patch_size);

// Onion-peel layer index per damaged pixel (1 = touches clean pixels);
// 0 for clean pixels.
std::vector<int> onion_layers(const SpecularMask& mask);

ShiftMap solve_shift_map(const Frame& frame, const SpecularMask& mask, const SearchSpace& space,
                         const ShiftMapOptions& options);

// Replaces damaged pixels with the uniform blend of overlapping patch votes;
// pixels outside the mask are copied unchanged.
Frame fill_damage(const Frame& frame, const SpecularMask& mask, const SearchSpace& space, const ShiftMap& shift);

nlohmann::json shift_map_to_json(const ShiftMap& shift);

}  // namespace speclift
