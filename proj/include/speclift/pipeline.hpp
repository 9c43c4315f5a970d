// Per-frame orchestration: detect, select priors, low-rank, chain-register,
// build the search space, recover. Plus the batch driver behind the CLI.
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "speclift/detect.hpp"
#include "speclift/frame_io.hpp"
#include "speclift/video_model.hpp"

namespace speclift {

enum class Mode { Detect, Restore, ObjectRemoval, Bench };
std::string to_string(Mode mode);

struct PriorSelection {
    std::vector<int> indices;  // ascending frame indices
    bool relaxed = false;      // fewer than Z met the overlap rule
};

// Up to `count` most recent frames before `w` whose masks overlap masks[w]
// by less than `max_overlap` of |masks[w]|, topped up with the most recent
// remaining frames when too few qualify.
PriorSelection select_priors(int w, const std::vector<SpecularMask>& masks, int count, double max_overlap);

struct FrameResult {
    int index = 0;
    Frame restored;
    SpecularMask mask;
    std::optional<DetectionStats> detection;  // absent when the mask was supplied
    bool pass_through = false;
    std::vector<int> priors;
    std::array<int, 3> ranks{};
    int lm_iterations = 0;
    int regrid_count = 0;
    double min_jacobian = 0.0;
    double coverage = 0.0;
    double shift_distance = 0.0;
    std::vector<std::string> warnings;
    std::optional<std::string> error;
    double seconds = 0.0;  // wall time; kept out of deterministic reports
};

// Restores frame `w` of `frames` with masks[0..w] already known (masks[w]
// is the current damaged region). Stage failures are caught into
// FrameResult::error with the frame passed through unchanged.
FrameResult restore_frame(int w, const std::vector<Frame>& frames, const std::vector<SpecularMask>& masks,
                          const PipelineConfig& config);

struct BatchOptions {
    Mode mode = Mode::Restore;
    // When set, masks, restored frames and report files are written here.
    std::optional<std::filesystem::path> output_dir;
    int first_index = 1;  // number of the first written file
    // Object-removal input masks, one per frame.
    std::vector<SpecularMask> user_masks;
    std::function<void(const FrameResult&)> on_frame;
};

struct BatchReport {
    nlohmann::json report;  // deterministic: no wall times
    nlohmann::json timing;
    std::vector<FrameResult> frames;
    bool any_error = false;
    [[nodiscard]] int exit_code() const { return any_error ? 1 : 0; }
};

BatchReport run_batch(const Sequence& sequence, const PipelineConfig& config, const BatchOptions& options);

struct TimingRow {
    std::string label;  // "full-rank" or "low-rank"
    double mean_seconds = 0.0;
    double mean_iterations = 0.0;
    std::vector<double> seconds;
    std::vector<int> iterations;
    std::vector<std::array<int, 3>> ranks;
};

struct TimingComparison {
    TimingRow full_rank;
    TimingRow low_rank;
    double time_ratio = 0.0;  // low / full mean seconds per restored frame
};

// Runs the restore pipeline with r = Z and with the configured rank rule,
// over frames that have at least one prior.
TimingComparison timing_compare(const Sequence& sequence, const PipelineConfig& config);
nlohmann::json to_json(const TimingComparison& t, bool include_times);

}  // namespace speclift
