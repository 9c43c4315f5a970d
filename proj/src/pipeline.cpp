#include "speclift/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "speclift/ffd.hpp"
#include "speclift/lowrank.hpp"
#include "speclift/patch.hpp"

namespace speclift {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t overlap(const SpecularMask& a, const SpecularMask& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.bits().size(); ++i) n += (a.at(i) && b.at(i)) ? 1 : 0;
    return n;
}

// A pixel is unusable when any of the four samples its mapped position
// interpolates from is flagged.
SpecularMask warp_mask(const SpecularMask& mask, const DeformationField& field) {
    const int w = mask.width();
    const int h = mask.height();
    SpecularMask out(w, h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const Vec2 p = field(r, c);
            const double x = std::clamp(p.x, 0.0, w - 1.0);
            const double y = std::clamp(p.y, 0.0, h - 1.0);
            const int x0 = static_cast<int>(std::floor(x));
            const int y0 = static_cast<int>(std::floor(y));
            const int x1 = std::min(x0 + 1, w - 1);
            const int y1 = std::min(y0 + 1, h - 1);
            const bool hit = mask(y0, x0) || (x > x0 && mask(y0, x1)) || (y > y0 && mask(y1, x0)) ||
                             (x > x0 && y > y0 && mask(y1, x1));
            if (hit) out.set(r, c, true);
        }
    }
    return out;
}

SpecularMask merge(SpecularMask a, const SpecularMask& b) {
    for (std::size_t i = 0; i < a.bits().size(); ++i) {
        if (b.at(i)) a.set(i, true);
    }
    return a;
}

std::uint64_t frame_seed(std::uint64_t seed, int w) {
    return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(w + 1));
}

nlohmann::json detection_json(const DetectionStats& s) {
    return {{"dispersion", s.dispersion},
            {"max_intensity", s.max_intensity},
            {"beta", s.beta ? nlohmann::json(*s.beta) : nlohmann::json(nullptr)},
            {"intensity_hits", s.intensity_hits},
            {"gradient_hits", s.gradient_hits},
            {"mask_pixels", s.mask_pixels}};
}

nlohmann::json frame_json(const FrameResult& f) {
    return {{"index", f.index},
            {"mask_pixels", f.mask.count()},
            {"detection", f.detection ? detection_json(*f.detection) : nlohmann::json(nullptr)},
            {"pass_through", f.pass_through},
            {"priors", f.priors},
            {"ranks", f.ranks},
            {"lm_iterations", f.lm_iterations},
            {"regrid_count", f.regrid_count},
            {"min_jacobian", f.min_jacobian},
            {"coverage", f.coverage},
            {"shift_distance", f.shift_distance},
            {"warnings", f.warnings},
            {"error", f.error ? nlohmann::json(*f.error) : nlohmann::json(nullptr)}};
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

// Restores every frame of `frames` given all masks; used by bench runs.
std::vector<FrameResult> restore_all(const std::vector<Frame>& frames, const std::vector<SpecularMask>& masks,
                                     const PipelineConfig& config) {
    std::vector<FrameResult> out;
    for (int w = 0; w < static_cast<int>(frames.size()); ++w) out.push_back(restore_frame(w, frames, masks, config));
    return out;
}

}  // namespace

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::Detect: return "detect";
        case Mode::Restore: return "restore";
        case Mode::ObjectRemoval: return "object-removal";
        case Mode::Bench: return "bench";
    }
    return "unknown";
}

PriorSelection select_priors(int w, const std::vector<SpecularMask>& masks, int count, double max_overlap) {
    PriorSelection sel;
    if (w <= 0 || count <= 0) return sel;
    const SpecularMask& current = masks[static_cast<std::size_t>(w)];
    const double limit = max_overlap * static_cast<double>(current.count());
    std::vector<int> rejected;
    for (int j = w - 1; j >= 0 && static_cast<int>(sel.indices.size()) < count; --j) {
        const double shared = static_cast<double>(overlap(masks[static_cast<std::size_t>(j)], current));
        if (current.none() || shared < limit) {
            sel.indices.push_back(j);
        } else {
            rejected.push_back(j);
        }
    }
    for (int j : rejected) {
        if (static_cast<int>(sel.indices.size()) >= count) break;
        sel.indices.push_back(j);
        sel.relaxed = true;
    }
    std::sort(sel.indices.begin(), sel.indices.end());
    return sel;
}

FrameResult restore_frame(int w, const std::vector<Frame>& frames, const std::vector<SpecularMask>& masks,
                          const PipelineConfig& config) {
    if (w < 0 || w >= static_cast<int>(frames.size()) || w >= static_cast<int>(masks.size())) {
        throw DimensionMismatchError("restore_frame: frame index " + std::to_string(w) + " out of range");
    }
    const auto t0 = Clock::now();
    const Frame& frame = frames[static_cast<std::size_t>(w)];
    FrameResult res;
    res.index = w;
    res.mask = masks[static_cast<std::size_t>(w)];
    res.restored = frame;
    res.pass_through = true;

    if (res.mask.none()) {
        res.seconds = seconds_since(t0);
        return res;
    }
    if (w == 0) {
        res.warnings.push_back("cold start: no prior frames, passed through");
        res.seconds = seconds_since(t0);
        return res;
    }

    try {
        const PriorSelection sel = select_priors(w, masks, config.prior_count, config.prior_overlap);
        res.priors = sel.indices;
        if (static_cast<int>(sel.indices.size()) < config.prior_count) {
            res.warnings.push_back("cold start: only " + std::to_string(sel.indices.size()) + " prior frames available");
        }
        if (sel.relaxed) {
            res.warnings.push_back("prior selection relaxed: fewer frames than requested met the overlap rule");
        }

        std::vector<Frame> priors;
        for (int j : sel.indices) priors.push_back(frames[static_cast<std::size_t>(j)]);
        RankSpec spec;
        spec.energy = config.energy;
        if (config.full_rank) {
            spec.rank = static_cast<int>(priors.size());
        } else if (config.rank) {
            spec.rank = std::min(*config.rank, static_cast<int>(priors.size()));
        }
        const LowRankResult lr = lowrank_frames(priors, spec);
        res.ranks = lr.ranks;

        const RegistrationParams params = RegistrationParams::from_config(config);
        const std::size_t n = priors.size();
        // steps[z] carries the next frame's pixels (prior z+1, or frame w
        // for the newest prior) into prior z.
        std::vector<DeformationField> steps;
        double min_j = std::numeric_limits<double>::infinity();
        for (std::size_t z = 0; z < n; ++z) {
            const Frame& target = z + 1 < n ? lr.frames[z + 1] : frame;
            RegistrationResult reg = lm_register(mean_intensity(lr.frames[z]), mean_intensity(target), params);
            res.lm_iterations += reg.iterations;
            res.regrid_count += reg.regrid_count;
            min_j = std::min(min_j, reg.min_jacobian);
            steps.push_back(std::move(reg.field));
        }
        res.min_jacobian = min_j;

        // A truncated reconstruction mixes every prior at each pixel, so a
        // pixel damaged in any prior is unreliable in all of them.
        const bool truncated = std::any_of(lr.ranks.begin(), lr.ranks.end(), [&](int r) { return r < static_cast<int>(n); });
        SpecularMask leaked(frame.width(), frame.height());
        if (truncated) {
            for (int j : sel.indices) leaked = merge(std::move(leaked), masks[static_cast<std::size_t>(j)]);
        }

        std::vector<Frame> aligned(n);
        std::vector<SpecularMask> unusable(n);
        DeformationField chain = steps[n - 1];
        for (std::size_t k = n; k-- > 0;) {
            if (k + 1 < n) chain = compose(steps[k], chain);
            aligned[k] = warp_image(lr.frames[k], chain);
            const SpecularMask& own = truncated ? leaked : masks[static_cast<std::size_t>(sel.indices[k])];
            unusable[k] = merge(warp_mask(own, chain), out_of_domain(chain));
        }

        const SearchSpace space = build_search_space(aligned, unusable, res.mask);
        res.coverage = space.coverage;
        ShiftMapOptions opts;
        opts.patch_size = config.patch_size;
        opts.sweeps = config.sweeps;
        opts.seed = frame_seed(config.seed, w);
        const ShiftMap shift = solve_shift_map(frame, res.mask, space, opts);
        res.shift_distance = shift.total_distance();
        res.restored = fill_damage(frame, res.mask, space, shift);
        res.pass_through = false;
    } catch (const Error& e) {
        res.error = e.what();
        res.restored = frame;
        res.pass_through = true;
    }
    res.seconds = seconds_since(t0);
    return res;
}

BatchReport run_batch(const Sequence& sequence, const PipelineConfig& config, const BatchOptions& options) {
    config.validate();
    if (sequence.empty()) throw DegenerateInputError("run_batch: empty sequence");
    if (options.mode == Mode::ObjectRemoval && options.user_masks.size() != sequence.frame_count()) {
        throw DimensionMismatchError("object removal needs one mask per frame: " +
                                     std::to_string(options.user_masks.size()) + " masks for " +
                                     std::to_string(sequence.frame_count()) + " frames");
    }
    namespace fs = std::filesystem;
    const auto t0 = Clock::now();
    std::optional<fs::path> frame_dir;
    std::optional<fs::path> mask_dir;
    if (options.output_dir) {
        fs::create_directories(*options.output_dir);
        mask_dir = *options.output_dir / "masks";
        fs::create_directories(*mask_dir);
        if (options.mode == Mode::Restore || options.mode == Mode::ObjectRemoval) {
            frame_dir = *options.output_dir / "frames";
            fs::create_directories(*frame_dir);
        }
    }

    BatchReport out;
    out.report = {{"schema", 1},
                  {"mode", to_string(options.mode)},
                  {"config", to_json(config)},
                  {"frame_count", sequence.frame_count()},
                  {"width", sequence.size().width},
                  {"height", sequence.size().height},
                  {"prior_selection",
                   "most recent frames whose masks overlap the current mask by less than prior_overlap; "
                   "heuristic stand-in for nearest-neighbour prior projection"}};
    out.timing = {{"schema", 1}, {"mode", to_string(options.mode)}};

    const std::vector<Frame>& frames = sequence.frames();
    std::vector<SpecularMask> masks;
    std::vector<std::optional<DetectionStats>> stats;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (options.mode == Mode::ObjectRemoval) {
            require_same_size(frames[i].size(), options.user_masks[i].size(), "object-removal mask");
            masks.push_back(options.user_masks[i]);
            stats.emplace_back();
        } else {
            auto [m, s] = detect_specular_mask(frames[i], config.dilation_radius);
            masks.push_back(std::move(m));
            stats.emplace_back(s);
        }
    }

    if (options.mode == Mode::Bench) {
        const TimingComparison t = timing_compare(sequence, config);
        out.report["bench"] = to_json(t, false);
        out.timing["bench"] = to_json(t, true);
    } else {
        nlohmann::json frame_reports = nlohmann::json::array();
        nlohmann::json frame_times = nlohmann::json::array();
        int restored = 0;
        int passed = 0;
        int errors = 0;
        long iterations = 0;
        for (int w = 0; w < static_cast<int>(frames.size()); ++w) {
            FrameResult res;
            if (options.mode == Mode::Detect) {
                res.index = w;
                res.mask = masks[static_cast<std::size_t>(w)];
                res.pass_through = true;
            } else {
                res = restore_frame(w, frames, masks, config);
            }
            res.detection = stats[static_cast<std::size_t>(w)];
            const int file_index = options.first_index + w;
            if (mask_dir) save_mask(res.mask, *mask_dir / format_indexed("mask_%06d.png", file_index));
            if (frame_dir) save_frame(res.restored, *frame_dir / format_indexed("frame_%06d.png", file_index));
            if (res.error) {
                ++errors;
                out.any_error = true;
            } else if (res.pass_through) {
                ++passed;
            } else {
                ++restored;
            }
            iterations += res.lm_iterations;
            frame_reports.push_back(frame_json(res));
            frame_times.push_back({{"index", w}, {"seconds", res.seconds}});
            if (options.on_frame) options.on_frame(res);
            // The frame itself is on disk; keep only the summary.
            if (options.output_dir) res.restored = Frame();
            out.frames.push_back(std::move(res));
        }
        out.report["frames"] = frame_reports;
        out.report["summary"] = {{"restored", restored},
                                 {"pass_through", passed},
                                 {"errors", errors},
                                 {"lm_iterations", iterations}};
        out.timing["frames"] = frame_times;
    }
    out.timing["total_seconds"] = seconds_since(t0);

    if (options.output_dir) {
        write_json(out.report, *options.output_dir / "report.json");
        write_json(out.timing, *options.output_dir / "timing.json");
    }
    return out;
}

TimingComparison timing_compare(const Sequence& sequence, const PipelineConfig& config) {
    config.validate();
    const std::vector<Frame>& frames = sequence.frames();
    if (static_cast<int>(frames.size()) <= config.prior_count) {
        throw DegenerateInputError("timing_compare needs more than Z = " + std::to_string(config.prior_count) +
                                   " frames");
    }
    std::vector<SpecularMask> masks;
    for (const auto& f : frames) masks.push_back(detect_specular_mask(f, config.dilation_radius).first);

    PipelineConfig full = config;
    full.full_rank = true;
    PipelineConfig low = config;
    low.full_rank = false;

    TimingComparison t;
    t.full_rank.label = "full-rank";
    t.low_rank.label = "low-rank";
    const auto full_results = restore_all(frames, masks, full);
    const auto low_results = restore_all(frames, masks, low);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const FrameResult& a = full_results[i];
        const FrameResult& b = low_results[i];
        // Only frames where both runs performed a restoration.
        if (a.pass_through || b.pass_through) continue;
        for (auto [row, r] : {std::pair{&t.full_rank, &a}, std::pair{&t.low_rank, &b}}) {
            row->seconds.push_back(r->seconds);
            row->iterations.push_back(r->lm_iterations);
            row->ranks.push_back(r->ranks);
        }
    }
    for (TimingRow* row : {&t.full_rank, &t.low_rank}) {
        if (row->seconds.empty()) continue;
        double s = 0.0;
        double it = 0.0;
        for (std::size_t i = 0; i < row->seconds.size(); ++i) {
            s += row->seconds[i];
            it += row->iterations[i];
        }
        row->mean_seconds = s / static_cast<double>(row->seconds.size());
        row->mean_iterations = it / static_cast<double>(row->seconds.size());
    }
    t.time_ratio = t.full_rank.mean_seconds > 0.0 ? t.low_rank.mean_seconds / t.full_rank.mean_seconds : 0.0;
    return t;
}

nlohmann::json to_json(const TimingComparison& t, bool include_times) {
    auto row = [&](const TimingRow& r) {
        nlohmann::json j = {{"label", r.label},
                            {"frames", r.iterations.size()},
                            {"mean_lm_iterations", r.mean_iterations},
                            {"lm_iterations", r.iterations},
                            {"ranks", r.ranks}};
        if (include_times) {
            j["mean_seconds_per_frame"] = r.mean_seconds;
            j["seconds"] = r.seconds;
        }
        return j;
    };
    nlohmann::json j = {{"rows", {row(t.full_rank), row(t.low_rank)}}};
    if (include_times) j["time_ratio"] = t.time_ratio;
    return j;
}

}  // namespace speclift
