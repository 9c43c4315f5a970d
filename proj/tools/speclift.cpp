// speclift: batch front end for detection, restoration, object removal,
// synthetic data generation, evaluation and the rank timing benchmark.
//
// Exit status: 0 success, 1 some frames failed, 2 fatal error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "speclift/frame_io.hpp"
#include "speclift/pipeline.hpp"
#include "speclift/synth.hpp"

namespace fs = std::filesystem;
using namespace speclift;

namespace {

constexpr int kExitFatal = 2;

struct Overrides {
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::optional<int> rank;
    std::optional<double> energy;
    bool full_rank = false;
    std::optional<int> patch_size;
    std::optional<int> sweeps;
    std::optional<int> prior_count;

    void attach(CLI::App* app) {
        app->add_option("--config", config_file, "key = value configuration file")->check(CLI::ExistingFile);
        app->add_option("--seed", seed, "random seed");
        app->add_option("--rank", rank, "explicit low-rank r");
        app->add_option("--energy", energy, "energy fraction selecting r");
        app->add_flag("--full-rank", full_rank, "use r = Z (no low-rank truncation)");
        app->add_option("--patch-size", patch_size, "odd patch size");
        app->add_option("--sweeps", sweeps, "shift-map sweeps");
        app->add_option("--priors", prior_count, "number of prior frames Z");
    }

    PipelineConfig resolve() const {
        PipelineConfig c = config_file.empty() ? PipelineConfig{} : load_config(config_file);
        if (seed) c.seed = *seed;
        if (rank) c.rank = *rank;
        if (energy) c.energy = *energy;
        if (full_rank) c.full_rank = true;
        if (patch_size) c.patch_size = *patch_size;
        if (sweeps) c.sweeps = *sweeps;
        if (prior_count) c.prior_count = *prior_count;
        c.validate();
        return c;
    }
};

void write_json(const nlohmann::json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<SpecularMask> load_masks(const fs::path& dir, const std::string& pattern) {
    SequenceSource src;
    src.directory = dir;
    src.pattern = pattern;
    std::vector<SpecularMask> masks;
    for (int idx : sequence_indices(src)) masks.push_back(load_mask(dir / format_indexed(pattern, idx)));
    return masks;
}

Sequence load_frames(const fs::path& dir, const std::string& pattern) {
    SequenceSource src;
    src.directory = dir;
    src.pattern = pattern;
    return load_sequence(src);
}

int first_index(const fs::path& dir, const std::string& pattern) {
    SequenceSource src;
    src.directory = dir;
    src.pattern = pattern;
    return sequence_indices(src).front();
}

void print_progress(const FrameResult& r, bool restoring) {
    std::string line = "frame " + std::to_string(r.index) + ": mask " + std::to_string(r.mask.count()) + " px";
    if (restoring && r.pass_through) line += ", passed through";
    for (const auto& w : r.warnings) line += "; " + w;
    if (r.error) line += "; error: " + *r.error;
    std::fprintf(stderr, "%s\n", line.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Specular highlight detection and removal for image sequences"};
    app.require_subcommand(1);

    std::string input;
    std::string pattern = "frame_%06d.png";
    std::string output;
    std::string report;

    Overrides detect_o, restore_o, remove_o, bench_o;

    auto* detect = app.add_subcommand("detect", "write specular masks and detection statistics");
    detect->add_option("--input", input, "frame directory")->required();
    detect->add_option("--pattern", pattern, "frame file pattern");
    detect->add_option("--output", output, "output directory")->required();
    detect_o.attach(detect);

    auto* restore = app.add_subcommand("restore", "detect and remove specular highlights");
    restore->add_option("--input", input, "frame directory")->required();
    restore->add_option("--pattern", pattern, "frame file pattern");
    restore->add_option("--output", output, "output directory")->required();
    restore_o.attach(restore);

    std::string mask_dir;
    std::string mask_pattern = "mask_%06d.png";
    auto* remove = app.add_subcommand("remove", "fill user-supplied masks from prior frames");
    remove->add_option("--input", input, "frame directory")->required();
    remove->add_option("--pattern", pattern, "frame file pattern");
    remove->add_option("--masks", mask_dir, "mask directory (255 = remove)")->required();
    remove->add_option("--mask-pattern", mask_pattern, "mask file pattern");
    remove->add_option("--output", output, "output directory")->required();
    remove_o.attach(remove);

    std::string preset_name = "torso-like";
    int frames = 12;
    std::uint64_t synth_seed = 0;
    std::optional<int> width;
    std::optional<int> height;
    auto* synth = app.add_subcommand("synth", "generate a synthetic sequence with ground truth");
    synth->add_option("--preset", preset_name, "torso-like, heart-like or dragon-like");
    synth->add_option("--frames", frames, "frame count")->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "random seed");
    synth->add_option("--width", width, "image width");
    synth->add_option("--height", height, "image height");
    synth->add_option("--output", output, "output directory")->required();

    std::string pred_dir;
    std::string gt_dir;
    std::string restored_dir;
    std::string clean_dir;
    std::string damaged_dir;
    auto* eval = app.add_subcommand("eval", "score predicted masks (and optionally restorations)");
    eval->add_option("--pred", pred_dir, "predicted mask directory")->required();
    eval->add_option("--gt", gt_dir, "ground-truth mask directory")->required();
    eval->add_option("--mask-pattern", mask_pattern, "mask file pattern");
    eval->add_option("--restored", restored_dir, "restored frames, for masked PSNR");
    eval->add_option("--clean", clean_dir, "clean frames, for masked PSNR");
    eval->add_option("--damaged", damaged_dir, "damaged frames, for masked PSNR");
    eval->add_option("--pattern", pattern, "frame file pattern");
    eval->add_option("--report", report, "JSON report path")->required();

    auto* bench = app.add_subcommand("bench", "compare full-rank and low-rank pipeline timing");
    bench->add_option("--input", input, "frame directory (default: generate --preset)");
    bench->add_option("--pattern", pattern, "frame file pattern");
    bench->add_option("--preset", preset_name, "synthetic preset used without --input");
    bench->add_option("--frames", frames, "frame count for the synthetic preset")->check(CLI::PositiveNumber);
    bench->add_option("--output", output, "output directory")->required();
    bench_o.attach(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitFatal;
    }

    try {
        if (*synth) {
            SynthConfig cfg = preset(preset_name);
            cfg.frames = frames;
            cfg.seed = synth_seed;
            if (width) cfg.width = *width;
            if (height) cfg.height = *height;
            const SynthSequence s = generate_sequence(cfg);
            const fs::path out = output;
            save_sequence(s.clean, out / "clean");
            save_sequence(s.damaged, out / "damaged");
            fs::create_directories(out / "gt");
            for (std::size_t i = 0; i < s.truth.size(); ++i) {
                save_mask(s.truth[i], out / "gt" / format_indexed("mask_%06d.png", static_cast<int>(i) + 1));
            }
            write_json({{"schema", 1}, {"preset", preset_name}, {"config", to_json(cfg)}}, out / "synth.json");
            std::fprintf(stderr, "wrote %d frames to %s\n", cfg.frames, out.string().c_str());
            return 0;
        }

        if (*eval) {
            const auto pred = load_masks(pred_dir, mask_pattern);
            const auto gt = load_masks(gt_dir, mask_pattern);
            MetricReport rep;
            if (!restored_dir.empty() || !clean_dir.empty() || !damaged_dir.empty()) {
                if (restored_dir.empty() || clean_dir.empty() || damaged_dir.empty()) {
                    throw ConfigError("masked PSNR needs --restored, --clean and --damaged together");
                }
                const Sequence restored_seq = load_frames(restored_dir, pattern);
                const Sequence clean_seq = load_frames(clean_dir, pattern);
                const Sequence damaged_seq = load_frames(damaged_dir, pattern);
                rep = evaluate_masks(pred, gt, &restored_seq, &clean_seq, &damaged_seq);
            } else {
                rep = evaluate_masks(pred, gt);
            }
            rep.config = {{"pred", pred_dir}, {"gt", gt_dir}};
            write_json(to_json(rep), report);
            std::printf("dice %.4f  accuracy %.4f  precision %.4f  error %.3f%%\n", rep.mean_dice, rep.mean_accuracy,
                        rep.mean_precision, rep.mean_error_rate);
            if (rep.mean_psnr_after) {
                std::printf("masked PSNR %.2f dB -> %.2f dB\n", *rep.mean_psnr_before, *rep.mean_psnr_after);
            }
            return 0;
        }

        BatchOptions opts;
        opts.output_dir = fs::path(output);
        PipelineConfig config;
        Sequence seq;
        if (*bench) {
            opts.mode = Mode::Bench;
            config = bench_o.resolve();
            if (input.empty()) {
                SynthConfig cfg = preset(preset_name);
                cfg.frames = frames;
                cfg.seed = config.seed;
                seq = generate_sequence(cfg).damaged;
            } else {
                seq = load_frames(input, pattern);
            }
        } else {
            if (*detect) {
                opts.mode = Mode::Detect;
                config = detect_o.resolve();
            } else if (*restore) {
                opts.mode = Mode::Restore;
                config = restore_o.resolve();
            } else {
                opts.mode = Mode::ObjectRemoval;
                config = remove_o.resolve();
                opts.user_masks = load_masks(mask_dir, mask_pattern);
            }
            seq = load_frames(input, pattern);
            opts.first_index = first_index(input, pattern);
        }

        opts.on_frame = [restoring = opts.mode != Mode::Detect](const FrameResult& r) { print_progress(r, restoring); };
        const BatchReport rep = run_batch(seq, config, opts);
        if (opts.mode == Mode::Bench) {
            const auto& t = rep.timing["bench"];
            std::printf("full-rank %.3f s/frame, low-rank %.3f s/frame, ratio %.3f\n",
                        t["rows"][0]["mean_seconds_per_frame"].get<double>(),
                        t["rows"][1]["mean_seconds_per_frame"].get<double>(), t["time_ratio"].get<double>());
        }
        return rep.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "speclift: %s\n", e.what());
        return kExitFatal;
    }
}
