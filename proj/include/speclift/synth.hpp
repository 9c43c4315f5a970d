// Synthetic benchmark sequences with ground-truth masks, plus the detection
// and restoration metrics used to score the pipeline against them.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "speclift/video_model.hpp"

namespace speclift {

enum class Motion { Static, Translate, Rotate, CameraPan };
enum class Texture { Checker, ValueNoise, Gradient };

struct SynthConfig {
    int frames = 12;
    int width = 256;
    int height = 256;

    Motion motion = Motion::CameraPan;
    double motion_speed = 1.0;   // px/frame for translations, degrees/frame for rotation
    double deformation = 0.0;    // amplitude (px) of a time-varying sinusoidal warp

    Texture texture = Texture::ValueNoise;
    double texture_scale = 32.0;  // feature size in pixels
    double texture_lo = 0.1;
    double texture_hi = 0.7;

    int highlight_count = 4;
    double radius_min = 10.0;
    double radius_max = 16.0;
    double gain = 2.0;       // peak of the unclipped profile; must exceed 1
    double edge_sigma = 1.0; // width of the Gaussian fall-off outside the core
    double drift = 8.0;      // px/frame
    // Highlights pull towards this colour; white unless tinted.
    std::array<double, 3> tint{1.0, 1.0, 1.0};

    std::uint64_t seed = 0;

    // Throws ConfigError on an invalid field.
    void validate() const;
};

// "torso-like", "heart-like" or "dragon-like"; throws ConfigError otherwise.
SynthConfig preset(const std::string& name);
std::vector<std::string> preset_names();
nlohmann::json to_json(const SynthConfig& config);

struct SynthSequence {
    Sequence clean;
    Sequence damaged;
    std::vector<SpecularMask> truth;
};

// Ground truth marks pixels where any channel differs from the clean frame
// by more than 1/255.
SynthSequence generate_sequence(const SynthConfig& config);

struct Confusion {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;
};
Confusion confusion(const SpecularMask& pred, const SpecularMask& gt);

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const SpecularMask& pred, const SpecularMask& gt);
double accuracy(const SpecularMask& pred, const SpecularMask& gt);
// TP / (TP + FP); 1 when nothing is predicted.
double precision(const SpecularMask& pred, const SpecularMask& gt);
// Percentage of misclassified pixels.
double error_rate(const SpecularMask& pred, const SpecularMask& gt);

inline constexpr double kPsnrCap = 99.0;
// 10 log10(1 / MSE) over the masked pixels of all three channels, capped at
// kPsnrCap. Throws DegenerateInputError for an empty mask.
double masked_psnr(const Frame& result, const Frame& clean, const SpecularMask& mask);

struct FrameMetrics {
    int index = 0;
    double dice = 0.0;
    double accuracy = 0.0;
    double precision = 0.0;
    double error_rate = 0.0;
    std::optional<double> psnr_before;
    std::optional<double> psnr_after;
};

struct MetricReport {
    std::vector<FrameMetrics> frames;
    double mean_dice = 0.0;
    double mean_accuracy = 0.0;
    double mean_precision = 0.0;
    double mean_error_rate = 0.0;
    std::optional<double> mean_psnr_before;
    std::optional<double> mean_psnr_after;
    nlohmann::json config;
};

// Detection metrics per frame. When `restored`, `clean` and `damaged` are all
// given, PSNR before/after is measured over each frame's ground-truth mask
// (frames with an empty mask are skipped).
MetricReport evaluate_masks(const std::vector<SpecularMask>& pred, const std::vector<SpecularMask>& gt,
                            const Sequence* restored = nullptr, const Sequence* clean = nullptr,
                            const Sequence* damaged = nullptr);
nlohmann::json to_json(const MetricReport& report);

}  // namespace speclift
