// Per-frame adaptive detection of specular regions.
//
// A pixel is labelled specular when its mean intensity lies within the
// frame's colour dispersion of the brightest pixel, or when its gradient
// magnitude exceeds a per-frame Otsu threshold.

#pragma once

#include <optional>
#include <utility>

#include "speclift/video_model.hpp"

namespace speclift {

struct DetectionStats {
    double dispersion = 0.0;     // sample variance of mean intensity
    double max_intensity = 0.0;  // max of mean intensity
    std::optional<double> beta;  // gradient threshold; nullopt when the field is constant
    std::size_t intensity_hits = 0;
    std::size_t gradient_hits = 0;
    std::size_t mask_pixels = 0;  // after dilation
};

// Sample variance (N - 1 normaliser) of the mean-intensity field.
double color_dispersion(const Frame& frame);
double color_dispersion(const ScalarField& intensity);

// Otsu threshold on a 256-bin histogram spanning [min, max]. Returns the
// upper edge of the winning lower class; nullopt for a constant field.
std::optional<double> optimal_beta(const ScalarField& grad);

SpecularMask dilate_mask(const SpecularMask& mask, int radius);

// The two labelling predicates before they are OR-ed and dilated.
struct DetectionPredicates {
    SpecularMask intensity;  // I > max(I) - s^2
    SpecularMask gradient;   // |grad I| > beta
};
DetectionPredicates detection_predicates(const Frame& frame, DetectionStats* stats = nullptr);

std::pair<SpecularMask, DetectionStats> detect_specular_mask(const Frame& frame,
                                                             int dilation_radius = 1);

}  // namespace speclift
