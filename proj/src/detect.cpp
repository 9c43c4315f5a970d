#include "speclift/detect.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace speclift {

double color_dispersion(const ScalarField& intensity) {
    const auto& v = intensity.values();
    if (v.size() < 2) {
        throw DegenerateInputError("color_dispersion needs at least 2 pixels");
    }
    // Shifted two-pass sums: exact zero for a constant field.
    const double k = v.front();
    double sum = 0.0;
    for (double x : v) sum += x - k;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - k - mean) * (x - k - mean);
    return ss / static_cast<double>(v.size() - 1);
}

double color_dispersion(const Frame& frame) {
    return color_dispersion(mean_intensity(frame));
}

std::optional<double> optimal_beta(const ScalarField& grad) {
    constexpr int kBins = 256;
    const auto& v = grad.values();
    if (v.empty()) return std::nullopt;
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) return std::nullopt;

    const double width = (hi - lo) / kBins;
    std::array<double, kBins> count{};
    std::array<double, kBins> sum{};
    for (double x : v) {
        const int bin = std::min(kBins - 1, static_cast<int>((x - lo) / width));
        count[static_cast<std::size_t>(bin)] += 1.0;
        sum[static_cast<std::size_t>(bin)] += x;
    }
    const double n = static_cast<double>(v.size());
    double total_sum = 0.0;
    for (double s : sum) total_sum += s;

    double best_var = -1.0;
    int best_k = 0;
    double n0 = 0.0;
    double s0 = 0.0;
    for (int k = 0; k < kBins; ++k) {
        n0 += count[static_cast<std::size_t>(k)];
        s0 += sum[static_cast<std::size_t>(k)];
        const double n1 = n - n0;
        if (n0 == 0.0 || n1 == 0.0) continue;
        const double mu0 = s0 / n0;
        const double mu1 = (total_sum - s0) / n1;
        const double between = (n0 / n) * (n1 / n) * (mu0 - mu1) * (mu0 - mu1);
        if (between > best_var) {
            best_var = between;
            best_k = k;
        }
    }
    return lo + (best_k + 1) * width;
}

SpecularMask dilate_mask(const SpecularMask& mask, int radius) {
    if (radius <= 0) return mask;
    const int w = mask.width();
    const int h = mask.height();
    SpecularMask rows(w, h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask(r, c)) continue;
            for (int cc = std::max(0, c - radius); cc <= std::min(w - 1, c + radius); ++cc) rows.set(r, cc, true);
        }
    }
    SpecularMask out(w, h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!rows(r, c)) continue;
            for (int rr = std::max(0, r - radius); rr <= std::min(h - 1, r + radius); ++rr) out.set(rr, c, true);
        }
    }
    return out;
}

DetectionPredicates detection_predicates(const Frame& frame, DetectionStats* stats_out) {
    const ScalarField intensity = mean_intensity(frame);
    DetectionStats stats;
    stats.dispersion = color_dispersion(intensity);
    stats.max_intensity = *std::max_element(intensity.values().begin(), intensity.values().end());

    const ScalarField grad = gradient_magnitude(intensity);
    stats.beta = optimal_beta(grad);

    const double bright = stats.max_intensity - stats.dispersion;
    DetectionPredicates p{SpecularMask(frame.width(), frame.height()), SpecularMask(frame.width(), frame.height())};
    const auto& iv = intensity.values();
    const auto& gv = grad.values();
    for (std::size_t i = 0; i < iv.size(); ++i) {
        const bool by_intensity = iv[i] > bright;
        const bool by_gradient = stats.beta && gv[i] > *stats.beta;
        stats.intensity_hits += by_intensity ? 1 : 0;
        stats.gradient_hits += by_gradient ? 1 : 0;
        p.intensity.set(i, by_intensity);
        p.gradient.set(i, by_gradient);
    }
    if (stats_out) *stats_out = stats;
    return p;
}

std::pair<SpecularMask, DetectionStats> detect_specular_mask(const Frame& frame, int dilation_radius) {
    DetectionStats stats;
    const DetectionPredicates p = detection_predicates(frame, &stats);
    SpecularMask raw = p.intensity;
    for (std::size_t i = 0; i < raw.bits().size(); ++i) {
        if (p.gradient.at(i)) raw.set(i, true);
    }
    SpecularMask mask = dilate_mask(raw, dilation_radius);
    stats.mask_pixels = mask.count();
    return {std::move(mask), stats};
}

}  // namespace speclift
