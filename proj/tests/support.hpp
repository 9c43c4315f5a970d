// Shared fixtures for the unit suites.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "speclift/video_model.hpp"

namespace testing {

inline speclift::Frame random_frame(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::array<std::vector<double>, 3> planes;
    for (auto& p : planes) {
        p.resize(static_cast<std::size_t>(w * h));
        for (auto& v : p) v = u(rng);
    }
    return speclift::Frame(w, h, std::move(planes));
}

inline speclift::ScalarField random_field(int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(w * h));
    for (auto& x : v) x = u(rng);
    return speclift::ScalarField(w, h, std::move(v));
}

inline speclift::SpecularMask random_mask(int w, int h, std::uint64_t seed, double p = 0.2) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(p);
    speclift::SpecularMask m(w, h);
    for (std::size_t i = 0; i < m.bits().size(); ++i) m.set(i, b(rng));
    return m;
}

// Smooth band-limited texture, handy wherever registration or patch search
// needs structure.
inline double smooth_texture(double x, double y, int channel = 0) {
    const double c = channel * 0.7;
    return 0.45 + 0.2 * std::sin(0.21 * x + 0.4 + c) * std::cos(0.17 * y - 0.3) +
           0.12 * std::sin(0.09 * x - 0.13 * y + 1.1 * c) + 0.08 * std::cos(0.31 * y + 0.05 * x + c);
}

inline speclift::Frame texture_frame(int w, int h, double dx = 0.0, double dy = 0.0) {
    std::array<std::vector<double>, 3> planes;
    for (int ch = 0; ch < 3; ++ch) {
        auto& p = planes[static_cast<std::size_t>(ch)];
        p.resize(static_cast<std::size_t>(w * h));
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) p[static_cast<std::size_t>(r * w + c)] = smooth_texture(c + dx, r + dy, ch);
        }
    }
    return speclift::Frame(w, h, std::move(planes));
}

// Fresh per-test scratch directory under the system temp location.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("speclift_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
