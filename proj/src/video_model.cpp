#include "speclift/video_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace speclift {

std::string to_string(Size s) {
    return std::to_string(s.width) + "x" + std::to_string(s.height);
}

void require_same_size(Size a, Size b, const char* what) {
    if (a != b) {
        throw DimensionMismatchError(std::string(what) + ": size mismatch " + to_string(a) +
                                     " vs " + to_string(b));
    }
}

namespace {

void require_positive(int width, int height) {
    if (width < 1 || height < 1) {
        throw DegenerateInputError("image dimensions must be positive, got " +
                                   to_string({width, height}));
    }
}

}  // namespace

ScalarField::ScalarField(int width, int height, double fill)
    : size_{width, height}, values_(size_.area(), fill) {
    require_positive(width, height);
}

ScalarField::ScalarField(int width, int height, std::vector<double> values)
    : size_{width, height}, values_(std::move(values)) {
    require_positive(width, height);
    if (values_.size() != size_.area()) {
        throw DimensionMismatchError("scalar field: expected " + std::to_string(size_.area()) +
                                     " values, got " + std::to_string(values_.size()));
    }
}

Frame::Frame(int width, int height, double r, double g, double b) : size_{width, height} {
    require_positive(width, height);
    planes_[0].assign(size_.area(), r);
    planes_[1].assign(size_.area(), g);
    planes_[2].assign(size_.area(), b);
    validate();
}

Frame::Frame(int width, int height, std::array<std::vector<double>, 3> planes)
    : size_{width, height}, planes_(std::move(planes)) {
    require_positive(width, height);
    for (const auto& p : planes_) {
        if (p.size() != size_.area()) {
            throw DimensionMismatchError("frame plane has " + std::to_string(p.size()) +
                                         " samples, expected " + std::to_string(size_.area()));
        }
    }
    validate();
}

void Frame::validate() const {
    for (int c = 0; c < 3; ++c) {
        for (double v : planes_[static_cast<std::size_t>(c)]) {
            if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
                throw DegenerateInputError("frame sample out of [0,1]: " + std::to_string(v));
            }
        }
    }
}

Sequence::Sequence(std::vector<Frame> frames) {
    for (auto& f : frames) push_back(std::move(f));
}

void Sequence::push_back(Frame f) {
    if (!frames_.empty()) require_same_size(frames_.front().size(), f.size(), "sequence");
    frames_.push_back(std::move(f));
}

SpecularMask::SpecularMask(int width, int height, bool fill)
    : size_{width, height}, bits_(size_.area(), fill ? 1 : 0) {
    require_positive(width, height);
}

std::size_t SpecularMask::count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

SpecularMask SpecularMask::complement() const {
    SpecularMask out = *this;
    for (auto& b : out.bits_) b = b ? 0 : 1;
    return out;
}

ScalarField mean_intensity(const Frame& frame) {
    ScalarField out(frame.width(), frame.height());
    const auto& r = frame.plane(0);
    const auto& g = frame.plane(1);
    const auto& b = frame.plane(2);
    auto& v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (r[i] + g[i] + b[i]) / 3.0;
    return out;
}

ScalarField gradient_magnitude(const ScalarField& field) {
    const int w = field.width();
    const int h = field.height();
    if (w < 2 || h < 2) {
        throw DegenerateInputError("gradient_magnitude needs at least 2x2 input, got " +
                                   to_string(field.size()));
    }
    ScalarField out(w, h);
    for (int row = 0; row < h; ++row) {
        for (int col = 0; col < w; ++col) {
            double dx;
            if (col == 0) {
                dx = field(row, 1) - field(row, 0);
            } else if (col == w - 1) {
                dx = field(row, w - 1) - field(row, w - 2);
            } else {
                dx = 0.5 * (field(row, col + 1) - field(row, col - 1));
            }
            double dy;
            if (row == 0) {
                dy = field(1, col) - field(0, col);
            } else if (row == h - 1) {
                dy = field(h - 1, col) - field(h - 2, col);
            } else {
                dy = 0.5 * (field(row + 1, col) - field(row - 1, col));
            }
            out(row, col) = std::hypot(dx, dy);
        }
    }
    return out;
}

}  // namespace speclift
