// Core pixel containers shared by every stage of the pipeline.
//
// All images are stored row-major: sample (row, col) lives at index
// row * width + col. Colour frames have three planes (r, g, b) with values
// normalised to [0, 1].

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace speclift {

// Error hierarchy. Every failure raised by the library derives from Error so
// callers can catch at whatever granularity they need.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DegenerateInputError : Error {
    using Error::Error;
};
struct DimensionMismatchError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

struct Size {
    int width = 0;
    int height = 0;

    [[nodiscard]] std::size_t area() const {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }
    bool operator==(const Size&) const = default;
};

std::string to_string(Size s);

enum class Channel : int { R = 0, G = 1, B = 2 };

// Single-plane real field, e.g. mean intensity or gradient magnitude.
class ScalarField {
  public:
    ScalarField() = default;
    ScalarField(int width, int height, double fill = 0.0);
    ScalarField(int width, int height, std::vector<double> values);

    [[nodiscard]] int width() const { return size_.width; }
    [[nodiscard]] int height() const { return size_.height; }
    [[nodiscard]] Size size() const { return size_; }
    [[nodiscard]] bool empty() const { return values_.empty(); }

    [[nodiscard]] double operator()(int row, int col) const {
        return values_[index(row, col)];
    }
    double& operator()(int row, int col) { return values_[index(row, col)]; }

    [[nodiscard]] const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    [[nodiscard]] std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(size_.width) +
               static_cast<std::size_t>(col);
    }

    bool operator==(const ScalarField&) const = default;

  private:
    Size size_;
    std::vector<double> values_;
};

// Three-plane RGB frame with samples in [0, 1].
class Frame {
  public:
    Frame() = default;
    Frame(int width, int height, double r = 0.0, double g = 0.0, double b = 0.0);
    // Planes must each hold width*height samples; throws on size mismatch or
    // out-of-range samples.
    Frame(int width, int height, std::array<std::vector<double>, 3> planes);

    [[nodiscard]] int width() const { return size_.width; }
    [[nodiscard]] int height() const { return size_.height; }
    [[nodiscard]] Size size() const { return size_; }
    [[nodiscard]] std::size_t pixel_count() const { return size_.area(); }
    [[nodiscard]] bool empty() const { return pixel_count() == 0; }

    [[nodiscard]] double operator()(int c, int row, int col) const {
        return planes_[static_cast<std::size_t>(c)][index(row, col)];
    }
    double& operator()(int c, int row, int col) {
        return planes_[static_cast<std::size_t>(c)][index(row, col)];
    }

    [[nodiscard]] const std::vector<double>& plane(int c) const {
        return planes_[static_cast<std::size_t>(c)];
    }
    std::vector<double>& plane(int c) { return planes_[static_cast<std::size_t>(c)]; }
    [[nodiscard]] const std::vector<double>& plane(Channel c) const {
        return plane(static_cast<int>(c));
    }

    [[nodiscard]] std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(size_.width) +
               static_cast<std::size_t>(col);
    }

    // Throws DegenerateInputError if any sample is non-finite or outside [0,1].
    void validate() const;

    bool operator==(const Frame&) const = default;

  private:
    Size size_;
    std::array<std::vector<double>, 3> planes_;
};

// Ordered list of equally sized frames.
class Sequence {
  public:
    Sequence() = default;
    explicit Sequence(std::vector<Frame> frames);

    [[nodiscard]] std::size_t frame_count() const { return frames_.size(); }
    [[nodiscard]] bool empty() const { return frames_.empty(); }
    [[nodiscard]] Size size() const { return frames_.empty() ? Size{} : frames_.front().size(); }
    [[nodiscard]] const Frame& operator[](std::size_t i) const { return frames_[i]; }
    [[nodiscard]] const std::vector<Frame>& frames() const { return frames_; }

    void push_back(Frame f);

  private:
    std::vector<Frame> frames_;
};

// Binary specularity map: 1 marks damaged pixels, 0 clean ones.
class SpecularMask {
  public:
    SpecularMask() = default;
    SpecularMask(int width, int height, bool fill = false);

    [[nodiscard]] int width() const { return size_.width; }
    [[nodiscard]] int height() const { return size_.height; }
    [[nodiscard]] Size size() const { return size_; }

    [[nodiscard]] bool operator()(int row, int col) const { return bits_[index(row, col)] != 0; }
    void set(int row, int col, bool v) { bits_[index(row, col)] = v ? 1 : 0; }

    [[nodiscard]] bool at(std::size_t i) const { return bits_[i] != 0; }
    void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

    [[nodiscard]] std::size_t count() const;
    [[nodiscard]] bool none() const { return count() == 0; }
    [[nodiscard]] const std::vector<std::uint8_t>& bits() const { return bits_; }

    [[nodiscard]] SpecularMask complement() const;

    [[nodiscard]] std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(size_.width) +
               static_cast<std::size_t>(col);
    }

    bool operator==(const SpecularMask&) const = default;

  private:
    Size size_;
    std::vector<std::uint8_t> bits_;
};

// Per-pixel (r + g + b) / 3.
ScalarField mean_intensity(const Frame& frame);

// Euclidean norm of the spatial gradient; central differences in the
// interior, one-sided differences on the border. Needs at least 2x2 input.
ScalarField gradient_magnitude(const ScalarField& field);

void require_same_size(Size a, Size b, const char* what);

}  // namespace speclift
