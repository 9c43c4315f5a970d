// Frame/mask file I/O and the flat key = value pipeline configuration.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "speclift/video_model.hpp"

namespace speclift {

struct IoError : Error {
    using Error::Error;
};

// Directory of numbered frames. `pattern` is a printf-style name containing
// exactly one %0Nd (or %d) conversion, e.g. "frame_%06d.png".
struct SequenceSource {
    std::filesystem::path directory;
    std::string pattern = "frame_%06d.png";
    std::optional<int> first_index{};
    std::optional<int> last_index{};
};

struct PipelineConfig {
    int prior_count = 5;             // Z
    std::optional<int> rank;         // explicit r; when unset, energy selects it
    double energy = 0.95;            // e in (0, 1]
    bool full_rank = false;          // force r = Z
    double gamma = 0.01;             // smoothness weight
    double delta = 1.0;              // topology weight
    double tukey_c = 0.2;            // Tukey cutoff, normalised intensity units
    double zeta = 0.5;               // topology acceptance margin around |J| = 1
    double xi = 0.01;                // topology expansion balance
    double regrid_tol = 0.1;         // regrid when min |J| drops below this
    int max_regrids = 20;
    int patch_size = 7;
    int dilation_radius = 1;
    int lm_levels = 3;
    int lm_max_iterations = 50;      // per level
    double lm_tolerance = 1e-5;      // relative energy decrease stopping rule
    int lattice_spacing = 8;         // finest control-point spacing, pixels
    int sweeps = 5;
    std::uint64_t seed = 0;
    double prior_overlap = 0.5;      // max fraction of |mask| a prior may share

    // Throws ConfigError naming the violated constraint.
    void validate() const;

    bool operator==(const PipelineConfig&) const = default;
};

PipelineConfig parse_config(std::string_view text);
PipelineConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& config);

// Formats `pattern` with `index`, e.g. ("frame_%06d.png", 3) -> "frame_000003.png".
std::string format_indexed(const std::string& pattern, int index);

Sequence load_sequence(const SequenceSource& source);
// Indices of the files load_sequence would read, in order.
std::vector<int> sequence_indices(const SequenceSource& source);

Frame load_frame(const std::filesystem::path& path);
void save_frame(const Frame& frame, const std::filesystem::path& path);
// Writes frames as pattern-formatted files starting at `first_index`.
void save_sequence(const Sequence& seq, const std::filesystem::path& dir,
                   const std::string& pattern = "frame_%06d.png", int first_index = 1);

// Masks are 8-bit single-channel PNGs, 255 = specular, 0 = clean.
SpecularMask load_mask(const std::filesystem::path& path);
void save_mask(const SpecularMask& mask, const std::filesystem::path& path);

// Raw 8-bit I/O shared by the helpers above.
struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3
    std::vector<std::uint8_t> data;
};
Image8 read_png(const std::filesystem::path& path);
void write_png(const Image8& image, const std::filesystem::path& path);

}  // namespace speclift
