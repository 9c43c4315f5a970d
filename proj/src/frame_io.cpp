#include "speclift/frame_io.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

namespace speclift {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG

Image8 read_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw IoError("cannot read PNG " + path.string() + ": " + img.message);
    }
    Image8 out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    const bool colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
    out.channels = colour ? 3 : 1;
    img.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    out.data.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

void write_png(const Image8& image, const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.data.data(), 0, nullptr)) {
        throw IoError("cannot write PNG " + path.string() + ": " + img.message);
    }
}

namespace {

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Frame load_frame(const fs::path& path) {
    const Image8 raw = read_png(path);
    const std::size_t n = static_cast<std::size_t>(raw.width) * static_cast<std::size_t>(raw.height);
    std::array<std::vector<double>, 3> planes;
    for (auto& p : planes) p.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = raw.channels == 3 ? i * 3 + c : i;
            planes[c][i] = raw.data[src] / 255.0;
        }
    }
    return Frame(raw.width, raw.height, std::move(planes));
}

void save_frame(const Frame& frame, const fs::path& path) {
    Image8 raw{frame.width(), frame.height(), 3, {}};
    raw.data.resize(frame.pixel_count() * 3);
    for (std::size_t i = 0; i < frame.pixel_count(); ++i) {
        for (int c = 0; c < 3; ++c) raw.data[i * 3 + static_cast<std::size_t>(c)] = quantize(frame.plane(c)[i]);
    }
    write_png(raw, path);
}

SpecularMask load_mask(const fs::path& path) {
    const Image8 raw = read_png(path);
    if (raw.channels != 1) {
        throw FormatError("mask " + path.string() + " is not single-channel");
    }
    SpecularMask mask(raw.width, raw.height);
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        const auto v = raw.data[i];
        if (v != 0 && v != 255) {
            throw FormatError("mask " + path.string() + " has non-binary value " +
                              std::to_string(v) + " at pixel " + std::to_string(i));
        }
        mask.set(i, v == 255);
    }
    return mask;
}

void save_mask(const SpecularMask& mask, const fs::path& path) {
    Image8 raw{mask.width(), mask.height(), 1, {}};
    raw.data.resize(mask.size().area());
    for (std::size_t i = 0; i < raw.data.size(); ++i) raw.data[i] = mask.at(i) ? 255 : 0;
    write_png(raw, path);
}

// ---------------------------------------------------------------------------
// Sequences

namespace {

struct PatternParts {
    std::string prefix;
    std::string suffix;
    int width = 0;  // zero-padding width, 0 when unpadded
};

PatternParts split_pattern(const std::string& pattern) {
    static const std::regex conv(R"(%(0?)(\d*)d)");
    std::smatch m;
    if (!std::regex_search(pattern, m, conv)) {
        throw IoError("pattern '" + pattern + "' has no %d conversion");
    }
    PatternParts parts;
    parts.prefix = m.prefix();
    parts.suffix = m.suffix();
    if (parts.suffix.find('%') != std::string::npos) {
        throw IoError("pattern '" + pattern + "' has more than one conversion");
    }
    parts.width = m[2].length() ? std::stoi(m[2]) : 0;
    return parts;
}

}  // namespace

std::string format_indexed(const std::string& pattern, int index) {
    const PatternParts parts = split_pattern(pattern);
    std::string digits = std::to_string(index);
    if (static_cast<int>(digits.size()) < parts.width) {
        digits.insert(0, static_cast<std::size_t>(parts.width) - digits.size(), '0');
    }
    return parts.prefix + digits + parts.suffix;
}

std::vector<int> sequence_indices(const SequenceSource& source) {
    if (!fs::is_directory(source.directory)) {
        throw IoError("input directory does not exist: " + source.directory.string());
    }
    const PatternParts parts = split_pattern(source.pattern);
    std::set<int> found;
    for (const auto& entry : fs::directory_iterator(source.directory)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name.size() <= parts.prefix.size() + parts.suffix.size()) continue;
        if (name.compare(0, parts.prefix.size(), parts.prefix) != 0) continue;
        if (name.compare(name.size() - parts.suffix.size(), parts.suffix.size(), parts.suffix) != 0) continue;
        const std::string mid =
            name.substr(parts.prefix.size(), name.size() - parts.prefix.size() - parts.suffix.size());
        int idx = 0;
        const auto [ptr, ec] = std::from_chars(mid.data(), mid.data() + mid.size(), idx);
        if (ec != std::errc{} || ptr != mid.data() + mid.size()) continue;
        if (source.first_index && idx < *source.first_index) continue;
        if (source.last_index && idx > *source.last_index) continue;
        found.insert(idx);
    }
    if (found.empty()) {
        throw IoError("no files matching '" + source.pattern + "' in " + source.directory.string());
    }
    const int first = source.first_index.value_or(*found.begin());
    const int last = source.last_index.value_or(*found.rbegin());
    std::vector<int> indices;
    for (int i = first; i <= last; ++i) {
        if (!found.count(i)) {
            throw IoError("frame sequence has a gap: missing index " + std::to_string(i) + " (" +
                          (source.directory / format_indexed(source.pattern, i)).string() + ")");
        }
        indices.push_back(i);
    }
    return indices;
}

Sequence load_sequence(const SequenceSource& source) {
    Sequence seq;
    for (int idx : sequence_indices(source)) {
        const fs::path path = source.directory / format_indexed(source.pattern, idx);
        Frame f = load_frame(path);
        if (!seq.empty() && f.size() != seq.size()) {
            throw DimensionMismatchError("frame " + path.string() + " (index " + std::to_string(idx) +
                                         ") is " + to_string(f.size()) + ", expected " +
                                         to_string(seq.size()));
        }
        seq.push_back(std::move(f));
    }
    return seq;
}

void save_sequence(const Sequence& seq, const fs::path& dir, const std::string& pattern,
                   int first_index) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < seq.frame_count(); ++i) {
        save_frame(seq[i], dir / format_indexed(pattern, first_index + static_cast<int>(i)));
    }
}

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (prior_count < 1) fail("prior_count must be >= 1");
    if (rank) {
        if (*rank < 1) fail("rank must be >= 1");
        if (*rank > prior_count) fail("rank must satisfy r <= prior_count (Z)");
    }
    if (!(energy > 0.0 && energy <= 1.0)) fail("energy must lie in (0, 1]");
    if (!(gamma >= 0.0)) fail("gamma must be nonnegative");
    if (!(delta >= 0.0)) fail("delta must be nonnegative");
    if (!(tukey_c > 0.0)) fail("tukey_c must be positive");
    if (!(zeta > 0.0)) fail("zeta must be positive");
    if (!(xi > 0.0)) fail("xi must be positive");
    if (!(regrid_tol > 0.0)) fail("regrid_tol must be positive");
    if (max_regrids < 0) fail("max_regrids must be nonnegative");
    if (patch_size < 3 || patch_size % 2 == 0) fail("patch_size must be odd and >= 3");
    if (dilation_radius < 0) fail("dilation_radius must be nonnegative");
    if (lm_levels < 1) fail("lm_levels must be >= 1");
    if (lm_max_iterations < 1) fail("lm_max_iterations must be >= 1");
    if (!(lm_tolerance >= 0.0)) fail("lm_tolerance must be nonnegative");
    if (lattice_spacing < 4) fail("lattice_spacing must be >= 4");
    if (sweeps < 0) fail("sweeps must be nonnegative");
    if (!(prior_overlap > 0.0 && prior_overlap <= 1.0)) fail("prior_overlap must lie in (0, 1]");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size()) {
        throw ConfigError("cannot parse value '" + value + "' for key '" + key + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("cannot parse value '" + value + "' for key '" + key + "'");
}

}  // namespace

PipelineConfig parse_config(std::string_view text) {
    PipelineConfig cfg;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError("duplicate key '" + key + "'");

        if (key == "prior_count") cfg.prior_count = parse_number<int>(key, value);
        else if (key == "rank") cfg.rank = parse_number<int>(key, value);
        else if (key == "energy") cfg.energy = parse_number<double>(key, value);
        else if (key == "full_rank") cfg.full_rank = parse_bool(key, value);
        else if (key == "gamma") cfg.gamma = parse_number<double>(key, value);
        else if (key == "delta") cfg.delta = parse_number<double>(key, value);
        else if (key == "tukey_c") cfg.tukey_c = parse_number<double>(key, value);
        else if (key == "zeta") cfg.zeta = parse_number<double>(key, value);
        else if (key == "xi") cfg.xi = parse_number<double>(key, value);
        else if (key == "regrid_tol") cfg.regrid_tol = parse_number<double>(key, value);
        else if (key == "max_regrids") cfg.max_regrids = parse_number<int>(key, value);
        else if (key == "patch_size") cfg.patch_size = parse_number<int>(key, value);
        else if (key == "dilation_radius") cfg.dilation_radius = parse_number<int>(key, value);
        else if (key == "lm_levels") cfg.lm_levels = parse_number<int>(key, value);
        else if (key == "lm_max_iterations") cfg.lm_max_iterations = parse_number<int>(key, value);
        else if (key == "lm_tolerance") cfg.lm_tolerance = parse_number<double>(key, value);
        else if (key == "lattice_spacing") cfg.lattice_spacing = parse_number<int>(key, value);
        else if (key == "sweeps") cfg.sweeps = parse_number<int>(key, value);
        else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
        else if (key == "prior_overlap") cfg.prior_overlap = parse_number<double>(key, value);
        else throw ConfigError("unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

nlohmann::json to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["prior_count"] = c.prior_count;
    j["rank"] = c.rank ? nlohmann::json(*c.rank) : nlohmann::json(nullptr);
    j["energy"] = c.energy;
    j["full_rank"] = c.full_rank;
    j["gamma"] = c.gamma;
    j["delta"] = c.delta;
    j["tukey_c"] = c.tukey_c;
    j["zeta"] = c.zeta;
    j["xi"] = c.xi;
    j["regrid_tol"] = c.regrid_tol;
    j["max_regrids"] = c.max_regrids;
    j["patch_size"] = c.patch_size;
    j["dilation_radius"] = c.dilation_radius;
    j["lm_levels"] = c.lm_levels;
    j["lm_max_iterations"] = c.lm_max_iterations;
    j["lm_tolerance"] = c.lm_tolerance;
    j["lattice_spacing"] = c.lattice_spacing;
    j["sweeps"] = c.sweeps;
    j["seed"] = c.seed;
    j["prior_overlap"] = c.prior_overlap;
    return j;
}

}  // namespace speclift
