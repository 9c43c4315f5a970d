#include "speclift/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace speclift {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Uniform value in [0, 1) attached to an integer lattice point.
double lattice_value(std::int64_t ix, std::int64_t iy, std::uint64_t salt) {
    std::uint64_t h = splitmix(salt);
    h = splitmix(h ^ static_cast<std::uint64_t>(ix));
    h = splitmix(h ^ static_cast<std::uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double x, double y, std::uint64_t salt) {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double tx = smooth(x - fx);
    const double ty = smooth(y - fy);
    const double a = lattice_value(ix, iy, salt);
    const double b = lattice_value(ix + 1, iy, salt);
    const double c = lattice_value(ix, iy + 1, salt);
    const double d = lattice_value(ix + 1, iy + 1, salt);
    return (a + (b - a) * tx) * (1.0 - ty) + (c + (d - c) * tx) * ty;
}

// Three octaves, normalised to [0, 1].
double fractal_noise(double x, double y, double scale, std::uint64_t salt) {
    double v = 0.0;
    double amp = 1.0;
    double norm = 0.0;
    double f = 1.0 / scale;
    for (int o = 0; o < 3; ++o) {
        v += amp * value_noise(x * f, y * f, salt + 7919ULL * static_cast<std::uint64_t>(o));
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    return v / norm;
}

std::array<double, 3> texture_at(const SynthConfig& cfg, double x, double y) {
    const std::uint64_t base = splitmix(cfg.seed ^ 0x7e47u);
    std::array<double, 3> t{};
    switch (cfg.texture) {
        case Texture::ValueNoise: {
            const double shared = fractal_noise(x, y, cfg.texture_scale, base);
            for (int ch = 0; ch < 3; ++ch) {
                const double own = fractal_noise(x, y, cfg.texture_scale, base + 101ULL * (ch + 1));
                t[static_cast<std::size_t>(ch)] = 0.7 * shared + 0.3 * own;
            }
            break;
        }
        case Texture::Checker: {
            // Soft-edged squares so edges stay below highlight gradients.
            const double s = std::sin(std::numbers::pi * x / cfg.texture_scale) *
                             std::sin(std::numbers::pi * y / cfg.texture_scale);
            const double k = 0.5 + 0.5 * std::tanh(2.0 * s);
            t = {k, 0.3 + 0.4 * k, 1.0 - k};
            break;
        }
        case Texture::Gradient: {
            const double ramp = 0.5 + 0.5 * std::sin(x / (4.0 * cfg.texture_scale) + 0.7 * std::sin(y / (3.0 * cfg.texture_scale)));
            const double n = fractal_noise(x, y, cfg.texture_scale, base);
            t = {0.75 * ramp + 0.25 * n, 0.6 * ramp + 0.4 * n, 0.4 * ramp + 0.6 * (1.0 - n)};
            break;
        }
    }
    for (auto& v : t) v = cfg.texture_lo + (cfg.texture_hi - cfg.texture_lo) * std::clamp(v, 0.0, 1.0);
    return t;
}

// Texture-space coordinate seen at pixel (x, y) of frame w.
std::pair<double, double> scene_point(const SynthConfig& cfg, double x, double y, int w) {
    double px = x;
    double py = y;
    const double t = static_cast<double>(w);
    switch (cfg.motion) {
        case Motion::Static:
            break;
        case Motion::Translate:
            px -= 0.8 * cfg.motion_speed * t;
            py -= 0.6 * cfg.motion_speed * t;
            break;
        case Motion::CameraPan:
            px += cfg.motion_speed * t;
            break;
        case Motion::Rotate: {
            const double a = -cfg.motion_speed * t * std::numbers::pi / 180.0;
            const double cx = 0.5 * (cfg.width - 1);
            const double cy = 0.5 * (cfg.height - 1);
            const double dx = x - cx;
            const double dy = y - cy;
            px = cx + std::cos(a) * dx - std::sin(a) * dy;
            py = cy + std::sin(a) * dx + std::cos(a) * dy;
            break;
        }
    }
    if (cfg.deformation != 0.0) {
        const double ox = cfg.deformation * std::sin(2.0 * std::numbers::pi * y / 64.0 + 0.5 * t);
        const double oy = cfg.deformation * std::sin(2.0 * std::numbers::pi * x / 64.0 + 0.7 * t);
        px += ox;
        py += oy;
    }
    return {px, py};
}

// Folds v back into [lo, hi] as if bouncing off the ends.
double bounce(double v, double lo, double hi) {
    const double len = hi - lo;
    if (len <= 0.0) return lo;
    double m = std::fmod(v - lo, 2.0 * len);
    if (m < 0.0) m += 2.0 * len;
    return lo + (m > len ? 2.0 * len - m : m);
}

struct Blob {
    double x = 0.0;
    double y = 0.0;
    double radius = 0.0;
    double heading = 0.0;
};

}  // namespace

void SynthConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("synth config: " + what); };
    if (frames < 1) fail("frames must be >= 1");
    if (width < 8 || height < 8) fail("image must be at least 8x8");
    if (!(texture_scale > 0.0)) fail("texture_scale must be positive");
    if (!(texture_lo >= 0.0 && texture_hi <= 1.0 && texture_lo <= texture_hi)) fail("texture range must lie in [0,1]");
    if (highlight_count < 0) fail("highlight_count must be >= 0");
    if (!(radius_min > 0.0 && radius_max >= radius_min)) fail("radius range must be positive and ordered");
    if (!(gain > 1.0)) fail("gain must exceed 1");
    if (!(edge_sigma > 0.0)) fail("edge_sigma must be positive");
    if (!(drift >= 0.0)) fail("drift must be nonnegative");
    for (double t : tint) {
        if (!(t >= 0.0 && t <= 1.0)) fail("tint must lie in [0,1]");
    }
}

SynthConfig preset(const std::string& name) {
    SynthConfig c;
    if (name == "torso-like") {
        // Defaults: large highlights over a slowly panning surface.
        return c;
    }
    if (name == "heart-like") {
        c.motion = Motion::Rotate;
        c.motion_speed = 0.3;
        c.deformation = 1.0;
        c.texture_scale = 24.0;
        c.highlight_count = 24;
        c.radius_min = 3.0;
        c.radius_max = 6.0;
        c.drift = 2.0;
        return c;
    }
    if (name == "dragon-like") {
        c.motion = Motion::Translate;
        c.motion_speed = 0.8;
        c.texture = Texture::Gradient;
        c.texture_lo = 0.05;
        c.texture_hi = 0.6;
        c.highlight_count = 8;
        c.radius_min = 5.0;
        c.radius_max = 9.0;
        c.drift = 2.5;
        c.tint = {1.0, 0.82, 0.55};
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected torso-like, heart-like or dragon-like)");
}

std::vector<std::string> preset_names() { return {"torso-like", "heart-like", "dragon-like"}; }

nlohmann::json to_json(const SynthConfig& c) {
    static const char* motions[] = {"static", "translate", "rotate", "camera-pan"};
    static const char* textures[] = {"checker", "value-noise", "gradient"};
    return {{"frames", c.frames},
            {"width", c.width},
            {"height", c.height},
            {"motion", motions[static_cast<int>(c.motion)]},
            {"motion_speed", c.motion_speed},
            {"deformation", c.deformation},
            {"texture", textures[static_cast<int>(c.texture)]},
            {"texture_scale", c.texture_scale},
            {"texture_lo", c.texture_lo},
            {"texture_hi", c.texture_hi},
            {"highlight_count", c.highlight_count},
            {"radius_min", c.radius_min},
            {"radius_max", c.radius_max},
            {"gain", c.gain},
            {"edge_sigma", c.edge_sigma},
            {"drift", c.drift},
            {"tint", c.tint},
            {"seed", c.seed}};
}

SynthSequence generate_sequence(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Blob> blobs(static_cast<std::size_t>(cfg.highlight_count));
    for (auto& b : blobs) {
        b.radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * unit(rng);
        b.x = b.radius + (cfg.width - 1 - 2.0 * b.radius) * unit(rng);
        b.y = b.radius + (cfg.height - 1 - 2.0 * b.radius) * unit(rng);
        b.heading = 2.0 * std::numbers::pi * unit(rng);
    }
    // The nominal radius is where the profile falls to one half.
    const double core_offset = cfg.edge_sigma * std::sqrt(2.0 * std::log(2.0 * cfg.gain));
    const double reach = cfg.edge_sigma * std::sqrt(2.0 * std::log(cfg.gain * 255.0 * 4.0)) + 1.0;

    SynthSequence out;
    const int w = cfg.width;
    const int h = cfg.height;
    for (int f = 0; f < cfg.frames; ++f) {
        std::array<std::vector<double>, 3> clean;
        for (auto& p : clean) p.resize(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const auto [sx, sy] = scene_point(cfg, c, r, f);
                const auto t = texture_at(cfg, sx, sy);
                const std::size_t i = static_cast<std::size_t>(r * w + c);
                for (std::size_t ch = 0; ch < 3; ++ch) clean[ch][i] = t[ch];
            }
        }

        std::vector<double> alpha(clean[0].size(), 0.0);
        for (const auto& b : blobs) {
            const double cx = bounce(b.x + cfg.drift * f * std::cos(b.heading), b.radius, w - 1 - b.radius);
            const double cy = bounce(b.y + cfg.drift * f * std::sin(b.heading), b.radius, h - 1 - b.radius);
            const double core = std::max(0.0, b.radius - core_offset);
            const double extent = b.radius + reach;
            const int r0 = std::max(0, static_cast<int>(std::floor(cy - extent)));
            const int r1 = std::min(h - 1, static_cast<int>(std::ceil(cy + extent)));
            const int c0 = std::max(0, static_cast<int>(std::floor(cx - extent)));
            const int c1 = std::min(w - 1, static_cast<int>(std::ceil(cx + extent)));
            for (int r = r0; r <= r1; ++r) {
                for (int c = c0; c <= c1; ++c) {
                    const double d = std::hypot(c - cx, r - cy);
                    const double t = std::max(0.0, d - core);
                    const double a = std::min(1.0, cfg.gain * std::exp(-t * t / (2.0 * cfg.edge_sigma * cfg.edge_sigma)));
                    auto& slot = alpha[static_cast<std::size_t>(r * w + c)];
                    slot = std::max(slot, a);
                }
            }
        }

        std::array<std::vector<double>, 3> damaged = clean;
        SpecularMask truth(w, h);
        for (std::size_t i = 0; i < alpha.size(); ++i) {
            if (alpha[i] <= 0.0) continue;
            double diff = 0.0;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = clean[ch][i] + alpha[i] * (cfg.tint[ch] - clean[ch][i]);
                damaged[ch][i] = std::clamp(v, 0.0, 1.0);
                diff = std::max(diff, std::abs(damaged[ch][i] - clean[ch][i]));
            }
            if (diff > 1.0 / 255.0) truth.set(i, true);
        }
        out.clean.push_back(Frame(w, h, std::move(clean)));
        out.damaged.push_back(Frame(w, h, std::move(damaged)));
        out.truth.push_back(std::move(truth));
    }
    return out;
}

Confusion confusion(const SpecularMask& pred, const SpecularMask& gt) {
    require_same_size(pred.size(), gt.size(), "mask metrics");
    Confusion m;
    for (std::size_t i = 0; i < pred.bits().size(); ++i) {
        const bool p = pred.at(i);
        const bool g = gt.at(i);
        if (p && g) ++m.tp;
        else if (p) ++m.fp;
        else if (g) ++m.fn;
        else ++m.tn;
    }
    return m;
}

double dice(const SpecularMask& pred, const SpecularMask& gt) {
    const Confusion m = confusion(pred, gt);
    const std::size_t denom = 2 * m.tp + m.fp + m.fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(m.tp) / static_cast<double>(denom);
}

double accuracy(const SpecularMask& pred, const SpecularMask& gt) {
    const Confusion m = confusion(pred, gt);
    const std::size_t n = m.tp + m.fp + m.fn + m.tn;
    return n == 0 ? 1.0 : static_cast<double>(m.tp + m.tn) / static_cast<double>(n);
}

double precision(const SpecularMask& pred, const SpecularMask& gt) {
    const Confusion m = confusion(pred, gt);
    return m.tp + m.fp == 0 ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
}

double error_rate(const SpecularMask& pred, const SpecularMask& gt) {
    const Confusion m = confusion(pred, gt);
    const std::size_t n = m.tp + m.fp + m.fn + m.tn;
    return n == 0 ? 0.0 : 100.0 * static_cast<double>(m.fp + m.fn) / static_cast<double>(n);
}

double masked_psnr(const Frame& result, const Frame& clean, const SpecularMask& mask) {
    require_same_size(result.size(), clean.size(), "masked_psnr");
    require_same_size(result.size(), mask.size(), "masked_psnr mask");
    const std::size_t n = mask.count();
    if (n == 0) throw DegenerateInputError("masked_psnr: empty mask");
    double se = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
        const auto& a = result.plane(ch);
        const auto& b = clean.plane(ch);
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!mask.at(i)) continue;
            const double d = a[i] - b[i];
            se += d * d;
        }
    }
    const double mse = se / (3.0 * static_cast<double>(n));
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

MetricReport evaluate_masks(const std::vector<SpecularMask>& pred, const std::vector<SpecularMask>& gt,
                            const Sequence* restored, const Sequence* clean, const Sequence* damaged) {
    if (pred.size() != gt.size()) {
        throw DimensionMismatchError("evaluate_masks: " + std::to_string(pred.size()) + " predicted vs " +
                                     std::to_string(gt.size()) + " ground-truth masks");
    }
    const bool with_psnr = restored && clean && damaged;
    if (with_psnr && (restored->frame_count() != gt.size() || clean->frame_count() != gt.size() ||
                      damaged->frame_count() != gt.size())) {
        throw DimensionMismatchError("evaluate_masks: frame counts differ from mask count");
    }
    MetricReport rep;
    double before = 0.0;
    double after = 0.0;
    int psnr_frames = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        FrameMetrics m;
        m.index = static_cast<int>(i);
        m.dice = dice(pred[i], gt[i]);
        m.accuracy = accuracy(pred[i], gt[i]);
        m.precision = precision(pred[i], gt[i]);
        m.error_rate = error_rate(pred[i], gt[i]);
        if (with_psnr && !gt[i].none()) {
            m.psnr_before = masked_psnr((*damaged)[i], (*clean)[i], gt[i]);
            m.psnr_after = masked_psnr((*restored)[i], (*clean)[i], gt[i]);
            before += *m.psnr_before;
            after += *m.psnr_after;
            ++psnr_frames;
        }
        rep.mean_dice += m.dice;
        rep.mean_accuracy += m.accuracy;
        rep.mean_precision += m.precision;
        rep.mean_error_rate += m.error_rate;
        rep.frames.push_back(m);
    }
    if (!pred.empty()) {
        const double n = static_cast<double>(pred.size());
        rep.mean_dice /= n;
        rep.mean_accuracy /= n;
        rep.mean_precision /= n;
        rep.mean_error_rate /= n;
    }
    if (psnr_frames > 0) {
        rep.mean_psnr_before = before / psnr_frames;
        rep.mean_psnr_after = after / psnr_frames;
    }
    return rep;
}

nlohmann::json to_json(const MetricReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& m : r.frames) {
        frames.push_back({{"index", m.index},
                          {"dice", m.dice},
                          {"accuracy", m.accuracy},
                          {"precision", m.precision},
                          {"error_rate", m.error_rate},
                          {"psnr_before", opt(m.psnr_before)},
                          {"psnr_after", opt(m.psnr_after)}});
    }
    return {{"schema", 1},
            {"frames", frames},
            {"mean",
             {{"dice", r.mean_dice},
              {"accuracy", r.mean_accuracy},
              {"precision", r.mean_precision},
              {"error_rate", r.mean_error_rate},
              {"psnr_before", opt(r.mean_psnr_before)},
              {"psnr_after", opt(r.mean_psnr_after)}}},
            {"config", r.config}};
}

}  // namespace speclift
