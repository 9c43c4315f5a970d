#include "speclift/patch.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

namespace speclift {

bool SearchSpace::usable(int row, int col) const {
    return std::any_of(valid.begin(), valid.end(), [&](const SpecularMask& m) { return m(row, col); });
}

SearchSpace build_search_space(const std::vector<Frame>& aligned_priors,
                               const std::vector<SpecularMask>& prior_unusable,
                               const SpecularMask& current_mask) {
    if (aligned_priors.size() != prior_unusable.size()) {
        throw DimensionMismatchError("build_search_space: one unusable mask per prior required");
    }
    SearchSpace space;
    space.priors = aligned_priors;
    for (std::size_t z = 0; z < aligned_priors.size(); ++z) {
        require_same_size(current_mask.size(), aligned_priors[z].size(), "build_search_space prior");
        require_same_size(current_mask.size(), prior_unusable[z].size(), "build_search_space mask");
        space.valid.push_back(prior_unusable[z].complement());
    }
    const std::size_t damaged = current_mask.count();
    if (damaged == 0) {
        space.coverage = 1.0;
        return space;
    }
    std::size_t covered = 0;
    for (std::size_t i = 0; i < current_mask.bits().size(); ++i) {
        if (!current_mask.at(i)) continue;
        for (const auto& v : space.valid) {
            if (v.at(i)) {
                ++covered;
                break;
            }
        }
    }
    space.coverage = static_cast<double>(covered) / static_cast<double>(damaged);
    if (covered == 0) {
        throw CoverageError("search space has zero usable coverage over the damaged region; "
                            "increase prior_count (Z)");
    }
    return space;
}

Patch extract_patch(const Frame& frame, const SpecularMask* usable, int row, int col, int size) {
    Patch p;
    p.size = size;
    const int half = size / 2;
    p.rgb.assign(static_cast<std::size_t>(size * size * 3), 0.0);
    p.valid.assign(static_cast<std::size_t>(size * size), 0);
    for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) {
            const int r = row + dy;
            const int c = col + dx;
            const std::size_t k = static_cast<std::size_t>((dy + half) * size + dx + half);
            if (r < 0 || c < 0 || r >= frame.height() || c >= frame.width()) continue;
            if (usable && !(*usable)(r, c)) continue;
            p.valid[k] = 1;
            for (int ch = 0; ch < 3; ++ch) p.rgb[k * 3 + static_cast<std::size_t>(ch)] = frame(ch, r, c);
        }
    }
    return p;
}

double patch_distance(const Patch& a, const Patch& b, const std::vector<std::uint8_t>& validity) {
    if (a.size != b.size || a.size % 2 == 0 || validity.size() != static_cast<std::size_t>(a.size * a.size)) {
        throw DimensionMismatchError("patch_distance: patches must share one odd size");
    }
    double ssd = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < validity.size(); ++k) {
        if (!validity[k]) continue;
        ++n;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double d = a.rgb[k * 3 + ch] - b.rgb[k * 3 + ch];
            ssd += d * d;
        }
    }
    return n == 0 ? kInvalidDistance : ssd / static_cast<double>(n);
}

double ShiftMap::total_distance() const {
    double t = 0.0;
    for (const auto& e : entries) {
        if (std::isfinite(e.distance)) t += e.distance;
    }
    return t;
}

double candidate_distance(const Frame& target, const SpecularMask& known, int row, int col, const SearchSpace& space,
                          int prior, int src_row, int src_col, int patch_size) {
    const Frame& src = space.priors[static_cast<std::size_t>(prior)];
    const SpecularMask& valid = space.valid[static_cast<std::size_t>(prior)];
    const int w = target.width();
    const int h = target.height();
    const int half = patch_size / 2;
    const double* t0 = target.plane(0).data();
    const double* t1 = target.plane(1).data();
    const double* t2 = target.plane(2).data();
    const double* s0 = src.plane(0).data();
    const double* s1 = src.plane(1).data();
    const double* s2 = src.plane(2).data();
    double ssd = 0.0;
    int n = 0;
    for (int dy = -half; dy <= half; ++dy) {
        const int tr = row + dy;
        const int sr = src_row + dy;
        if (tr < 0 || tr >= h || sr < 0 || sr >= h) continue;
        for (int dx = -half; dx <= half; ++dx) {
            const int tc = col + dx;
            const int sc = src_col + dx;
            if (tc < 0 || tc >= w || sc < 0 || sc >= w) continue;
            const std::size_t ti = static_cast<std::size_t>(tr * w + tc);
            const std::size_t si = static_cast<std::size_t>(sr * w + sc);
            if (!known.at(ti) || !valid.at(si)) continue;
            const double d0 = t0[ti] - s0[si];
            const double d1 = t1[ti] - s1[si];
            const double d2 = t2[ti] - s2[si];
            ssd += d0 * d0 + d1 * d1 + d2 * d2;
            ++n;
        }
    }
    return n == 0 ? kInvalidDistance : ssd / n;
}

std::vector<int> onion_layers(const SpecularMask& mask) {
    const int w = mask.width();
    const int h = mask.height();
    std::vector<int> layer(mask.bits().size(), 0);
    std::deque<int> queue;
    for (std::size_t i = 0; i < layer.size(); ++i) {
        if (!mask.at(i)) queue.push_back(static_cast<int>(i));
    }
    if (queue.empty()) {
        // Nothing known anywhere: a single layer without context.
        std::fill(layer.begin(), layer.end(), 1);
        return layer;
    }
    while (!queue.empty()) {
        const int i = queue.front();
        queue.pop_front();
        const int r = i / w;
        const int c = i % w;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int rr = r + dy;
                const int cc = c + dx;
                if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
                const int j = rr * w + cc;
                if (!mask.at(static_cast<std::size_t>(j)) || layer[static_cast<std::size_t>(j)] != 0) continue;
                layer[static_cast<std::size_t>(j)] = layer[static_cast<std::size_t>(i)] + 1;
                queue.push_back(j);
            }
        }
    }
    return layer;
}

ShiftMap solve_shift_map(const Frame& frame, const SpecularMask& mask, const SearchSpace& space,
                         const ShiftMapOptions& options) {
    require_same_size(frame.size(), mask.size(), "solve_shift_map");
    if (options.patch_size < 3 || options.patch_size % 2 == 0) {
        throw ConfigError("patch size must be odd and >= 3");
    }
    ShiftMap shift;
    shift.patch_size = options.patch_size;
    if (mask.none()) return shift;
    if (space.priors.empty() || !(space.coverage > 0.0)) {
        throw CoverageError("search space has zero usable coverage; increase prior_count (Z)");
    }
    require_same_size(frame.size(), space.size(), "solve_shift_map search space");

    const int w = frame.width();
    const int h = frame.height();
    const int nprior = static_cast<int>(space.priors.size());
    const int ps = options.patch_size;

    // Usable source pixels of each prior, for random initialisation.
    std::vector<std::vector<int>> sources(static_cast<std::size_t>(nprior));
    for (int z = 0; z < nprior; ++z) {
        const auto& v = space.valid[static_cast<std::size_t>(z)];
        for (std::size_t i = 0; i < v.bits().size(); ++i) {
            if (v.at(i)) sources[static_cast<std::size_t>(z)].push_back(static_cast<int>(i));
        }
    }

    std::mt19937_64 rng(options.seed);
    Frame work = frame;
    SpecularMask known = mask.complement();

    const std::vector<int> layer = onion_layers(mask);
    const int max_layer = *std::max_element(layer.begin(), layer.end());

    // One nearest-neighbour field per prior: each prior has its own true
    // offset, so candidates propagate within a prior and the pixel keeps
    // whichever prior matches best.
    struct Match {
        int row = -1;
        int col = -1;
        double distance = kInvalidDistance;
    };
    const std::size_t np = static_cast<std::size_t>(nprior);
    std::vector<int> slot_of(layer.size(), -1);  // pixel -> row of `matches`
    std::vector<Match> matches;                  // slot * nprior + z

    auto try_source = [&](Match& m, int row, int col, int z, int sr, int sc) {
        if (sr < 0 || sc < 0 || sr >= h || sc >= w) return false;
        if (sr == m.row && sc == m.col) return false;
        if (!space.valid[static_cast<std::size_t>(z)](sr, sc)) return false;
        const double d = candidate_distance(work, known, row, col, space, z, sr, sc, ps);
        if (m.row < 0 || d < m.distance) {
            m = {sr, sc, d};
            return true;
        }
        return false;
    };

    for (int L = 1; L <= max_layer; ++L) {
        std::vector<int> members;
        for (std::size_t i = 0; i < layer.size(); ++i) {
            if (layer[i] == L) members.push_back(static_cast<int>(i));
        }
        if (members.empty()) continue;

        const std::size_t base = shift.entries.size();
        for (std::size_t n = 0; n < members.size(); ++n) {
            const int i = members[n];
            const int row = i / w;
            const int col = i % w;
            slot_of[static_cast<std::size_t>(i)] = static_cast<int>(base + n);
            for (int z = 0; z < nprior; ++z) {
                Match m;
                // Zero displacement, then offsets settled around this pixel
                // in earlier layers, then a random usable source.
                try_source(m, row, col, z, row, col);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nr = row + dy;
                        const int nc = col + dx;
                        if ((dy == 0 && dx == 0) || nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
                        const int s = slot_of[static_cast<std::size_t>(nr * w + nc)];
                        if (s < 0 || static_cast<std::size_t>(s) >= base) continue;
                        const Match& o = matches[static_cast<std::size_t>(s) * np + static_cast<std::size_t>(z)];
                        if (o.row >= 0) try_source(m, row, col, z, o.row - dy, o.col - dx);
                    }
                }
                const auto& pool = sources[static_cast<std::size_t>(z)];
                if (m.row < 0 && !pool.empty()) {
                    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                    const int flat = pool[pick(rng)];
                    try_source(m, row, col, z, flat / w, flat % w);
                }
                matches.push_back(m);
            }
            ShiftEntry e;
            e.row = row;
            e.col = col;
            shift.entries.push_back(e);
        }

        auto settle = [&](std::size_t k) {
            ShiftEntry& e = shift.entries[k];
            e.prior = -1;
            e.distance = kInvalidDistance;
            for (int z = 0; z < nprior; ++z) {
                const Match& m = matches[k * np + static_cast<std::size_t>(z)];
                if (m.row < 0) continue;
                if (e.prior < 0 || m.distance < e.distance) {
                    e.prior = z;
                    e.src_row = m.row;
                    e.src_col = m.col;
                    e.distance = m.distance;
                }
            }
        };
        auto layer_total = [&] {
            double t = 0.0;
            for (std::size_t k = base; k < shift.entries.size(); ++k) {
                settle(k);
                if (std::isfinite(shift.entries[k].distance)) t += shift.entries[k].distance;
            }
            return t;
        };
        std::vector<double> totals{layer_total()};

        for (int sweep = 0; sweep < options.sweeps; ++sweep) {
            const bool forward = sweep % 2 == 0;
            const int step = forward ? 1 : -1;
            const std::size_t count = members.size();
            for (std::size_t n = 0; n < count; ++n) {
                const std::size_t k = base + (forward ? n : count - 1 - n);
                const int row = shift.entries[k].row;
                const int col = shift.entries[k].col;
                for (int z = 0; z < nprior; ++z) {
                    Match& m = matches[k * np + static_cast<std::size_t>(z)];
                    if (m.row < 0) continue;

                    // Propagation from every assigned 8-neighbour; layers are
                    // thin rings, so scan-order neighbours alone rarely connect.
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int nr = row + dy * step;
                            const int nc = col + dx * step;
                            if ((dy == 0 && dx == 0) || nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
                            const int s = slot_of[static_cast<std::size_t>(nr * w + nc)];
                            if (s < 0) continue;
                            const Match& o = matches[static_cast<std::size_t>(s) * np + static_cast<std::size_t>(z)];
                            if (o.row >= 0) try_source(m, row, col, z, o.row + (row - nr), o.col + (col - nc));
                        }
                    }

                    // Random search with halving radius, uniform over the
                    // window clipped to the image.
                    for (int radius = std::max(w, h); radius >= 1; radius /= 2) {
                        std::uniform_int_distribution<int> rows(std::max(0, m.row - radius), std::min(h - 1, m.row + radius));
                        std::uniform_int_distribution<int> cols(std::max(0, m.col - radius), std::min(w - 1, m.col + radius));
                        for (int t = 0; t < options.search_samples; ++t) try_source(m, row, col, z, rows(rng), cols(rng));
                    }

                    // Greedy descent over the 8 neighbouring sources.
                    for (int guard = 0; guard < w + h; ++guard) {
                        bool moved = false;
                        const int r0 = m.row;
                        const int c0 = m.col;
                        for (int dy = -1; dy <= 1; ++dy) {
                            for (int dx = -1; dx <= 1; ++dx) {
                                if (dy != 0 || dx != 0) moved = try_source(m, row, col, z, r0 + dy, c0 + dx) || moved;
                            }
                        }
                        if (!moved) break;
                    }
                }
            }
            totals.push_back(layer_total());
        }
        shift.sweep_totals.push_back(std::move(totals));

        // Commit centre values so the next layer has context.
        for (std::size_t k = base; k < shift.entries.size(); ++k) {
            const ShiftEntry& e = shift.entries[k];
            if (e.prior < 0) continue;
            const Frame& src = space.priors[static_cast<std::size_t>(e.prior)];
            for (int ch = 0; ch < 3; ++ch) work(ch, e.row, e.col) = src(ch, e.src_row, e.src_col);
        }
        for (int i : members) known.set(static_cast<std::size_t>(i), true);
    }
    return shift;
}

Frame fill_damage(const Frame& frame, const SpecularMask& mask, const SearchSpace& space, const ShiftMap& shift) {
    require_same_size(frame.size(), mask.size(), "fill_damage");
    if (mask.none()) return frame;
    const int w = frame.width();
    const int h = frame.height();
    const int half = shift.patch_size / 2;
    std::vector<double> acc(frame.pixel_count() * 3, 0.0);
    std::vector<int> votes(frame.pixel_count(), 0);
    for (const auto& e : shift.entries) {
        if (e.prior < 0) continue;
        const Frame& src = space.priors[static_cast<std::size_t>(e.prior)];
        const SpecularMask& valid = space.valid[static_cast<std::size_t>(e.prior)];
        for (int dy = -half; dy <= half; ++dy) {
            const int r = e.row + dy;
            const int sr = e.src_row + dy;
            if (r < 0 || r >= h || sr < 0 || sr >= h) continue;
            for (int dx = -half; dx <= half; ++dx) {
                const int c = e.col + dx;
                const int sc = e.src_col + dx;
                if (c < 0 || c >= w || sc < 0 || sc >= w) continue;
                if (!mask(r, c) || !valid(sr, sc)) continue;
                const std::size_t i = static_cast<std::size_t>(r * w + c);
                for (int ch = 0; ch < 3; ++ch) acc[i * 3 + static_cast<std::size_t>(ch)] += src(ch, sr, sc);
                ++votes[i];
            }
        }
    }
    Frame out = frame;
    for (std::size_t i = 0; i < frame.pixel_count(); ++i) {
        if (!mask.at(i) || votes[i] == 0) continue;
        const int r = static_cast<int>(i) / w;
        const int c = static_cast<int>(i) % w;
        for (int ch = 0; ch < 3; ++ch) {
            out(ch, r, c) = std::clamp(acc[i * 3 + static_cast<std::size_t>(ch)] / votes[i], 0.0, 1.0);
        }
    }
    return out;
}

nlohmann::json shift_map_to_json(const ShiftMap& shift) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : shift.entries) {
        entries.push_back({{"row", e.row},
                           {"col", e.col},
                           {"prior", e.prior},
                           {"src_row", e.src_row},
                           {"src_col", e.src_col},
                           {"distance", std::isfinite(e.distance) ? nlohmann::json(e.distance) : nlohmann::json(nullptr)}});
    }
    return {{"patch_size", shift.patch_size}, {"total_distance", shift.total_distance()}, {"entries", entries}};
}

}  // namespace speclift
