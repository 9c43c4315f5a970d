#include "doctest.h"
#include "patch_oracle.hpp"

using namespace speclift;

namespace {

SpecularMask rect_mask(int w, int h, int r0, int c0, int r1, int c1) {
    SpecularMask m(w, h);
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) m.set(r, c, true);
    }
    return m;
}

Frame damaged(const Frame& clean, const SpecularMask& mask) {
    Frame f = clean;
    for (std::size_t i = 0; i < mask.bits().size(); ++i) {
        if (!mask.at(i)) continue;
        for (int ch = 0; ch < 3; ++ch) f.plane(ch)[i] = 1.0;
    }
    return f;
}

double masked_max_error(const Frame& a, const Frame& b, const SpecularMask& mask) {
    double e = 0.0;
    for (std::size_t i = 0; i < mask.bits().size(); ++i) {
        if (!mask.at(i)) continue;
        for (int ch = 0; ch < 3; ++ch) e = std::max(e, std::abs(a.plane(ch)[i] - b.plane(ch)[i]));
    }
    return e;
}

}  // namespace

TEST_CASE("one clean prior covers the whole damaged region") {
    const Frame f = testing::texture_frame(10, 10);
    const SpecularMask cur = rect_mask(10, 10, 3, 3, 5, 5);
    const SearchSpace s = build_search_space({f}, {SpecularMask(10, 10)}, cur);
    CHECK(s.coverage == 1.0);
    CHECK(s.valid[0].count() == 100u);
    CHECK(s.usable(4, 4));
}

TEST_CASE("coverage counts damaged pixels usable in some prior") {
    const Frame f = testing::texture_frame(10, 10);
    const SpecularMask cur = rect_mask(10, 10, 2, 2, 3, 3);  // 4 pixels
    const SpecularMask a = rect_mask(10, 10, 2, 2, 2, 3);    // hides the top row
    const SpecularMask b = rect_mask(10, 10, 2, 2, 3, 2);    // hides the left column
    const SearchSpace s = build_search_space({f, f}, {a, b}, cur);
    // (2,2) is hidden in both; the other three survive somewhere.
    CHECK(s.coverage == doctest::Approx(0.75));
    CHECK_FALSE(s.usable(2, 2));
    CHECK(s.usable(3, 3));
}

TEST_CASE("fully hidden damage raises a coverage error") {
    const Frame f = testing::texture_frame(8, 8);
    const SpecularMask cur = rect_mask(8, 8, 2, 2, 4, 4);
    try {
        (void)build_search_space({f, f}, {cur, cur}, cur);
        FAIL("expected coverage error");
    } catch (const CoverageError& e) {
        CHECK(std::string(e.what()).find("prior_count") != std::string::npos);
    }
    CHECK_THROWS_AS(build_search_space({f}, {}, cur), DimensionMismatchError);
}

TEST_CASE("an empty mask is fully covered") {
    const Frame f = testing::texture_frame(6, 6);
    CHECK(build_search_space({f}, {SpecularMask(6, 6, true)}, SpecularMask(6, 6)).coverage == 1.0);
}

TEST_CASE("patch distance of a uniform offset is its square times three") {
    const Patch a{3, std::vector<double>(27, 0.2), std::vector<std::uint8_t>(9, 1)};
    Patch b = a;
    for (auto& v : b.rgb) v += 0.1;
    const std::vector<std::uint8_t> all(9, 1);
    CHECK(patch_distance(a, b, all) == doctest::Approx(0.03));
    CHECK(patch_distance(a, a, all) == 0.0);
    CHECK(patch_distance(a, b, std::vector<std::uint8_t>(9, 0)) == kInvalidDistance);
}

TEST_CASE("patch distance needs matching odd patches") {
    const Patch a{3, std::vector<double>(27, 0.0), std::vector<std::uint8_t>(9, 1)};
    const Patch b{5, std::vector<double>(75, 0.0), std::vector<std::uint8_t>(25, 1)};
    CHECK_THROWS_AS(patch_distance(a, b, a.valid), DimensionMismatchError);
}

TEST_CASE("patches clip at the border and honour validity") {
    const Frame f = testing::random_frame(5, 5, 2);
    SpecularMask usable(5, 5, true);
    usable.set(1, 1, false);
    const Patch p = extract_patch(f, &usable, 0, 0, 3);
    CHECK(p.valid == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1, 0, 1, 0});
    CHECK(p.rgb[4 * 3 + 1] == f(1, 0, 0));
}

TEST_CASE("candidate distance agrees with patch distance") {
    const testing::PatchInstance inst = testing::make_patch_instance(4, 16, 2);
    const SpecularMask known = inst.mask.complement();
    for (const auto& [r, c, z, sr, sc] : {std::tuple{8, 8, 0, 7, 9}, std::tuple{2, 13, 1, 4, 4}}) {
        const Patch t = extract_patch(inst.frame, &known, r, c, 7);
        const Patch s = extract_patch(inst.space.priors[static_cast<std::size_t>(z)],
                                      &inst.space.valid[static_cast<std::size_t>(z)], sr, sc, 7);
        std::vector<std::uint8_t> both(49);
        for (std::size_t k = 0; k < 49; ++k) both[k] = t.valid[k] && s.valid[k];
        CHECK(candidate_distance(inst.frame, known, r, c, inst.space, z, sr, sc, 7) ==
              doctest::Approx(patch_distance(t, s, both)).epsilon(1e-12));
    }
}

TEST_CASE("onion layers peel from the boundary inward") {
    const SpecularMask m = rect_mask(9, 9, 2, 2, 6, 6);
    const std::vector<int> layer = onion_layers(m);
    CHECK(layer[0] == 0);
    CHECK(layer[2 * 9 + 2] == 1);
    CHECK(layer[3 * 9 + 3] == 2);
    CHECK(layer[4 * 9 + 4] == 3);
    CHECK(onion_layers(SpecularMask(3, 3, true)) == std::vector<int>(9, 1));
}

TEST_CASE("a planted verbatim copy is reconstructed exactly") {
    const Frame clean = testing::texture_frame(16, 16, 3.0, 1.0);
    const SpecularMask mask = rect_mask(16, 16, 5, 6, 9, 10);
    const Frame in = damaged(clean, mask);
    const SearchSpace space = build_search_space({clean}, {SpecularMask(16, 16)}, mask);
    const ShiftMap sm = solve_shift_map(in, mask, space, {});
    const Frame out = fill_damage(in, mask, space, sm);
    CHECK(masked_max_error(out, clean, mask) <= 1e-6);
    CHECK(sm.total_distance() == 0.0);
}

TEST_CASE("a shifted copy is found and reproduced") {
    const testing::PatchInstance inst = testing::make_patch_instance(7, 24, 1, 0.0);
    // Drop the prior's blotches so the true source is always available.
    const SearchSpace space = build_search_space(inst.space.priors, {SpecularMask(24, 24)}, inst.mask);
    const ShiftMap sm = solve_shift_map(inst.frame, inst.mask, space, {});
    const Frame out = fill_damage(inst.frame, inst.mask, space, sm);
    const auto [dy, dx] = inst.shifts[0];
    std::size_t exact = 0;
    for (const auto& e : sm.entries) exact += e.src_row == e.row - dy && e.src_col == e.col - dx;
    CHECK(exact == sm.entries.size());
    CHECK(masked_max_error(out, inst.scene, inst.mask) <= 1e-6);
}

TEST_CASE("a single damaged pixel takes the exhaustive optimum") {
    const Frame scene = testing::random_frame(8, 8, 3);
    SpecularMask mask(8, 8);
    mask.set(4, 3, true);
    const Frame in = damaged(scene, mask);
    const Frame p0 = testing::random_frame(8, 8, 9);
    const Frame p1 = testing::random_frame(8, 8, 10);
    const SearchSpace space = build_search_space({p0, p1}, {SpecularMask(8, 8), SpecularMask(8, 8)}, mask);
    ShiftMapOptions o;
    o.patch_size = 3;
    const ShiftMap sm = solve_shift_map(in, mask, space, o);
    REQUIRE(sm.entries.size() == 1);
    const testing::ExhaustiveResult ex = testing::layered_exhaustive(in, mask, space, 3);
    CHECK(sm.entries[0].distance == doctest::Approx(ex.total).epsilon(1e-12));
}

TEST_CASE("an empty mask yields an empty map and an untouched frame") {
    const Frame f = testing::random_frame(6, 6, 1);
    const SpecularMask none(6, 6);
    const SearchSpace space = build_search_space({f}, {none}, none);
    const ShiftMap sm = solve_shift_map(f, none, space, {});
    CHECK(sm.entries.empty());
    CHECK(fill_damage(f, none, space, sm) == f);
}

TEST_CASE("fill keeps clean pixels and stays in range") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const testing::PatchInstance inst = testing::make_patch_instance(s);
        ShiftMapOptions o;
        o.seed = s;
        const ShiftMap sm = solve_shift_map(inst.frame, inst.mask, inst.space, o);
        CHECK(sm.entries.size() == inst.mask.count());
        const Frame out = fill_damage(inst.frame, inst.mask, inst.space, sm);
        for (int ch = 0; ch < 3; ++ch) {
            for (std::size_t i = 0; i < out.plane(ch).size(); ++i) {
                if (!inst.mask.at(i)) CHECK(out.plane(ch)[i] == inst.frame.plane(ch)[i]);
                CHECK(out.plane(ch)[i] >= 0.0);
                CHECK(out.plane(ch)[i] <= 1.0);
            }
        }
        for (const auto& e : sm.entries) CHECK(inst.space.valid[static_cast<std::size_t>(e.prior)](e.src_row, e.src_col));
    }
}

TEST_CASE("sweeps never raise a layer's total") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const testing::PatchInstance inst = testing::make_patch_instance(100 + s);
        ShiftMapOptions o;
        o.seed = s;
        const ShiftMap sm = solve_shift_map(inst.frame, inst.mask, inst.space, o);
        for (const auto& totals : sm.sweep_totals) {
            REQUIRE(totals.size() == static_cast<std::size_t>(o.sweeps + 1));
            for (std::size_t k = 1; k < totals.size(); ++k) CHECK(totals[k] <= totals[k - 1]);
        }
    }
}

TEST_CASE("the same seed gives the same map") {
    const testing::PatchInstance inst = testing::make_patch_instance(5);
    ShiftMapOptions o;
    o.seed = 77;
    const ShiftMap a = solve_shift_map(inst.frame, inst.mask, inst.space, o);
    const ShiftMap b = solve_shift_map(inst.frame, inst.mask, inst.space, o);
    CHECK(shift_map_to_json(a) == shift_map_to_json(b));
    CHECK(fill_damage(inst.frame, inst.mask, inst.space, a) == fill_damage(inst.frame, inst.mask, inst.space, b));
}

TEST_CASE("shift map stays close to the layered exhaustive optimum") {
    double pm = 0.0;
    double ex = 0.0;
    for (std::uint64_t s = 0; s < 12; ++s) {
        const testing::PatchInstance inst = testing::make_patch_instance(s, 20, 1 + static_cast<int>(s % 3));
        ShiftMapOptions o;
        o.seed = s;
        pm += solve_shift_map(inst.frame, inst.mask, inst.space, o).total_distance();
        ex += testing::layered_exhaustive(inst.frame, inst.mask, inst.space, o.patch_size).total;
    }
    CHECK(pm <= 1.05 * ex);
}

TEST_CASE("bad patch sizes are rejected") {
    const testing::PatchInstance inst = testing::make_patch_instance(1, 12, 1);
    ShiftMapOptions o;
    o.patch_size = 4;
    CHECK_THROWS_AS(solve_shift_map(inst.frame, inst.mask, inst.space, o), ConfigError);
    o.patch_size = 1;
    CHECK_THROWS_AS(solve_shift_map(inst.frame, inst.mask, inst.space, o), ConfigError);
}

TEST_CASE("shift map json lists every entry") {
    const testing::PatchInstance inst = testing::make_patch_instance(3, 16, 2);
    const ShiftMap sm = solve_shift_map(inst.frame, inst.mask, inst.space, {});
    const auto j = shift_map_to_json(sm);
    CHECK(j["patch_size"] == 7);
    CHECK(j["entries"].size() == sm.entries.size());
}
