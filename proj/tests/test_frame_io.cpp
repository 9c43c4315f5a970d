#include "doctest.h"
#include "support.hpp"

#include <fstream>

#include "speclift/frame_io.hpp"

using namespace speclift;
namespace fs = std::filesystem;

TEST_CASE("three numbered frames load in order") {
    const fs::path dir = testing::scratch_dir("io_three");
    for (int i = 1; i <= 3; ++i) {
        save_frame(Frame(4, 3, i / 10.0, 0.0, 0.0), dir / format_indexed("frame_%06d.png", i));
    }
    CHECK(fs::exists(dir / "frame_000001.png"));
    const Sequence s = load_sequence({dir});
    REQUIRE(s.frame_count() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(s[static_cast<std::size_t>(i)](0, 1, 2) == doctest::Approx(std::lround((i + 1) / 10.0 * 255) / 255.0));
    }
}

TEST_CASE("a gap in the numbering names the missing index") {
    const fs::path dir = testing::scratch_dir("io_gap");
    for (int i : {1, 2, 4}) save_frame(Frame(2, 2), dir / format_indexed("frame_%06d.png", i));
    try {
        (void)load_sequence({dir});
        FAIL("expected a gap error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("missing index 3") != std::string::npos);
    }
}

TEST_CASE("missing directory and mixed sizes are reported") {
    CHECK_THROWS_AS(load_sequence({"/nonexistent/speclift"}), IoError);
    const fs::path dir = testing::scratch_dir("io_mixed");
    save_frame(Frame(4, 4), dir / "frame_000001.png");
    save_frame(Frame(5, 4), dir / "frame_000002.png");
    try {
        (void)load_sequence({dir});
        FAIL("expected a size error");
    } catch (const DimensionMismatchError& e) {
        CHECK(std::string(e.what()).find("frame_000002.png") != std::string::npos);
    }
}

TEST_CASE("unreadable file names its path") {
    const fs::path dir = testing::scratch_dir("io_bad");
    std::ofstream(dir / "frame_000001.png") << "not a png";
    try {
        (void)load_sequence({dir});
        FAIL("expected a read error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("frame_000001.png") != std::string::npos);
    }
}

TEST_CASE("gray 128 normalises to 128/255") {
    const fs::path dir = testing::scratch_dir("io_gray");
    Image8 img{3, 2, 3, std::vector<std::uint8_t>(18, 128)};
    write_png(img, dir / "gray.png");
    const Frame f = load_frame(dir / "gray.png");
    for (int ch = 0; ch < 3; ++ch) {
        for (double v : f.plane(ch)) CHECK(std::abs(v - 128.0 / 255.0) < 1e-6);
    }
}

TEST_CASE("frames round-trip up to quantisation") {
    const fs::path dir = testing::scratch_dir("io_frame_rt");
    const Frame f = testing::random_frame(7, 5, 1);
    save_frame(f, dir / "f.png");
    const Frame g = load_frame(dir / "f.png");
    for (int ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < f.plane(ch).size(); ++i) {
            CHECK(std::abs(f.plane(ch)[i] - g.plane(ch)[i]) <= 0.5 / 255.0 + 1e-12);
        }
    }
}

TEST_CASE("masks round-trip exactly") {
    const fs::path dir = testing::scratch_dir("io_mask");
    const SpecularMask zero(6, 4);
    save_mask(zero, dir / "zero.png");
    CHECK(load_mask(dir / "zero.png") == zero);
    const Image8 raw = read_png(dir / "zero.png");
    CHECK(raw.channels == 1);
    for (auto b : raw.data) CHECK(b == 0);

    SpecularMask checker(9, 7);
    for (int r = 0; r < 7; ++r) {
        for (int c = 0; c < 9; ++c) checker.set(r, c, (r + c) % 2 == 0);
    }
    save_mask(checker, dir / "checker.png");
    CHECK(load_mask(dir / "checker.png") == checker);
    const Image8 on_disk = read_png(dir / "checker.png");
    CHECK(on_disk.data[0] == 255);
    CHECK(on_disk.data[1] == 0);
}

TEST_CASE("non-binary mask values are rejected") {
    const fs::path dir = testing::scratch_dir("io_mask17");
    Image8 img{2, 2, 1, {0, 255, 17, 0}};
    write_png(img, dir / "m.png");
    CHECK_THROWS_AS(load_mask(dir / "m.png"), FormatError);
}

TEST_CASE("empty config text gives the defaults") {
    const PipelineConfig c = parse_config("");
    CHECK(c == PipelineConfig{});
    CHECK(c.prior_count == 5);
    CHECK(c.energy == 0.95);
    CHECK(c.patch_size == 7);
    CHECK(c.dilation_radius == 1);
    CHECK(c.lm_levels == 3);
    CHECK(c.delta == 1.0);
    CHECK(c.zeta == 0.5);
    CHECK(c.xi == 0.01);
    CHECK(c.regrid_tol == 0.1);
    CHECK(c.tukey_c == 0.2);
    CHECK_FALSE(c.rank.has_value());
}

TEST_CASE("explicit keys override defaults") {
    const PipelineConfig c = parse_config("prior_count = 5\nrank = 2");
    CHECK(c.prior_count == 5);
    REQUIRE(c.rank.has_value());
    CHECK(*c.rank == 2);
    PipelineConfig expect;
    expect.rank = 2;
    CHECK(c == expect);
}

TEST_CASE("config errors name the problem") {
    auto message = [](const char* text) {
        try {
            (void)parse_config(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message("rank = 9\nprior_count = 5").find("r <= prior_count") != std::string::npos);
    CHECK(message("colour = red").find("unknown key 'colour'") != std::string::npos);
    CHECK(message("gamma = fast").find("gamma") != std::string::npos);
    CHECK(message("patch_size = 4").find("odd") != std::string::npos);
    CHECK(message("sweeps = 2\nsweeps = 3").find("duplicate") != std::string::npos);
    CHECK(message("just words").find("key = value") != std::string::npos);
}

TEST_CASE("config parsing ignores line order and comments") {
    const PipelineConfig a = parse_config("# tuned\ngamma = 0.2\nseed = 7  # trailing\n\nprior_count = 4\n");
    const PipelineConfig b = parse_config("prior_count = 4\nseed = 7\ngamma = 0.2\n");
    CHECK(a == b);
    CHECK(a.seed == 7);
}

TEST_CASE("config file loads and echoes to json") {
    const fs::path dir = testing::scratch_dir("io_cfg");
    std::ofstream(dir / "c.cfg") << "full_rank = true\npatch_size = 5\n";
    const PipelineConfig c = load_config(dir / "c.cfg");
    CHECK(c.full_rank);
    const auto j = to_json(c);
    CHECK(j["patch_size"] == 5);
    CHECK(j["rank"].is_null());
    CHECK(j.contains("gamma"));
}

TEST_CASE("indexed names are formatted") {
    CHECK(format_indexed("frame_%06d.png", 3) == "frame_000003.png");
    CHECK(format_indexed("m%d.png", 12) == "m12.png");
    CHECK_THROWS(format_indexed("frame.png", 1));
}
