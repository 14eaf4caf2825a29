#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dtmi/data.hpp"
#include "dtmi/image.hpp"
#include "dtmi/rng.hpp"
#include "dtmi/synthetic.hpp"

using namespace dtmi;
namespace fs = std::filesystem;

namespace {

FloatPlanes mask_from(std::initializer_list<float> vals, int h, int w) {
    FloatPlanes p;
    p.channels = 1;
    p.height = h;
    p.width = w;
    p.data.assign(vals);
    return p;
}

// Brute-force 3x3 morphological gradient with replicate padding; independent
// of the implementation under test.
FloatPlanes edge_oracle(const FloatPlanes& gt) {
    const int h = gt.height, w = gt.width;
    auto clampi = [](int v, int lo, int hi) { return std::min(std::max(v, lo), hi); };
    auto bin = [&](int y, int x) { return gt.at(0, clampi(y, 0, h - 1), clampi(x, 0, w - 1)) >= 0.5f; };
    FloatPlanes out = gt;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool any = false, all = true;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const bool v = bin(y + dy, x + dx);
                    any = any || v;
                    all = all && v;
                }
            out.at(0, y, x) = (any && !all) ? 1.0f : 0.0f;
        }
    return out;
}

std::string tmp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("edge labels: morphological gradient cases") {
    // all-zero mask -> all-zero edges
    auto zero = mask_from({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 4, 4);
    auto e = derive_edge_label(zero);
    for (float v : e.data) CHECK(v == 0.0f);

    // centered 2x2 block in a 4x4 grid: dilation fills everything, erosion
    // empties it -> all 16 pixels are edge
    auto center = mask_from({0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0}, 4, 4);
    e = derive_edge_label(center);
    for (float v : e.data) CHECK(v == 1.0f);

    // all-one mask under replicate padding: dilation == erosion -> no edge
    auto ones = mask_from({1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 4, 4);
    e = derive_edge_label(ones);
    for (float v : e.data) CHECK(v == 0.0f);
}

TEST_CASE("edge labels: binary, subset of dilation, matches brute-force oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        FloatPlanes gt;
        gt.channels = 1;
        gt.height = 9;
        gt.width = 7;
        gt.data.resize(63);
        for (auto& v : gt.data) v = rng.bernoulli(0.4) ? 1.0f : 0.0f;
        const auto edge = derive_edge_label(gt);
        const auto oracle = edge_oracle(gt);
        for (std::size_t i = 0; i < edge.data.size(); ++i) {
            CHECK((edge.data[i] == 0.0f || edge.data[i] == 1.0f));
            CHECK(edge.data[i] == oracle.data[i]);
        }
    }
}

TEST_CASE("preprocess: shapes, normalization, degenerate depth") {
    SampleTriplet t;
    t.id = "t";
    t.rgb.channels = 3;
    t.rgb.height = t.rgb.width = 128;
    t.rgb.data.assign(3 * 128 * 128, 0.5f);
    t.depth.channels = 1;
    t.depth.height = t.depth.width = 128;
    t.depth.data.assign(128 * 128, 0.25f);  // constant -> degenerate
    t.gt = t.depth;
    for (std::size_t i = 0; i < t.gt.data.size(); ++i) t.gt.data[i] = i % 2 ? 1.0f : 0.0f;
    t.edge = derive_edge_label(t.gt);

    const ModelInput in = preprocess(t, 64);
    CHECK(in.rgb_norm.height == 64);
    CHECK(in.rgb_norm.channels == 3);
    CHECK(in.depth_norm.channels == 3);
    CHECK(in.gt.height == 64);

    // rgb standardization applied even when resize is identity-sized
    CHECK(in.rgb_norm.at(0, 0, 0) == doctest::Approx((0.5f - 0.485f) / 0.229f));
    CHECK(in.rgb_norm.at(2, 10, 10) == doctest::Approx((0.5f - 0.406f) / 0.225f));

    // degenerate depth -> all 0.5 before standardization, all three channels
    for (int c = 0; c < 3; ++c)
        CHECK(in.depth_norm.at(c, 5, 5) ==
              doctest::Approx((0.5f - kRgbMean[c]) / kRgbStd[c]));

    // same-size preprocess keeps values (identity resize) but still normalizes
    const ModelInput same = preprocess(t, 128);
    CHECK(same.rgb_norm.height == 128);
    CHECK(same.gt.at(0, 0, 1) == 1.0f);

    // non-degenerate depth is min-max normalized to [0,1]
    SampleTriplet t2 = t;
    for (std::size_t i = 0; i < t2.depth.data.size(); ++i)
        t2.depth.data[i] = 0.2f + 0.001f * static_cast<float>(i % 100);
    const ModelInput in2 = preprocess(t2, 64);
    float mn = 1e9f, mx = -1e9f;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const float denorm = in2.depth_norm.at(0, y, x) * kRgbStd[0] + kRgbMean[0];
            mn = std::min(mn, denorm);
            mx = std::max(mx, denorm);
        }
    CHECK(mn >= -1e-5f);
    CHECK(mx <= 1.0f + 1e-5f);
}

TEST_CASE("encode_prediction rounding and range policing") {
    FloatPlanes p;
    p.channels = 1;
    p.height = 1;
    p.width = 4;
    p.data = {0.0f, 1.0f, 0.5f, 1.0f + 5e-7f};  // last clamps inside tolerance
    const ImageU8 img = encode_prediction(p);
    CHECK(img.data[0] == 0);
    CHECK(img.data[1] == 255);
    CHECK(img.data[2] == 128);  // round-half-up
    CHECK(img.data[3] == 255);

    p.data[3] = 1.1f;
    CHECK_THROWS_AS(encode_prediction(p), DataError);
    p.data[3] = -0.1f;
    CHECK_THROWS_AS(encode_prediction(p), DataError);
}

TEST_CASE("load_triplet errors name the offending file") {
    const std::string dir = tmp_dir("dtmi_triplet_errors");
    ImageU8 rgb, gray, small;
    rgb.width = rgb.height = 8;
    rgb.channels = 3;
    rgb.data.assign(8 * 8 * 3, 100);
    gray.width = gray.height = 8;
    gray.channels = 1;
    gray.data.assign(8 * 8, 40);
    small.width = small.height = 4;
    small.channels = 1;
    small.data.assign(4 * 4, 40);

    write_png(dir + "/a_rgb.png", rgb);
    write_png(dir + "/a_depth.png", gray);
    write_png(dir + "/a_gt.png", gray);
    write_png(dir + "/a_small.png", small);

    const SampleTriplet t = load_triplet(dir + "/a_rgb.png", dir + "/a_depth.png", dir + "/a_gt.png");
    CHECK(t.rgb.height == 8);
    CHECK(t.edge.height == 8);
    CHECK(t.id == "a_rgb");

    // gt with 3 channels -> error naming the file
    CHECK_THROWS_WITH_AS(load_triplet(dir + "/a_rgb.png", dir + "/a_depth.png", dir + "/a_rgb.png"),
                         doctest::Contains("a_rgb.png"), DataError);
    // dimension mismatch
    CHECK_THROWS_WITH_AS(load_triplet(dir + "/a_rgb.png", dir + "/a_small.png", dir + "/a_gt.png"),
                         doctest::Contains("dimension mismatch"), DataError);
    // unreadable file
    CHECK_THROWS(load_triplet(dir + "/missing.png", dir + "/a_depth.png", dir + "/a_gt.png"));
    fs::remove_all(dir);
}

TEST_CASE("synthetic generator: determinism, mask fraction, depth argmax") {
    const std::string d1 = tmp_dir("dtmi_synth_a");
    const std::string d2 = tmp_dir("dtmi_synth_b");
    const auto ids1 = generate_synthetic_dataset(6, 7, 64, d1);
    const auto ids2 = generate_synthetic_dataset(6, 7, 64, d2);
    REQUIRE(ids1.size() == 6);
    CHECK(ids1 == ids2);

    // byte-identical across runs with the same (seed, count, size)
    for (const auto& id : ids1)
        for (const char* sub : {"rgb", "depth", "gt"})
            CHECK(read_bytes(fs::path(d1) / sub / (id + ".png")) ==
                  read_bytes(fs::path(d2) / sub / (id + ".png")));

    // different seed -> different pixels somewhere
    const std::string d3 = tmp_dir("dtmi_synth_c");
    generate_synthetic_dataset(6, 8, 64, d3);
    CHECK(read_bytes(fs::path(d1) / "rgb" / (ids1[0] + ".png")) !=
          read_bytes(fs::path(d3) / "rgb" / (ids1[0] + ".png")));

    // 200-sample property run: mask fraction within [0.02, 0.5] and the
    // deepest (nearest) pixel lies inside the GT foreground
    const std::string big = tmp_dir("dtmi_synth_big");
    const auto ids = generate_synthetic_dataset(200, 99, 64, big);
    for (const auto& id : ids) {
        const ImageU8 gt = read_image((fs::path(big) / "gt" / (id + ".png")).string());
        const ImageU8 depth = read_image((fs::path(big) / "depth" / (id + ".png")).string());
        long fg = 0;
        for (auto v : gt.data) fg += v >= 128 ? 1 : 0;
        const double frac = static_cast<double>(fg) / static_cast<double>(gt.data.size());
        CHECK(frac >= 0.02);
        CHECK(frac <= 0.5);

        std::size_t argmax = 0;
        for (std::size_t i = 1; i < depth.data.size(); ++i)
            if (depth.data[i] > depth.data[argmax]) argmax = i;
        CHECK(gt.data[argmax] >= 128);
    }

    fs::remove_all(d1);
    fs::remove_all(d2);
    fs::remove_all(d3);
    fs::remove_all(big);
}

TEST_CASE("dataset scan: sorted ids and stem matching errors") {
    const std::string dir = tmp_dir("dtmi_scan");
    generate_synthetic_dataset(3, 5, 32, dir);
    auto index = scan_dataset(dir);
    CHECK(index.ids == std::vector<std::string>{"scene_00000", "scene_00001", "scene_00002"});
    const SampleTriplet t = load_triplet_by_id(index, 1);
    CHECK(t.id == "scene_00001");

    fs::remove(fs::path(dir) / "depth" / "scene_00001.png");
    CHECK_THROWS_WITH_AS(scan_dataset(dir), doctest::Contains("scene_00001"), DataError);
    fs::remove_all(dir);
}
