#include <doctest.h>

#include <random>

#include "maskgan/mask/mask.hpp"
#include "../../src/mask/png_io.hpp"

using namespace maskgan;

namespace {

LabelMask random_mask(int h, int w, int categories, std::mt19937& gen) {
    std::uniform_int_distribution<int> d(0, categories - 1);
    LabelMask m(h, w);
    for (auto& v : m.labels()) v = static_cast<std::uint8_t>(d(gen));
    return m;
}

// Piecewise-constant mask made of block x block tiles.
LabelMask block_mask(int size, int block, int categories, std::mt19937& gen) {
    std::uniform_int_distribution<int> d(0, categories - 1);
    LabelMask m(size, size);
    const int tiles = size / block;
    std::vector<int> tile(tiles * tiles);
    for (int& t : tile) t = d(gen);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m(y, x) = static_cast<std::uint8_t>(tile[(y / block) * tiles + x / block]);
    return m;
}

CategoryPalette small_palette(int c) {
    std::vector<Category> cats;
    for (int i = 0; i < c; ++i) cats.push_back({i, "c" + std::to_string(i), Rgb{std::uint8_t(i * 10), 0, 0}});
    return CategoryPalette(cats);
}

}  // namespace

TEST_CASE("default palette") {
    const auto p = CategoryPalette::default_palette();
    CHECK(p.count() == 19);
    CHECK(p.at(0).name == "background");
    for (int i = 0; i < p.count(); ++i) CHECK(p.at(i).index == i);
    CHECK(p.find("mouth") == toy_labels::kMouth);
    CHECK(p.find("eye_g") == toy_labels::kEyeglass);
}

TEST_CASE("palette rejects gaps and duplicates") {
    CHECK_THROWS_AS(CategoryPalette({{0, "a", {}}, {2, "b", {}}}), CodecError);
    CHECK_THROWS_AS(CategoryPalette({{0, "a", {}}, {0, "b", {}}}), CodecError);
    CHECK_THROWS_AS(CategoryPalette({{0, "a", {}}}, {"zzz"}), CodecError);
}

TEST_CASE("palette json round trip") {
    const auto p = CategoryPalette::default_palette();
    CHECK(CategoryPalette::from_json(p.to_json()) == p);
    const auto q = CategoryPalette({{0, "bg", {1, 2, 3}}, {1, "skin", {4, 5, 6}}}, {"skin", "bg"});
    CHECK(CategoryPalette::from_json(q.to_json()).fusion_order() == std::vector<std::string>{"skin", "bg"});
    CHECK_THROWS_AS(CategoryPalette::from_json("{not json"), CodecError);
}

TEST_CASE("label_to_onehot") {
    const auto p3 = small_palette(3);
    LabelMask m1(1, 1, std::uint8_t{0});
    auto oh = label_to_onehot(m1, p3);
    CHECK(oh.values.shape() == Shape{1, 3, 1, 1});
    CHECK(oh.values[0] == 1);
    CHECK(oh.values[1] == 0);
    CHECK(oh.values[2] == 0);

    const auto p19 = CategoryPalette::default_palette();
    auto oh2 = label_to_onehot(LabelMask(2, 2, std::uint8_t{18}), p19);
    for (int c = 0; c < 19; ++c)
        for (int i = 0; i < 4; ++i) CHECK(oh2.values.plane_ptr(0, c)[i] == (c == 18 ? 1 : 0));

    LabelMask bad(2, 3, std::uint8_t{0});
    bad(1, 2) = 3;
    try {
        label_to_onehot(bad, p3);
        FAIL("expected CodecError");
    } catch (const CodecError& e) {
        CHECK(std::string(e.what()).find("y=1, x=2") != std::string::npos);
    }
}

TEST_CASE("one-hot round trip over random masks") {
    std::mt19937 gen(42);
    const auto p = CategoryPalette::default_palette();
    for (int t = 0; t < 20; ++t) {
        const LabelMask m = random_mask(8, 8, 19, gen);
        const auto oh = label_to_onehot(m, p);
        for (std::size_t i = 0; i < m.pixels(); ++i) {
            Real s = 0;
            for (int c = 0; c < 19; ++c) s += oh.values.plane_ptr(0, c)[i];
            CHECK(s == 1);
        }
        CHECK(onehot_to_label(oh, p) == m);
    }
}

TEST_CASE("onehot_to_label argmax and tie-break") {
    const auto p = small_palette(3);
    auto pix = [&](Real a, Real b, Real c) {
        OneHotMask oh{Tensor(Shape{1, 3, 1, 1}, std::vector<Real>{a, b, c})};
        return onehot_to_label(oh, p)(0, 0);
    };
    CHECK(pix(1, 0, 0) == 0);
    CHECK(pix(0.2f, 0.5f, 0.3f) == 1);
    CHECK(pix(0.5f, 0.5f, 0.0f) == 0);
    OneHotMask wrong{Tensor(Shape{1, 4, 1, 1})};
    CHECK_THROWS_AS(onehot_to_label(wrong, p), PaletteMismatch);
}

TEST_CASE("resize_mask") {
    LabelMask one(1, 1, std::uint8_t{5});
    CHECK(resize_mask(one, 2, 2) == LabelMask(2, 2, std::uint8_t{5}));
    std::mt19937 gen(1);
    const LabelMask m = random_mask(9, 7, 19, gen);
    CHECK(resize_mask(m, 9, 7) == m);
    CHECK_THROWS_AS(resize_mask(m, 0, 3), ArgumentError);
    CHECK_THROWS_AS(resize_mask(m, 3, -1), ArgumentError);

    // Never invents categories.
    const LabelMask small = resize_mask(m, 4, 13);
    std::array<bool, 256> present{};
    for (auto v : m.labels()) present[v] = true;
    for (auto v : small.labels()) CHECK(present[v]);
}

TEST_CASE("resize_mask 512 -> 64 -> 512 keeps block-structured masks") {
    std::mt19937 gen(5);
    for (int t = 0; t < 3; ++t) {
        const LabelMask m = block_mask(512, 32, 19, gen);
        const LabelMask back = resize_mask(resize_mask(m, 64, 64), 512, 512);
        std::size_t same = 0;
        for (std::size_t i = 0; i < m.pixels(); ++i) same += m.labels()[i] == back.labels()[i];
        CHECK(static_cast<double>(same) / m.pixels() >= 0.90);
    }
}

TEST_CASE("mask PNG round trip") {
    std::mt19937 gen(3);
    const auto p = CategoryPalette::default_palette();
    for (int t = 0; t < 5; ++t) {
        const LabelMask m = random_mask(17, 23, 19, gen);
        CHECK(decode_mask_png(encode_mask_png(m, p), p) == m);
    }
    const LabelMask zero(6, 6, std::uint8_t{0});
    const LabelMask z = decode_mask_png(encode_mask_png(zero, p), p);
    for (auto v : z.labels()) CHECK(v == 0);
}

TEST_CASE("mask PNG decode errors") {
    const auto p = CategoryPalette::default_palette();
    png::Raster r;
    r.width = 4;
    r.height = 2;
    r.kind = png::Kind::Gray;
    r.channels = 1;
    r.pixels.assign(8, 0);
    r.pixels[5] = 200;
    CHECK_THROWS_AS(decode_mask_png(png::write(r), p), CodecError);

    r.pixels[5] = 18;
    CHECK(decode_mask_png(png::write(r), p)(1, 1) == 18);

    const auto p3 = small_palette(3);
    CHECK_THROWS_AS(decode_mask_png(encode_mask_png(LabelMask(4, 4, std::uint8_t{1}), p3), p), PaletteMismatch);
    CHECK_THROWS_AS(decode_mask_png("garbage bytes", p), CodecError);
    const std::string good = encode_mask_png(LabelMask(4, 4, std::uint8_t{1}), p);
    CHECK_THROWS_AS(decode_mask_png(good.substr(0, good.size() / 2), p), CodecError);
}

TEST_CASE("image PNG round trip within quantization bound") {
    std::mt19937 gen(8);
    std::uniform_real_distribution<float> d(-1.3f, 1.3f);
    Tensor t(Shape{1, 3, 11, 9});
    for (auto& v : t.storage()) v = d(gen);
    const ImageTensor back = decode_image_png(encode_image_png(ImageTensor{t}));
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float clamped = std::clamp(t[i], -1.f, 1.f);
        CHECK(std::abs(back.values[i] - clamped) <= 1.0f / 127.0f);
        CHECK(back.values[i] >= -1.0f);
        CHECK(back.values[i] <= 1.0f);
    }
}

TEST_CASE("area resize preserves constants and averages blocks") {
    Tensor t(Shape{1, 3, 4, 4}, 0.25f);
    const ImageTensor same = resize_image_area(ImageTensor{t}, 3, 2);
    for (auto v : same.values.storage()) CHECK(v == doctest::Approx(0.25f));

    Tensor u(Shape{1, 1, 2, 2}, std::vector<Real>{1, 0, 0, -1});
    const ImageTensor avg = resize_image_area(ImageTensor{u}, 1, 1);
    CHECK(avg.values[0] == doctest::Approx(0.0));
}

TEST_CASE("preview strip") {
    const auto p = CategoryPalette::default_palette();
    const LabelMask strip[] = {LabelMask(4, 4, std::uint8_t{1}), LabelMask(4, 4, std::uint8_t{2})};
    const png::Raster r = png::read_rgb(encode_mask_preview_png(strip, p));
    CHECK(r.width == 8);
    CHECK(r.height == 4);
    CHECK(r.pixels[0] == 204);
    CHECK(r.pixels[(4) * 3 + 2] == 204);
}
