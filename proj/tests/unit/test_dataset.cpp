#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "../../src/mask/png_io.hpp"
#include "maskgan/data/dataset.hpp"

using namespace maskgan;
using namespace maskgan::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("maskgan_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("toy dataset is deterministic in the seed") {
    const auto a = make_toy_dataset(12, 32, 7);
    const auto b = make_toy_dataset(12, 32, 7);
    const auto c = make_toy_dataset(12, 32, 8);
    REQUIRE(a.samples.size() == 12);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].id == b.samples[i].id);
        CHECK(a.samples[i].mask == b.samples[i].mask);
        CHECK(a.samples[i].image.values == b.samples[i].image.values);
        CHECK(encode_image_png(a.samples[i].image) == encode_image_png(b.samples[i].image));
        any_diff = any_diff || !(a.samples[i].mask == c.samples[i].mask);
    }
    CHECK(any_diff);
}

TEST_CASE("toy dataset argument errors") {
    CHECK_THROWS_AS(make_toy_dataset(1, 32, 0), ArgumentError);
    CHECK_THROWS_AS(make_toy_dataset(0, 32, 0), ArgumentError);
}

TEST_CASE("toy masks use palette categories and at least five of them") {
    const auto d = make_toy_dataset(200, 64, 3);
    int with_glasses = 0;
    for (const Sample& s : d.samples) {
        s.mask.validate(toy_labels::kCount);
        std::set<int> distinct(s.mask.labels().begin(), s.mask.labels().end());
        CHECK(distinct.size() >= 5);
        with_glasses += distinct.count(toy_labels::kEyeglass) > 0;
        CHECK(s.image.values.shape() == Shape{1, 3, 64, 64});
        const auto [lo, hi] = std::minmax_element(s.image.values.storage().begin(), s.image.values.storage().end());
        CHECK(*lo >= -1);
        CHECK(*hi <= 1);
    }
    CHECK(with_glasses > 20);
    CHECK(with_glasses < 120);
}

TEST_CASE("toy images parse back to their masks with the colour oracle") {
    const auto d = make_toy_dataset(100, 64, 11);
    REQUIRE(d.has_colors());
    std::size_t agree = 0, total = 0;
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const LabelMask parsed = parse_by_color(d.samples[i].image, d.colors[i]);
        for (std::size_t p = 0; p < parsed.pixels(); ++p) agree += parsed.labels()[p] == d.samples[i].mask.labels()[p];
        total += parsed.pixels();
    }
    CHECK(static_cast<double>(agree) / total >= 0.99);
}

TEST_CASE("90/10 split by id order") {
    const auto d = make_toy_dataset(50, 16, 1);
    CHECK(d.train.size() == 45);
    CHECK(d.test.size() == 5);
    CHECK(d.train.front() == 0);
    CHECK(d.test.front() == 45);
    std::set<int> all(d.train.begin(), d.train.end());
    for (int t : d.test) CHECK(all.count(t) == 0);
}

TEST_CASE("write and reload a toy dataset") {
    const auto d = make_toy_dataset(10, 32, 5);
    const fs::path root = temp_dir("roundtrip");
    write_dataset(d, root);
    const auto back = load_celebamaskhq(root, 32);
    REQUIRE(back.samples.size() == 10);
    CHECK(back.skipped.empty());
    CHECK(back.train == d.train);
    CHECK(back.test == d.test);
    CHECK(back.palette == d.palette);
    REQUIRE(back.has_colors());
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(back.samples[i].id == d.samples[i].id);
        CHECK(back.samples[i].mask == d.samples[i].mask);
        CHECK(back.samples[i].image.values == d.samples[i].image.values);
        CHECK(back.colors[i] == d.colors[i]);
    }
    fs::remove_all(root);
}

TEST_CASE("loader: pairs, skip report, resizing, mismatched sizes") {
    const fs::path root = temp_dir("loader");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    const auto palette = CategoryPalette::default_palette();
    for (int i = 0; i < 10; ++i) {
        const std::string id = "img" + std::to_string(i);
        const Sample s = make_toy_sample(i, 48, 9);
        write_file((root / "images" / (id + ".png")).string(), encode_image_png(s.image));
        write_file((root / "masks" / (id + ".png")).string(), encode_mask_png(s.mask, palette));
    }
    // mismatched size: mask 24x24 for a 48x48 image
    write_file((root / "images" / "odd.png").string(), encode_image_png(make_toy_sample(50, 48, 9).image));
    write_file((root / "masks" / "odd.png").string(),
               encode_mask_png(resize_mask(make_toy_sample(50, 48, 9).mask, 24, 24), palette));
    // unpaired entries
    write_file((root / "images" / "lonely.png").string(), encode_image_png(make_toy_sample(51, 48, 9).image));
    write_file((root / "masks" / "orphan.png").string(), encode_mask_png(LabelMask(48, 48, std::uint8_t{0}), palette));
    // corrupt image
    write_file((root / "images" / "broken.png").string(), "not a png");
    write_file((root / "masks" / "broken.png").string(), encode_mask_png(LabelMask(48, 48, std::uint8_t{0}), palette));

    const auto m = load_celebamaskhq(root, 32);
    CHECK(m.samples.size() == 11);
    CHECK(m.skipped.size() == 3);
    std::set<std::string> skipped;
    for (const auto& s : m.skipped) skipped.insert(s.id);
    CHECK(skipped == std::set<std::string>{"lonely", "orphan", "broken"});
    for (const Sample& s : m.samples) {
        CHECK(s.mask.height() == 32);
        CHECK(s.image.values.shape() == Shape{1, 3, 32, 32});
    }
    CHECK(m.train.size() + m.test.size() == 11);
    fs::remove_all(root);
}

TEST_CASE("loader: empty dataset is an error") {
    const fs::path root = temp_dir("empty");
    fs::create_directories(root / "images");
    CHECK_THROWS_AS(load_celebamaskhq(root, 32), DatasetError);
    CHECK_THROWS_AS(load_celebamaskhq(root / "missing", 32), DatasetError);
    fs::remove_all(root);
}

TEST_CASE("per-part masks fuse with later categories overwriting earlier ones") {
    const auto palette = CategoryPalette::default_palette();
    LabelMask skin(4, 4, std::uint8_t{0}), hair(4, 4, std::uint8_t{0});
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) skin(y, x) = 1;  // top-left 3x3
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 4; ++x) hair(y, x) = 1;  // bottom-right 3x3, overlapping 2x2
    const LabelMask fused = fuse_part_masks({{"skin", skin}, {"hair", hair}}, palette);
    // hair comes after skin in the default fusion order
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const bool s = y < 3 && x < 3, h = y >= 1 && x >= 1;
            const int expect = h ? toy_labels::kHair : (s ? toy_labels::kSkin : 0);
            CHECK(fused(y, x) == expect);
        }
    const CategoryPalette reversed(palette.categories(), {"hair", "skin"});
    const LabelMask fused2 = fuse_part_masks({{"skin", skin}, {"hair", hair}}, reversed);
    CHECK(fused2(1, 1) == toy_labels::kSkin);
    CHECK(fused2(3, 3) == toy_labels::kHair);
}

TEST_CASE("loader reads per-part directories") {
    const fs::path root = temp_dir("parts");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks" / "a");
    write_file((root / "images" / "a.png").string(), encode_image_png(ImageTensor{Tensor(Shape{1, 3, 8, 8})}));
    auto part = [&](const std::string& name, int y0) {
        png::Raster r;
        r.width = 8;
        r.height = 8;
        r.kind = png::Kind::Gray;
        r.channels = 1;
        r.pixels.assign(64, 0);
        for (int y = y0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) r.pixels[y * 8 + x] = 255;
        write_file((root / "masks" / "a" / (name + ".png")).string(), png::write(r));
    };
    part("skin", 2);
    part("mouth", 6);
    const auto m = load_celebamaskhq(root, 8);
    REQUIRE(m.samples.size() == 1);
    CHECK(m.samples[0].mask(0, 0) == 0);
    CHECK(m.samples[0].mask(3, 3) == toy_labels::kSkin);
    CHECK(m.samples[0].mask(7, 3) == toy_labels::kMouth);
    fs::remove_all(root);
}

TEST_CASE("derangement has no fixed points") {
    for (int n = 2; n < 20; ++n)
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto p = derangement(n, 3, s);
            std::set<int> seen(p.begin(), p.end());
            CHECK(seen.size() == static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) CHECK(p[i] != i);
        }
    CHECK_THROWS_AS(derangement(1, 0, 0), ArgumentError);
}

TEST_CASE("batch stream") {
    const auto d = make_toy_dataset(40, 16, 2);
    SUBCASE("batch size = split size gives one batch per epoch") {
        BatchStream s(d, d.train, static_cast<int>(d.train.size()), 1, false);
        CHECK(s.batches_per_epoch() == 1);
        const Batch b = s.next();
        CHECK(b.size() == 36);
        CHECK(s.cursor() == BatchCursor{1, 0});
    }
    SUBCASE("references are never the sample itself") {
        BatchStream s(d, d.train, 4, 5, true);
        for (int k = 0; k < 30; ++k) {
            const Batch b = s.next();
            REQUIRE(b.ref_indices.size() == 4);
            for (int i = 0; i < 4; ++i) CHECK(d.samples[b.ref_indices[i]].id != d.samples[b.indices[i]].id);
            CHECK(b.ref_onehot.shape() == b.onehot.shape());
        }
    }
    SUBCASE("same seed same order; different seed different order") {
        BatchStream a(d, d.train, 6, 9, false), b(d, d.train, 6, 9, false), c(d, d.train, 6, 10, false);
        bool differs = false;
        for (int k = 0; k < 12; ++k) {  // two epochs
            const auto ba = a.next(), bb = b.next(), bc = c.next();
            CHECK(ba.indices == bb.indices);
            differs = differs || ba.indices != bc.indices;
        }
        CHECK(differs);
    }
    SUBCASE("drops the last partial batch and covers each sample once per epoch") {
        BatchStream s(d, d.train, 5, 1, false);
        CHECK(s.batches_per_epoch() == 7);
        std::set<int> seen;
        for (int k = 0; k < 7; ++k)
            for (int i : s.next().indices) CHECK(seen.insert(i).second);
        CHECK(seen.size() == 35);
    }
    SUBCASE("seek reproduces the stream from a cursor") {
        BatchStream a(d, d.train, 4, 3, true);
        for (int k = 0; k < 11; ++k) a.next();
        const BatchCursor at = a.cursor();
        const Batch expect = a.next();
        BatchStream b(d, d.train, 4, 3, true);
        b.seek(at);
        const Batch got = b.next();
        CHECK(got.indices == expect.indices);
        CHECK(got.ref_indices == expect.ref_indices);
    }
    SUBCASE("argument errors") {
        CHECK_THROWS_AS(BatchStream(d, d.train, 37, 0, false), ArgumentError);
        CHECK_THROWS_AS(BatchStream(d, d.train, 1, 0, true), ArgumentError);
    }
    SUBCASE("batch tensors") {
        const Batch b = make_batch(d, {0, 3});
        CHECK(b.images.shape() == Shape{2, 3, 16, 16});
        CHECK(b.onehot.shape() == Shape{2, 19, 16, 16});
        CHECK(b.images.slice_batch(1, 1) == d.samples[3].image.values);
    }
}
