#include "maskgan/mask/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "png_io.hpp"

namespace maskgan {

using nlohmann::json;

CategoryPalette::CategoryPalette(std::vector<Category> categories, std::vector<std::string> fusion_order)
    : categories_(std::move(categories)), fusion_order_(std::move(fusion_order)) {
    if (categories_.empty()) throw CodecError("palette has no categories");
    if (categories_.size() > 256) throw CodecError("palette exceeds 256 categories");
    std::sort(categories_.begin(), categories_.end(), [](const Category& a, const Category& b) { return a.index < b.index; });
    for (std::size_t i = 0; i < categories_.size(); ++i)
        if (categories_[i].index != static_cast<int>(i))
            throw CodecError("palette indices must be exactly 0..C-1 (gap or duplicate at " + std::to_string(i) + ")");
    if (fusion_order_.empty())
        for (const Category& c : categories_) fusion_order_.push_back(c.name);
    for (const std::string& name : fusion_order_)
        if (!find(name)) throw CodecError("fusion_order names unknown category '" + name + "'");
}

CategoryPalette CategoryPalette::default_palette() {
    static const std::vector<Category> cats = {
        {0, "background", {0, 0, 0}},    {1, "skin", {204, 0, 0}},     {2, "hair", {0, 0, 204}},
        {3, "l_eye", {51, 51, 255}},     {4, "r_eye", {204, 0, 204}},  {5, "nose", {76, 153, 0}},
        {6, "mouth", {102, 204, 0}},     {7, "eye_g", {204, 204, 0}},  {8, "l_brow", {255, 204, 204}},
        {9, "r_brow", {102, 51, 0}},     {10, "l_ear", {0, 255, 255}}, {11, "r_ear", {255, 153, 51}},
        {12, "u_lip", {255, 255, 0}},    {13, "l_lip", {0, 0, 153}},   {14, "hat", {255, 0, 0}},
        {15, "ear_r", {0, 204, 0}},      {16, "neck_l", {0, 204, 204}}, {17, "neck", {255, 51, 153}},
        {18, "cloth", {0, 51, 0}},
    };
    return CategoryPalette(cats);
}

const Category& CategoryPalette::at(int index) const {
    if (index < 0 || index >= count()) throw CodecError("category index " + std::to_string(index) + " out of range");
    return categories_[index];
}

std::optional<int> CategoryPalette::find(const std::string& name) const {
    for (const Category& c : categories_)
        if (c.name == name) return c.index;
    return std::nullopt;
}

std::string CategoryPalette::to_json() const {
    json j;
    j["categories"] = json::array();
    for (const Category& c : categories_)
        j["categories"].push_back({{"index", c.index}, {"name", c.name}, {"color", {c.color.r, c.color.g, c.color.b}}});
    j["fusion_order"] = fusion_order_;
    return j.dump(2);
}

CategoryPalette CategoryPalette::from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        std::vector<Category> cats;
        for (const json& c : j.at("categories")) {
            const auto& col = c.at("color");
            if (!col.is_array() || col.size() != 3) throw CodecError("palette colour must be [r, g, b]");
            cats.push_back({c.at("index").get<int>(), c.at("name").get<std::string>(),
                            Rgb{col[0].get<std::uint8_t>(), col[1].get<std::uint8_t>(), col[2].get<std::uint8_t>()}});
        }
        std::vector<std::string> order;
        if (j.contains("fusion_order")) order = j["fusion_order"].get<std::vector<std::string>>();
        return CategoryPalette(std::move(cats), std::move(order));
    } catch (const json::exception& e) {
        throw CodecError(std::string("invalid palette manifest: ") + e.what());
    }
}

LabelMask::LabelMask(int height, int width, std::uint8_t fill) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) throw ArgumentError("mask dimensions must be positive");
    labels_.assign(static_cast<std::size_t>(height) * width, fill);
}

LabelMask::LabelMask(int height, int width, std::vector<std::uint8_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
    if (height <= 0 || width <= 0) throw ArgumentError("mask dimensions must be positive");
    if (labels_.size() != static_cast<std::size_t>(height) * width) throw ShapeError("mask label count mismatch");
}

void LabelMask::validate(int categories) const {
    for (int y = 0; y < height_; ++y)
        for (int x = 0; x < width_; ++x)
            if ((*this)(y, x) >= categories)
                throw CodecError("label " + std::to_string((*this)(y, x)) + " at pixel (y=" + std::to_string(y) +
                                 ", x=" + std::to_string(x) + ") is outside the palette of " +
                                 std::to_string(categories) + " categories");
}

std::vector<int> LabelMask::as_ints() const { return {labels_.begin(), labels_.end()}; }

OneHotMask label_to_onehot(const LabelMask& mask, const CategoryPalette& palette) {
    mask.validate(palette.count());
    Tensor t(Shape{1, palette.count(), mask.height(), mask.width()});
    const std::size_t plane = mask.pixels();
    for (std::size_t i = 0; i < plane; ++i) t.data()[mask.labels()[i] * plane + i] = Real(1);
    return OneHotMask{std::move(t)};
}

LabelMask argmax_labels(const Tensor& scores, int n) {
    const Shape& s = scores.shape();
    if (s.c > 256) throw CodecError("too many channels for an 8-bit mask");
    LabelMask out(s.h, s.w);
    const std::size_t plane = s.plane();
    for (std::size_t i = 0; i < plane; ++i) {
        int best = 0;
        Real best_v = scores.plane_ptr(n, 0)[i];
        for (int c = 1; c < s.c; ++c) {
            const Real v = scores.plane_ptr(n, c)[i];
            if (v > best_v) {  // strict: ties keep the lower index
                best_v = v;
                best = c;
            }
        }
        out.labels()[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

LabelMask onehot_to_label(const OneHotMask& onehot, const CategoryPalette& palette) {
    if (onehot.channels() != palette.count())
        throw PaletteMismatch("one-hot has " + std::to_string(onehot.channels()) + " channels, palette has " +
                              std::to_string(palette.count()));
    return argmax_labels(onehot.values, 0);
}

Tensor onehot_batch(std::span<const LabelMask> masks, int categories) {
    if (masks.empty()) throw ShapeError("onehot_batch: empty batch");
    const int h = masks.front().height(), w = masks.front().width();
    Tensor t(Shape{static_cast<int>(masks.size()), categories, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t n = 0; n < masks.size(); ++n) {
        const LabelMask& m = masks[n];
        if (m.height() != h || m.width() != w) throw ShapeError("onehot_batch: mixed mask sizes");
        m.validate(categories);
        Real* base = t.sample_ptr(static_cast<int>(n));
        for (std::size_t i = 0; i < plane; ++i) base[m.labels()[i] * plane + i] = Real(1);
    }
    return t;
}

LabelMask resize_mask(const LabelMask& mask, int new_h, int new_w) {
    if (new_h <= 0 || new_w <= 0) throw ArgumentError("resize_mask: dimensions must be >= 1");
    LabelMask out(new_h, new_w);
    for (int y = 0; y < new_h; ++y) {
        const int sy = std::min(mask.height() - 1, static_cast<int>((y + 0.5) * mask.height() / new_h));
        for (int x = 0; x < new_w; ++x) {
            const int sx = std::min(mask.width() - 1, static_cast<int>((x + 0.5) * mask.width() / new_w));
            out(y, x) = mask(sy, sx);
        }
    }
    return out;
}

namespace {

// Overlap weights of destination cells [i, i+1) * (src/dst) against source cells.
std::vector<std::vector<std::pair<int, double>>> area_weights(int src, int dst) {
    std::vector<std::vector<std::pair<int, double>>> w(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        const double lo = i * scale, hi = (i + 1) * scale;
        for (int s = static_cast<int>(std::floor(lo)); s < std::min(src, static_cast<int>(std::ceil(hi))); ++s) {
            const double ov = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
            if (ov > 1e-12) w[i].emplace_back(s, ov / scale);
        }
    }
    return w;
}

}  // namespace

ImageTensor resize_image_area(const ImageTensor& image, int new_h, int new_w) {
    if (new_h <= 0 || new_w <= 0) throw ArgumentError("resize_image_area: dimensions must be >= 1");
    const Shape s = image.values.shape();
    if (s.h == new_h && s.w == new_w) return image;
    const auto wy = area_weights(s.h, new_h);
    const auto wx = area_weights(s.w, new_w);
    Tensor out(Shape{s.n, s.c, new_h, new_w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const Real* in = image.values.plane_ptr(n, c);
            Real* o = out.plane_ptr(n, c);
            for (int y = 0; y < new_h; ++y)
                for (int x = 0; x < new_w; ++x) {
                    double acc = 0;
                    for (const auto& [sy, fy] : wy[y])
                        for (const auto& [sx, fx] : wx[x]) acc += fy * fx * in[sy * s.w + sx];
                    o[y * new_w + x] = static_cast<Real>(std::clamp(acc, -1.0, 1.0));
                }
        }
    return ImageTensor{std::move(out)};
}

std::string encode_mask_png(const LabelMask& mask, const CategoryPalette& palette) {
    mask.validate(palette.count());
    png::Raster r;
    r.width = mask.width();
    r.height = mask.height();
    r.kind = png::Kind::Palette;
    r.channels = 1;
    r.pixels.assign(mask.labels().begin(), mask.labels().end());
    for (const Category& c : palette.categories()) {
        r.plte.push_back(c.color.r);
        r.plte.push_back(c.color.g);
        r.plte.push_back(c.color.b);
    }
    return png::write(r);
}

LabelMask decode_mask_png(const std::string& bytes, const CategoryPalette& palette) {
    const png::Raster r = png::read_indexed(bytes);
    if (r.kind == png::Kind::Palette && static_cast<int>(r.plte.size() / 3) != palette.count())
        throw PaletteMismatch("mask PNG carries a " + std::to_string(r.plte.size() / 3) +
                              "-entry palette, model expects " + std::to_string(palette.count()) + " categories");
    LabelMask m(r.height, r.width, std::vector<std::uint8_t>(r.pixels.begin(), r.pixels.end()));
    m.validate(palette.count());
    return m;
}

std::string encode_image_png(const ImageTensor& image) {
    const Shape s = image.values.shape();
    if (s.n != 1 || s.c != 3) throw ShapeError("encode_image_png expects (1,3,H,W), got " + s.str());
    png::Raster r;
    r.width = s.w;
    r.height = s.h;
    r.kind = png::Kind::Rgb;
    r.channels = 3;
    r.pixels.resize(s.plane() * 3);
    for (int c = 0; c < 3; ++c) {
        const Real* p = image.values.plane_ptr(0, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const double v = std::clamp(static_cast<double>(p[i]), -1.0, 1.0);
            r.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
        }
    }
    return png::write(r);
}

ImageTensor decode_image_png(const std::string& bytes) {
    const png::Raster r = png::read_rgb(bytes);
    Tensor t(Shape{1, 3, r.height, r.width});
    const std::size_t plane = static_cast<std::size_t>(r.width) * r.height;
    for (int c = 0; c < 3; ++c) {
        Real* p = t.plane_ptr(0, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<Real>(r.pixels[i * 3 + c] / 127.5 - 1.0);
    }
    return ImageTensor{std::move(t)};
}

std::string encode_mask_preview_png(std::span<const LabelMask> strip, const CategoryPalette& palette) {
    if (strip.empty()) throw ArgumentError("empty mask strip");
    const int h = strip.front().height(), w = strip.front().width();
    png::Raster r;
    r.width = w * static_cast<int>(strip.size());
    r.height = h;
    r.kind = png::Kind::Rgb;
    r.channels = 3;
    r.pixels.resize(static_cast<std::size_t>(r.width) * h * 3);
    for (std::size_t k = 0; k < strip.size(); ++k) {
        if (strip[k].height() != h || strip[k].width() != w) throw ShapeError("mask strip sizes differ");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Rgb col = palette.at(strip[k](y, x)).color;
                std::uint8_t* px = &r.pixels[(static_cast<std::size_t>(y) * r.width + k * w + x) * 3];
                px[0] = col.r;
                px[1] = col.g;
                px[2] = col.b;
            }
    }
    return png::write(r);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace maskgan
