#include "maskgan/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numeric>

#include "maskgan/core/log.hpp"
#include "maskgan/core/rng.hpp"

namespace maskgan::data {

namespace fs = std::filesystem;
using nlohmann::json;
namespace tl = toy_labels;

std::optional<int> DatasetManifest::find(const std::string& id) const {
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].id == id) return static_cast<int>(i);
    return std::nullopt;
}

const std::vector<int>& DatasetManifest::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw ArgumentError("unknown split '" + name + "'");
}

namespace {

using Color = std::array<float, 3>;

std::string toy_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "toy_%06d", index);
    return buf;
}

Color jitter(const Color& base, double amount, Rng& rng) {
    Color c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<float>(base[k] + rng.uniform(-amount, amount));
    return c;
}

Color lerp(const Color& a, const Color& b, double t) {
    Color c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<float>(a[k] + (b[k] - a[k]) * t);
    return c;
}

double color_dist(const Color& a, const Color& b) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
}

ColorTable sample_colors(Rng& rng, const ToyOptions& opt) {
    static const Color hair_protos[] = {
        {-0.85f, -0.85f, -0.85f}, {-0.15f, -0.45f, -0.7f}, {0.7f, 0.5f, -0.15f}, {0.5f, -0.35f, -0.65f}, {0.35f, 0.35f, 0.4f}};
    const float limit = static_cast<float>(1.0 - opt.shading - 0.02);
    for (;;) {
        ColorTable t;
        t[tl::kBackground] = {static_cast<float>(rng.uniform(-0.9, 0.9)), static_cast<float>(rng.uniform(-0.9, 0.9)),
                              static_cast<float>(rng.uniform(-0.9, 0.9))};
        t[tl::kSkin] = jitter(lerp({0.9f, 0.55f, 0.35f}, {0.2f, -0.2f, -0.45f}, rng.uniform()), 0.08, rng);
        t[tl::kHair] = jitter(hair_protos[rng.below(5)], 0.12, rng);
        for (auto eye : {tl::kLeftEye, tl::kRightEye})
            t[eye] = {static_cast<float>(rng.uniform(-1.0, 0.3)), static_cast<float>(rng.uniform(-1.0, 0.3)),
                      static_cast<float>(rng.uniform(-1.0, 0.3))};
        t[tl::kNose] = jitter(t[tl::kSkin], 0.06, rng);
        for (float& v : t[tl::kNose]) v -= 0.35f;
        t[tl::kMouth] = jitter({0.6f, -0.45f, -0.35f}, 0.25, rng);
        t[tl::kEyeglass] = {static_cast<float>(rng.uniform(-1.0, 1.0)), static_cast<float>(rng.uniform(-1.0, 1.0)),
                            static_cast<float>(rng.uniform(-1.0, 1.0))};
        for (Color& c : t)
            for (float& v : c) v = std::clamp(v, -limit, limit);
        bool ok = true;
        for (int a = 0; a < tl::kCount && ok; ++a)
            for (int b = a + 1; b < tl::kCount && ok; ++b) ok = color_dist(t[a], t[b]) >= opt.min_color_dist;
        if (ok) return t;
    }
}

struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

struct Rect {
    double x0, y0, x1, y1;
    bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// Layout in face-local normalized coordinates (face centre at origin, image
// units where the full image spans 1.0).
struct FaceLayout {
    double cx, cy, angle;
    Ellipse face, hair;
    double hairline, hair_side;
    Ellipse eyes[2];
    Ellipse nose, mouth;
    bool glasses;
    Rect frames[2];
    Rect bridge;
    double frame_thickness;
};

FaceLayout sample_layout(Rng& rng, int resolution, const ToyOptions& opt) {
    FaceLayout L;
    L.cx = 0.5 + rng.uniform(-0.06, 0.06);
    L.cy = 0.54 + rng.uniform(-0.05, 0.05);
    L.angle = rng.uniform(-0.18, 0.18);
    const double rx = rng.uniform(0.24, 0.32), ry = rng.uniform(0.30, 0.38);
    L.face = {0, 0, rx, ry};
    L.hair = {0, -ry * rng.uniform(0.08, 0.2), rx * rng.uniform(1.1, 1.25), ry * rng.uniform(1.02, 1.12)};
    L.hairline = -ry * rng.uniform(0.3, 0.6);
    L.hair_side = ry * rng.uniform(-0.3, 0.6);
    const double eye_dx = rx * rng.uniform(0.3, 0.42), eye_y = -ry * rng.uniform(0.05, 0.22);
    const double erx = rng.uniform(0.04, 0.06), ery = rng.uniform(0.025, 0.04);
    L.eyes[0] = {-eye_dx, eye_y, erx, ery};
    L.eyes[1] = {eye_dx, eye_y + rng.uniform(-0.01, 0.01), erx * rng.uniform(0.9, 1.1), ery * rng.uniform(0.9, 1.1)};
    L.nose = {rng.uniform(-0.015, 0.015), ry * rng.uniform(0.12, 0.28), rng.uniform(0.03, 0.045),
              rng.uniform(0.045, 0.075)};
    L.mouth = {rng.uniform(-0.02, 0.02), ry * rng.uniform(0.5, 0.62), rng.uniform(0.07, 0.12), rng.uniform(0.025, 0.045)};
    L.glasses = rng.uniform() < opt.eyeglass_prob;
    L.frame_thickness = std::max(1.2 / resolution, 0.022);
    for (int k = 0; k < 2; ++k) {
        const Ellipse& e = L.eyes[k];
        const double pad = L.frame_thickness + 0.012;
        L.frames[k] = {e.cx - e.rx - pad, e.cy - e.ry - pad, e.cx + e.rx + pad, e.cy + e.ry + pad};
    }
    L.bridge = {L.frames[0].x1, eye_y - L.frame_thickness / 2, L.frames[1].x0, eye_y + L.frame_thickness / 2};
    return L;
}

LabelMask rasterize(const FaceLayout& L, int R) {
    LabelMask m(R, R, tl::kBackground);
    const double ca = std::cos(L.angle), sa = std::sin(L.angle);
    const double t = L.frame_thickness;
    for (int py = 0; py < R; ++py)
        for (int px = 0; px < R; ++px) {
            const double gx = (px + 0.5) / R - L.cx, gy = (py + 0.5) / R - L.cy;
            const double x = ca * gx + sa * gy, y = -sa * gx + ca * gy;
            std::uint8_t v = tl::kBackground;
            const bool in_face = L.face.contains(x, y);
            if (in_face) v = tl::kSkin;
            if (L.hair.contains(x, y) && (y < L.hairline || (!in_face && y < L.hair_side))) v = tl::kHair;
            if (in_face) {
                if (L.nose.contains(x, y)) v = tl::kNose;
                if (L.mouth.contains(x, y)) v = tl::kMouth;
                if (L.eyes[0].contains(x, y)) v = tl::kLeftEye;
                if (L.eyes[1].contains(x, y)) v = tl::kRightEye;
            }
            if (L.glasses) {
                for (const Rect& f : L.frames) {
                    const Rect inner{f.x0 + t, f.y0 + t, f.x1 - t, f.y1 - t};
                    if (f.contains(x, y) && !inner.contains(x, y)) v = tl::kEyeglass;
                }
                if (L.bridge.contains(x, y)) v = tl::kEyeglass;
            }
            m(py, px) = v;
        }
    return m;
}

bool has_required_parts(const LabelMask& m) {
    std::array<int, 256> counts{};
    for (auto v : m.labels()) ++counts[v];
    for (auto c : {tl::kSkin, tl::kHair, tl::kLeftEye, tl::kRightEye, tl::kNose, tl::kMouth})
        if (counts[c] == 0) return false;
    return true;
}

ImageTensor render(const LabelMask& m, const ColorTable& colors, Rng& rng, const ToyOptions& opt) {
    const int R = m.height();
    const double gx = rng.uniform(-1.0, 1.0);
    const double gy = rng.uniform(-1.0, 1.0) * (1.0 - std::abs(gx));
    Tensor t(Shape{1, 3, R, R});
    for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x) {
            const double u = 2.0 * (x + 0.5) / R - 1.0, v = 2.0 * (y + 0.5) / R - 1.0;
            const double shade = opt.shading * (gx * u + gy * v);
            const Color& base = colors[m(y, x)];
            for (int c = 0; c < 3; ++c) {
                const double value = std::clamp(base[c] + shade, -1.0, 1.0);
                // snap to the 8-bit grid so the in-memory image equals its PNG
                t.at(0, c, y, x) = static_cast<Real>(std::lround((value + 1.0) * 127.5) / 127.5 - 1.0);
            }
        }
    return ImageTensor{std::move(t)};
}

}  // namespace

Sample make_toy_sample(int index, int resolution, std::uint64_t seed, ColorTable* colors, const ToyOptions& options) {
    if (resolution < 8) throw ArgumentError("toy resolution must be >= 8");
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(index));
    const ColorTable table = sample_colors(rng, options);
    LabelMask mask;
    for (int attempt = 0; attempt < 64; ++attempt) {
        mask = rasterize(sample_layout(rng, resolution, options), resolution);
        if (has_required_parts(mask)) break;
    }
    ImageTensor image = render(mask, table, rng, options);
    if (colors) *colors = table;
    return Sample{toy_id(index), std::move(image), std::move(mask)};
}

DatasetManifest make_toy_dataset(int n, int resolution, std::uint64_t seed, const ToyOptions& options) {
    if (n < 2) throw ArgumentError("toy dataset needs n >= 2 samples (pairs are needed for style copy)");
    DatasetManifest m;
    m.resolution = resolution;
    m.palette = CategoryPalette::default_palette();
    m.samples.reserve(n);
    m.colors.resize(n);
    for (int i = 0; i < n; ++i) m.samples.push_back(make_toy_sample(i, resolution, seed, &m.colors[i], options));
    const int n_train = std::clamp(static_cast<int>(std::lround(n * 0.9)), 1, n - 1);
    for (int i = 0; i < n; ++i) (i < n_train ? m.train : m.test).push_back(i);
    return m;
}

LabelMask parse_by_color(const ImageTensor& image, const ColorTable& table) {
    const Shape& s = image.values.shape();
    LabelMask out(s.h, s.w);
    const Real* r = image.values.plane_ptr(0, 0);
    const Real* g = image.values.plane_ptr(0, 1);
    const Real* b = image.values.plane_ptr(0, 2);
    for (std::size_t i = 0; i < s.plane(); ++i) {
        int best = 0;
        double best_d = 1e30;
        for (int c = 0; c < tl::kCount; ++c) {
            const double d = (r[i] - table[c][0]) * (r[i] - table[c][0]) + (g[i] - table[c][1]) * (g[i] - table[c][1]) +
                             (b[i] - table[c][2]) * (b[i] - table[c][2]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        out.labels()[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

LabelMask fuse_part_masks(const std::map<std::string, LabelMask>& parts, const CategoryPalette& palette) {
    if (parts.empty()) throw DatasetError("no part masks to fuse");
    const int h = parts.begin()->second.height(), w = parts.begin()->second.width();
    LabelMask out(h, w, std::uint8_t{0});
    for (const auto& [name, _] : parts)
        if (!palette.find(name)) throw DatasetError("part '" + name + "' is not a palette category");
    for (const std::string& name : palette.fusion_order()) {
        auto it = parts.find(name);
        if (it == parts.end()) continue;
        const LabelMask& part = it->second;
        if (part.height() != h || part.width() != w) throw DatasetError("part masks differ in size");
        const auto label = static_cast<std::uint8_t>(*palette.find(name));
        for (std::size_t i = 0; i < part.pixels(); ++i)
            if (part.labels()[i] != 0) out.labels()[i] = label;
    }
    return out;
}

namespace {

LabelMask read_part_mask(const fs::path& path) {
    const ImageTensor img = decode_image_png(read_file(path.string()));
    LabelMask m(img.height(), img.width());
    const std::size_t plane = m.pixels();
    for (std::size_t i = 0; i < plane; ++i) {
        bool on = false;
        for (int c = 0; c < 3; ++c) on = on || img.values.plane_ptr(0, c)[i] > Real(-1) + Real(1e-3);
        m.labels()[i] = on ? 1 : 0;
    }
    return m;
}

std::vector<std::string> png_stems(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().stem().string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

DatasetManifest load_celebamaskhq(const fs::path& root, int resolution) {
    if (resolution < 1) throw ArgumentError("resolution must be >= 1");
    if (!fs::is_directory(root / "images")) throw DatasetError("no images directory under " + root.string());
    DatasetManifest m;
    m.root = root;
    m.resolution = resolution;
    if (fs::exists(root / "palette.json")) m.palette = CategoryPalette::from_json(read_file((root / "palette.json").string()));

    const std::vector<std::string> ids = png_stems(root / "images");
    for (const std::string& id : ids) {
        try {
            ImageTensor image = decode_image_png(read_file((root / "images" / (id + ".png")).string()));
            LabelMask mask;
            const fs::path fused = root / "masks" / (id + ".png");
            const fs::path parts_dir = root / "masks" / id;
            if (fs::exists(fused)) {
                mask = decode_mask_png(read_file(fused.string()), m.palette);
            } else if (fs::is_directory(parts_dir)) {
                std::map<std::string, LabelMask> parts;
                for (const std::string& part : png_stems(parts_dir)) parts[part] = read_part_mask(parts_dir / (part + ".png"));
                mask = fuse_part_masks(parts, m.palette);
            } else {
                m.skipped.push_back({id, "no mask"});
                continue;
            }
            if (mask.height() != image.height() || mask.width() != image.width()) {
                log::warn("sample " + id + ": mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                          " differs from image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                          ", nearest-resizing the mask");
                mask = resize_mask(mask, image.height(), image.width());
            }
            if (image.height() != resolution || image.width() != resolution) {
                image = resize_image_area(image, resolution, resolution);
                mask = resize_mask(mask, resolution, resolution);
            }
            m.samples.push_back({id, std::move(image), std::move(mask)});
        } catch (const std::exception& e) {
            m.skipped.push_back({id, e.what()});
        }
    }
    for (const std::string& id : png_stems(root / "masks"))
        if (!std::binary_search(ids.begin(), ids.end(), id)) m.skipped.push_back({id, "no image"});
    for (const SkippedItem& s : m.skipped) log::warn("skipped " + s.id + ": " + s.reason);
    if (m.samples.empty()) throw DatasetError("no usable samples under " + root.string());

    if (fs::exists(root / "split.json")) {
        const json j = json::parse(read_file((root / "split.json").string()));
        for (const char* name : {"train", "test"}) {
            auto& dst = std::string(name) == "train" ? m.train : m.test;
            for (const auto& id : j.at(name))
                if (auto idx = m.find(id.get<std::string>())) dst.push_back(*idx);
        }
    } else {
        const int n = static_cast<int>(m.samples.size());
        const int n_train = n == 1 ? 1 : std::clamp(static_cast<int>(std::lround(n * 0.9)), 1, n - 1);
        for (int i = 0; i < n; ++i) (i < n_train ? m.train : m.test).push_back(i);
    }

    if (fs::exists(root / "toy_colors.json")) {
        const json j = json::parse(read_file((root / "toy_colors.json").string()));
        std::vector<ColorTable> colors;
        for (const Sample& s : m.samples) {
            if (!j.contains(s.id)) break;
            ColorTable t;
            for (int c = 0; c < tl::kCount; ++c)
                for (int k = 0; k < 3; ++k) t[c][k] = j[s.id].at(c).at(k).get<float>();
            colors.push_back(t);
        }
        if (colors.size() == m.samples.size()) m.colors = std::move(colors);
    }
    return m;
}

void write_dataset(const DatasetManifest& m, const fs::path& root) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (const Sample& s : m.samples) {
        write_file((root / "images" / (s.id + ".png")).string(), encode_image_png(s.image));
        write_file((root / "masks" / (s.id + ".png")).string(), encode_mask_png(s.mask, m.palette));
    }
    write_file((root / "palette.json").string(), m.palette.to_json() + "\n");
    json split;
    split["resolution"] = m.resolution;
    split["train"] = json::array();
    split["test"] = json::array();
    for (int i : m.train) split["train"].push_back(m.samples[i].id);
    for (int i : m.test) split["test"].push_back(m.samples[i].id);
    write_file((root / "split.json").string(), split.dump(2) + "\n");
    if (m.has_colors()) {
        json colors = json::object();
        for (std::size_t i = 0; i < m.samples.size(); ++i) {
            json t = json::array();
            for (const auto& c : m.colors[i]) t.push_back({c[0], c[1], c[2]});
            colors[m.samples[i].id] = t;
        }
        write_file((root / "toy_colors.json").string(), colors.dump() + "\n");
    }
}

std::vector<int> derangement(int n, std::uint64_t seed, std::uint64_t stream) {
    if (n < 2) throw ArgumentError("a derangement needs at least 2 elements");
    Rng rng = Rng::derive(seed ^ 0xD3A5C0FFEEull, stream);
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    // Sattolo: uniform over n-cycles
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(static_cast<std::uint64_t>(i))]);
    return p;
}

Batch make_batch(const DatasetManifest& manifest, const std::vector<int>& indices, const std::vector<int>& ref_indices) {
    Batch b;
    b.indices = indices;
    b.ref_indices = ref_indices;
    std::vector<Tensor> images;
    for (int i : indices) {
        const Sample& s = manifest.at(i);
        images.push_back(s.image.values);
        b.masks.push_back(s.mask);
    }
    b.images = stack_batch(images);
    b.onehot = onehot_batch(b.masks, manifest.palette.count());
    if (!ref_indices.empty()) {
        for (int i : ref_indices) b.ref_masks.push_back(manifest.at(i).mask);
        b.ref_onehot = onehot_batch(b.ref_masks, manifest.palette.count());
    }
    return b;
}

BatchStream::BatchStream(const DatasetManifest& manifest, std::vector<int> split, int batch_size, std::uint64_t seed,
                         bool with_ref)
    : manifest_(&manifest), split_(std::move(split)), batch_size_(batch_size), seed_(seed), with_ref_(with_ref) {
    if (batch_size_ < 1) throw ArgumentError("batch size must be >= 1");
    if (batch_size_ > static_cast<int>(split_.size()))
        throw ArgumentError("batch size " + std::to_string(batch_size_) + " exceeds split size " +
                            std::to_string(split_.size()));
    if (with_ref_ && batch_size_ < 2) throw ArgumentError("reference pairing needs batch size >= 2");
    batches_per_epoch_ = static_cast<int>(split_.size()) / batch_size_;
}

std::vector<int> BatchStream::epoch_order(std::uint64_t epoch) const {
    Rng rng = Rng::derive(seed_, epoch);
    std::vector<int> order(split_.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

void BatchStream::seek(BatchCursor cursor) {
    if (cursor.batch >= static_cast<std::uint64_t>(batches_per_epoch_)) throw ArgumentError("cursor batch out of range");
    cursor_ = cursor;
}

Batch BatchStream::next() {
    if (order_epoch_ != cursor_.epoch) {
        order_ = epoch_order(cursor_.epoch);
        order_epoch_ = cursor_.epoch;
    }
    std::vector<int> indices;
    for (int k = 0; k < batch_size_; ++k) indices.push_back(split_[order_[cursor_.batch * batch_size_ + k]]);
    std::vector<int> refs;
    if (with_ref_) {
        const auto perm = derangement(batch_size_, seed_, cursor_.epoch * batches_per_epoch_ + cursor_.batch);
        for (int k = 0; k < batch_size_; ++k) refs.push_back(indices[perm[k]]);
    }
    if (++cursor_.batch == static_cast<std::uint64_t>(batches_per_epoch_)) {
        cursor_.batch = 0;
        ++cursor_.epoch;
    }
    return make_batch(*manifest_, indices, refs);
}

}  // namespace maskgan::data
