#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgan/mask/mask.hpp"

namespace maskgan::data {

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Sample {
    std::string id;
    ImageTensor image;  // (1, 3, R, R)
    LabelMask mask;     // R x R
};

/// Base colour per toy category, in [-1, 1] RGB. Rendered pixels stay within
/// the shading amplitude of their category's entry.
using ColorTable = std::array<std::array<float, 3>, toy_labels::kCount>;

struct SkippedItem {
    std::string id;
    std::string reason;
};

/// In-memory dataset at a fixed working resolution.
struct DatasetManifest {
    std::filesystem::path root;  // empty for datasets never written to disk
    int resolution = 64;
    CategoryPalette palette = CategoryPalette::default_palette();
    std::vector<Sample> samples;
    std::vector<int> train;  // indices into samples
    std::vector<int> test;
    /// Present for toy data only; indexed like samples.
    std::vector<ColorTable> colors;
    std::vector<SkippedItem> skipped;

    const Sample& at(int index) const { return samples.at(index); }
    std::optional<int> find(const std::string& id) const;
    bool has_colors() const { return colors.size() == samples.size(); }
    /// Train/test index list by name ("train" or "test").
    const std::vector<int>& split(const std::string& name) const;
};

struct ToyOptions {
    double eyeglass_prob = 0.3;
    double shading = 0.06;         // max per-channel brightness offset
    double min_color_dist = 0.35;  // Euclidean, between any two table entries
};

/// n face-like samples; pure in (n, resolution, seed). Split is 90/10 by id
/// order.
DatasetManifest make_toy_dataset(int n, int resolution, std::uint64_t seed, const ToyOptions& options = {});

/// Single toy sample (also used by tests); index selects the per-sample stream.
Sample make_toy_sample(int index, int resolution, std::uint64_t seed, ColorTable* colors = nullptr,
                       const ToyOptions& options = {});

/// Layout: images/{id}.png, masks/{id}.png, palette.json, split.json, plus
/// toy_colors.json for toy data.
void write_dataset(const DatasetManifest& manifest, const std::filesystem::path& root);

/// Reads the layout written by write_dataset, or CelebAMask-HQ-style data:
///   images/{id}.png
///   masks/{id}.png            fused label mask, or
///   masks/{id}/{category}.png one binary part mask per category, fused by
///                             the palette's fusion_order (later overwrites)
/// palette.json and split.json are optional (default palette, 90/10 split by
/// sorted id). Samples are resized to `resolution`; an unreadable or unpaired
/// id is recorded in `skipped`. Throws DatasetError when nothing loads.
DatasetManifest load_celebamaskhq(const std::filesystem::path& root, int resolution);

/// Fuses binary part masks (non-zero = part present) by palette priority.
LabelMask fuse_part_masks(const std::map<std::string, LabelMask>& parts, const CategoryPalette& palette);

/// Labels each pixel with the nearest colour of `table`.
LabelMask parse_by_color(const ImageTensor& image, const ColorTable& table);

struct Batch {
    std::vector<int> indices;      // sample indices
    std::vector<int> ref_indices;  // empty unless with_ref
    Tensor images;                 // (N, 3, R, R)
    Tensor onehot;                 // (N, C, R, R)
    std::vector<LabelMask> masks;
    std::vector<LabelMask> ref_masks;
    Tensor ref_onehot;
    int size() const { return static_cast<int>(indices.size()); }
};

struct BatchCursor {
    std::uint64_t epoch = 0;
    std::uint64_t batch = 0;  // index within the epoch
    bool operator==(const BatchCursor&) const = default;
};

/// Shuffled epochs over one split. The order of epoch e is a function of
/// (seed, e) only, so a stream can be repositioned from a cursor. The last
/// partial batch of each epoch is dropped.
class BatchStream {
public:
    BatchStream(const DatasetManifest& manifest, std::vector<int> split, int batch_size, std::uint64_t seed,
                bool with_ref);

    Batch next();
    BatchCursor cursor() const { return cursor_; }
    void seek(BatchCursor cursor);
    int batches_per_epoch() const { return batches_per_epoch_; }

    /// Epoch permutation of split positions.
    std::vector<int> epoch_order(std::uint64_t epoch) const;

private:
    const DatasetManifest* manifest_;
    std::vector<int> split_;
    int batch_size_;
    std::uint64_t seed_;
    bool with_ref_;
    int batches_per_epoch_;
    BatchCursor cursor_;
    std::vector<int> order_;
    std::uint64_t order_epoch_ = ~0ull;
};

/// Random derangement of 0..n-1 (n >= 2): a single cycle, so no fixed points.
std::vector<int> derangement(int n, std::uint64_t seed, std::uint64_t stream);

/// Assembles a batch from explicit sample indices.
Batch make_batch(const DatasetManifest& manifest, const std::vector<int>& indices,
                 const std::vector<int>& ref_indices = {});

}  // namespace maskgan::data
