#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgan/core/tensor.hpp"

namespace maskgan {

struct CodecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A mask or palette manifest whose category count disagrees with the model's.
struct PaletteMismatch : CodecError {
    using CodecError::CodecError;
};

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

struct Category {
    int index = 0;
    std::string name;
    Rgb color;
    bool operator==(const Category&) const = default;
};

/// Ordered category list; indices are exactly 0..C-1.
class CategoryPalette {
public:
    explicit CategoryPalette(std::vector<Category> categories, std::vector<std::string> fusion_order = {});

    /// 19 facial-component classes. The first 8 are the ones the toy
    /// generator draws: background, skin, hair, l_eye, r_eye, nose, mouth,
    /// eye_g.
    static CategoryPalette default_palette();

    int count() const { return static_cast<int>(categories_.size()); }
    const Category& at(int index) const;
    const std::vector<Category>& categories() const { return categories_; }
    std::optional<int> find(const std::string& name) const;

    /// Category names in per-part fusion priority: later entries overwrite
    /// earlier ones. Defaults to palette order.
    const std::vector<std::string>& fusion_order() const { return fusion_order_; }

    std::string to_json() const;
    static CategoryPalette from_json(const std::string& text);

    bool operator==(const CategoryPalette&) const = default;

private:
    std::vector<Category> categories_;
    std::vector<std::string> fusion_order_;
};

namespace toy_labels {
inline constexpr std::uint8_t kBackground = 0, kSkin = 1, kHair = 2, kLeftEye = 3, kRightEye = 4, kNose = 5,
                              kMouth = 6, kEyeglass = 7;
inline constexpr int kCount = 8;
}  // namespace toy_labels

/// H x W category indices.
class LabelMask {
public:
    LabelMask() = default;
    LabelMask(int height, int width, std::uint8_t fill = 0);
    LabelMask(int height, int width, std::vector<std::uint8_t> labels);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t pixels() const { return labels_.size(); }
    std::uint8_t& operator()(int y, int x) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t operator()(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    std::span<const std::uint8_t> labels() const { return labels_; }
    std::span<std::uint8_t> labels() { return labels_; }

    /// Throws CodecError naming the first pixel with a label >= categories.
    void validate(int categories) const;
    /// Labels as ints, the form the cross-entropy loss consumes.
    std::vector<int> as_ints() const;

    bool operator==(const LabelMask&) const = default;

private:
    int height_ = 0, width_ = 0;
    std::vector<std::uint8_t> labels_;
};

/// (1, C, H, W) tensor of per-pixel category indicators.
struct OneHotMask {
    Tensor values;
    int channels() const { return values.shape().c; }
    int height() const { return values.shape().h; }
    int width() const { return values.shape().w; }
};

/// (1, 3, H, W) RGB image with values in [-1, 1].
struct ImageTensor {
    Tensor values;
    int height() const { return values.shape().h; }
    int width() const { return values.shape().w; }
};

OneHotMask label_to_onehot(const LabelMask& mask, const CategoryPalette& palette);
/// Per-pixel argmax; ties go to the lowest index. Accepts soft inputs.
LabelMask onehot_to_label(const OneHotMask& onehot, const CategoryPalette& palette);
/// Argmax over channels of sample n of an (N, C, H, W) tensor.
LabelMask argmax_labels(const Tensor& scores, int n);
/// Stacked one-hot tensor (N, C, H, W) for a batch of masks.
Tensor onehot_batch(std::span<const LabelMask> masks, int categories);

/// Nearest-neighbour resampling with pixel-centre alignment.
LabelMask resize_mask(const LabelMask& mask, int new_h, int new_w);
/// Area-weighted resampling (box filter over exact source overlaps).
ImageTensor resize_image_area(const ImageTensor& image, int new_h, int new_w);

/// 8-bit palette-type PNG: pixel value = category index, PLTE = display
/// colours of the palette.
std::string encode_mask_png(const LabelMask& mask, const CategoryPalette& palette);
/// Accepts 8-bit grayscale or palette-type PNGs. A palette-type PNG whose
/// PLTE length differs from the palette's category count raises
/// PaletteMismatch; out-of-range values raise CodecError.
LabelMask decode_mask_png(const std::string& bytes, const CategoryPalette& palette);

/// Clamps to [-1, 1], quantizes round((x + 1) * 127.5).
std::string encode_image_png(const ImageTensor& image);
ImageTensor decode_image_png(const std::string& bytes);

/// Mask rendered with palette display colours (for previews and strips).
std::string encode_mask_preview_png(std::span<const LabelMask> strip, const CategoryPalette& palette);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace maskgan
