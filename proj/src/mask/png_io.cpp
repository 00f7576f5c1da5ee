#include "png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>

#include "maskgan/mask/mask.hpp"

namespace maskgan::png {
namespace {

struct ReadSource {
    const std::string* bytes;
    std::size_t pos;
};

void read_cb(png_structp ptr, png_bytep out, png_size_t len) {
    auto* src = static_cast<ReadSource*>(png_get_io_ptr(ptr));
    if (src->pos + len > src->bytes->size()) png_error(ptr, "unexpected end of PNG data");
    std::memcpy(out, src->bytes->data() + src->pos, len);
    src->pos += len;
}

void write_cb(png_structp ptr, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(ptr));
    out->append(reinterpret_cast<const char*>(data), len);
}

void flush_cb(png_structp) {}

void error_cb(png_structp ptr, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(ptr));
    if (err) *err = msg;
    png_longjmp(ptr, 1);
}

void warning_cb(png_structp, png_const_charp) {}

Raster read_impl(const std::string& bytes, bool indexed) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw CodecError("not a PNG file");
    std::string err;
    png_structp ptr = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
    if (!ptr) throw CodecError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(ptr);
    if (!info) {
        png_destroy_read_struct(&ptr, nullptr, nullptr);
        throw CodecError("png_create_info_struct failed");
    }
    ReadSource src{&bytes, 0};
    Raster r;
    std::vector<png_bytep> rows;
    std::string reject;
    if (setjmp(png_jmpbuf(ptr))) {
        png_destroy_read_struct(&ptr, &info, nullptr);
        throw CodecError("PNG decode failed: " + err);
    }
    png_set_read_fn(ptr, &src, read_cb);
    png_read_info(ptr, info);
    const int color = png_get_color_type(ptr, info);
    const int depth = png_get_bit_depth(ptr, info);
    r.width = static_cast<int>(png_get_image_width(ptr, info));
    r.height = static_cast<int>(png_get_image_height(ptr, info));

    if (indexed) {
        if (depth != 8) reject = "mask PNG must be 8-bit, got depth " + std::to_string(depth);
        else if (color == PNG_COLOR_TYPE_PALETTE) {
            r.kind = Kind::Palette;
            png_colorp plte = nullptr;
            int nplte = 0;
            if (png_get_PLTE(ptr, info, &plte, &nplte) != 0)
                for (int i = 0; i < nplte; ++i) {
                    r.plte.push_back(plte[i].red);
                    r.plte.push_back(plte[i].green);
                    r.plte.push_back(plte[i].blue);
                }
        } else if (color == PNG_COLOR_TYPE_GRAY) {
            r.kind = Kind::Gray;
        } else {
            reject = "mask PNG must be single-channel (grayscale or palette)";
        }
        r.channels = 1;
    } else {
        if (depth == 16) png_set_strip_16(ptr);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ptr);
        if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(ptr);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(ptr);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(ptr);
        if (png_get_valid(ptr, info, PNG_INFO_tRNS)) png_set_strip_alpha(ptr);
        r.kind = Kind::Rgb;
        r.channels = 3;
    }
    if (!reject.empty()) {
        png_destroy_read_struct(&ptr, &info, nullptr);
        throw CodecError(reject);
    }
    png_read_update_info(ptr, info);
    const std::size_t rowbytes = png_get_rowbytes(ptr, info);
    if (rowbytes != static_cast<std::size_t>(r.width) * r.channels) {
        png_destroy_read_struct(&ptr, &info, nullptr);
        throw CodecError("unsupported PNG pixel layout");
    }
    r.pixels.resize(rowbytes * r.height);
    rows.resize(r.height);
    for (int y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + rowbytes * y;
    png_read_image(ptr, rows.data());
    png_read_end(ptr, nullptr);
    png_destroy_read_struct(&ptr, &info, nullptr);
    return r;
}

}  // namespace

Raster read_indexed(const std::string& bytes) { return read_impl(bytes, true); }
Raster read_rgb(const std::string& bytes) { return read_impl(bytes, false); }

std::string write(const Raster& raster) {
    std::string out, err;
    png_structp ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
    if (!ptr) throw CodecError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(ptr);
    if (!info) {
        png_destroy_write_struct(&ptr, nullptr);
        throw CodecError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows(raster.height);
    std::vector<png_color> plte;
    if (setjmp(png_jmpbuf(ptr))) {
        png_destroy_write_struct(&ptr, &info);
        throw CodecError("PNG encode failed: " + err);
    }
    png_set_write_fn(ptr, &out, write_cb, flush_cb);
    const int color = raster.kind == Kind::Rgb ? PNG_COLOR_TYPE_RGB
                      : raster.kind == Kind::Palette ? PNG_COLOR_TYPE_PALETTE
                                                     : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(ptr, info, raster.width, raster.height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    if (raster.kind == Kind::Palette) {
        for (std::size_t i = 0; i + 2 < raster.plte.size(); i += 3)
            plte.push_back(png_color{raster.plte[i], raster.plte[i + 1], raster.plte[i + 2]});
        png_set_PLTE(ptr, info, plte.data(), static_cast<int>(plte.size()));
    }
    // Fixed settings keep the encoded bytes a pure function of the pixels.
    png_set_compression_level(ptr, 6);
    png_write_info(ptr, info);
    const std::size_t rowbytes = static_cast<std::size_t>(raster.width) * raster.channels;
    for (int y = 0; y < raster.height; ++y)
        rows[y] = const_cast<png_bytep>(raster.pixels.data() + rowbytes * y);
    png_write_image(ptr, rows.data());
    png_write_end(ptr, nullptr);
    png_destroy_write_struct(&ptr, &info);
    return out;
}

}  // namespace maskgan::png
