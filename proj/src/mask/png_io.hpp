#pragma once

// Thin libpng wrapper working on in-memory byte strings.

#include <cstdint>
#include <string>
#include <vector>

namespace maskgan::png {

enum class Kind { Gray, Palette, Rgb };

struct Raster {
    int width = 0, height = 0;
    Kind kind = Kind::Rgb;
    int channels = 3;                    // 1 for Gray/Palette, 3 for Rgb
    std::vector<std::uint8_t> pixels;    // row-major, interleaved
    std::vector<std::uint8_t> plte;      // r,g,b triples for Palette
};

/// Keeps palette indices unexpanded; 16-bit and sub-byte depths are
/// rejected (callers get a CodecError).
Raster read_indexed(const std::string& bytes);
/// Any colour type, normalized to 8-bit RGB.
Raster read_rgb(const std::string& bytes);

std::string write(const Raster& raster);

}  // namespace maskgan::png
